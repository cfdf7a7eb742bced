use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use graspbridge::costs::{CostKind, DEFAULT_IOU_SAMPLES};
use graspbridge::pipeline::persist::{
    load_checkpoint, load_dataset, load_json, load_metrics, load_translation, loss_log_csv, save_checkpoint, save_dataset,
    save_metrics, save_translation, write_atomic, Translation,
};
use graspbridge::pipeline::{annotate_all, eval_alignment, gen_dataset, report, train, translate, RunConfig, ToyHandSpec, TranslateOptions};
use graspbridge::bridge::LambdaVariant;
use graspbridge::sampler::DEFAULT_STEPS;
use graspbridge::{Error, Result};

#[derive(Parser)]
#[command(name = "graspbridge", version, about = "Cross-hand grasp translation with entropic bridges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grasp dataset for a toy hand.
    Gen {
        #[arg(long)]
        hand: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a bridge between two datasets.
    #[command(allow_negative_numbers = true)]
    Train {
        /// JSON run configuration; flags given on the command line win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        cost: Option<CostKind>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        eps_scale: Option<f64>,
        #[arg(long)]
        sinkhorn_tol: Option<f64>,
        #[arg(long)]
        sinkhorn_iters: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        score_scale: Option<LambdaVariant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate a source-hand dataset to the target hand of a checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Refuse to run unless the checkpoint uses this score scaling.
        #[arg(long)]
        score_scale: Option<LambdaVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare translated grasps against their sources.
    Eval {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        translated: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU_SAMPLES)]
        iou_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an SVG plot and a CSV table from a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// SVG output; the CSV goes next to it.
        #[arg(long)]
        plot: PathBuf,
    },
}

fn thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("GRASPBRIDGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("GRASPBRIDGE_THREADS must be a non-negative integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("--{what} is required (flag or config file)")))
}

fn loss_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { hand, n, seed, out } => {
            let spec: ToyHandSpec = load_json(&hand)?;
            let ds = gen_dataset(&spec, n, seed)?;
            save_dataset(&out, &ds)?;
            info!("wrote {} grasps for '{}' to {}", ds.len(), spec.hand_id, out.display());
        }
        Command::Train {
            config,
            source,
            target,
            cost,
            sigma,
            steps,
            eps,
            eps_scale,
            sinkhorn_tol,
            sinkhorn_iters,
            batch_size,
            lr,
            score_scale,
            seed,
            out,
        } => {
            let mut cfg: RunConfig = match &config {
                Some(p) => load_json(p)?,
                None => RunConfig::default(),
            };
            cfg.source = source.or(cfg.source);
            cfg.target = target.or(cfg.target);
            cfg.out = out.or(cfg.out);
            cfg.eps = eps.or(cfg.eps);
            if let Some(v) = cost {
                cfg.cost = v;
            }
            if let Some(v) = sigma {
                cfg.sigma = v;
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = eps_scale {
                cfg.eps_scale = v;
            }
            if let Some(v) = sinkhorn_tol {
                cfg.sinkhorn_tol = v;
            }
            if let Some(v) = sinkhorn_iters {
                cfg.sinkhorn_max_iter = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = score_scale {
                cfg.lambda = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let src_path = required(cfg.source.clone(), "source")?;
            let tgt_path = required(cfg.target.clone(), "target")?;
            let out = required(cfg.out.clone(), "out")?;
            cfg.validate()?;
            let source = load_dataset(&src_path)?;
            let target = load_dataset(&tgt_path)?;
            let result = train(&source, &target, &cfg)?;
            save_checkpoint(&out, &result.checkpoint)?;
            let log_path = loss_log_path(&out);
            write_atomic(&log_path, loss_log_csv(&result.log).as_bytes())?;
            info!("wrote checkpoint {} and loss log {}", out.display(), log_path.display());
        }
        Command::Translate {
            ckpt,
            input,
            steps,
            seed,
            score_scale,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&input)?;
            let opts = TranslateOptions {
                n_steps: steps,
                seed,
                score_scale,
            };
            let configs = translate(&ck, &ds.configs(), &opts)?;
            let hand = ck
                .meta
                .target_hand
                .clone()
                .ok_or_else(|| Error::Config("checkpoint records no target hand".into()))?;
            let tr = Translation {
                hand,
                configs,
                steps,
                seed,
                t_min: ck.meta.t_min,
                checkpoint_fingerprint: ck.meta.fingerprint.clone(),
            };
            save_translation(&out, &tr)?;
            info!("wrote {} translated grasps to {}", tr.configs.len(), out.display());
        }
        Command::Eval {
            source,
            translated,
            iou_samples,
            seed,
            out,
        } => {
            let ds = load_dataset(&source)?;
            let tr = load_translation(&translated)?;
            let ann = annotate_all(&tr.hand, &ds.object, &tr.configs)?;
            let m = eval_alignment(&ds.annotations, &ann, iou_samples, seed)?;
            save_metrics(&out, &m)?;
            info!(
                "iou mean {:?} over {} pairs ({} missing), nonempty contact fraction {:.3}",
                m.iou_mean, m.n_pairs, m.iou_missing, m.nonempty_contact_fraction
            );
        }
        Command::Report { metrics, plot } => {
            let m = load_metrics(&metrics)?;
            let (svg, csv) = report(&m);
            write_atomic(&plot, svg.as_bytes())?;
            let csv_path = plot.with_extension("csv");
            write_atomic(&csv_path, csv.as_bytes())?;
            info!("wrote {} and {}", plot.display(), csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match thread_pool().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
