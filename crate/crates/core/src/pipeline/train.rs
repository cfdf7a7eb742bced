use std::path::PathBuf;

use log::{debug, info, warn};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::LatentCodec;
use super::hand::{Dataset, ToyHandSpec};
use crate::bridge::{sample_time, training_targets_with, FlowConvention, LambdaVariant, TargetOptions, DEFAULT_SIGMA, DEFAULT_T_MIN};
use crate::costs::{cost_matrix, CostKind, GraspAnnotation};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nets::{loss_grads, net_init, opt_step, NetParams, OptimConfig, OptimState, DEFAULT_HIDDEN, TIME_FEATURES};
use crate::ot::{default_eps, sample_pairs_with, sinkhorn, uniform, DEFAULT_EPS_SCALE, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub cost: CostKind,
    /// Entropic regulariser as a multiple of the median positive cost of
    /// each minibatch; ignored when `eps` is set.
    pub eps_scale: f64,
    pub eps: Option<f64>,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub sigma: f64,
    pub t_min: f64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// Defaults to half of `steps`.
    pub ema_start: Option<u64>,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: LambdaVariant,
    pub flow: FlowConvention,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimConfig::default();
        Self {
            cost: CostKind::Pose,
            eps_scale: DEFAULT_EPS_SCALE,
            eps: None,
            sinkhorn_tol: DEFAULT_TOL,
            sinkhorn_max_iter: DEFAULT_MAX_ITER,
            sigma: DEFAULT_SIGMA,
            t_min: DEFAULT_T_MIN,
            hidden: DEFAULT_HIDDEN.to_vec(),
            lr: opt.lr,
            warmup_steps: opt.warmup_steps,
            clip_norm: opt.clip_norm,
            ema_decay: opt.ema_decay,
            ema_start: None,
            steps: 1000,
            batch_size: 128,
            seed: 0,
            lambda: LambdaVariant::Rescaled,
            flow: FlowConvention::Derived,
            source: None,
            target: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..0.5).contains(&self.t_min) {
            return Err(Error::Config(format!("t_min must lie in [0, 0.5), got {}", self.t_min)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(Error::Config(format!("eps must be positive, got {e}")));
            }
        } else if !(self.eps_scale > 0.0) {
            return Err(Error::Config(format!("eps scale must be positive, got {}", self.eps_scale)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        for p in [&self.source, &self.target].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if let Some(parent) = self.out.as_ref().and_then(|p| p.parent()) {
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                return Err(Error::Config(format!("output directory {} does not exist", parent.display())));
            }
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            ema_decay: self.ema_decay,
            ema_start: self.ema_start.unwrap_or(self.steps / 2),
            ..OptimConfig::default()
        }
    }

    /// 64-bit FNV-1a hash of the canonical JSON form, paths excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.source = None;
        c.target = None;
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Metadata stored alongside the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub fingerprint: String,
    pub codec: LatentCodec,
    pub source_hand: Option<ToyHandSpec>,
    pub target_hand: Option<ToyHandSpec>,
    pub score_scale: LambdaVariant,
    pub sigma: f64,
    pub t_min: f64,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub v: NetParams,
    pub s: NetParams,
    pub optim: OptimState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn ema_flow(&self) -> NetParams {
        self.optim.ema_net(0, &self.v)
    }

    pub fn ema_score(&self) -> NetParams {
        self.optim.ema_net(1, &self.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub flow_loss: f64,
    pub score_loss: f64,
    pub eps: f64,
    pub sinkhorn_iters: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

/// Fresh networks and optimizer for latents of width `dim`.
pub fn init_checkpoint(dim: usize, cfg: &RunConfig, codec: LatentCodec, hands: Option<(&ToyHandSpec, &ToyHandSpec)>) -> Result<Checkpoint> {
    cfg.validate()?;
    let input = dim + TIME_FEATURES;
    let v = net_init(input, &cfg.hidden, dim, cfg.seed)?;
    let s = net_init(input, &cfg.hidden, dim, cfg.seed.wrapping_add(1))?;
    let optim = OptimState::new(&[&v, &s], cfg.optim());
    Ok(Checkpoint {
        meta: CheckpointMeta {
            config: cfg.clone(),
            fingerprint: cfg.fingerprint(),
            codec,
            source_hand: hands.map(|h| h.0.clone()),
            target_hand: hands.map(|h| h.1.clone()),
            score_scale: cfg.lambda,
            sigma: cfg.sigma,
            t_min: cfg.t_min,
            optim: optim.config,
        },
        v,
        s,
        optim,
    })
}

fn draw_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    if size >= n {
        (0..n).collect()
    } else {
        sample_indices(rng, n, size).into_vec()
    }
}

/// Minibatch-OT bridge training on latent vectors.
///
/// `cost` receives the source and target indices of the current minibatch
/// and returns their ground-cost matrix. Each step couples the minibatch by
/// entropic OT, draws `batch_size` pairs from the plan, builds one bridge
/// sample per pair and takes one optimizer step on both networks.
pub fn train_latent<F>(source: &[Vec<f64>], target: &[Vec<f64>], cost: F, mut ckpt: Checkpoint) -> Result<TrainOutput>
where
    F: Fn(&[usize], &[usize]) -> Result<Matrix>,
{
    let cfg = ckpt.meta.config.clone();
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput("training needs nonempty source and target sets"));
    }
    let dim = ckpt.v.output_dim();
    if let Some(bad) = source.iter().chain(target).find(|z| z.len() != dim) {
        return Err(Error::Config(format!("latent of width {} for networks of width {dim}", bad.len())));
    }
    let opts = TargetOptions {
        flow: cfg.flow,
        lambda: cfg.lambda,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let wrap = |e: Error| Error::Training {
            step: step as usize,
            source: Box::new(e),
        };
        let ia = draw_batch(&mut rng, source.len(), cfg.batch_size);
        let ib = draw_batch(&mut rng, target.len(), cfg.batch_size);
        let c = cost(&ia, &ib).map_err(wrap)?;
        let eps = cfg.eps.unwrap_or_else(|| default_eps(&c, cfg.eps_scale));
        let plan = sinkhorn(&c, &uniform(ia.len()), &uniform(ib.len()), eps, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)
            .map_err(wrap)?;
        if !plan.converged(cfg.sinkhorn_tol) {
            warn!(
                "step {step}: sinkhorn stopped after {} iterations with marginal error {:e}",
                plan.iterations_used, plan.marginal_error
            );
        }
        let pairs = sample_pairs_with(&plan, cfg.batch_size, &mut rng).map_err(wrap)?;
        let batch = pairs
            .iter()
            .map(|&(i, j)| {
                let t = sample_time(&mut rng, cfg.t_min);
                training_targets_with(t, &source[ia[i]], &target[ib[j]], cfg.sigma, opts, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let g = loss_grads(&ckpt.v, &ckpt.s, &batch, &[]).map_err(wrap)?;
        let info = opt_step(&mut [&mut ckpt.v, &mut ckpt.s], &[&g.v_grad, &g.s_grad], &mut ckpt.optim).map_err(wrap)?;
        let rec = LossRecord {
            step: step + 1,
            loss: g.loss,
            flow_loss: g.flow_loss,
            score_loss: g.score_loss,
            eps,
            sinkhorn_iters: plan.iterations_used,
            grad_norm: info.grad_norm,
        };
        if (step + 1) % 500 == 0 || step + 1 == cfg.steps {
            info!("step {} loss {:.6} (flow {:.6}, score {:.6})", rec.step, rec.loss, rec.flow_loss, rec.score_loss);
        } else {
            debug!("step {} loss {:.6}", rec.step, rec.loss);
        }
        log.push(rec);
    }
    Ok(TrainOutput { checkpoint: ckpt, log })
}

/// Squared Euclidean distances between the selected rows of two latent sets.
pub fn sq_euclidean_cost(a: &[Vec<f64>], b: &[Vec<f64>], ia: &[usize], ib: &[usize]) -> Matrix {
    Matrix::from_fn(ia.len(), ib.len(), |i, j| {
        a[ia[i]].iter().zip(&b[ib[j]]).map(|(x, y)| (x - y) * (x - y)).sum()
    })
}

/// Trains a source-to-target grasp bridge with the ground cost of `cfg.cost`.
pub fn train(source: &Dataset, target: &Dataset, cfg: &RunConfig) -> Result<TrainOutput> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput("training needs nonempty datasets"));
    }
    source.hand.validate()?;
    target.hand.validate()?;
    let codec = LatentCodec::for_hands(&source.hand, &target.hand);
    let encode = |d: &Dataset| -> Result<Vec<Vec<f64>>> { d.annotations.iter().map(|a| codec.encode(&a.config)).collect() };
    let zs = encode(source)?;
    let zt = encode(target)?;
    let ckpt = init_checkpoint(codec.dim, cfg, codec.clone(), Some((&source.hand, &target.hand)))?;
    let gather = |d: &Dataset, idx: &[usize]| -> Vec<GraspAnnotation> { idx.iter().map(|&i| d.annotations[i].clone()).collect() };
    let kind = cfg.cost;
    train_latent(
        &zs,
        &zt,
        |ia, ib| cost_matrix(&gather(source, ia), &gather(target, ib), kind),
        ckpt,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::hand::gen_dataset;

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = RunConfig {
            steps: 0,
            ..RunConfig::default()
        };
        let src = gen_dataset(&ToyHandSpec::source_default(), 4, 0).unwrap();
        let tgt = gen_dataset(&ToyHandSpec::target_default(), 4, 1).unwrap();
        let out = train(&src, &tgt, &cfg).unwrap();
        let init = init_checkpoint(14, &cfg, LatentCodec::identity(14), Some((&src.hand, &tgt.hand))).unwrap();
        assert_eq!(out.checkpoint, init);
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.ema_flow(), out.checkpoint.v);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig {
            sigma: 0.0,
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let missing = RunConfig {
            source: Some("/definitely/not/here.json".into()),
            ..RunConfig::default()
        };
        assert!(missing.validate().is_err());
        let json = serde_json::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, RunConfig::default());
        let partial: RunConfig = serde_json::from_str(r#"{"sigma": 0.2, "cost": {"tag": "contact"}}"#).unwrap();
        assert_eq!(partial.sigma, 0.2);
        assert_eq!(partial.cost, CostKind::Contact);
        assert_ne!(partial.fingerprint(), RunConfig::default().fingerprint());
    }

    #[test]
    fn self_transport_loss_decreases() {
        let ds = gen_dataset(&ToyHandSpec::source_default(), 64, 3).unwrap();
        let cfg = RunConfig {
            steps: 500,
            batch_size: 64,
            hidden: vec![32, 32],
            lr: 1e-3,
            warmup_steps: 50,
            cost: CostKind::Pose,
            ..RunConfig::default()
        };
        let out = train(&ds, &ds, &cfg).unwrap();
        let head: f64 = out.log[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let tail: f64 = out.log[480..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(tail < head, "{tail} vs {head}");

        // The plan on identical batches puts most mass on the diagonal.
        let anns = &ds.annotations[..16];
        let c = cost_matrix(anns, anns, CostKind::Pose).unwrap();
        let plan = sinkhorn(&c, &uniform(16), &uniform(16), default_eps(&c, 0.01), 10_000, 1e-9).unwrap();
        let diag: f64 = (0..16).map(|i| plan.pi.get(i, i)).sum();
        assert!(diag > 0.9, "diagonal mass {diag}");
    }
}
