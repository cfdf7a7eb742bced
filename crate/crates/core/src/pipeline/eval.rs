use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hand::{annotate, ToyHandSpec};
use super::train::Checkpoint;
use crate::bridge::LambdaVariant;
use crate::costs::{d_contact, d_jac, d_pose, GraspAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{GraspConfig, OrientedCloud};
use crate::sampler::{em_integrate_many, SamplerOptions, DEFAULT_STEPS};
use crate::wrench::mc_hull_iou;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslateOptions {
    pub n_steps: usize,
    pub seed: u64,
    /// When set, must match the convention recorded in the checkpoint.
    pub score_scale: Option<LambdaVariant>,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_STEPS,
            seed: 0,
            score_scale: None,
        }
    }
}

/// Source-hand configs to target-hand configs by integrating the learned
/// SDE from each encoded config with the EMA networks.
pub fn translate(ckpt: &Checkpoint, configs: &[GraspConfig], opts: &TranslateOptions) -> Result<Vec<GraspConfig>> {
    let meta = &ckpt.meta;
    let (src, tgt) = match (&meta.source_hand, &meta.target_hand) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(Error::Config("checkpoint records no hand specs".into())),
    };
    if let Some(scale) = opts.score_scale {
        if scale != meta.score_scale {
            return Err(Error::Config(format!(
                "score scale '{scale}' requested but the checkpoint was trained with '{}'",
                meta.score_scale
            )));
        }
    }
    if ckpt.v.output_dim() != meta.codec.dim {
        return Err(Error::Config(format!(
            "network width {} does not match codec width {}",
            ckpt.v.output_dim(),
            meta.codec.dim
        )));
    }
    for (i, c) in configs.iter().enumerate() {
        if c.joints.len() != src.dof() || c.hand_id != src.hand_id {
            return Err(Error::Config(format!(
                "input {i} is a {}-joint '{}' config; checkpoint expects '{}' with {} joints",
                c.joints.len(),
                c.hand_id,
                src.hand_id,
                src.dof()
            )));
        }
    }
    let starts = configs.iter().map(|c| meta.codec.encode(c)).collect::<Result<Vec<_>>>()?;
    let sampler = SamplerOptions {
        t_min: meta.t_min,
        score_scale: meta.score_scale,
    };
    let v = ckpt.ema_flow();
    let s = ckpt.ema_score();
    let trajectories = em_integrate_many(&v, &s, &starts, meta.sigma, opts.n_steps, opts.seed, &[], &sampler)?;
    trajectories.iter().map(|tr| meta.codec.decode(tr.endpoint(), tgt)).collect()
}

/// Annotates translated configs on the object they are meant to grasp.
pub fn annotate_all(hand: &ToyHandSpec, object: &OrientedCloud, configs: &[GraspConfig]) -> Result<Vec<GraspAnnotation>> {
    configs.par_iter().map(|c| annotate(hand, object, c.clone())).collect()
}

/// Mean over joints of the per-joint sample standard deviation (n − 1).
pub fn diversity(configs: &[GraspConfig]) -> Result<f64> {
    if configs.len() < 2 {
        return Err(Error::Input(format!("diversity needs at least 2 configs, got {}", configs.len())));
    }
    let k = configs[0].joints.len();
    if k == 0 || configs.iter().any(|c| c.joints.len() != k || c.hand_id != configs[0].hand_id) {
        return Err(Error::Input("diversity needs configs of one hand with at least one joint".into()));
    }
    let n = configs.len() as f64;
    let mut total = 0.0;
    for j in 0..k {
        let mean = configs.iter().map(|c| c.joints[j]).sum::<f64>() / n;
        let var = configs.iter().map(|c| (c.joints[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        total += var.sqrt();
    }
    Ok(total / k as f64)
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Source-versus-translated alignment metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub schema_version: u32,
    pub n_pairs: usize,
    pub iou_samples: usize,
    pub seed: u64,
    /// 6-D wrench-hull IoU per pair; `None` when either hull is flat.
    /// A translated grasp without contacts scores 0.
    pub pair_iou: Vec<Option<f64>>,
    pub iou_mean: Option<f64>,
    pub iou_missing: usize,
    pub nonempty_contact_fraction: f64,
    pub d_pose_mean: f64,
    /// Over pairs where both contact maps are nonempty.
    pub d_contact_mean: Option<f64>,
    pub d_jac_mean: Option<f64>,
    pub diversity_source: Option<f64>,
    pub diversity_translated: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn pair_iou(a: &GraspAnnotation, b: &GraspAnnotation, n_samples: usize, seed: u64) -> Result<Option<f64>> {
    let (ha, hb) = match (&a.wrenches, &b.wrenches) {
        (Some(ha), Some(hb)) => (ha.with_dims(6)?, hb.with_dims(6)?),
        (Some(_), None) if b.contact.is_empty() => return Ok(Some(0.0)),
        _ => return Ok(None),
    };
    match mc_hull_iou(&ha, &hb, n_samples, seed) {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateHull { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn eval_alignment(
    source: &[GraspAnnotation],
    translated: &[GraspAnnotation],
    n_samples: usize,
    seed: u64,
) -> Result<AlignmentReport> {
    if source.len() != translated.len() {
        return Err(Error::Input(format!(
            "{} source grasps but {} translated grasps",
            source.len(),
            translated.len()
        )));
    }
    if source.is_empty() {
        return Err(Error::EmptyInput("nothing to evaluate"));
    }
    let pair_iou: Vec<Option<f64>> = source
        .par_iter()
        .zip(translated)
        .map(|(a, b)| pair_iou(a, b, n_samples, seed))
        .collect::<Result<_>>()?;
    let valid: Vec<f64> = pair_iou.iter().flatten().cloned().collect();
    let d_pose = source
        .iter()
        .zip(translated)
        .map(|(a, b)| d_pose(&a.config, &b.config))
        .collect::<Result<Vec<_>>>()?;
    let d_contact = source
        .iter()
        .zip(translated)
        .filter(|(a, b)| !a.contact.is_empty() && !b.contact.is_empty())
        .map(|(a, b)| d_contact(&a.contact, &b.contact))
        .collect::<Result<Vec<_>>>()?;
    let d_jac: Vec<f64> = source
        .iter()
        .zip(translated)
        .filter_map(|(a, b)| Some(d_jac(a.manip.as_ref()?, b.manip.as_ref()?)))
        .collect();
    let configs = |g: &[GraspAnnotation]| g.iter().map(|a| a.config.clone()).collect::<Vec<_>>();
    Ok(AlignmentReport {
        schema_version: METRICS_SCHEMA_VERSION,
        n_pairs: source.len(),
        iou_samples: n_samples,
        seed,
        iou_missing: pair_iou.len() - valid.len(),
        iou_mean: mean(&valid),
        pair_iou,
        nonempty_contact_fraction: translated.iter().filter(|a| !a.contact.is_empty()).count() as f64
            / translated.len() as f64,
        d_pose_mean: mean(&d_pose).unwrap_or(0.0),
        d_contact_mean: mean(&d_contact),
        d_jac_mean: mean(&d_jac),
        diversity_source: diversity(&configs(source)).ok(),
        diversity_translated: diversity(&configs(translated)).ok(),
    })
}

/// Per-pair CSV and an SVG bar chart of the pair IoUs.
pub fn report(m: &AlignmentReport) -> (String, String) {
    let mut csv = String::from("pair,iou\n");
    for (i, v) in m.pair_iou.iter().enumerate() {
        match v {
            Some(x) => csv.push_str(&format!("{i},{x}\n")),
            None => csv.push_str(&format!("{i},\n")),
        }
    }
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let n = m.pair_iou.len().max(1) as f64;
    let bw = (w - 2.0 * pad) / n;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">6-D wrench hull IoU per pair (mean {mean}, missing {miss})</text>\n",
        y0 = h - pad,
        x1 = w - pad,
        mean = m.iou_mean.map_or("n/a".to_string(), |v| format!("{v:.3}")),
        miss = m.iou_missing,
    );
    for (i, v) in m.pair_iou.iter().enumerate() {
        let x = pad + i as f64 * bw;
        match v {
            Some(val) => {
                let bh = val.clamp(0.0, 1.0) * (h - 2.0 * pad);
                svg.push_str(&format!(
                    "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"steelblue\"/>\n",
                    h - pad - bh,
                    (bw * 0.8).max(0.5)
                ));
            }
            None => svg.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"4\" fill=\"lightgray\"/>\n",
                h - pad - 4.0,
                (bw * 0.8).max(0.5)
            )),
        }
    }
    svg.push_str("</svg>\n");
    (svg, csv)
}
