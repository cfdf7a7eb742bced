use serde::{Deserialize, Serialize};

use super::mlp::NetParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// First step whose update blends into the shadow; before it the shadow
    /// is a plain copy of the parameters.
    pub ema_start: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_steps: 256,
            clip_norm: 1.0,
            ema_decay: 0.999,
            ema_start: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Defaults with the shadow starting halfway through `total_steps`.
    pub fn for_steps(total_steps: u64) -> Self {
        Self {
            ema_start: total_steps / 2,
            ..Self::default()
        }
    }

    /// Learning rate used by the update numbered `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam moments and EMA shadows for a group of networks updated together.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub ema: Vec<Vec<f64>>,
    pub config: OptimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
}

impl OptimState {
    pub fn new(nets: &[&NetParams], config: OptimConfig) -> Self {
        Self {
            step: 0,
            m: nets.iter().map(|n| vec![0.0; n.len()]).collect(),
            v: nets.iter().map(|n| vec![0.0; n.len()]).collect(),
            ema: nets.iter().map(|n| n.params.clone()).collect(),
            config,
        }
    }

    pub fn shapes_match(&self, nets: &[&NetParams]) -> bool {
        self.m.len() == nets.len()
            && nets
                .iter()
                .enumerate()
                .all(|(k, n)| self.m[k].len() == n.len() && self.v[k].len() == n.len() && self.ema[k].len() == n.len())
    }

    /// Network `k` with its EMA shadow weights.
    pub fn ema_net(&self, k: usize, template: &NetParams) -> NetParams {
        NetParams {
            sizes: template.sizes.clone(),
            activation: template.activation,
            params: self.ema[k].clone(),
        }
    }
}

pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale factor that brings a gradient of norm `norm` down to `clip`.
pub fn clip_scale(norm: f64, clip: f64) -> f64 {
    if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// One clipped, warmed-up Adam step on every network in `nets`, followed by
/// the EMA update. The clip norm is taken over all gradients jointly.
pub fn opt_step(nets: &mut [&mut NetParams], grads: &[&[f64]], state: &mut OptimState) -> Result<StepInfo> {
    if nets.len() != grads.len() || nets.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} networks, {} gradients, optimizer state for {}",
            nets.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (n, g)) in nets.iter().zip(grads).enumerate() {
        if n.len() != g.len() || state.m[k].len() != g.len() {
            return Err(Error::Shape(format!("gradient {k} has {} entries for {} parameters", g.len(), n.len())));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                index: i,
                what: format!("gradient of network {k}"),
            });
        }
    }
    let cfg = state.config;
    let grad_norm = global_norm(grads);
    let scale = clip_scale(grad_norm, cfg.clip_norm);
    state.step += 1;
    let step = state.step;
    let lr = cfg.lr_at(step);
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for (k, net) in nets.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in net.params.iter_mut().enumerate() {
            let g = grads[k][i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *p -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
        let ema = &mut state.ema[k];
        if step < cfg.ema_start {
            ema.copy_from_slice(&net.params);
        } else {
            for (e, p) in ema.iter_mut().zip(&net.params) {
                *e = cfg.ema_decay * *e + (1.0 - cfg.ema_decay) * p;
            }
        }
    }
    Ok(StepInfo {
        grad_norm,
        clip_scale: scale,
        lr,
    })
}
