//! Brownian-bridge paths between coupled endpoints and the closed-form
//! regression targets for flow and score matching.
//!
//! At time `t` the bridge from `x0` to `x1` with diffusion rate `σ` is
//! Gaussian with mean `μ_t = (1−t)x0 + t·x1` and standard deviation
//! `σ_t = σ√(t(1−t))`. Under the rescaled weighting `λ(t) = 2σ_t/σ²` the
//! score network learns `(σ²/2)∇log p_t`, and `λ(t)·(σ²/2)·∇log p_t(x_t) = −ε`
//! holds for every sample.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_T_MIN: f64 = 1e-3;

/// Which closed form the flow target uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowConvention {
    /// `(x1−x0) + (1−2t)/(2t(1−t))·(x−μ_t)`: the generator of the Gaussian path.
    #[default]
    Derived,
    /// `(x1−x0) + (1−2t)/(1−t)·(x−μ_t)`. Does not keep the bridge marginals;
    /// available for comparison only.
    Simplified,
}

/// Weighting of the score term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaVariant {
    /// `λ(t) = σ_t`; the score net learns `∇log p_t`.
    UnitVariance,
    /// `λ(t) = 2σ_t/σ²`; the score net learns `(σ²/2)∇log p_t`.
    #[default]
    Rescaled,
}

impl LambdaVariant {
    /// Factor turning the score network's output into the `(g²/2)∇log p`
    /// drift correction with `g = σ`.
    pub fn drift_scale(&self, sigma: f64) -> f64 {
        match self {
            LambdaVariant::Rescaled => 1.0,
            LambdaVariant::UnitVariance => 0.5 * sigma * sigma,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LambdaVariant::UnitVariance => "unitvar",
            LambdaVariant::Rescaled => "rescaled",
        }
    }
}

impl fmt::Display for LambdaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for LambdaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rescaled" => Ok(LambdaVariant::Rescaled),
            "unitvar" | "unit-variance" => Ok(LambdaVariant::UnitVariance),
            other => Err(Error::Input(format!("unknown lambda variant '{other}'"))),
        }
    }
}

impl FromStr for FlowConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derived" => Ok(FlowConvention::Derived),
            "simplified" => Ok(FlowConvention::Simplified),
            other => Err(Error::Input(format!("unknown flow convention '{other}'"))),
        }
    }
}

/// One training row for the regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    pub t: f64,
    pub x_t: Vec<f64>,
    pub noise: Vec<f64>,
    pub flow_target: Vec<f64>,
    /// `−ε`: the per-sample score loss is `‖λ_t·s − score_loss_target‖²`.
    pub score_loss_target: Vec<f64>,
    pub lambda_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TargetOptions {
    pub flow: FlowConvention,
    pub lambda: LambdaVariant,
}

/// Mean and standard deviation of the bridge marginal at time `t`.
pub fn bridge_params(t: f64, x0: &[f64], x1: &[f64], sigma: f64) -> (Vec<f64>, f64) {
    let mu = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let var = (t * (1.0 - t)).max(0.0);
    (mu, sigma * var.sqrt())
}

pub fn cond_flow_target(t: f64, x: &[f64], x0: &[f64], x1: &[f64], convention: FlowConvention) -> Vec<f64> {
    let k = match convention {
        FlowConvention::Derived => (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t)),
        FlowConvention::Simplified => (1.0 - 2.0 * t) / (1.0 - t),
    };
    x.iter()
        .zip(x0.iter().zip(x1))
        .map(|(xi, (a, b))| {
            let mu = (1.0 - t) * a + t * b;
            (b - a) + k * (xi - mu)
        })
        .collect()
}

/// `∇ₓ log p_t(x | x0, x1) = (μ_t − x)/(σ² t(1−t))`.
pub fn cond_score_target(t: f64, x: &[f64], x0: &[f64], x1: &[f64], sigma: f64) -> Vec<f64> {
    let denom = sigma * sigma * t * (1.0 - t);
    x.iter()
        .zip(x0.iter().zip(x1))
        .map(|(xi, (a, b))| {
            let mu = (1.0 - t) * a + t * b;
            (mu - xi) / denom
        })
        .collect()
}

pub fn lambda_schedule(t: f64, sigma: f64, variant: LambdaVariant) -> f64 {
    let s = (t * (1.0 - t)).max(0.0).sqrt();
    match variant {
        LambdaVariant::UnitVariance => sigma * s,
        LambdaVariant::Rescaled => 2.0 * s / sigma,
    }
}

/// Uniform time on `(t_min, 1 − t_min)`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R, t_min: f64) -> f64 {
    t_min + (1.0 - 2.0 * t_min) * rng.random::<f64>()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `x_t` on the bridge and fills every target with the given conventions.
pub fn training_targets_with<R: Rng + ?Sized>(
    t: f64,
    x0: &[f64],
    x1: &[f64],
    sigma: f64,
    opts: TargetOptions,
    rng: &mut R,
) -> Result<BridgeSample> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Endpoint(t));
    }
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!("endpoints have {} and {} entries", x0.len(), x1.len())));
    }
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    let (mu, sigma_t) = bridge_params(t, x0, x1, sigma);
    let noise = standard_normal(rng, x0.len());
    let x_t: Vec<f64> = mu.iter().zip(&noise).map(|(m, e)| m + sigma_t * e).collect();
    let flow_target = cond_flow_target(t, &x_t, x0, x1, opts.flow);
    let score_loss_target = noise.iter().map(|e| -e).collect();
    Ok(BridgeSample {
        t,
        x_t,
        noise,
        flow_target,
        score_loss_target,
        lambda_t: lambda_schedule(t, sigma, opts.lambda),
    })
}

/// Bridge sample with the default conventions (derived flow, rescaled λ).
pub fn sample_bridge<R: Rng + ?Sized>(t: f64, x0: &[f64], x1: &[f64], sigma: f64, rng: &mut R) -> Result<BridgeSample> {
    training_targets_with(t, x0, x1, sigma, TargetOptions::default(), rng)
}

/// Training row for the simplified objective
/// `‖v − flow_target‖² + ‖λ_t·s + noise‖²`.
pub fn training_targets<R: Rng + ?Sized>(t: f64, x0: &[f64], x1: &[f64], sigma: f64, rng: &mut R) -> Result<BridgeSample> {
    training_targets_with(t, x0, x1, sigma, TargetOptions::default(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_pinned_at_endpoints() {
        let x0 = [1.0, -2.0];
        let x1 = [3.0, 4.0];
        assert_eq!(bridge_params(0.0, &x0, &x1, 0.3), (x0.to_vec(), 0.0));
        assert_eq!(bridge_params(1.0, &x0, &x1, 0.3), (x1.to_vec(), 0.0));
        let (mu, s) = bridge_params(0.5, &x0, &x1, 0.1);
        assert_eq!(mu, vec![2.0, 1.0]);
        assert!((s - 0.05).abs() < 1e-15);
    }

    #[test]
    fn flow_target_on_mean_and_midpoint() {
        let x0 = [0.5, -1.0];
        let x1 = [2.0, 3.0];
        let diff = [1.5, 4.0];
        for conv in [FlowConvention::Derived, FlowConvention::Simplified] {
            let (mu, _) = bridge_params(0.3, &x0, &x1, 1.0);
            let u = cond_flow_target(0.3, &mu, &x0, &x1, conv);
            for (a, b) in u.iter().zip(diff) {
                assert!((a - b).abs() < 1e-12);
            }
            let u = cond_flow_target(0.5, &[10.0, -7.0], &x0, &x1, conv);
            assert_eq!(u, diff.to_vec());
        }
    }

    #[test]
    fn score_target_cases() {
        let (mu, _) = bridge_params(0.4, &[1.0], &[2.0], 0.5);
        assert_eq!(cond_score_target(0.4, &mu, &[1.0], &[2.0], 0.5), vec![0.0]);
        assert_eq!(cond_score_target(0.5, &[0.25], &[0.0], &[0.0], 1.0), vec![-1.0]);
    }

    #[test]
    fn score_matches_finite_differences_of_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let log_density = |x: &[f64], mu: &[f64], s: f64| -> f64 {
            x.iter()
                .zip(mu)
                .map(|(a, m)| -0.5 * ((a - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
                .sum()
        };
        for _ in 0..200 {
            let t = rng.random_range(0.05..0.95);
            let sigma = rng.random_range(0.2..2.0);
            let x0: Vec<f64> = standard_normal(&mut rng, 3);
            let x1: Vec<f64> = standard_normal(&mut rng, 3);
            let (mu, s) = bridge_params(t, &x0, &x1, sigma);
            let x: Vec<f64> = mu.iter().map(|m| m + s * rng.random_range(-2.0..2.0)).collect();
            let score = cond_score_target(t, &x, &x0, &x1, sigma);
            let h = 1e-5 * s;
            for k in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (log_density(&xp, &mu, s) - log_density(&xm, &mu, s)) / (2.0 * h);
                assert!((fd - score[k]).abs() <= 1e-5 * score[k].abs().max(1.0 / s), "{fd} vs {}", score[k]);
            }
        }
    }

    #[test]
    fn lambda_cases() {
        assert!((lambda_schedule(0.5, 0.1, LambdaVariant::UnitVariance) - 0.05).abs() < 1e-15);
        assert!((lambda_schedule(0.5, 0.1, LambdaVariant::Rescaled) - 10.0).abs() < 1e-12);
        for t in [0.0, 1.0] {
            assert_eq!(lambda_schedule(t, 0.1, LambdaVariant::UnitVariance), 0.0);
            assert_eq!(lambda_schedule(t, 0.1, LambdaVariant::Rescaled), 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let t = rng.random_range(1e-6..1.0 - 1e-6);
            let sigma = rng.random_range(0.01..3.0);
            let ratio = lambda_schedule(t, sigma, LambdaVariant::Rescaled) / lambda_schedule(t, sigma, LambdaVariant::UnitVariance);
            assert!((ratio - 2.0 / (sigma * sigma)).abs() <= 1e-12 * ratio);
        }
    }

    #[test]
    fn lambda_identity_holds_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let sigma = rng.random_range(0.05..1.0);
            let t = sample_time(&mut rng, DEFAULT_T_MIN);
            let x0 = standard_normal(&mut rng, 4);
            let x1 = standard_normal(&mut rng, 4);
            let s = training_targets(t, &x0, &x1, sigma, &mut rng).unwrap();
            let score = cond_score_target(t, &s.x_t, &x0, &x1, sigma);
            for (sc, e) in score.iter().zip(&s.noise) {
                assert!((s.lambda_t * 0.5 * sigma * sigma * sc + e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn endpoint_and_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(sample_bridge(0.0, &[0.0], &[1.0], 0.1, &mut rng), Err(Error::Endpoint(_))));
        assert!(matches!(sample_bridge(1.0, &[0.0], &[1.0], 0.1, &mut rng), Err(Error::Endpoint(_))));
        assert!(matches!(sample_bridge(0.5, &[0.0], &[1.0, 2.0], 0.1, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn noiseless_limit_sits_on_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_bridge(0.3, &[1.0, 2.0], &[3.0, -1.0], 1e-300, &mut rng).unwrap();
        let (mu, _) = bridge_params(0.3, &[1.0, 2.0], &[3.0, -1.0], 1.0);
        assert_eq!(s.x_t, mu);
        assert!(s.lambda_t.is_finite());
    }

    #[test]
    fn empirical_moments_match_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, sigma) = (0.3, 0.7);
        let x0 = [0.5, -1.0];
        let x1 = [2.0, 1.0];
        let (mu, sd) = bridge_params(t, &x0, &x1, sigma);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let s = sample_bridge(t, &x0, &x1, sigma, &mut rng).unwrap();
            for k in 0..2 {
                sum[k] += s.x_t[k];
                sq[k] += s.x_t[k] * s.x_t[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = (sq[k] - n as f64 * mean * mean) / (n as f64 - 1.0);
            assert!((mean - mu[k]).abs() < 3.0 * sd / (n as f64).sqrt());
            assert!((var / (sd * sd) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn same_seed_same_row() {
        let a = training_targets(0.4, &[1.0, 2.0], &[0.0, 0.0], 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = training_targets(0.4, &[1.0, 2.0], &[0.0, 0.0], 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.score_loss_target, a.noise.iter().map(|e| -e).collect::<Vec<_>>());
    }

    #[test]
    fn analytic_regressors_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sigma = 0.1;
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let t = sample_time(&mut rng, DEFAULT_T_MIN);
            let x0 = standard_normal(&mut rng, 3);
            let x1 = standard_normal(&mut rng, 3);
            let s = training_targets(t, &x0, &x1, sigma, &mut rng).unwrap();
            let v = cond_flow_target(t, &s.x_t, &x0, &x1, FlowConvention::Derived);
            let score = cond_score_target(t, &s.x_t, &x0, &x1, sigma);
            let mut loss = 0.0;
            for k in 0..3 {
                loss += (v[k] - s.flow_target[k]).powi(2);
                loss += (s.lambda_t * 0.5 * sigma * sigma * score[k] + s.noise[k]).powi(2);
            }
            total += loss;
        }
        assert!(total / (n as f64) < 1e-3);
    }

    fn rk4_endpoint(f: impl Fn(f64, f64) -> f64, x: f64, t0: f64, t1: f64, steps: usize) -> f64 {
        let h = (t1 - t0) / steps as f64;
        let mut x = x;
        for i in 0..steps {
            let t = t0 + i as f64 * h;
            let k1 = f(t, x);
            let k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
            let k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
            let k4 = f(t + h, x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        x
    }

    #[test]
    fn derived_flow_preserves_quantiles() {
        let (t0, t1) = (DEFAULT_T_MIN, 1.0 - DEFAULT_T_MIN);
        for (x0, x1, sigma) in [(0.0, 0.0, 1.0), (1.0, -2.0, 0.5), (-3.0, 4.0, 0.1)] {
            for z in [-2.0, 1.0, 3.0] {
                let (mu0, s0) = bridge_params(t0, &[x0], &[x1], sigma);
                let start = mu0[0] + s0 * z;
                let field = |conv| move |t: f64, x: f64| cond_flow_target(t, &[x], &[x0], &[x1], conv)[0];
                let (mu1, s1) = bridge_params(t1, &[x0], &[x1], sigma);
                let oracle = mu1[0] + s1 / s0 * (start - mu0[0]);
                let end = rk4_endpoint(field(FlowConvention::Derived), start, t0, t1, 1000);
                assert!((end - oracle).abs() < 1e-3 * z.abs(), "derived {end} vs {oracle}");
                if sigma == 1.0 {
                    let lit = rk4_endpoint(field(FlowConvention::Simplified), start, t0, t1, 1000);
                    assert!((lit - oracle).abs() > 1e-3 * z.abs());
                }
            }
        }
    }

    #[test]
    fn pinned_diffusion_matches_bridge_marginal() {
        // Euler simulation of dx = (x1 − x)/(1 − t) dt + σ dw started at x0.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x0, x1, sigma) = (0.5, 2.0, 0.8);
        let steps = 2000;
        let dt = 1.0 / steps as f64;
        let probe = 1200; // t = 0.6
        let paths = 4000;
        let mut vals = Vec::with_capacity(paths);
        for _ in 0..paths {
            let mut x = x0;
            for i in 0..probe {
                let t = i as f64 * dt;
                let xi: f64 = rng.sample(StandardNormal);
                x += (x1 - x) / (1.0 - t) * dt + sigma * dt.sqrt() * xi;
            }
            vals.push(x);
        }
        let t = probe as f64 * dt;
        let (mu, sd) = bridge_params(t, &[x0], &[x1], sigma);
        let n = paths as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - mu[0]).abs() < 3.0 * sd / n.sqrt());
        // Standard error of a sample variance is σ²√(2/(n−1)).
        assert!((var - sd * sd).abs() < 3.0 * sd * sd * (2.0 / (n - 1.0)).sqrt());
    }
}
