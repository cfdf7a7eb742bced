//! Forward integration of learned dynamics on `[t_min, 1 − t_min]`:
//! Euler–Maruyama for the SDE, Euler or RK4 for the probability-flow ODE.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{cond_flow_target, cond_score_target, standard_normal, FlowConvention, LambdaVariant, DEFAULT_T_MIN};
use crate::error::{Error, Result};
use crate::nets::VectorField;

pub const DEFAULT_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

impl FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(OdeMethod::Euler),
            "rk4" => Ok(OdeMethod::Rk4),
            other => Err(Error::Input(format!("unknown integration method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub t_min: f64,
    /// Convention the score network was trained with; fixes `κ` in the drift `v + κ·s`.
    pub score_scale: LambdaVariant,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            t_min: DEFAULT_T_MIN,
            score_scale: LambdaVariant::Rescaled,
        }
    }
}

/// Uniform grid of `n_steps + 1` times from `t_min` to `1 − t_min`.
pub fn time_grid(n_steps: usize, t_min: f64) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::Input("n_steps must be at least 1".into()));
    }
    if !(0.0..0.5).contains(&t_min) {
        return Err(Error::Input(format!("t_min must lie in [0, 0.5), got {t_min}")));
    }
    let dt = (1.0 - 2.0 * t_min) / n_steps as f64;
    let mut times: Vec<f64> = (0..=n_steps).map(|i| t_min + i as f64 * dt).collect();
    times[n_steps] = 1.0 - t_min;
    Ok(times)
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

fn check_width(out: &[f64], x: &[f64]) -> Result<()> {
    if out.len() == x.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!("field returned {} entries for a state of {}", out.len(), x.len())))
    }
}

/// Euler–Maruyama on `dx = (v + κ·s) dt + σ dW`.
///
/// With `sigma == 0` no noise is drawn, so the result coincides bit for bit
/// with [`ode_integrate`] under Euler when `s` is identically zero.
#[allow(clippy::too_many_arguments)]
pub fn em_integrate<R: Rng + ?Sized>(
    v: &dyn VectorField,
    s: &dyn VectorField,
    x0: &[f64],
    sigma: f64,
    n_steps: usize,
    rng: &mut R,
    context: &[f64],
    opts: &SamplerOptions,
) -> Result<Trajectory> {
    let times = time_grid(n_steps, opts.t_min)?;
    let kappa = opts.score_scale.drift_scale(sigma);
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.to_vec());
    check_finite(x0, 0)?;
    let mut x = x0.to_vec();
    for i in 0..n_steps {
        let (t, dt) = (times[i], times[i + 1] - times[i]);
        let vv = v.eval(t, &x, context)?;
        let ss = s.eval(t, &x, context)?;
        check_width(&vv, &x)?;
        check_width(&ss, &x)?;
        for k in 0..x.len() {
            x[k] += (vv[k] + kappa * ss[k]) * dt;
        }
        if sigma != 0.0 {
            let noise = standard_normal(rng, x.len());
            let amp = sigma * dt.sqrt();
            for (xk, e) in x.iter_mut().zip(noise) {
                *xk += amp * e;
            }
        }
        check_finite(&x, i + 1)?;
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Deterministic integration of `dx = v dt` on the same grid as [`em_integrate`].
pub fn ode_integrate(
    v: &dyn VectorField,
    x0: &[f64],
    n_steps: usize,
    method: OdeMethod,
    context: &[f64],
    t_min: f64,
) -> Result<Trajectory> {
    let times = time_grid(n_steps, t_min)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.to_vec());
    check_finite(x0, 0)?;
    let mut x = x0.to_vec();
    let axpy = |x: &[f64], a: f64, d: &[f64]| -> Vec<f64> { x.iter().zip(d).map(|(xi, di)| xi + a * di).collect() };
    for i in 0..n_steps {
        let (t, dt) = (times[i], times[i + 1] - times[i]);
        let k1 = v.eval(t, &x, context)?;
        check_width(&k1, &x)?;
        match method {
            OdeMethod::Euler => {
                for (xk, d) in x.iter_mut().zip(&k1) {
                    *xk += d * dt;
                }
            }
            OdeMethod::Rk4 => {
                let k2 = v.eval(t + 0.5 * dt, &axpy(&x, 0.5 * dt, &k1), context)?;
                let k3 = v.eval(t + 0.5 * dt, &axpy(&x, 0.5 * dt, &k2), context)?;
                let k4 = v.eval(t + dt, &axpy(&x, dt, &k3), context)?;
                for k in 0..x.len() {
                    x[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
                }
            }
        }
        check_finite(&x, i + 1)?;
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Integrates every start point with its own RNG stream `seed / index`.
/// Results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn em_integrate_many(
    v: &dyn VectorField,
    s: &dyn VectorField,
    starts: &[Vec<f64>],
    sigma: f64,
    n_steps: usize,
    seed: u64,
    contexts: &[Vec<f64>],
    opts: &SamplerOptions,
) -> Result<Vec<Trajectory>> {
    if !contexts.is_empty() && contexts.len() != starts.len() {
        return Err(Error::Shape(format!("{} contexts for {} start points", contexts.len(), starts.len())));
    }
    starts
        .par_iter()
        .enumerate()
        .map(|(k, x0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let ctx: &[f64] = contexts.get(k).map_or(&[], |c| c.as_slice());
            em_integrate(v, s, x0, sigma, n_steps, &mut rng, ctx, opts)
        })
        .collect()
}

/// Closed-form conditional flow toward a fixed pair `(x0, x1)`.
pub struct AnalyticFlow {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub convention: FlowConvention,
}

impl VectorField for AnalyticFlow {
    fn eval(&self, t: f64, x: &[f64], _context: &[f64]) -> Result<Vec<f64>> {
        Ok(cond_flow_target(t, x, &self.x0, &self.x1, self.convention))
    }
}

/// Closed-form conditional score in the form the score network would learn
/// under `variant`: `(σ²/2)∇log p_t` when rescaled, `∇log p_t` otherwise.
pub struct AnalyticScore {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub sigma: f64,
    pub variant: LambdaVariant,
}

impl VectorField for AnalyticScore {
    fn eval(&self, t: f64, x: &[f64], _context: &[f64]) -> Result<Vec<f64>> {
        let mut s = cond_score_target(t, x, &self.x0, &self.x1, self.sigma);
        if self.variant == LambdaVariant::Rescaled {
            let c = 0.5 * self.sigma * self.sigma;
            s.iter_mut().for_each(|v| *v *= c);
        }
        Ok(s)
    }
}
