use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::BridgeSample;
use crate::error::{Error, Result};

/// Number of time features appended after the state: `[t, sin 2πt, cos 2πt]`.
pub const TIME_FEATURES: usize = 3;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x·sigmoid(x)`
    Silu,
}

impl Activation {
    pub fn tag(&self) -> u8 {
        match self {
            Activation::Silu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    #[inline]
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
        }
    }

    #[inline]
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected network stored as one flat parameter vector.
///
/// Layer `l` maps `sizes[l]` to `sizes[l+1]`; its weights are stored
/// row-major (`out × in`) followed by its biases. Hidden layers use the
/// activation; the output layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]
}

/// Weights uniform in `±1/√fan_in`, biases zero.
pub fn net_init(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<NetParams> {
    if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
        return Err(Error::Config("layer sizes must be at least 1".into()));
    }
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(output_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(&sizes));
    for w in sizes.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        for _ in 0..w[0] * w[1] {
            params.push(rng.random_range(-bound..bound));
        }
        params.extend(std::iter::repeat_n(0.0, w[1]));
    }
    Ok(NetParams {
        sizes,
        activation: Activation::Silu,
        params,
    })
}

/// Intermediate values kept for the backward pass.
struct Tape {
    /// Input of every layer (the network input first).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl NetParams {
    pub fn from_parts(sizes: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(&sizes) {
            return Err(Error::Shape(format!(
                "{} parameters for layer sizes {sizes:?}, expected {}",
                params.len(),
                param_count(&sizes)
            )));
        }
        Ok(Self { sizes, activation, params })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offsets of the weight block and bias block of layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off = param_count(&self.sizes[..=l]);
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    /// Assembles `[x, t-features, context]` and checks it against the input layer.
    pub fn build_input(&self, x: &[f64], t: f64, context: &[f64]) -> Result<Vec<f64>> {
        let n = x.len() + TIME_FEATURES + context.len();
        if n != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects input of {} (state {} + {} time features + context {})",
                self.input_dim(),
                x.len(),
                TIME_FEATURES,
                context.len()
            )));
        }
        let mut input = Vec::with_capacity(n);
        input.extend_from_slice(x);
        input.extend_from_slice(&time_features(t));
        input.extend_from_slice(context);
        Ok(input)
    }

    pub fn forward_raw(&self, input: &[f64]) -> Vec<f64> {
        self.run(input, None)
    }

    fn run(&self, input: &[f64], mut tape: Option<&mut Tape>) -> Vec<f64> {
        let last = self.num_layers() - 1;
        let mut a = input.to_vec();
        for l in 0..=last {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let w = &self.params[w_off..b_off];
            let b = &self.params[b_off..b_off + n_out];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
            let out = if l < last {
                let act: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
                if let Some(tp) = tape.as_deref_mut() {
                    tp.pre.push(z);
                }
                act
            } else {
                z
            };
            if let Some(tp) = tape.as_deref_mut() {
                tp.inputs.push(std::mem::replace(&mut a, out));
            } else {
                a = out;
            }
        }
        a
    }

    /// Accumulates `∂(upstream·output)/∂θ` into `grad` and returns the output.
    fn backward(&self, input: &[f64], upstream: impl FnOnce(&[f64]) -> Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.num_layers()),
            pre: Vec::with_capacity(self.num_layers()),
        };
        let out = self.run(input, Some(&mut tape));
        let mut delta = upstream(&out);
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let a_in = &tape.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (gi, ai) in g.iter_mut().zip(a_in) {
                    *gi += d * ai;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                let w = &self.params[w_off..b_off];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wi;
                    }
                }
                for (p, z) in prev.iter_mut().zip(&tape.pre[l - 1]) {
                    *p *= self.activation.derivative(*z);
                }
                delta = prev;
            }
        }
        out
    }
}

pub fn net_forward(params: &NetParams, x: &[f64], t: f64, context: &[f64]) -> Result<Vec<f64>> {
    let input = params.build_input(x, t, context)?;
    Ok(params.forward_raw(&input))
}

/// A time-dependent vector field `f(t, x; context)`.
pub trait VectorField: Sync {
    fn eval(&self, t: f64, x: &[f64], context: &[f64]) -> Result<Vec<f64>>;
}

impl VectorField for NetParams {
    fn eval(&self, t: f64, x: &[f64], context: &[f64]) -> Result<Vec<f64>> {
        net_forward(self, x, t, context)
    }
}

/// Wraps a closure `(t, x) -> f(t, x)` that ignores the context.
pub struct FnField<F>(pub F);

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    fn eval(&self, t: f64, x: &[f64], _context: &[f64]) -> Result<Vec<f64>> {
        Ok((self.0)(t, x))
    }
}

/// The zero field.
pub struct ZeroField;

impl VectorField for ZeroField {
    fn eval(&self, _t: f64, x: &[f64], _context: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub flow_loss: f64,
    pub score_loss: f64,
    pub v_grad: Vec<f64>,
    pub s_grad: Vec<f64>,
}

/// Mean over the batch of `‖v(t,x_t) − flow_target‖² + ‖λ_t·s(t,x_t) + noise‖²`
/// and its exact gradient for both networks.
///
/// `contexts` is either empty (no conditioning) or one vector per sample.
/// Samples are processed in fixed-size chunks whose partial sums are added
/// in order, so the result does not depend on the thread count.
pub fn loss_grads(v: &NetParams, s: &NetParams, batch: &[BridgeSample], contexts: &[Vec<f64>]) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    if !contexts.is_empty() && contexts.len() != batch.len() {
        return Err(Error::Shape(format!("{} contexts for {} samples", contexts.len(), batch.len())));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let partials: Vec<Result<LossGrads>> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = LossGrads {
                loss: 0.0,
                flow_loss: 0.0,
                score_loss: 0.0,
                v_grad: vec![0.0; v.len()],
                s_grad: vec![0.0; s.len()],
            };
            for (k, sample) in chunk.iter().enumerate() {
                let index = c * GRAD_CHUNK + k;
                let ctx: &[f64] = contexts.get(index).map_or(&[], |c| c.as_slice());
                let v_in = v.build_input(&sample.x_t, sample.t, ctx)?;
                let s_in = s.build_input(&sample.x_t, sample.t, ctx)?;
                if v.output_dim() != sample.flow_target.len() || s.output_dim() != sample.noise.len() {
                    return Err(Error::Shape(format!("sample {index} target width differs from network output")));
                }
                let mut flow = 0.0;
                v.backward(
                    &v_in,
                    |out| {
                        out.iter()
                            .zip(&sample.flow_target)
                            .map(|(o, u)| {
                                let r = o - u;
                                flow += r * r;
                                2.0 * r * inv_n
                            })
                            .collect()
                    },
                    &mut acc.v_grad,
                );
                let lam = sample.lambda_t;
                let mut score = 0.0;
                s.backward(
                    &s_in,
                    |out| {
                        out.iter()
                            .zip(&sample.score_loss_target)
                            .map(|(o, target)| {
                                let r = lam * o - target;
                                score += r * r;
                                2.0 * lam * r * inv_n
                            })
                            .collect()
                    },
                    &mut acc.s_grad,
                );
                if !(flow + score).is_finite() {
                    return Err(Error::Numeric {
                        index,
                        what: "loss".into(),
                    });
                }
                acc.flow_loss += flow;
                acc.score_loss += score;
            }
            Ok(acc)
        })
        .collect();
    let mut total = LossGrads {
        loss: 0.0,
        flow_loss: 0.0,
        score_loss: 0.0,
        v_grad: vec![0.0; v.len()],
        s_grad: vec![0.0; s.len()],
    };
    for p in partials {
        let p = p?;
        total.flow_loss += p.flow_loss;
        total.score_loss += p.score_loss;
        for (a, b) in total.v_grad.iter_mut().zip(&p.v_grad) {
            *a += b;
        }
        for (a, b) in total.s_grad.iter_mut().zip(&p.s_grad) {
            *a += b;
        }
    }
    total.flow_loss *= inv_n;
    total.score_loss *= inv_n;
    total.loss = total.flow_loss + total.score_loss;
    Ok(total)
}
