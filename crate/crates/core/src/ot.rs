//! Entropic optimal transport: log-domain Sinkhorn and coupling sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_EPS_SCALE: f64 = 0.1;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// A coupling between two discrete marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub pi: Matrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
    pub iterations_used: usize,
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn converged(&self, tol: f64) -> bool {
        self.marginal_error < tol
    }

    /// `Σ π ⊙ C`.
    pub fn transport_cost(&self, cost: &Matrix) -> f64 {
        self.pi.dot(cost)
    }
}

/// Uniform probability vector of length `n`.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Relative regularisation: `scale` times the median positive cost entry
/// (1 when the matrix has no positive entries).
pub fn default_eps(cost: &Matrix, scale: f64) -> f64 {
    let mut pos: Vec<f64> = cost.data.iter().cloned().filter(|v| *v > 0.0).collect();
    if pos.is_empty() {
        return scale;
    }
    pos.sort_by(f64::total_cmp);
    let n = pos.len();
    let median = if n % 2 == 1 {
        pos[n / 2]
    } else {
        0.5 * (pos[n / 2 - 1] + pos[n / 2])
    };
    scale * median
}

fn check_marginal(name: &str, m: &[f64], len: usize) -> Result<()> {
    if m.len() != len {
        return Err(Error::Shape(format!("{name} has length {} but cost has {len}", m.len())));
    }
    if m.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!("{name} must be strictly positive")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Entropic OT plan by alternating updates of the dual potentials in log space.
///
/// The plan is `πᵢⱼ = aᵢ bⱼ exp((fᵢ + gⱼ − Cᵢⱼ)/ε)`. Iteration stops once the
/// row-sum violation drops below `tol` (columns are exact after every
/// `g` update) or `max_iter` is reached; in the latter case the plan is still
/// returned and `marginal_error` reports how far off it is.
pub fn sinkhorn(cost: &Matrix, a: &[f64], b: &[f64], eps: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("cost matrix is empty"));
    }
    if let Some(k) = cost.data.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(format!(
            "cost entry ({}, {}) = {} is not finite and nonnegative",
            k / m,
            k % m,
            cost.data[k]
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Input(format!("eps must be positive, got {eps}")));
    }
    check_marginal("row marginal", a, n)?;
    check_marginal("column marginal", b, m)?;

    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    // Potentials are kept divided by eps: F = f/ε, G = g/ε.
    let ce: Vec<f64> = cost.data.iter().map(|c| c / eps).collect();
    let ce_t: Vec<f64> = (0..m * n).map(|k| ce[(k % n) * m + k / n]).collect();
    let mut big_f = vec![0.0; n];
    let mut big_g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];

    let update = |out: &mut [f64], other: &[f64], log_w: &[f64], table: &[f64], buf: &mut [f64]| {
        let len = other.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &table[i * len..(i + 1) * len];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                let v = log_w[j] + other[j] - row[j];
                buf[j] = v;
                mx = mx.max(v);
            }
            let s: f64 = buf[..len].iter().map(|v| (v - mx).exp()).sum();
            *o = -(mx + s.ln());
        }
    };

    update(&mut big_f, &big_g, &log_b, &ce, &mut buf);
    let mut next_f = vec![0.0; n];
    let mut iterations_used = 0;
    for it in 1..=max_iter {
        update(&mut big_g, &big_f, &log_a, &ce_t, &mut buf);
        iterations_used = it;
        // Row i of the current plan sums to a_i·exp(F_i − F'_i), where F' is
        // the next row update, so the check costs nothing extra.
        update(&mut next_f, &big_g, &log_b, &ce, &mut buf);
        let err = big_f
            .iter()
            .zip(&next_f)
            .zip(a)
            .map(|((f, nf), ai)| (ai * (f - nf).exp() - ai).abs())
            .fold(0.0, f64::max);
        if err < tol || it == max_iter {
            break;
        }
        std::mem::swap(&mut big_f, &mut next_f);
    }
    let pi = Matrix::from_fn(n, m, |i, j| (log_a[i] + log_b[j] + big_f[i] + big_g[j] - ce[i * m + j]).exp());
    let rows = pi.row_sums();
    let cols = pi.col_sums();
    let marginal_error = rows
        .iter()
        .zip(a)
        .chain(cols.iter().zip(b))
        .map(|(s, t)| (s - t).abs())
        .fold(0.0, f64::max);
    Ok(TransportPlan {
        pi,
        a: a.to_vec(),
        b: b.to_vec(),
        eps,
        iterations_used,
        marginal_error,
    })
}

/// `n` independent (row, col) draws from the normalised plan.
pub fn sample_pairs_with<R: Rng + ?Sized>(plan: &TransportPlan, n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let cols = plan.pi.cols;
    let mut cdf = Vec::with_capacity(plan.pi.data.len());
    let mut acc = 0.0;
    for v in &plan.pi.data {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::Input("plan has a negative or non-finite entry".into()));
        }
        acc += v;
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::DegeneratePlan);
    }
    let last_positive = plan.pi.data.iter().rposition(|v| *v > 0.0).expect("positive mass");
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|c| *c <= u).min(last_positive);
            (k / cols, k % cols)
        })
        .collect())
}

/// Seeded form of [`sample_pairs_with`].
pub fn sample_pairs(plan: &TransportPlan, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    sample_pairs_with(plan, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
        Matrix::from_fn(n, m, |_, _| rng.random_range(0.0..1.0))
    }

    fn plan_from(pi: Matrix) -> TransportPlan {
        let a = pi.row_sums();
        let b = pi.col_sums();
        TransportPlan {
            pi,
            a,
            b,
            eps: 1.0,
            iterations_used: 0,
            marginal_error: 0.0,
        }
    }

    #[test]
    fn constant_cost_gives_product_plan() {
        let c = Matrix::filled(3, 4, 0.7);
        let a = [0.2, 0.3, 0.5];
        let b = [0.1, 0.2, 0.3, 0.4];
        let plan = sinkhorn(&c, &a, &b, 0.05, 100, 1e-12).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((plan.pi.get(i, j) - a[i] * b[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn large_eps_is_nearly_uniform() {
        let c = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let plan = sinkhorn(&c, &uniform(2), &uniform(2), 100.0, 1000, 1e-9).unwrap();
        let diag = 0.5 / (1.0 + (-1.0f64 / 100.0).exp());
        for (k, v) in plan.pi.data.iter().enumerate() {
            let expect = if k == 0 || k == 3 { diag } else { 0.5 - diag };
            assert!((v - expect).abs() < 1e-12);
            assert!((v - 0.25).abs() < 2e-3);
        }
    }

    fn best_permutation_cost(c: &Matrix) -> f64 {
        fn rec(c: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == c.rows {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.cols {
                if !used[j] {
                    used[j] = true;
                    rec(c, row + 1, used, acc + c.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
        best / c.rows as f64
    }

    #[test]
    fn small_eps_matches_exhaustive_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let c = random_cost(&mut rng, 5, 5);
            let eps = 1e-3 * c.max();
            let plan = sinkhorn(&c, &uniform(5), &uniform(5), eps, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
            let best = best_permutation_cost(&c);
            assert!((plan.transport_cost(&c) - best).abs() <= 0.01 * best);
        }
    }

    #[test]
    fn plan_is_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cost(&mut rng, 16, 12);
        let eps = default_eps(&c, DEFAULT_EPS_SCALE);
        let plan = sinkhorn(&c, &uniform(16), &uniform(12), eps, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!(plan.converged(DEFAULT_TOL));
        assert!(plan.pi.data.iter().all(|v| *v >= 0.0));
        assert!((plan.pi.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cost(&mut rng, 6, 9);
        let a: Vec<f64> = {
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        };
        let b = uniform(9);
        let p = sinkhorn(&c, &a, &b, 0.05, 100_000, 1e-13).unwrap();
        let q = sinkhorn(&c.transpose(), &b, &a, 0.05, 100_000, 1e-13).unwrap();
        for i in 0..6 {
            for j in 0..9 {
                assert!((p.pi.get(i, j) - q.pi.get(j, i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cost_non_increasing_as_eps_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let c = random_cost(&mut rng, 8, 8);
            let mut prev = f64::INFINITY;
            for eps in [10.0, 1.0, 0.1, 0.01] {
                let plan = sinkhorn(&c, &uniform(8), &uniform(8), eps, 200_000, 1e-12).unwrap();
                let cost = plan.transport_cost(&c);
                assert!(cost <= prev + 1e-9, "eps {eps}: {cost} > {prev}");
                prev = cost;
            }
        }
    }

    #[test]
    fn input_validation() {
        let c = Matrix::filled(2, 2, 1.0);
        let mut bad = c.clone();
        bad.set(0, 1, f64::NAN);
        assert!(matches!(sinkhorn(&bad, &uniform(2), &uniform(2), 0.1, 10, 1e-6), Err(Error::Input(_))));
        assert!(sinkhorn(&c, &[0.6, 0.6], &uniform(2), 0.1, 10, 1e-6).is_err());
        assert!(sinkhorn(&c, &[1.0, 0.0], &uniform(2), 0.1, 10, 1e-6).is_err());
        assert!(sinkhorn(&c, &uniform(3), &uniform(2), 0.1, 10, 1e-6).is_err());
        assert!(sinkhorn(&c, &uniform(2), &uniform(2), 0.0, 10, 1e-6).is_err());
    }

    #[test]
    fn unconverged_plan_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cost(&mut rng, 10, 10);
        let plan = sinkhorn(&c, &uniform(10), &uniform(10), 1e-3, 1, 1e-12).unwrap();
        assert_eq!(plan.iterations_used, 1);
        assert!(!plan.converged(1e-12));
    }

    #[test]
    fn default_eps_is_relative_median() {
        let c = Matrix::from_rows(&[vec![0.0, 2.0], vec![4.0, 6.0]]);
        assert!((default_eps(&c, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(default_eps(&Matrix::zeros(2, 2), 0.1), 0.1);
    }

    #[test]
    fn pairs_respect_support() {
        let plan = plan_from(Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]));
        for (i, j) in sample_pairs(&plan, 10_000, 1).unwrap() {
            assert_eq!(i, j);
        }
        assert!(sample_pairs(&plan, 0, 1).unwrap().is_empty());
        assert!(matches!(
            sample_pairs(&plan_from(Matrix::zeros(2, 2)), 3, 1),
            Err(Error::DegeneratePlan)
        ));
    }

    #[test]
    fn pair_frequencies_match_plan() {
        let plan = plan_from(Matrix::filled(2, 2, 0.25));
        let n = 100_000;
        let mut counts = [0usize; 4];
        for (i, j) in sample_pairs(&plan, n, 7).unwrap() {
            counts[i * 2 + j] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
        assert_eq!(sample_pairs(&plan, 50, 7).unwrap(), sample_pairs(&plan, 50, 7).unwrap());
    }

    #[test]
    fn pair_distribution_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_cost(&mut rng, 4, 4);
        let plan = sinkhorn(&c, &uniform(4), &uniform(4), 0.2, DEFAULT_MAX_ITER, 1e-10).unwrap();
        let n = 100_000;
        let mut counts = vec![0.0; 16];
        for (i, j) in sample_pairs(&plan, n, 9).unwrap() {
            counts[i * 4 + j] += 1.0;
        }
        let total = plan.pi.sum();
        let chi2: f64 = counts
            .iter()
            .zip(&plan.pi.data)
            .map(|(o, p)| {
                let e = p / total * n as f64;
                (o - e) * (o - e) / e
            })
            .sum();
        // 15 degrees of freedom; 37.7 is the 0.999 quantile.
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }
}
