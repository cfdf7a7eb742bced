//! Grasp wrench hulls, convex-hull membership and Monte-Carlo hull IoU.
//!
//! Membership is decided by a phase-one simplex on the convex-combination
//! feasibility problem. Three-dimensional hulls additionally carry the exact
//! facet halfspaces, which the Monte-Carlo estimator uses as a fast path.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cross, dot, norm, scale, sub, Vec3};

/// A vertex set whose centred singular spectrum bottoms out below this is flat.
pub const FLAT_THRESHOLD: f64 = 1e-9;

/// Membership slack used by the Monte-Carlo estimator.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Samples per independently seeded RNG stream.
const MC_CHUNK: usize = 4096;

/// Above this many vertices the 3-D facet enumeration is skipped in favour of the LP.
const MAX_FACET_VERTICES: usize = 160;

/// A contact point with its pushing direction and force scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    pub c: Vec3,
    pub n: Vec3,
    pub alpha: f64,
}

impl ContactPoint {
    pub fn new(c: Vec3, n: Vec3) -> Self {
        Self { c, n, alpha: 1.0 }
    }
}

/// Wrench vertices `[force; torque]` plus the active dimensionality (3 or 6).
/// In 3-D only the force part participates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrenchHull {
    pub vertices: Vec<[f64; 6]>,
    pub dims: usize,
}

impl WrenchHull {
    /// Wraps arbitrary `dims`-dimensional points, zero-padding to six entries.
    pub fn from_points(points: &[Vec<f64>], dims: usize) -> Result<Self> {
        check_dims(dims)?;
        let mut vertices = Vec::with_capacity(points.len());
        for p in points {
            if p.len() != dims {
                return Err(Error::Shape(format!("point has {} coordinates, expected {dims}", p.len())));
            }
            let mut v = [0.0; 6];
            v[..dims].copy_from_slice(p);
            vertices.push(v);
        }
        Ok(Self { vertices, dims })
    }

    /// Same vertices with a different active dimensionality.
    pub fn with_dims(&self, dims: usize) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            vertices: self.vertices.clone(),
            dims,
        })
    }

    /// Vertices restricted to the active coordinates.
    pub fn active_points(&self) -> Vec<Vec<f64>> {
        self.vertices.iter().map(|v| v[..self.dims].to_vec()).collect()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

fn check_dims(dims: usize) -> Result<()> {
    if dims == 3 || dims == 6 {
        Ok(())
    } else {
        Err(Error::Shape(format!("hull dimensionality must be 3 or 6, got {dims}")))
    }
}

/// `w = [f; c × f]` with `f = alpha · n` for every contact.
pub fn build_wrenches(contacts: &[ContactPoint]) -> Result<WrenchHull> {
    if contacts.is_empty() {
        return Err(Error::EmptyInput("no contacts to build wrenches from"));
    }
    let mut vertices = Vec::with_capacity(contacts.len());
    for cp in contacts {
        if !(cp.alpha > 0.0) {
            return Err(Error::Input(format!("force scale must be positive, got {}", cp.alpha)));
        }
        let f = scale(&cp.n, cp.alpha);
        let tau = cross(&cp.c, &f);
        vertices.push([f[0], f[1], f[2], tau[0], tau[1], tau[2]]);
    }
    Ok(WrenchHull { vertices, dims: 6 })
}

/// Smallest singular value of the centred vertex matrix; zero when there are
/// too few vertices to span the space.
pub fn min_singular_value(points: &[Vec<f64>]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let d = first.len();
    let k = points.len();
    if k < d + 1 {
        return 0.0;
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let centred = DMatrix::from_fn(k, d, |i, j| points[i][j] - mean[j]);
    centred
        .singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Minimal L1 residual of `Σλᵢvᵢ = q, Σλᵢ = 1, λ ≥ 0`, found by a dense
/// phase-one simplex. Zero (up to rounding) exactly when `q` lies in the hull.
fn phase_one_residual(vertices: &[Vec<f64>], query: &[f64]) -> f64 {
    let k = vertices.len();
    let d = query.len();
    let m = d + 1;
    let width = k + m + 1;
    let rhs = width - 1;
    let mut tab = vec![0.0; m * width];
    for r in 0..m {
        let row = &mut tab[r * width..(r + 1) * width];
        for (i, v) in vertices.iter().enumerate() {
            row[i] = if r < d { v[r] } else { 1.0 };
        }
        row[rhs] = if r < d { query[r] } else { 1.0 };
        if row[rhs] < 0.0 {
            for x in row.iter_mut() {
                *x = -*x;
            }
        }
        row[k + r] = 1.0;
    }
    let mut basis: Vec<usize> = (k..k + m).collect();
    let mut obj = vec![0.0; width];
    for r in 0..m {
        for j in 0..k {
            obj[j] -= tab[r * width + j];
        }
        obj[rhs] -= tab[r * width + rhs];
    }

    let scale_ref = 1.0 + tab.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let eps = 1e-12 * scale_ref;
    let max_iter = 50 * (m + k);
    for iter in 0..max_iter {
        // Dantzig pricing first; Bland's rule after a while rules out cycling.
        let bland = iter > 4 * (m + k);
        let mut enter = None;
        let mut best = -eps;
        for j in 0..k {
            if obj[j] < best {
                enter = Some(j);
                if bland {
                    break;
                }
                best = obj[j];
            }
        }
        let Some(j) = enter else { break };

        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            let a = tab[r * width + j];
            if a > eps {
                let ratio = tab[r * width + rhs] / a;
                let better = match leave {
                    None => true,
                    Some((lr, lratio)) => ratio < lratio || (ratio == lratio && basis[r] < basis[lr]),
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        // Phase one is bounded below by zero, so an entering column always has a pivot row.
        let Some((p, _)) = leave else { break };

        let piv = tab[p * width + j];
        for x in &mut tab[p * width..(p + 1) * width] {
            *x /= piv;
        }
        let pivot_row: Vec<f64> = tab[p * width..(p + 1) * width].to_vec();
        for r in 0..m {
            if r == p {
                continue;
            }
            let f = tab[r * width + j];
            if f != 0.0 {
                for (x, pr) in tab[r * width..(r + 1) * width].iter_mut().zip(&pivot_row) {
                    *x -= f * pr;
                }
            }
        }
        let f = obj[j];
        for (x, pr) in obj.iter_mut().zip(&pivot_row) {
            *x -= f * pr;
        }
        basis[p] = j;
    }
    (-obj[rhs]).max(0.0)
}

/// True iff `query` lies within `tol` of the convex hull of `vertices`.
pub fn hull_membership(vertices: &[Vec<f64>], query: &[f64], tol: f64) -> Result<bool> {
    if vertices.is_empty() {
        return Err(Error::EmptyInput("hull has no vertices"));
    }
    let d = query.len();
    if d != 3 && d != 6 {
        return Err(Error::Shape(format!("membership supports 3 or 6 dimensions, got {d}")));
    }
    if let Some(bad) = vertices.iter().find(|v| v.len() != d) {
        return Err(Error::Shape(format!(
            "vertex has {} coordinates but query has {d}",
            bad.len()
        )));
    }
    for r in 0..d {
        let lo = vertices.iter().map(|v| v[r]).fold(f64::INFINITY, f64::min);
        let hi = vertices.iter().map(|v| v[r]).fold(f64::NEG_INFINITY, f64::max);
        if query[r] < lo - tol || query[r] > hi + tol {
            return Ok(false);
        }
    }
    Ok(phase_one_residual(vertices, query) <= tol)
}

/// A full-dimensional vertex set prepared for repeated membership queries.
#[derive(Debug, Clone)]
pub struct Polytope {
    vertices: Vec<Vec<f64>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    facets: Option<Vec<(Vec3, f64)>>,
}

impl Polytope {
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::EmptyInput("hull has no vertices"));
        };
        let d = first.len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::Shape("vertices differ in dimension".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Input("hull vertex is not finite".into()));
        }
        let min_singular = min_singular_value(points);
        if min_singular < FLAT_THRESHOLD {
            return Err(Error::DegenerateHull {
                min_singular,
                threshold: FLAT_THRESHOLD,
            });
        }
        let lo = (0..d)
            .map(|r| points.iter().map(|p| p[r]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi = (0..d)
            .map(|r| points.iter().map(|p| p[r]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let facets = (d == 3 && points.len() <= MAX_FACET_VERTICES).then(|| facets_3d(points));
        Ok(Self {
            vertices: points.to_vec(),
            lo,
            hi,
            facets,
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn has_facets(&self) -> bool {
        self.facets.is_some()
    }

    /// Membership through the facet halfspaces when available, the LP otherwise.
    pub fn contains(&self, q: &[f64], tol: f64) -> bool {
        for r in 0..self.lo.len() {
            if q[r] < self.lo[r] - tol || q[r] > self.hi[r] + tol {
                return false;
            }
        }
        match &self.facets {
            Some(facets) => {
                let p = [q[0], q[1], q[2]];
                facets.iter().all(|(n, b)| dot(n, &p) - b <= tol)
            }
            None => phase_one_residual(&self.vertices, q) <= tol,
        }
    }

    /// Membership through the LP regardless of precomputed facets.
    pub fn contains_lp(&self, q: &[f64], tol: f64) -> bool {
        hull_membership(&self.vertices, q, tol).unwrap_or(false)
    }
}

/// Supporting planes of a 3-D point set, found by testing every vertex triple.
/// Each plane is stored once as a unit outward normal and offset.
fn facets_3d(points: &[Vec<f64>]) -> Vec<(Vec3, f64)> {
    let pts: Vec<Vec3> = points.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let extent = pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |a, x| a.max(x.abs()))
        .max(1e-300);
    let slack = 1e-10 * extent;
    let n = pts.len();
    let mut planes: Vec<(Vec3, f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let normal = cross(&sub(&pts[j], &pts[i]), &sub(&pts[k], &pts[i]));
                let len = norm(&normal);
                if len <= 1e-12 * extent * extent {
                    continue;
                }
                let normal = scale(&normal, 1.0 / len);
                let b = dot(&normal, &pts[i]);
                let mut above = false;
                let mut below = false;
                for p in &pts {
                    let s = dot(&normal, p) - b;
                    above |= s > slack;
                    below |= s < -slack;
                    if above && below {
                        break;
                    }
                }
                let plane = match (above, below) {
                    (false, _) => (normal, b),
                    (true, false) => (scale(&normal, -1.0), -b),
                    (true, true) => continue,
                };
                let duplicate = planes.iter().any(|(m, c)| {
                    (m[0] - plane.0[0]).abs() < 1e-9
                        && (m[1] - plane.0[1]).abs() < 1e-9
                        && (m[2] - plane.0[2]).abs() < 1e-9
                        && (c - plane.1).abs() < 1e-9 * extent
                });
                if !duplicate {
                    planes.push(plane);
                }
            }
        }
    }
    planes
}

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Monte-Carlo IoU of two point hulls of equal dimension.
///
/// Every sample is drawn once in the joint bounding box and tested against
/// both hulls, so the estimate is exactly symmetric in its arguments and
/// identical vertex sets always score 1.
pub fn mc_iou_points(a: &[Vec<f64>], b: &[Vec<f64>], n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Input("Monte-Carlo IoU needs at least one sample".into()));
    }
    let pa = Polytope::new(a)?;
    let pb = Polytope::new(b)?;
    if pa.dim() != pb.dim() {
        return Err(Error::Shape(format!(
            "hull dimensions differ: {} vs {}",
            pa.dim(),
            pb.dim()
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let d = pa.dim();
    let lo: Vec<f64> = (0..d).map(|r| pa.lo[r].min(pb.lo[r])).collect();
    let width: Vec<f64> = (0..d).map(|r| pa.hi[r].max(pb.hi[r]) - lo[r]).collect();

    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let (both, either) = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut q = vec![0.0; d];
            let mut both = 0u64;
            let mut either = 0u64;
            for _ in 0..count {
                for r in 0..d {
                    q[r] = lo[r] + width[r] * rng.random::<f64>();
                }
                let ina = pa.contains(&q, MEMBERSHIP_TOL);
                let inb = pb.contains(&q, MEMBERSHIP_TOL);
                both += (ina && inb) as u64;
                either += (ina || inb) as u64;
            }
            (both, either)
        })
        .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
    if either == 0 {
        return Ok(0.0);
    }
    Ok(both as f64 / either as f64)
}

/// Monte-Carlo IoU of two wrench hulls in their shared active dimensionality.
pub fn mc_hull_iou(a: &WrenchHull, b: &WrenchHull, n_samples: usize, seed: u64) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "hulls use {} and {} active dimensions",
            a.dims, b.dims
        )));
    }
    mc_iou_points(&a.active_points(), &b.active_points(), n_samples, seed)
}
