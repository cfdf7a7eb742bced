//! Point-cloud and rigid-pose primitives.
//!
//! Points are plain `[f64; 3]` arrays in meters. Rotations are 3×3 row-major
//! arrays (`m[row][col]`) and travel through the rest of the crate in the
//! continuous 6-D form: the first two columns of the matrix stacked.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Query count above which nearest-neighbour scans fan out over rayon.
const PAR_THRESHOLD: usize = 4096;

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = sub(a, b);
    dot(&d, &d)
}

pub fn normalize(a: &Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_from_cols(c1: &Vec3, c2: &Vec3, c3: &Vec3) -> Mat3 {
    [
        [c1[0], c2[0], c3[0]],
        [c1[1], c2[1], c3[1]],
        [c1[2], c2[2], c3[2]],
    ]
}

pub fn col(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

pub fn det3(m: &Mat3) -> f64 {
    dot(&col(m, 0), &cross(&col(m, 1), &col(m, 2)))
}

/// Squared Frobenius distance between two matrices.
pub fn frobenius2(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = a[i][j] - b[i][j];
            s += d * d;
        }
    }
    s
}

/// An ordered list of 3-D points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            c = add(&c, p);
        }
        Some(scale(&c, 1.0 / self.points.len() as f64))
    }

    /// Index and squared distance of the point nearest to `q`.
    /// Ties resolve to the lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.points.iter().enumerate() {
            let d = dist2(p, q);
            if best.map_or(true, |(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        best
    }

    /// Squared nearest-neighbour distance from every point of `self` into `other`.
    fn nn_dist2_into(&self, other: &PointCloud) -> Vec<f64> {
        let f = |q: &Vec3| other.nearest(q).map_or(f64::INFINITY, |(_, d)| d);
        if self.len() * other.len() >= PAR_THRESHOLD * 64 {
            self.points.par_iter().map(f).collect()
        } else {
            self.points.iter().map(f).collect()
        }
    }
}

/// A point cloud carrying one unit normal per point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrientedCloud {
    pub points: PointCloud,
    pub normals: Vec<Vec3>,
}

impl OrientedCloud {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::Shape(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        Ok(Self {
            points: PointCloud::new(points),
            normals,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Object-surface points in contact with a hand, with outward normals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactMap {
    pub points: PointCloud,
    pub normals: Vec<Vec3>,
}

impl ContactMap {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks equal lengths and unit normals (within 1e-9).
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.normals.len() {
            return Err(Error::Shape(format!(
                "contact map has {} points but {} normals",
                self.points.len(),
                self.normals.len()
            )));
        }
        for (i, n) in self.normals.iter().enumerate() {
            if (norm(n) - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("contact normal {i} is not unit length")));
            }
        }
        Ok(())
    }
}

/// Base pose of a hand: position plus 6-D rotation seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub position: Vec3,
    pub r6: [f64; 6],
}

impl BasePose {
    pub fn from_matrix(position: Vec3, rot: &Mat3) -> Result<Self> {
        Ok(Self {
            position,
            r6: rot6d_encode(rot)?,
        })
    }

    pub fn rotation(&self) -> Result<Mat3> {
        rot6d_decode(&self.r6)
    }
}

/// A hand configuration: base pose plus joint angles (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspConfig {
    pub base: BasePose,
    pub joints: Vec<f64>,
    pub hand_id: String,
}

impl GraspConfig {
    pub fn is_finite(&self) -> bool {
        self.base.position.iter().all(|v| v.is_finite())
            && self.base.r6.iter().all(|v| v.is_finite())
            && self.joints.iter().all(|v| v.is_finite())
    }
}

/// Stacks the first two columns of an orthonormal, right-handed matrix.
pub fn rot6d_encode(rot: &Mat3) -> Result<[f64; 6]> {
    const TOL: f64 = 1e-6;
    for i in 0..3 {
        for j in 0..3 {
            let g = dot(&col(rot, i), &col(rot, j));
            let want = if i == j { 1.0 } else { 0.0 };
            if !g.is_finite() || (g - want).abs() > TOL {
                return Err(Error::InvalidRotation(format!(
                    "matrix is not orthonormal (gram[{i}][{j}] = {g})"
                )));
            }
        }
    }
    if det3(rot) <= 0.0 {
        return Err(Error::InvalidRotation("determinant is not positive".into()));
    }
    Ok([
        rot[0][0], rot[1][0], rot[2][0], rot[0][1], rot[1][1], rot[2][1],
    ])
}

/// Gram–Schmidt orthonormalisation of the two 3-D seeds into a rotation.
pub fn rot6d_decode(r6: &[f64; 6]) -> Result<Mat3> {
    const DEGENERATE: f64 = 1e-9;
    let a = [r6[0], r6[1], r6[2]];
    let b = [r6[3], r6[4], r6[5]];
    if !r6.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite seed".into()));
    }
    let na = norm(&a);
    if na <= DEGENERATE {
        return Err(Error::InvalidRotation("first seed has zero length".into()));
    }
    let c1 = scale(&a, 1.0 / na);
    let b_perp = sub(&b, &scale(&c1, dot(&b, &c1)));
    let nb = norm(&b_perp);
    if nb <= DEGENERATE {
        return Err(Error::InvalidRotation("seeds are parallel".into()));
    }
    let c2 = scale(&b_perp, 1.0 / nb);
    let c3 = cross(&c1, &c2);
    Ok(mat_from_cols(&c1, &c2, &c3))
}

/// Bidirectional Chamfer distance: summed squared nearest-neighbour
/// distances from `a` into `b` plus from `b` into `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chamfer needs two nonempty clouds"));
    }
    let ab: f64 = a.nn_dist2_into(b).iter().sum();
    let ba: f64 = b.nn_dist2_into(a).iter().sum();
    Ok(ab + ba)
}

/// Object points (with normals) whose nearest hand point lies within `tau`.
pub fn extract_contact_map(object: &OrientedCloud, hand: &PointCloud, tau: f64) -> Result<ContactMap> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("contact threshold must be positive, got {tau}")));
    }
    if object.is_empty() {
        return Err(Error::EmptyInput("object cloud is empty"));
    }
    let mut map = ContactMap::default();
    if hand.is_empty() {
        return Ok(map);
    }
    let nn = object.points.nn_dist2_into(hand);
    let tau2 = tau * tau;
    for (i, d) in nn.into_iter().enumerate() {
        if d <= tau2 {
            map.points.points.push(object.points.points[i]);
            map.normals.push(object.normals[i]);
        }
    }
    Ok(map)
}

/// Greedy farthest-point sampling.
///
/// The first pick is the point farthest from the centroid; each later pick
/// maximises the distance to the already chosen set. Ties go to the lowest
/// index, so the output is fully deterministic.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Bounds(format!("cannot sample {k} of {n} points")));
    }
    let centroid = cloud.centroid().expect("nonempty");
    let argmax = |score: &[f64]| {
        let mut best = 0;
        for (i, &s) in score.iter().enumerate() {
            if s > score[best] {
                best = i;
            }
        }
        best
    };
    let from_centroid: Vec<f64> = cloud.points.iter().map(|p| dist2(p, &centroid)).collect();
    let mut chosen = Vec::with_capacity(k);
    let mut picked = vec![false; n];
    let first = argmax(&from_centroid);
    chosen.push(first);
    picked[first] = true;

    let mut min_d: Vec<f64> = cloud.points.iter().map(|p| dist2(p, &cloud.points[first])).collect();
    while chosen.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if picked[i] {
                continue;
            }
            if best.map_or(true, |b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("k <= n leaves an unpicked point");
        chosen.push(next);
        picked[next] = true;
        let q = cloud.points[next];
        for (i, p) in cloud.points.iter().enumerate() {
            let d = dist2(p, &q);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Reads `x,y,z[,nx,ny,nz]` lines (no header). Normals are returned only
/// when every line carries them.
pub fn read_cloud_csv<R: BufRead>(reader: R) -> Result<(PointCloud, Option<Vec<Vec3>>)> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut with_normals: Option<bool> = None;
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        let here = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format {
                offset: here,
                reason: format!("bad number: {e}"),
            })?;
        let has_n = match vals.len() {
            3 => false,
            6 => true,
            n => {
                return Err(Error::Format {
                    offset: here,
                    reason: format!("expected 3 or 6 columns, found {n}"),
                })
            }
        };
        if *with_normals.get_or_insert(has_n) != has_n {
            return Err(Error::Format {
                offset: here,
                reason: "inconsistent column count".into(),
            });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: here,
                reason: "non-finite coordinate".into(),
            });
        }
        points.push([vals[0], vals[1], vals[2]]);
        if has_n {
            normals.push([vals[3], vals[4], vals[5]]);
        }
    }
    let normals = (with_normals == Some(true)).then_some(normals);
    Ok((PointCloud::new(points), normals))
}

pub fn write_cloud_csv<W: Write>(mut w: W, cloud: &PointCloud, normals: Option<&[Vec3]>) -> Result<()> {
    if let Some(n) = normals {
        if n.len() != cloud.len() {
            return Err(Error::Shape("normals do not match points".into()));
        }
    }
    for (i, p) in cloud.points.iter().enumerate() {
        match normals {
            Some(n) => writeln!(
                w,
                "{},{},{},{},{},{}",
                p[0], p[1], p[2], n[i][0], n[i][1], n[i][2]
            )?,
            None => writeln!(w, "{},{},{}", p[0], p[1], p[2])?,
        }
    }
    Ok(())
}
