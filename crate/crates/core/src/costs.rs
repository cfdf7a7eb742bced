//! Physics-informed ground costs between grasps and batch cost matrices.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer, frobenius2, ContactMap, GraspConfig};
use crate::matrix::Matrix;
use crate::wrench::{mc_hull_iou, WrenchHull};

pub const DEFAULT_IOU_SAMPLES: usize = 100_000;

/// Which ground cost drives the coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "tag")]
pub enum CostKind {
    Pose,
    Contact,
    /// 1 − Monte-Carlo IoU of the wrench hulls reduced to `dims` coordinates.
    /// A single `seed` is shared by every pair of one matrix build.
    Wrench { samples: usize, seed: u64, dims: usize },
    Jacobian,
}

impl CostKind {
    pub fn tag(&self) -> &'static str {
        match self {
            CostKind::Pose => "pose",
            CostKind::Contact => "contact",
            CostKind::Wrench { .. } => "wrench",
            CostKind::Jacobian => "jacobian",
        }
    }

    pub fn wrench_default() -> Self {
        CostKind::Wrench {
            samples: DEFAULT_IOU_SAMPLES,
            seed: 0,
            dims: 3,
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose" => Ok(CostKind::Pose),
            "contact" => Ok(CostKind::Contact),
            "wrench" => Ok(CostKind::wrench_default()),
            "jacobian" => Ok(CostKind::Jacobian),
            other => Err(Error::Input(format!(
                "unknown cost '{other}' (expected pose|contact|wrench|jacobian)"
            ))),
        }
    }
}

/// A grasp together with everything the ground costs look at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspAnnotation {
    pub config: GraspConfig,
    pub contact: ContactMap,
    /// Present whenever the contact map is nonempty.
    pub wrenches: Option<WrenchHull>,
    /// Per-axis maximal Jacobian effect.
    pub manip: Option<[f64; 6]>,
}

pub fn d_pose(a: &GraspConfig, b: &GraspConfig) -> Result<f64> {
    let ra = a.base.rotation()?;
    let rb = b.base.rotation()?;
    let pa = &a.base.position;
    let pb = &b.base.position;
    let dh = (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2);
    Ok(dh + frobenius2(&ra, &rb))
}

pub fn d_contact(a: &ContactMap, b: &ContactMap) -> Result<f64> {
    chamfer(&a.points, &b.points)
}

/// `1 − IoU`; a flat hull scores the maximal cost 1.
pub fn d_wrench(a: &WrenchHull, b: &WrenchHull, n_samples: usize, seed: u64) -> Result<f64> {
    match mc_hull_iou(a, b, n_samples, seed) {
        Ok(iou) => Ok(1.0 - iou),
        Err(Error::DegenerateHull { min_singular, .. }) => {
            warn!("degenerate wrench hull (min singular value {min_singular:e}); using cost 1");
            Ok(1.0)
        }
        Err(e) => Err(e),
    }
}

/// `m_i = max_j |J_ij|` over the joint columns of a 6-row Jacobian.
pub fn max_effect(jacobian: &[Vec<f64>]) -> Result<[f64; 6]> {
    if jacobian.len() != 6 {
        return Err(Error::Shape(format!("Jacobian has {} rows, expected 6", jacobian.len())));
    }
    let cols = jacobian[0].len();
    if cols == 0 || jacobian.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("Jacobian rows must share a nonzero column count".into()));
    }
    let mut m = [0.0; 6];
    for (mi, row) in m.iter_mut().zip(jacobian) {
        *mi = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    }
    Ok(m)
}

pub fn d_jac(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn wrench_pair(a: &GraspAnnotation, b: &GraspAnnotation, samples: usize, seed: u64, dims: usize) -> Result<f64> {
    let hull = |g: &GraspAnnotation| -> Result<Option<WrenchHull>> {
        match &g.wrenches {
            Some(h) => Ok(Some(h.with_dims(dims)?)),
            None if g.contact.is_empty() => Ok(None),
            None => Err(Error::Annotation("contact map present but wrench hull missing".into())),
        }
    };
    match (hull(a)?, hull(b)?) {
        (Some(ha), Some(hb)) => d_wrench(&ha, &hb, samples, seed),
        _ => {
            warn!("grasp without contacts has no wrench hull; using cost 1");
            Ok(1.0)
        }
    }
}

/// Ground cost between every annotation of `batch_a` and every one of `batch_b`.
///
/// Contact costs involving an empty contact map are replaced by the 99th
/// percentile of the finite entries of the same matrix.
pub fn cost_matrix(batch_a: &[GraspAnnotation], batch_b: &[GraspAnnotation], kind: CostKind) -> Result<Matrix> {
    if batch_a.is_empty() || batch_b.is_empty() {
        return Err(Error::EmptyInput("cost matrix needs nonempty batches"));
    }
    if kind == CostKind::Jacobian {
        if let Some(i) = batch_a.iter().chain(batch_b).position(|g| g.manip.is_none()) {
            return Err(Error::Annotation(format!("grasp {i} has no max-effect vector")));
        }
    }
    let cols = batch_b.len();
    let rows: Vec<Vec<Option<f64>>> = batch_a
        .par_iter()
        .map(|a| {
            batch_b
                .iter()
                .map(|b| -> Result<Option<f64>> {
                    Ok(match kind {
                        CostKind::Pose => Some(d_pose(&a.config, &b.config)?),
                        CostKind::Contact => {
                            if a.contact.is_empty() || b.contact.is_empty() {
                                None
                            } else {
                                Some(d_contact(&a.contact, &b.contact)?)
                            }
                        }
                        CostKind::Wrench { samples, seed, dims } => Some(wrench_pair(a, b, samples, seed, dims)?),
                        CostKind::Jacobian => Some(d_jac(&a.manip.unwrap(), &b.manip.unwrap())),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut finite: Vec<f64> = rows.iter().flatten().flatten().cloned().collect();
    let penalty = if finite.len() < rows.len() * cols {
        finite.sort_by(f64::total_cmp);
        percentile_nearest_rank(&finite, 0.99).unwrap_or(1.0)
    } else {
        0.0
    };
    let mut m = Matrix::zeros(rows.len(), cols);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            let v = v.unwrap_or(penalty);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Numeric {
                    index: i * cols + j,
                    what: format!("cost entry {v}"),
                });
            }
            m.set(i, j, v);
        }
    }
    Ok(m)
}

/// Nearest-rank percentile of an ascending slice.
fn percentile_nearest_rank(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BasePose, PointCloud};
    use crate::wrench::{build_wrenches, ContactPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(pos: [f64; 3], r6: [f64; 6]) -> GraspConfig {
        GraspConfig {
            base: BasePose { position: pos, r6 },
            joints: vec![0.3, 0.4],
            hand_id: "t".into(),
        }
    }

    const ID6: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

    fn random_annotation(rng: &mut ChaCha8Rng, n_contacts: usize) -> GraspAnnotation {
        let pts: Vec<[f64; 3]> = (0..n_contacts)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let normals: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                [p[0] / n, p[1] / n, p[2] / n]
            })
            .collect();
        let contacts: Vec<ContactPoint> = pts
            .iter()
            .map(|p| {
                let d: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                ContactPoint::new(*p, [d[0] / n, d[1] / n, d[2] / n])
            })
            .collect();
        GraspAnnotation {
            config: config(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
            ),
            contact: ContactMap {
                points: PointCloud::new(pts),
                normals,
            },
            wrenches: (n_contacts > 0).then(|| build_wrenches(&contacts).unwrap()),
            manip: Some(std::array::from_fn(|_| rng.random_range(0.0..1.0))),
        }
    }

    #[test]
    fn pose_cost_cases() {
        let a = config([0.0; 3], ID6);
        assert_eq!(d_pose(&a, &a).unwrap(), 0.0);
        assert_eq!(d_pose(&a, &config([1.0, 0.0, 0.0], ID6)).unwrap(), 1.0);
        let rz = config([0.0; 3], [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        assert!((d_pose(&a, &rz).unwrap() - 4.0).abs() < 1e-15);
        // Rescaled seeds decode to the same rotation.
        let scaled = config([0.0; 3], [3.0, 0.0, 0.0, 0.5, 2.0, 0.0]);
        assert_eq!(d_pose(&a, &scaled).unwrap(), 0.0);
        assert!(d_pose(&a, &config([0.0; 3], [0.0; 6])).is_err());
    }

    #[test]
    fn contact_cost_cases() {
        let one = |x: f64| ContactMap {
            points: PointCloud::new(vec![[x, 0.0, 0.0]]),
            normals: vec![[1.0, 0.0, 0.0]],
        };
        assert_eq!(d_contact(&one(0.0), &one(0.0)).unwrap(), 0.0);
        assert_eq!(d_contact(&one(0.0), &one(1.0)).unwrap(), 2.0);
        assert!(d_contact(&one(0.0), &ContactMap::default()).is_err());
    }

    #[test]
    fn wrench_cost_cases() {
        let cube = |dx: f64| {
            let mut v = Vec::new();
            for x in [0.0, 1.0] {
                for y in [0.0, 1.0] {
                    for z in [0.0, 1.0] {
                        v.push(vec![x + dx, y, z]);
                    }
                }
            }
            WrenchHull::from_points(&v, 3).unwrap()
        };
        assert_eq!(d_wrench(&cube(0.0), &cube(0.0), 1000, 1).unwrap(), 0.0);
        assert_eq!(d_wrench(&cube(0.0), &cube(3.0), 10_000, 1).unwrap(), 1.0);
        let shifted = d_wrench(&cube(0.0), &cube(0.5), 1_000_000, 1).unwrap();
        assert!((shifted - 2.0 / 3.0).abs() < 0.01);
        let flat = WrenchHull::from_points(&[vec![0.0; 3], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 3).unwrap();
        assert_eq!(d_wrench(&flat, &cube(0.0), 100, 1).unwrap(), 1.0);
    }

    #[test]
    fn max_effect_cases() {
        let zero = vec![vec![0.0; 3]; 6];
        assert_eq!(max_effect(&zero).unwrap(), [0.0; 6]);
        let j: Vec<Vec<f64>> = [(1.0, -3.0), (0.0, 2.0), (0.0, 0.0), (0.0, 1.0), (0.0, 0.0), (4.0, -5.0)]
            .iter()
            .map(|&(a, b)| vec![a, b])
            .collect();
        assert_eq!(max_effect(&j).unwrap(), [3.0, 2.0, 0.0, 1.0, 0.0, 5.0]);
        assert!(max_effect(&zero[..5]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j: Vec<Vec<f64>> = (0..6).map(|_| (0..7).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let m = max_effect(&j).unwrap();
        for i in 0..6 {
            let mut best = 0.0f64;
            for jj in 0..7 {
                if j[i][jj].abs() > best {
                    best = j[i][jj].abs();
                }
            }
            assert_eq!(m[i], best);
        }
    }

    #[test]
    fn jac_cost_cases() {
        let z = [0.0; 6];
        assert_eq!(d_jac(&z, &z), 0.0);
        assert_eq!(d_jac(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &z), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let b: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let mut oracle = 0.0;
        for i in 0..6 {
            oracle += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((d_jac(&a, &b) - oracle).abs() < 1e-12);
        assert_eq!(d_jac(&a, &b), d_jac(&b, &a));
    }

    #[test]
    fn matrices_match_scalar_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch: Vec<GraspAnnotation> = (0..8).map(|_| random_annotation(&mut rng, 9)).collect();
        let other: Vec<GraspAnnotation> = (0..8).map(|_| random_annotation(&mut rng, 9)).collect();

        let pose = cost_matrix(&batch, &batch, CostKind::Pose).unwrap();
        for i in 0..8 {
            assert_eq!(pose.get(i, i), 0.0);
        }

        let contact = cost_matrix(&batch, &other, CostKind::Contact).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(contact.get(i, j), d_contact(&batch[i].contact, &other[j].contact).unwrap());
            }
        }

        let jac = cost_matrix(&batch[..1], &other[..1], CostKind::Jacobian).unwrap();
        assert_eq!((jac.rows, jac.cols), (1, 1));
        assert_eq!(jac.get(0, 0), d_jac(&batch[0].manip.unwrap(), &other[0].manip.unwrap()));

        let kind = CostKind::Wrench { samples: 2000, seed: 5, dims: 3 };
        let w = cost_matrix(&batch[..4], &batch[..4], kind).unwrap();
        for i in 0..4 {
            assert_eq!(w.get(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(w.get(i, j), w.get(j, i));
                assert!((0.0..=1.0).contains(&w.get(i, j)));
            }
        }
    }

    #[test]
    fn empty_contact_maps_take_percentile_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut batch: Vec<GraspAnnotation> = (0..5).map(|_| random_annotation(&mut rng, 6)).collect();
        batch[2] = random_annotation(&mut rng, 0);
        let m = cost_matrix(&batch, &batch, CostKind::Contact).unwrap();
        let mut finite = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                if i != 2 && j != 2 {
                    finite.push(m.get(i, j));
                }
            }
        }
        finite.sort_by(f64::total_cmp);
        let expected = finite[(0.99 * finite.len() as f64).ceil() as usize - 1];
        for k in 0..5 {
            assert_eq!(m.get(2, k), expected);
            assert_eq!(m.get(k, 2), expected);
        }
    }

    #[test]
    fn missing_fields_are_annotation_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut a = random_annotation(&mut rng, 6);
        a.manip = None;
        let b = random_annotation(&mut rng, 6);
        assert!(matches!(
            cost_matrix(&[a.clone()], &[b.clone()], CostKind::Jacobian),
            Err(Error::Annotation(_))
        ));
        a.wrenches = None;
        assert!(matches!(
            cost_matrix(&[a], &[b], CostKind::wrench_default()),
            Err(Error::Annotation(_))
        ));
        assert!(cost_matrix(&[], &[random_annotation(&mut rng, 3)], CostKind::Pose).is_err());
    }

    #[test]
    fn cost_kind_parsing() {
        for tag in ["pose", "contact", "wrench", "jacobian"] {
            assert_eq!(tag.parse::<CostKind>().unwrap().tag(), tag);
        }
        assert!("euclid".parse::<CostKind>().is_err());
    }
}
