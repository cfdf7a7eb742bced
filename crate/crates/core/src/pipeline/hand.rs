//! Toy multi-finger hands around a unit-sphere object and the synthetic
//! grasp datasets built from them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{max_effect, GraspAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{
    cross, dist2, extract_contact_map, mat_from_cols, mat_vec, normalize, scale, sub, BasePose, GraspConfig,
    Mat3, OrientedCloud, PointCloud, Vec3,
};
use crate::wrench::{build_wrenches, ContactPoint};

pub const OBJECT_POINTS: usize = 2000;
pub const BASE_RADIUS: f64 = 1.9;
pub const CONTACT_TAU: f64 = 0.08;
pub const JACOBIAN_STEP: f64 = 1e-5;
pub const MAX_RETRIES: usize = 1000;

/// A K-finger hand whose fingers are single revolute links of length `L`
/// fanned out around the approach axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyHandSpec {
    pub hand_id: String,
    pub k: usize,
    pub finger_length: f64,
    /// Base azimuth of each finger (rad), strictly increasing in `[0, 2π)`.
    pub phi: Vec<f64>,
    /// Sampling range of each joint angle (rad).
    pub joint_ranges: Vec<(f64, f64)>,
}

impl ToyHandSpec {
    /// Evenly spaced fingers sharing one joint range.
    pub fn uniform(hand_id: &str, k: usize, finger_length: f64, range: (f64, f64)) -> Self {
        Self {
            hand_id: hand_id.to_string(),
            k,
            finger_length,
            phi: (0..k).map(|i| 2.0 * PI * i as f64 / k as f64).collect(),
            joint_ranges: vec![range; k],
        }
    }

    /// Five fingers of length 1.0.
    pub fn source_default() -> Self {
        Self::uniform("toy5", 5, 1.0, (0.2, 0.5))
    }

    /// Four fingers of length 1.05.
    pub fn target_default() -> Self {
        Self::uniform("toy4", 4, 1.05, (0.2, 0.5))
    }

    pub fn dof(&self) -> usize {
        self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Input(format!("hand '{}' needs at least 2 fingers", self.hand_id)));
        }
        if !(self.finger_length > 0.0 && self.finger_length.is_finite()) {
            return Err(Error::Input(format!("finger length must be positive, got {}", self.finger_length)));
        }
        if self.phi.len() != self.k || self.joint_ranges.len() != self.k {
            return Err(Error::Shape(format!(
                "hand '{}' has {} fingers, {} azimuths and {} joint ranges",
                self.hand_id,
                self.k,
                self.phi.len(),
                self.joint_ranges.len()
            )));
        }
        if self.phi.iter().any(|p| !(0.0..2.0 * PI).contains(p)) || self.phi.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("finger azimuths must increase strictly within [0, 2π)".into()));
        }
        if self.joint_ranges.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Input("joint ranges must be finite with lo ≤ hi".into()));
        }
        Ok(())
    }

    /// Fingertip positions for a base pose and joint angles.
    pub fn fingertips_with(&self, position: &Vec3, rot: &Mat3, joints: &[f64]) -> Vec<Vec3> {
        self.phi
            .iter()
            .zip(joints)
            .map(|(phi, a)| {
                let local = [a.sin() * phi.cos(), a.sin() * phi.sin(), a.cos()];
                let world = mat_vec(rot, &scale(&local, self.finger_length));
                [position[0] + world[0], position[1] + world[1], position[2] + world[2]]
            })
            .collect()
    }

    pub fn fingertips(&self, config: &GraspConfig) -> Result<Vec<Vec3>> {
        self.check_config(config)?;
        Ok(self.fingertips_with(&config.base.position, &config.base.rotation()?, &config.joints))
    }

    pub fn check_config(&self, config: &GraspConfig) -> Result<()> {
        if config.joints.len() != self.k {
            return Err(Error::Shape(format!(
                "config has {} joints, hand '{}' has {}",
                config.joints.len(),
                self.hand_id,
                self.k
            )));
        }
        Ok(())
    }
}

/// `n` near-uniform points on the unit sphere along a golden-angle spiral,
/// with outward normals.
pub fn fibonacci_sphere(n: usize) -> OrientedCloud {
    let golden = PI * (3.0 - 5f64.sqrt());
    let points: Vec<Vec3> = (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let th = golden * i as f64;
            [r * th.cos(), r * th.sin(), z]
        })
        .collect();
    let normals = points.clone();
    OrientedCloud::new(points, normals).expect("equal lengths")
}

/// Rotation whose local +z axis maps to `axis`, rolled by `roll` about it.
pub fn approach_rotation(axis: &Vec3, roll: f64) -> Result<Mat3> {
    let e3 = normalize(axis).ok_or_else(|| Error::Input("approach axis has zero length".into()))?;
    let helper = if e3[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(&cross(&helper, &e3)).expect("helper is not parallel to the axis");
    let e2 = cross(&e3, &e1);
    let (s, c) = roll.sin_cos();
    let r1 = [c * e1[0] + s * e2[0], c * e1[1] + s * e2[1], c * e1[2] + s * e2[2]];
    let r2 = cross(&e3, &r1);
    Ok(mat_from_cols(&r1, &r2, &e3))
}

/// Pushing direction at each contact: along the line from the nearest
/// fingertip to the contact, turned to point into the object.
pub fn contact_forces(points: &[Vec3], normals: &[Vec3], tips: &[Vec3]) -> Vec<ContactPoint> {
    points
        .iter()
        .zip(normals)
        .map(|(c, n)| {
            let inward = scale(n, -1.0);
            let tip = tips
                .iter()
                .min_by(|a, b| dist2(a, c).total_cmp(&dist2(b, c)))
                .expect("at least one fingertip");
            let dir = match normalize(&sub(c, tip)) {
                Some(d) if d[0] * n[0] + d[1] * n[1] + d[2] * n[2] > 0.0 => scale(&d, -1.0),
                Some(d) => d,
                None => inward,
            };
            ContactPoint::new(*c, dir)
        })
        .collect()
}

/// `[fingertip centroid; mean rotation of the tips about it]` relative to
/// the tip layout at `reference`.
fn object_pose(hand: &ToyHandSpec, position: &Vec3, rot: &Mat3, joints: &[f64], reference: &[Vec3]) -> [f64; 6] {
    let tips = hand.fingertips_with(position, rot, joints);
    let k = tips.len() as f64;
    let centroid = PointCloud::new(tips.clone()).centroid().expect("hand has fingers");
    let ref_centroid = PointCloud::new(reference.to_vec()).centroid().expect("hand has fingers");
    let mut theta = [0.0; 3];
    for (tip, r0) in tips.iter().zip(reference) {
        let r0 = sub(r0, &ref_centroid);
        let r = sub(tip, &centroid);
        let w = cross(&r0, &r);
        let s = 1.0 / (k * (r0[0] * r0[0] + r0[1] * r0[1] + r0[2] * r0[2]).max(1e-12));
        for a in 0..3 {
            theta[a] += w[a] * s;
        }
    }
    [centroid[0], centroid[1], centroid[2], theta[0], theta[1], theta[2]]
}

/// 6×K Jacobian of the object-frame pose of the fingertip stack with respect
/// to the joint angles, by central differences.
pub fn pose_jacobian(hand: &ToyHandSpec, config: &GraspConfig) -> Result<Vec<Vec<f64>>> {
    hand.check_config(config)?;
    let rot = config.base.rotation()?;
    let pos = config.base.position;
    let reference = hand.fingertips_with(&pos, &rot, &config.joints);
    let mut jac = vec![vec![0.0; hand.k]; 6];
    for j in 0..hand.k {
        let mut plus = config.joints.clone();
        let mut minus = config.joints.clone();
        plus[j] += JACOBIAN_STEP;
        minus[j] -= JACOBIAN_STEP;
        let fp = object_pose(hand, &pos, &rot, &plus, &reference);
        let fm = object_pose(hand, &pos, &rot, &minus, &reference);
        for r in 0..6 {
            jac[r][j] = (fp[r] - fm[r]) / (2.0 * JACOBIAN_STEP);
        }
    }
    Ok(jac)
}

/// Contacts, wrenches and max-effect vector of one configuration.
pub fn annotate(hand: &ToyHandSpec, object: &OrientedCloud, config: GraspConfig) -> Result<GraspAnnotation> {
    let tips = hand.fingertips(&config)?;
    let contact = extract_contact_map(object, &PointCloud::new(tips.clone()), CONTACT_TAU)?;
    let wrenches = if contact.is_empty() {
        None
    } else {
        Some(build_wrenches(&contact_forces(&contact.points.points, &contact.normals, &tips))?)
    };
    let manip = Some(max_effect(&pose_jacobian(hand, &config)?)?);
    Ok(GraspAnnotation {
        config,
        contact,
        wrenches,
        manip,
    })
}

fn random_config<R: Rng + ?Sized>(hand: &ToyHandSpec, rng: &mut R) -> Result<GraspConfig> {
    let g: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let d = normalize(&g).unwrap_or([0.0, 0.0, 1.0]);
    let roll = rng.random_range(0.0..2.0 * PI);
    let rot = approach_rotation(&scale(&d, -1.0), roll)?;
    let joints = hand
        .joint_ranges
        .iter()
        .map(|&(lo, hi)| if lo < hi { rng.random_range(lo..hi) } else { lo })
        .collect();
    Ok(GraspConfig {
        base: BasePose::from_matrix(scale(&d, BASE_RADIUS), &rot)?,
        joints,
        hand_id: hand.hand_id.clone(),
    })
}

/// A hand, the object it grasps and a set of annotated grasps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub hand: ToyHandSpec,
    pub object: OrientedCloud,
    pub annotations: Vec<GraspAnnotation>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn configs(&self) -> Vec<GraspConfig> {
        self.annotations.iter().map(|a| a.config.clone()).collect()
    }
}

/// `n` random grasps with nonempty contact maps. Grasp `i` draws from its own
/// RNG stream, so the result does not depend on the thread count.
pub fn gen_dataset(hand: &ToyHandSpec, n: usize, seed: u64) -> Result<Dataset> {
    hand.validate()?;
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    let object = fibonacci_sphere(OBJECT_POINTS);
    let annotations = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for _ in 0..MAX_RETRIES {
                let ann = annotate(hand, &object, random_config(hand, &mut rng)?)?;
                if !ann.contact.is_empty() {
                    return Ok(ann);
                }
            }
            Err(Error::Input(format!(
                "grasp {i}: no contact after {MAX_RETRIES} draws; check the hand geometry"
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        hand: hand.clone(),
        object,
        annotations,
        seed,
    })
}
