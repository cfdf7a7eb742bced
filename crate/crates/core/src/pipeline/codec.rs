use serde::{Deserialize, Serialize};

use super::hand::ToyHandSpec;
use crate::error::{Error, Result};
use crate::geometry::{rot6d_decode, BasePose, GraspConfig};

/// Coordinates taken by the base pose: position (3) and rotation seeds (6).
pub const POSE_WIDTH: usize = 9;

/// Maps grasp configurations to flat latent vectors and back.
///
/// The identity codec lays out `[position, r6, joints]` and zero-pads to
/// `dim`; decoding truncates to the joint count of the requested hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub tag: String,
    pub dim: usize,
}

impl LatentCodec {
    pub fn identity(dim: usize) -> Self {
        Self {
            tag: "identity".into(),
            dim,
        }
    }

    /// Shared width for two hands: `max(n, m) + 9`.
    pub fn for_hands(a: &ToyHandSpec, b: &ToyHandSpec) -> Self {
        Self::identity(a.dof().max(b.dof()) + POSE_WIDTH)
    }

    fn check_tag(&self) -> Result<()> {
        if self.tag == "identity" {
            Ok(())
        } else {
            Err(Error::Config(format!("unsupported codec '{}'", self.tag)))
        }
    }

    pub fn encode(&self, config: &GraspConfig) -> Result<Vec<f64>> {
        self.check_tag()?;
        let used = POSE_WIDTH + config.joints.len();
        if used > self.dim {
            return Err(Error::Config(format!(
                "config needs {used} latent coordinates, codec has {}",
                self.dim
            )));
        }
        let mut z = Vec::with_capacity(self.dim);
        z.extend_from_slice(&config.base.position);
        z.extend_from_slice(&config.base.r6);
        z.extend_from_slice(&config.joints);
        z.resize(self.dim, 0.0);
        Ok(z)
    }

    pub fn decode(&self, z: &[f64], hand: &ToyHandSpec) -> Result<GraspConfig> {
        self.check_tag()?;
        if z.len() != self.dim {
            return Err(Error::Config(format!("latent has {} coordinates, codec has {}", z.len(), self.dim)));
        }
        if POSE_WIDTH + hand.dof() > self.dim {
            return Err(Error::Config(format!(
                "hand '{}' needs {} latent coordinates, codec has {}",
                hand.hand_id,
                POSE_WIDTH + hand.dof(),
                self.dim
            )));
        }
        let r6: [f64; 6] = z[3..9].try_into().expect("six entries");
        rot6d_decode(&r6)?;
        Ok(GraspConfig {
            base: BasePose {
                position: [z[0], z[1], z[2]],
                r6,
            },
            joints: z[POSE_WIDTH..POSE_WIDTH + hand.dof()].to_vec(),
            hand_id: hand.hand_id.clone(),
        })
    }
}
