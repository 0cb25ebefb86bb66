use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checksum_f64;
use crate::steering::SteeringVector;

use super::config::TrainConfig;
use super::train::{Setup, TrainState};
use super::SCHEMA_VERSION;

/// Everything needed to continue a run bit-for-bit.
///
/// Random streams are keyed by seed and step index, so the next step number
/// is the only cursor that has to be stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub backbone_checksum: String,
    pub steering_checksum: String,
    pub controller_checksum: String,
    pub state: TrainState,
}

pub fn steering_checksum(h: &SteeringVector) -> String {
    checksum_f64([h.direction.as_slice()])
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, state: &TrainState, steering: &SteeringVector, backbone_checksum: &str) -> Checkpoint {
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            backbone_checksum: backbone_checksum.to_string(),
            steering_checksum: steering_checksum(steering),
            controller_checksum: state.controller.checksum(),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION,
                found: ckpt.schema_version,
            });
        }
        let found = ckpt.state.controller.checksum();
        if found != ckpt.controller_checksum {
            return Err(Error::ChecksumMismatch {
                expected: ckpt.controller_checksum,
                found,
            });
        }
        Ok(ckpt)
    }

    /// The stored state, after checking it matches the rebuilt backbone and steering vector.
    pub fn into_state(self, setup: &Setup) -> Result<TrainState> {
        let pairs = [
            (self.backbone_checksum, setup.backbone.checksum().to_string()),
            (self.steering_checksum, steering_checksum(&setup.steering)),
        ];
        for (expected, found) in pairs {
            if expected != found {
                return Err(Error::ChecksumMismatch { expected, found });
            }
        }
        self.state.controller.check_budget()?;
        Ok(self.state)
    }
}
