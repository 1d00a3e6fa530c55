//! Serialized supernet: config, operators, controller parameters.
//!
//! Floats are written in shortest round-trip form, so `load(save(x))`
//! restores every parameter bit-for-bit and save → load → save is
//! byte-identical.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::controller::SupernetState;
use crate::embedding::EmbeddingConfig;
use crate::optimizer::TrainConfig;
use crate::registry::Registry;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub steps: u64,
    pub mean_utility: f64,
    pub mean_cost: f64,
    pub patches_applied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub registry: Registry,
    pub controllers: SupernetState,
    #[serde(default)]
    pub rng_state: Option<ChaCha8Rng>,
    #[serde(default)]
    pub metrics_summary: Option<MetricsSummary>,
}

impl Checkpoint {
    /// Structural consistency between config, registry and parameters.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidCheckpoint(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        self.config.validate()?;
        self.registry.validate_complete()?;
        if self.controllers.depth() != self.config.layers {
            return bad(format!(
                "{} controller layers for a {}-layer config",
                self.controllers.depth(),
                self.config.layers
            ));
        }
        if self.controllers.n_ops() != self.registry.len() {
            return bad(format!(
                "controllers score {} operators, registry holds {}",
                self.controllers.n_ops(),
                self.registry.len()
            ));
        }
        for ctrl in &self.controllers.layers {
            if ctrl.b1.len() != self.config.hidden || ctrl.n_ops() != self.registry.len() {
                return bad(format!("layer {} has inconsistent shapes", ctrl.layer));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| HarnessError::InvalidCheckpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json()).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerDims;
    use rand::{Rng, SeedableRng};

    fn checkpoint() -> Checkpoint {
        let config = TrainConfig { layers: 2, hidden: 8, ..Default::default() };
        let registry = Registry::builtin();
        let mut controllers = SupernetState::init(
            3,
            ControllerDims { embed_dim: 16, hidden: 8, layers: 2, n_ops: registry.len() },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in &mut controllers.layers {
            for p in l.params_mut() {
                for x in p.iter_mut() {
                    *x *= rng.gen_range(0.3..3.0);
                }
            }
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            embedding: EmbeddingConfig::Hashing { dim: 16 },
            registry,
            controllers,
            rng_state: Some(rng),
            metrics_summary: Some(MetricsSummary {
                steps: 3,
                mean_utility: 1.0 / 3.0,
                mean_cost: 2.5,
                patches_applied: 0,
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = checkpoint();
        let text = c.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        for (a, b) in c.controllers.layers.iter().zip(&back.controllers.layers) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                assert!(pa.iter().zip(pb).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        assert_eq!(back, c);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        checkpoint().save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn inconsistent_checkpoints_are_rejected() {
        let mut c = checkpoint();
        c.config.layers = 3;
        assert!(matches!(
            Checkpoint::from_json(&c.to_json()),
            Err(HarnessError::InvalidCheckpoint(_))
        ));
        let mut c = checkpoint();
        c.format_version = 99;
        assert!(Checkpoint::from_json(&c.to_json()).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }
}
