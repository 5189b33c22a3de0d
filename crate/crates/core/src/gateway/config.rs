use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackendBundle, ToyConfig, ToyLinearBackend};
use crate::error::{EditError, Result};
use crate::latent::LatentGeometry;

/// Backend configuration file.
///
/// ```json
/// {"kind": "toy", "seed": 7, "geometry": {...}, "embed_dim": 8, ...}
/// {"kind": "real", "seed": 0, "geometry": {...}, "embed_dim": 512,
///  "weights": {"generator": "...", "image_encoder": "...", "text_encoder": "..."}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Toy {
        #[serde(flatten)]
        config: ToyConfig,
        /// Directory of float32 matrix blocks; sampled from the seed when absent.
        #[serde(default)]
        matrices_dir: Option<PathBuf>,
    },
    Real {
        seed: u64,
        geometry: LatentGeometry,
        embed_dim: usize,
        weights: RealWeights,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealWeights {
    pub generator: PathBuf,
    pub image_encoder: PathBuf,
    pub text_encoder: PathBuf,
    #[serde(default)]
    pub identity: Option<PathBuf>,
    #[serde(default)]
    pub inverter: Option<PathBuf>,
}

impl BackendConfig {
    pub fn toy(config: ToyConfig) -> Self {
        BackendConfig::Toy {
            config,
            matrices_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: BackendConfig = serde_json::from_str(&text)?;
        // Relative matrix directories resolve against the config file.
        if let BackendConfig::Toy {
            matrices_dir: Some(dir),
            ..
        } = &mut cfg
        {
            if dir.is_relative() {
                if let Some(parent) = path.parent() {
                    *dir = parent.join(&*dir);
                }
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Builds the backend bundle. Real weights never fall back to the toy
    /// backend: a missing file, or a build without an inference runtime,
    /// is reported as unavailable.
    pub fn build(&self) -> Result<BackendBundle> {
        match self {
            BackendConfig::Toy {
                config,
                matrices_dir,
            } => {
                let backend = match matrices_dir {
                    Some(dir) => ToyLinearBackend::load_matrices(config.clone(), dir)?,
                    None => ToyLinearBackend::new(config.clone())?,
                };
                Ok(BackendBundle::toy(backend))
            }
            BackendConfig::Real {
                geometry, weights, ..
            } => {
                geometry.validate()?;
                let required = [
                    ("generator", Some(&weights.generator)),
                    ("image_encoder", Some(&weights.image_encoder)),
                    ("text_encoder", Some(&weights.text_encoder)),
                    ("identity", weights.identity.as_ref()),
                    ("inverter", weights.inverter.as_ref()),
                ];
                for (name, path) in required {
                    if let Some(path) = path {
                        if !path.exists() {
                            return Err(EditError::BackendUnavailable(format!(
                                "{name} weights not found at {}",
                                path.display()
                            )));
                        }
                    }
                }
                Err(EditError::BackendUnavailable(
                    "this build has no inference runtime for pretrained weights".into(),
                ))
            }
        }
    }
}
