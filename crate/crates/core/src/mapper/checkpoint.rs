use serde::{Deserialize, Serialize};

use super::{MapperConfig, MapperModel, TrainingMeta};
use crate::codec;
use crate::error::{EditError, Result};
use crate::latent::LatentGeometry;

/// JSON header of a mapper checkpoint. Parameters follow as one float32
/// block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: MapperConfig,
    pub prompt: String,
    pub geometry_hash: String,
    pub geometry: LatentGeometry,
    pub step: usize,
    pub loss_history: Vec<f64>,
}

pub fn save_checkpoint(model: &MapperModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        prompt: model.meta.prompt.clone(),
        geometry_hash: model.geometry().fingerprint(),
        geometry: model.geometry().clone(),
        step: model.meta.steps,
        loss_history: model.meta.loss_history.clone(),
    };
    codec::encode_framed(&header, &[model.params()])
}

/// Restores a checkpoint. When `expected` is given, the checkpoint's geometry
/// must match it.
pub fn load_checkpoint(bytes: &[u8], expected: Option<&LatentGeometry>) -> Result<MapperModel> {
    let (header, mut blocks): (CheckpointHeader, _) = codec::decode_framed(bytes, 1)?;
    if header.geometry.fingerprint() != header.geometry_hash {
        return Err(EditError::Integrity(
            "checkpoint geometry hash mismatch".into(),
        ));
    }
    if let Some(geom) = expected {
        if geom.fingerprint() != header.geometry_hash {
            return Err(EditError::InvalidGeometry(
                "checkpoint was trained for a different geometry".into(),
            ));
        }
    }
    let mut model = MapperModel::new(&header.geometry, header.config)?;
    model.set_params(blocks.pop().expect("one block"))?;
    model.meta = TrainingMeta {
        prompt: header.prompt,
        steps: header.step,
        loss_history: header.loss_history,
    };
    Ok(model)
}
