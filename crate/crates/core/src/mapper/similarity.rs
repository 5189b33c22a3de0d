use serde::Serialize;

use super::MapperModel;
use crate::error::{EditError, Result};
use crate::gateway::dot;
use crate::latent::WPlusCode;

/// Anything that assigns a manipulation step to a latent code.
pub trait ResidualField {
    fn residual(&self, w: &WPlusCode) -> Result<WPlusCode>;
}

impl ResidualField for MapperModel {
    fn residual(&self, w: &WPlusCode) -> Result<WPlusCode> {
        self.forward(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Pairs that entered the statistics.
    pub pair_count: usize,
    /// Pairs dropped because one residual had zero norm.
    pub excluded_pairs: usize,
}

/// Cosine similarity between the flattened manipulation steps of every
/// unordered pair of latents.
pub fn direction_similarity_report<F: ResidualField + ?Sized>(
    field: &F,
    latents: &[WPlusCode],
) -> Result<SimilarityReport> {
    if latents.len() < 2 {
        return Err(EditError::InvalidArgument(
            "similarity report needs at least two latents".into(),
        ));
    }
    let residuals = latents
        .iter()
        .map(|w| field.residual(w))
        .collect::<Result<Vec<_>>>()?;
    // Squared norms; sqrt(a * a) reproduces |a| exactly, so identical
    // residuals give a cosine of exactly 1.
    let sq: Vec<f64> = residuals
        .iter()
        .map(|r| dot(r.values(), r.values()))
        .collect();
    let mut sims = Vec::with_capacity(latents.len() * (latents.len() - 1) / 2);
    let mut excluded = 0;
    for i in 0..residuals.len() {
        for j in i + 1..residuals.len() {
            if sq[i] == 0.0 || sq[j] == 0.0 {
                excluded += 1;
                continue;
            }
            let cos = dot(residuals[i].values(), residuals[j].values()) / (sq[i] * sq[j]).sqrt();
            sims.push(cos.clamp(-1.0, 1.0));
        }
    }
    if sims.is_empty() {
        return Ok(SimilarityReport {
            mean: f64::NAN,
            std: f64::NAN,
            pair_count: 0,
            excluded_pairs: excluded,
        });
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(SimilarityReport {
        mean,
        std: var.sqrt(),
        pair_count: sims.len(),
        excluded_pairs: excluded,
    })
}
