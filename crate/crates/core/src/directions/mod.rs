//! Input-agnostic style-space directions from a text prompt.
//!
//! A prompt pair becomes a unit text direction `delta_t`. Precomputed
//! [`ChannelStats`] hold, per style channel, the mean unit change of the
//! image embedding under a symmetric perturbation of that channel. The
//! relevance of channel c is the projection of its row onto `delta_t`;
//! thresholding relevance by β (or picking the top k) yields a sparse
//! direction that is added to a style code with strength α.

mod prompt;
mod relevance;
mod stats;

pub use self::prompt::{
    class_embedding, encode_prompt_pair, PromptSpec, TemplateBank, DEFAULT_BANK_ID, SLOT,
};
pub use self::relevance::{
    apply_global, assemble_direction, assemble_top_k, beta_from_k, beta_from_relevance,
    channel_relevance, direction_from_relevance, rank_channels, top_k_direction, KThreshold,
};
pub use self::stats::{
    precompute_channel_stats, sample_style_codes, style_channel_std, ChannelStats, StatsParams,
    DEFAULT_PAIR_COUNT, DEFAULT_PERTURB_ALPHA, DEFAULT_SAMPLE_COUNT,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gateway::{BackendBundle, ImageTensor};
use crate::latent::{StyleCode, StyleDirection};

/// Strength and active-channel count for one editing domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DomainDefaults {
    pub alpha: f64,
    pub k: usize,
}

pub const FACE_DEFAULTS: DomainDefaults = DomainDefaults { alpha: 3.0, k: 20 };
pub const CAR_DEFAULTS: DomainDefaults = DomainDefaults { alpha: 3.0, k: 100 };
pub const CAT_DEFAULTS: DomainDefaults = DomainDefaults { alpha: 7.0, k: 100 };

/// Thresholds of the grey-hair sweep, sparsest last.
pub const GREY_HAIR_BETAS: [f64; 3] = [0.16, 0.14, 0.11];
/// Thresholds of the gender sweep.
pub const GENDER_BETAS: [f64; 3] = [0.40, 0.30, 0.20];

/// Looks up editing defaults by domain name (`face`, `car`, `cat`).
pub fn domain_defaults(domain: &str) -> Option<DomainDefaults> {
    match domain {
        "face" | "faces" => Some(FACE_DEFAULTS),
        "car" | "cars" => Some(CAR_DEFAULTS),
        "cat" | "cats" => Some(CAT_DEFAULTS),
        _ => None,
    }
}

/// How sparse an assembled direction should be.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sparsity {
    /// Relevance threshold.
    Beta(f64),
    /// Number of active channels.
    K(usize),
}

#[derive(Debug, Clone)]
pub struct GlobalEdit {
    pub direction: StyleDirection,
    pub style: StyleCode,
    pub image: ImageTensor,
    pub beta_used: f64,
    /// Set when `K(k)` asked for more channels than have nonzero relevance.
    pub saturated: bool,
}

/// Prompt pair to rendered edit in one call.
pub fn edit_global(
    backend: &BackendBundle,
    stats: &ChannelStats,
    s: &StyleCode,
    spec: &PromptSpec,
    bank: &TemplateBank,
    sparsity: Sparsity,
    alpha: f64,
) -> Result<GlobalEdit> {
    stats.check_backend(backend)?;
    let delta_t = encode_prompt_pair(backend, spec, bank)?;
    let relevance = channel_relevance(stats, &delta_t)?;
    let (direction, beta_used, saturated) = match sparsity {
        Sparsity::Beta(beta) => (direction_from_relevance(&relevance, beta)?, beta, false),
        Sparsity::K(k) => {
            let (d, t) = top_k_direction(&relevance, k)?;
            (d, t.beta, t.saturated)
        }
    };
    let (style, image) = apply_global(backend, s, &direction, alpha)?;
    Ok(GlobalEdit {
        direction,
        style,
        image,
        beta_used,
        saturated,
    })
}
