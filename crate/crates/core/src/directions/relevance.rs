use std::cmp::Ordering;

use serde::Serialize;

use super::stats::ChannelStats;
use crate::error::{EditError, Result};
use crate::gateway::{dot, BackendBundle, ImageTensor, JointEmbedding};
use crate::latent::{add_direction, StyleCode, StyleDirection};

/// Mean projection of every channel's embedding change onto `delta_t`.
pub fn channel_relevance(stats: &ChannelStats, delta_t: &JointEmbedding) -> Result<Vec<f64>> {
    if delta_t.dim() != stats.embed_dim() {
        return Err(EditError::shape(
            format!("{}-dim text direction", stats.embed_dim()),
            format!("{}", delta_t.dim()),
        ));
    }
    Ok((0..stats.channels())
        .map(|c| dot(stats.row(c), delta_t.values()))
        .collect())
}

/// Keeps `R[c]` where `|R[c]| >= beta`.
pub fn direction_from_relevance(relevance: &[f64], beta: f64) -> Result<StyleDirection> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(EditError::InvalidArgument(format!(
            "beta must be a non-negative number, got {beta}"
        )));
    }
    StyleDirection::from_values(
        relevance
            .iter()
            .map(|r| if r.abs() >= beta { *r } else { 0.0 })
            .collect(),
    )
}

pub fn assemble_direction(
    stats: &ChannelStats,
    delta_t: &JointEmbedding,
    beta: f64,
) -> Result<StyleDirection> {
    direction_from_relevance(&channel_relevance(stats, delta_t)?, beta)
}

/// Threshold that activates `k` channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KThreshold {
    pub beta: f64,
    /// Channels exact-k assembly keeps; thresholding at `beta` can keep
    /// more when channels tie at the boundary.
    pub active: usize,
    /// Set when fewer than `k` channels have nonzero relevance.
    pub saturated: bool,
}

/// Channel indices by `|R|` descending, lower index first on ties.
pub fn rank_channels(relevance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|a, b| {
        relevance[*b]
            .abs()
            .partial_cmp(&relevance[*a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    order
}

pub fn beta_from_relevance(relevance: &[f64], k: usize) -> Result<KThreshold> {
    if k == 0 {
        return Err(EditError::InvalidArgument("k must be at least 1".into()));
    }
    let nonzero = relevance.iter().filter(|r| **r != 0.0).count();
    if nonzero == 0 {
        return Err(EditError::DegeneratePrompt(
            "every channel has zero relevance".into(),
        ));
    }
    let order = rank_channels(relevance);
    let take = k.min(nonzero);
    if k > nonzero {
        log::warn!("k = {k} exceeds the {nonzero} channels with nonzero relevance");
    }
    Ok(KThreshold {
        beta: relevance[order[take - 1]].abs(),
        active: take,
        saturated: k > nonzero,
    })
}

pub fn beta_from_k(stats: &ChannelStats, delta_t: &JointEmbedding, k: usize) -> Result<KThreshold> {
    beta_from_relevance(&channel_relevance(stats, delta_t)?, k)
}

/// Direction with exactly `min(k, nonzero)` active channels. Channels tied
/// with the k-th at the threshold lose to lower indices.
pub fn top_k_direction(relevance: &[f64], k: usize) -> Result<(StyleDirection, KThreshold)> {
    let t = beta_from_relevance(relevance, k)?;
    let mut d = StyleDirection::zeros(relevance.len());
    for &c in rank_channels(relevance).iter().take(t.active) {
        d.set(c, relevance[c])?;
    }
    Ok((d, t))
}

pub fn assemble_top_k(
    stats: &ChannelStats,
    delta_t: &JointEmbedding,
    k: usize,
) -> Result<(StyleDirection, KThreshold)> {
    top_k_direction(&channel_relevance(stats, delta_t)?, k)
}

/// `s + alpha * direction` and its rendering.
pub fn apply_global(
    backend: &BackendBundle,
    s: &StyleCode,
    direction: &StyleDirection,
    alpha: f64,
) -> Result<(StyleCode, ImageTensor)> {
    s.conforms(backend.geometry())?;
    let out = add_direction(s, direction, alpha)?;
    let image = backend.generate_from_style(&out)?;
    Ok((out, image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directions::stats::StatsParams;

    fn one_hot_stats() -> ChannelStats {
        let mut deltas = vec![0.0; 9];
        for c in 0..3 {
            deltas[c * 3 + c] = 1.0;
        }
        ChannelStats::from_parts(deltas, vec![1.0; 3], 3, StatsParams::default(), "t", "g").unwrap()
    }

    #[test]
    fn one_hot_rows_pick_out_their_channel() {
        let stats = one_hot_stats();
        let t = JointEmbedding::normalize(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(channel_relevance(&stats, &t).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn threshold_extremes() {
        let r = [0.3, -0.5, 0.0, 0.1];
        assert_eq!(direction_from_relevance(&r, 0.0).unwrap().active_count(), 3);
        assert_eq!(
            direction_from_relevance(&r, 0.51).unwrap().active_count(),
            0
        );
        assert_eq!(
            direction_from_relevance(&r, 0.3).unwrap().values(),
            &[0.3, -0.5, 0.0, 0.0]
        );
        assert!(direction_from_relevance(&r, -0.1).is_err());
    }

    #[test]
    fn k_one_is_max_and_ties_favor_low_index() {
        let r = [0.2, -0.4, 0.4, 0.1];
        let t = beta_from_relevance(&r, 1).unwrap();
        assert_eq!(t.beta, 0.4);
        let (d, _) = top_k_direction(&r, 1).unwrap();
        assert_eq!(d.active_channels(), vec![1]);
        let (d, _) = top_k_direction(&r, 2).unwrap();
        assert_eq!(d.active_channels(), vec![1, 2]);
    }

    #[test]
    fn k_beyond_nonzero_saturates() {
        let r = [0.2, 0.0, 0.3];
        let t = beta_from_relevance(&r, 5).unwrap();
        assert!(t.saturated);
        assert_eq!((t.beta, t.active), (0.2, 2));
        assert!(beta_from_relevance(&r, 0).is_err());
    }
}
