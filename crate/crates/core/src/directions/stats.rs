//! One-time per-channel preprocessing: how the unit image embedding moves
//! when a single style channel is pushed in both directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{decode_framed, encode_framed};
use crate::error::{EditError, Result};
use crate::gateway::{l2_norm, BackendBundle};
use crate::latent::{LatentGeometry, StyleCode};

pub const DEFAULT_PAIR_COUNT: usize = 100;
pub const DEFAULT_PERTURB_ALPHA: f64 = 5.0;
pub const DEFAULT_SAMPLE_COUNT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsParams {
    /// Style codes drawn to estimate each channel's standard deviation.
    pub sample_count: usize,
    /// Style codes perturbed per channel.
    pub pair_count: usize,
    pub perturb_alpha: f64,
    pub seed: u64,
}

impl Default for StatsParams {
    fn default() -> Self {
        StatsParams {
            sample_count: DEFAULT_SAMPLE_COUNT,
            pair_count: DEFAULT_PAIR_COUNT,
            perturb_alpha: DEFAULT_PERTURB_ALPHA,
            seed: 0,
        }
    }
}

impl StatsParams {
    pub fn validate(&self) -> Result<()> {
        if self.pair_count == 0 || self.sample_count == 0 {
            return Err(EditError::InvalidArgument(
                "sample_count and pair_count must be at least 1".into(),
            ));
        }
        if !(self.perturb_alpha.is_finite() && self.perturb_alpha > 0.0) {
            return Err(EditError::InvalidArgument(format!(
                "perturb_alpha must be positive, got {}",
                self.perturb_alpha
            )));
        }
        Ok(())
    }

    /// Content address of the stats these parameters produce on a backend.
    pub fn key(&self, backend_fingerprint: &str) -> String {
        let mut h = Sha256::new();
        h.update(backend_fingerprint.as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update((self.pair_count as u64).to_le_bytes());
        h.update(self.perturb_alpha.to_le_bytes());
        h.update((self.sample_count as u64).to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatsHeader {
    fingerprint: String,
    geometry_hash: String,
    seed: u64,
    sample_count: usize,
    pair_count: usize,
    perturb_alpha: f64,
    channels: usize,
    embed_dim: usize,
}

/// Mean unit embedding change per style channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    /// Row-major `channels x embed_dim`.
    deltas: Vec<f64>,
    channel_std: Vec<f64>,
    channels: usize,
    embed_dim: usize,
    params: StatsParams,
    fingerprint: String,
    geometry_hash: String,
}

impl ChannelStats {
    /// Builds stats from explicit rows; used for loading and for tests.
    pub fn from_parts(
        deltas: Vec<f64>,
        channel_std: Vec<f64>,
        embed_dim: usize,
        params: StatsParams,
        fingerprint: impl Into<String>,
        geometry_hash: impl Into<String>,
    ) -> Result<Self> {
        params.validate()?;
        let channels = channel_std.len();
        if embed_dim == 0 || deltas.len() != channels * embed_dim {
            return Err(EditError::shape(
                format!("{channels} x {embed_dim} deltas"),
                format!("{}", deltas.len()),
            ));
        }
        if let Some(c) = channel_std
            .iter()
            .position(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(EditError::InvalidArgument(format!(
                "channel {c} has invalid std {}",
                channel_std[c]
            )));
        }
        if deltas.iter().any(|v| !v.is_finite()) {
            return Err(EditError::NonFinite("channel deltas".into()));
        }
        for (c, row) in deltas.chunks_exact(embed_dim).enumerate() {
            let n = l2_norm(row);
            if n > 1.0 + 1e-6 {
                return Err(EditError::InvalidArgument(format!(
                    "row {c} has norm {n} > 1"
                )));
            }
        }
        Ok(ChannelStats {
            deltas,
            channel_std,
            channels,
            embed_dim,
            params,
            fingerprint: fingerprint.into(),
            geometry_hash: geometry_hash.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.deltas[channel * self.embed_dim..(channel + 1) * self.embed_dim]
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn channel_std(&self) -> &[f64] {
        &self.channel_std
    }

    pub fn params(&self) -> &StatsParams {
        &self.params
    }

    pub fn pair_count(&self) -> usize {
        self.params.pair_count
    }

    pub fn perturb_alpha(&self) -> f64 {
        self.params.perturb_alpha
    }

    pub fn seed(&self) -> u64 {
        self.params.seed
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn key(&self) -> String {
        self.params.key(&self.fingerprint)
    }

    /// Channels with zero standard deviation; their rows are zero.
    pub fn inert_channels(&self) -> Vec<usize> {
        (0..self.channels)
            .filter(|c| self.channel_std[*c] == 0.0)
            .collect()
    }

    /// Errors unless these stats were computed for `backend`.
    pub fn check_backend(&self, backend: &BackendBundle) -> Result<()> {
        if self.fingerprint != backend.fingerprint() {
            return Err(EditError::InvalidArgument(format!(
                "stats belong to backend {} but {} is active",
                self.fingerprint,
                backend.fingerprint()
            )));
        }
        if self.geometry_hash != backend.geometry().fingerprint() {
            return Err(EditError::InvalidGeometry(
                "stats were computed for a different geometry".into(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = StatsHeader {
            fingerprint: self.fingerprint.clone(),
            geometry_hash: self.geometry_hash.clone(),
            seed: self.params.seed,
            sample_count: self.params.sample_count,
            pair_count: self.params.pair_count,
            perturb_alpha: self.params.perturb_alpha,
            channels: self.channels,
            embed_dim: self.embed_dim,
        };
        encode_framed(&header, &[&self.deltas, &self.channel_std])
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, mut blocks): (StatsHeader, _) = decode_framed(bytes, 2)?;
        let std = blocks.pop().unwrap();
        let deltas = blocks.pop().unwrap();
        if std.len() != h.channels {
            return Err(EditError::Format(format!(
                "header declares {} channels, found {}",
                h.channels,
                std.len()
            )));
        }
        // float32 storage can push a unit row a hair past 1.
        let deltas = renormalize_rows(deltas, h.embed_dim);
        Self::from_parts(
            deltas,
            std,
            h.embed_dim,
            StatsParams {
                sample_count: h.sample_count,
                pair_count: h.pair_count,
                perturb_alpha: h.perturb_alpha,
                seed: h.seed,
            },
            h.fingerprint,
            h.geometry_hash,
        )
    }
}

fn renormalize_rows(mut deltas: Vec<f64>, dim: usize) -> Vec<f64> {
    if dim == 0 {
        return deltas;
    }
    for row in deltas.chunks_exact_mut(dim) {
        let n = l2_norm(row);
        if n > 1.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    deltas
}

/// Population standard deviation of every style channel over `codes`.
pub fn style_channel_std(codes: &[StyleCode]) -> Vec<f64> {
    let Some(first) = codes.first() else {
        return Vec::new();
    };
    let n = codes.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for s in codes {
        mean.iter_mut()
            .zip(s.values())
            .for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; first.len()];
    for s in codes {
        for ((acc, v), m) in var.iter_mut().zip(s.values()).zip(&mean) {
            *acc += (v - m) * (v - m) / n;
        }
    }
    var.into_iter().map(f64::sqrt).collect()
}

/// Draws `count` style codes from the backend's latent prior.
pub fn sample_style_codes(
    backend: &BackendBundle,
    count: usize,
    seed: u64,
) -> Result<Vec<StyleCode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let w = backend.sample_latent(&mut rng);
            backend.wplus_to_style(&w)
        })
        .collect()
}

fn channel_row(
    backend: &BackendBundle,
    pairs: &[StyleCode],
    c: usize,
    sigma: f64,
    perturb_alpha: f64,
    dim: usize,
) -> Result<Vec<f64>> {
    let mut row = vec![0.0; dim];
    if sigma == 0.0 {
        return Ok(row);
    }
    let step = perturb_alpha * sigma;
    for s in pairs {
        let mut plus = s.values().to_vec();
        let mut minus = plus.clone();
        plus[c] += step;
        minus[c] -= step;
        let e_plus =
            backend.embed_image(&backend.generate_from_style(&StyleCode::from_values(plus)?)?)?;
        let e_minus =
            backend.embed_image(&backend.generate_from_style(&StyleCode::from_values(minus)?)?)?;
        let diff: Vec<f64> = e_plus
            .values()
            .iter()
            .zip(e_minus.values())
            .map(|(a, b)| a - b)
            .collect();
        let n = l2_norm(&diff);
        if n > 0.0 {
            row.iter_mut().zip(&diff).for_each(|(r, d)| *r += d / n);
        }
    }
    let count = pairs.len() as f64;
    row.iter_mut().for_each(|r| *r /= count);
    Ok(row)
}

/// Estimates the stats row of every channel.
///
/// Channel standard deviations come from `sample_count` prior draws; the
/// first `pair_count` of those codes are perturbed by `±perturb_alpha·σ_c`
/// along channel c. A pair whose two embeddings coincide contributes zero.
pub fn precompute_channel_stats(
    backend: &BackendBundle,
    params: &StatsParams,
    mut progress: impl FnMut(usize, usize),
) -> Result<ChannelStats> {
    params.validate()?;
    let geom: &LatentGeometry = backend.geometry();
    let codes = sample_style_codes(
        backend,
        params.sample_count.max(params.pair_count),
        params.seed,
    )?;
    let std = style_channel_std(&codes[..params.sample_count]);
    let pairs = &codes[..params.pair_count];
    let channels = geom.total_style_channels();
    let dim = backend.embed_dim();
    let mut deltas = vec![0.0; channels * dim];
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(channels.max(1));
    // Rows are independent, so splitting channels across threads leaves the
    // result bit-identical to a sequential run.
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = std::sync::mpsc::channel::<Result<(usize, Vec<f64>)>>();
        for t in 0..workers {
            let tx = tx.clone();
            let std = &std;
            scope.spawn(move || {
                for c in (t..channels).step_by(workers) {
                    let row = channel_row(backend, pairs, c, std[c], params.perturb_alpha, dim);
                    let failed = row.is_err();
                    if tx.send(row.map(|r| (c, r))).is_err() || failed {
                        return;
                    }
                }
            });
        }
        drop(tx);
        for (done, msg) in rx.iter().enumerate() {
            let (c, row) = msg?;
            deltas[c * dim..(c + 1) * dim].copy_from_slice(&row);
            progress(done + 1, channels);
        }
        Ok(())
    })?;
    log::debug!(
        "channel stats: {channels} channels, {} inert",
        std.iter().filter(|s| **s == 0.0).count()
    );
    ChannelStats::from_parts(
        deltas,
        std,
        dim,
        *params,
        backend.fingerprint(),
        geom.fingerprint(),
    )
}
