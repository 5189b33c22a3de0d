//! Deterministic linear backend used as the oracle substrate for every
//! desk-scale test.
//!
//! * W+ to S: per-layer affine map `s_l = W_l w_l + b_l`.
//! * Generator over S: `pixels = clamp(offset + A s, 0, 1)`.
//! * Image embedder: `B (x - pixel_mean) + anchor * e_0`, normalized by the
//!   gateway. With a positive anchor, row 0 of `B` is zeroed so the
//!   image-dependent part of the embedding is orthogonal to the anchor axis.
//! * Text embedder: lookup table, with seeded pseudo-random vectors for
//!   sentences that are not in the table.
//! * Identity embedder: `C x`.
//! * Inverter: pseudo-inverse of the composed affine generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Generator, IdentityEmbedder, ImageEmbedder, ImageShape, ImageTensor, Inverter, StyleGenerator,
    TextEmbedder,
};
use crate::codec;
use crate::error::{EditError, Result};
use crate::latent::{LatentGeometry, StyleCode, WPlusCode};

/// How latent layers are mapped to style layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StyleMap {
    /// `W_l = I`; requires every style layer to be `latent_dim` wide.
    Identity,
    /// Gaussian weights with the given standard deviation.
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub geometry: LatentGeometry,
    pub image: ImageShape,
    pub embed_dim: usize,
    /// Width of the identity embedding; `None` disables the identity backend.
    #[serde(default)]
    pub identity_dim: Option<usize>,
    pub style_map: StyleMap,
    /// Standard deviation of the style bias entries (0 gives a zero bias).
    #[serde(default)]
    pub style_bias_scale: f64,
    /// Standard deviation of the entries of `A`.
    pub generator_scale: f64,
    #[serde(default)]
    pub pixel_offset: f64,
    /// Pixel value subtracted before the embedders.
    #[serde(default)]
    pub pixel_mean: f64,
    /// Magnitude of a constant embedding component on axis 0.
    #[serde(default)]
    pub embed_anchor: f64,
    /// Standard deviation of prior samples in W+.
    pub latent_prior_std: f64,
    #[serde(default = "default_true")]
    pub with_inverter: bool,
    /// Fixed text embeddings (raw, normalized by the gateway).
    #[serde(default)]
    pub text_table: BTreeMap<String, Vec<f64>>,
}

fn default_true() -> bool {
    true
}

impl ToyConfig {
    /// Small six-layer fixture used across the unit tests.
    pub fn small(seed: u64) -> Self {
        ToyConfig {
            seed,
            geometry: LatentGeometry::uniform(6, 4, [2, 4]).expect("valid geometry"),
            image: ImageShape::new(4, 4),
            embed_dim: 8,
            identity_dim: Some(6),
            style_map: StyleMap::Random { scale: 0.5 },
            style_bias_scale: 0.0,
            generator_scale: 0.05,
            pixel_offset: 0.5,
            pixel_mean: 0.45,
            embed_anchor: 0.0,
            latent_prior_std: 1.0,
            with_inverter: true,
            text_table: BTreeMap::new(),
        }
    }

    /// Eight layers of eight channels: a 64-channel style space.
    pub fn channels64(seed: u64) -> Self {
        ToyConfig {
            seed,
            geometry: LatentGeometry::uniform(8, 8, [2, 5]).expect("valid geometry"),
            image: ImageShape::new(8, 8),
            embed_dim: 16,
            identity_dim: Some(8),
            style_map: StyleMap::Random { scale: 0.4 },
            style_bias_scale: 0.0,
            generator_scale: 0.01,
            pixel_offset: 0.5,
            pixel_mean: 0.45,
            embed_anchor: 0.0,
            latent_prior_std: 1.0,
            with_inverter: true,
            text_table: BTreeMap::new(),
        }
    }

    pub fn with_text(mut self, sentence: impl Into<String>, vector: Vec<f64>) -> Self {
        self.text_table.insert(sentence.into(), vector);
        self
    }
}

/// Matrices of a toy backend. All row-major.
#[derive(Debug, Clone, PartialEq)]
struct ToyWeights {
    /// Per style layer: `count_l x latent_dim`.
    style_weights: Vec<Vec<f64>>,
    style_bias: Vec<f64>,
    /// `pixels x channels`.
    generator: Vec<f64>,
    /// `embed_dim x pixels`.
    embedder: Vec<f64>,
    /// `identity_dim x pixels`.
    identity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyLinearBackend {
    config: ToyConfig,
    weights: ToyWeights,
    /// Pseudo-inverse of the composed `pixels x wplus_len` generator map.
    pseudo_inverse: Option<DMatrix<f64>>,
    fingerprint: String,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    (0..rows)
        .map(|r| {
            m[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn matvec_t(m: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, yr) in y.iter().enumerate().take(rows) {
        if *yr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += a * yr;
        }
    }
    out
}

impl ToyLinearBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let weights = Self::sample_weights(&config)?;
        Self::from_weights(config, weights)
    }

    fn validate_config(config: &ToyConfig) -> Result<()> {
        config.geometry.validate()?;
        let geom = &config.geometry;
        if geom.style_channel_counts.len() != geom.num_layers {
            return Err(EditError::InvalidGeometry(
                "toy backend needs one style layer per latent layer".into(),
            ));
        }
        if matches!(config.style_map, StyleMap::Identity)
            && geom
                .style_channel_counts
                .iter()
                .any(|&c| c != geom.latent_dim)
        {
            return Err(EditError::InvalidGeometry(
                "identity style map needs style layers as wide as latent_dim".into(),
            ));
        }
        if config.embed_dim == 0 || config.image.pixel_len() == 0 {
            return Err(EditError::InvalidArgument(
                "embed_dim and image size must be positive".into(),
            ));
        }
        if config.embed_anchor < 0.0 || !config.embed_anchor.is_finite() {
            return Err(EditError::InvalidArgument(
                "embed_anchor must be >= 0".into(),
            ));
        }
        for (sentence, v) in &config.text_table {
            if v.len() != config.embed_dim {
                return Err(EditError::shape(
                    format!("text vector of dim {} for {sentence:?}", config.embed_dim),
                    format!("{}", v.len()),
                ));
            }
        }
        Ok(())
    }

    fn sample_weights(config: &ToyConfig) -> Result<ToyWeights> {
        Self::validate_config(config)?;
        let geom = &config.geometry;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = geom.latent_dim;
        let style_weights = geom
            .style_channel_counts
            .iter()
            .map(|&count| match config.style_map {
                StyleMap::Identity => {
                    let mut m = vec![0.0; count * d];
                    for i in 0..count {
                        m[i * d + i] = 1.0;
                    }
                    m
                }
                StyleMap::Random { scale } => gaussian(&mut rng, count * d, scale),
            })
            .collect();
        let channels = geom.total_style_channels();
        let pixels = config.image.pixel_len();
        let style_bias = gaussian(&mut rng, channels, config.style_bias_scale);
        let generator = gaussian(&mut rng, pixels * channels, config.generator_scale);
        let mut embedder = gaussian(
            &mut rng,
            config.embed_dim * pixels,
            1.0 / (pixels as f64).sqrt(),
        );
        if config.embed_anchor > 0.0 {
            embedder[..pixels].iter_mut().for_each(|v| *v = 0.0);
        }
        let identity = match config.identity_dim {
            Some(k) => gaussian(&mut rng, k * pixels, 1.0 / (pixels as f64).sqrt()),
            None => Vec::new(),
        };
        Ok(ToyWeights {
            style_weights,
            style_bias,
            generator,
            embedder,
            identity,
        })
    }

    fn from_weights(config: ToyConfig, weights: ToyWeights) -> Result<Self> {
        Self::validate_config(&config)?;
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&config)?);
        for block in weights.blocks() {
            for v in block {
                hasher.update(v.to_le_bytes());
            }
        }
        let fingerprint = format!("toy-{}", &hex::encode(hasher.finalize())[..16]);
        let mut backend = ToyLinearBackend {
            config,
            weights,
            pseudo_inverse: None,
            fingerprint,
        };
        if backend.config.with_inverter {
            backend.pseudo_inverse = Some(
                backend
                    .composed_map()
                    .pseudo_inverse(1e-12)
                    .map_err(|e| EditError::BackendUnavailable(format!("toy inverter: {e}")))?,
            );
        }
        Ok(backend)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn has_identity(&self) -> bool {
        self.config.identity_dim.is_some()
    }

    pub fn has_inverter(&self) -> bool {
        self.pseudo_inverse.is_some()
    }

    pub fn channels(&self) -> usize {
        self.config.geometry.total_style_channels()
    }

    pub fn pixel_len(&self) -> usize {
        self.config.image.pixel_len()
    }

    /// Generator matrix `A` (`pixels x channels`, row-major).
    pub fn generator_matrix(&self) -> &[f64] {
        &self.weights.generator
    }

    /// Image embedder matrix `B` (`embed_dim x pixels`, row-major).
    pub fn embedder_matrix(&self) -> &[f64] {
        &self.weights.embedder
    }

    /// Identity embedder matrix `C` (`identity_dim x pixels`, row-major).
    pub fn identity_matrix(&self) -> &[f64] {
        &self.weights.identity
    }

    pub fn style_weights(&self) -> &[Vec<f64>] {
        &self.weights.style_weights
    }

    pub fn style_bias(&self) -> &[f64] {
        &self.weights.style_bias
    }

    /// Pixel values before clamping.
    pub fn pre_clamp_pixels(&self, s: &[f64]) -> Vec<f64> {
        let mut pre = matvec(
            &self.weights.generator,
            self.pixel_len(),
            self.channels(),
            s,
        );
        pre.iter_mut().for_each(|p| *p += self.config.pixel_offset);
        pre
    }

    fn style_values(&self, w: &WPlusCode) -> Vec<f64> {
        let geom = &self.config.geometry;
        let d = geom.latent_dim;
        let mut s = Vec::with_capacity(geom.total_style_channels());
        for (layer, (weights, &count)) in self
            .weights
            .style_weights
            .iter()
            .zip(&geom.style_channel_counts)
            .enumerate()
        {
            s.extend(matvec(weights, count, d, w.layer(layer)));
        }
        s.iter_mut()
            .zip(&self.weights.style_bias)
            .for_each(|(v, b)| *v += b);
        s
    }

    fn render(&self, s: &[f64]) -> Result<ImageTensor> {
        let pixels = self
            .pre_clamp_pixels(s)
            .into_iter()
            .map(|p| p.clamp(0.0, 1.0))
            .collect();
        ImageTensor::new(self.config.image, pixels)
    }

    /// Composed affine generator `pixels = K w + c` without clamping, as a
    /// dense `pixels x wplus_len` matrix.
    fn composed_map(&self) -> DMatrix<f64> {
        let geom = &self.config.geometry;
        let d = geom.latent_dim;
        let pixels = self.pixel_len();
        let channels = self.channels();
        let a = DMatrix::from_row_slice(pixels, channels, &self.weights.generator);
        let mut m = DMatrix::zeros(channels, geom.wplus_len());
        let mut row = 0;
        for (layer, (weights, &count)) in self
            .weights
            .style_weights
            .iter()
            .zip(&geom.style_channel_counts)
            .enumerate()
        {
            for r in 0..count {
                for c in 0..d {
                    m[(row + r, layer * d + c)] = weights[r * d + c];
                }
            }
            row += count;
        }
        a * m
    }

    fn check_pixels(&self, img: &ImageTensor) -> Result<()> {
        if img.shape() != self.config.image {
            return Err(EditError::shape(
                format!("{:?}", self.config.image),
                format!("{:?}", img.shape()),
            ));
        }
        Ok(())
    }

    fn centered(&self, img: &ImageTensor) -> Vec<f64> {
        img.pixels()
            .iter()
            .map(|p| p - self.config.pixel_mean)
            .collect()
    }

    /// Writes the backend matrices as float32 blocks into `dir`.
    pub fn save_matrices(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let w = &self.weights;
        fs::write(
            dir.join("style_weights.bin"),
            codec::encode_block(&w.style_weights.concat()),
        )?;
        fs::write(
            dir.join("style_bias.bin"),
            codec::encode_block(&w.style_bias),
        )?;
        fs::write(dir.join("generator.bin"), codec::encode_block(&w.generator))?;
        fs::write(dir.join("embedder.bin"), codec::encode_block(&w.embedder))?;
        fs::write(dir.join("identity.bin"), codec::encode_block(&w.identity))?;
        Ok(())
    }

    /// Rebuilds a backend from matrices written by [`save_matrices`](Self::save_matrices).
    pub fn load_matrices(config: ToyConfig, dir: &Path) -> Result<Self> {
        Self::validate_config(&config)?;
        let read =
            |name: &str| -> Result<Vec<f64>> { codec::decode_block(&fs::read(dir.join(name))?) };
        let geom = &config.geometry;
        let d = geom.latent_dim;
        let flat_style = read("style_weights.bin")?;
        let channels = geom.total_style_channels();
        let pixels = config.image.pixel_len();
        let expect = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(EditError::shape(
                    format!("{want} values in {name}"),
                    format!("{got}"),
                ));
            }
            Ok(())
        };
        expect("style_weights.bin", flat_style.len(), channels * d)?;
        let mut style_weights = Vec::new();
        let mut offset = 0;
        for &count in &geom.style_channel_counts {
            style_weights.push(flat_style[offset..offset + count * d].to_vec());
            offset += count * d;
        }
        let weights = ToyWeights {
            style_weights,
            style_bias: read("style_bias.bin")?,
            generator: read("generator.bin")?,
            embedder: read("embedder.bin")?,
            identity: read("identity.bin")?,
        };
        expect("style_bias.bin", weights.style_bias.len(), channels)?;
        expect("generator.bin", weights.generator.len(), pixels * channels)?;
        expect(
            "embedder.bin",
            weights.embedder.len(),
            config.embed_dim * pixels,
        )?;
        expect(
            "identity.bin",
            weights.identity.len(),
            config.identity_dim.unwrap_or(0) * pixels,
        )?;
        Self::from_weights(config, weights)
    }
}

impl ToyWeights {
    fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.style_weights.iter().map(Vec::as_slice).chain([
            self.style_bias.as_slice(),
            &self.generator,
            &self.embedder,
            &self.identity,
        ])
    }
}

impl Generator for ToyLinearBackend {
    fn geometry(&self) -> &LatentGeometry {
        &self.config.geometry
    }

    fn image_shape(&self) -> ImageShape {
        self.config.image
    }

    fn generate(&self, w: &WPlusCode) -> Result<ImageTensor> {
        w.conforms(&self.config.geometry)?;
        self.render(&self.style_values(w))
    }

    fn generate_vjp(&self, w: &WPlusCode, grad_pixels: &[f64]) -> Result<Vec<f64>> {
        w.conforms(&self.config.geometry)?;
        let s = self.style_values(w);
        let pre = self.pre_clamp_pixels(&s);
        // Clamp passes gradients only where it is the identity.
        let masked: Vec<f64> = grad_pixels
            .iter()
            .zip(&pre)
            .map(|(g, p)| if (0.0..=1.0).contains(p) { *g } else { 0.0 })
            .collect();
        let grad_s = matvec_t(
            &self.weights.generator,
            self.pixel_len(),
            self.channels(),
            &masked,
        );
        let geom = &self.config.geometry;
        let d = geom.latent_dim;
        let mut grad_w = Vec::with_capacity(geom.wplus_len());
        let mut offset = 0;
        for (weights, &count) in self
            .weights
            .style_weights
            .iter()
            .zip(&geom.style_channel_counts)
        {
            grad_w.extend(matvec_t(weights, count, d, &grad_s[offset..offset + count]));
            offset += count;
        }
        Ok(grad_w)
    }

    fn sample_latent(&self, rng: &mut dyn RngCore) -> WPlusCode {
        let geom = &self.config.geometry;
        let values = (0..geom.wplus_len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * self.config.latent_prior_std
            })
            .collect();
        WPlusCode::from_values(geom.num_layers, geom.latent_dim, values)
            .expect("prior samples are finite")
    }
}

impl StyleGenerator for ToyLinearBackend {
    fn geometry(&self) -> &LatentGeometry {
        &self.config.geometry
    }

    fn to_style(&self, w: &WPlusCode) -> Result<StyleCode> {
        w.conforms(&self.config.geometry)?;
        StyleCode::from_values(self.style_values(w))
    }

    fn generate_style(&self, s: &StyleCode) -> Result<ImageTensor> {
        s.conforms(&self.config.geometry)?;
        self.render(s.values())
    }
}

impl ImageEmbedder for ToyLinearBackend {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        self.check_pixels(img)?;
        let mut v = matvec(
            &self.weights.embedder,
            self.config.embed_dim,
            self.pixel_len(),
            &self.centered(img),
        );
        v[0] += self.config.embed_anchor;
        Ok(v)
    }

    fn features_vjp(&self, img: &ImageTensor, grad_features: &[f64]) -> Result<Vec<f64>> {
        self.check_pixels(img)?;
        Ok(matvec_t(
            &self.weights.embedder,
            self.config.embed_dim,
            self.pixel_len(),
            grad_features,
        ))
    }
}

impl TextEmbedder for ToyLinearBackend {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn features(&self, sentence: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.config.text_table.get(sentence) {
            return Ok(v.clone());
        }
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(sentence.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        Ok(gaussian(&mut rng, self.config.embed_dim, 1.0))
    }
}

impl IdentityEmbedder for ToyLinearBackend {
    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        self.check_pixels(img)?;
        let k = self
            .config
            .identity_dim
            .ok_or(EditError::IdentityUnavailable)?;
        Ok(matvec(
            &self.weights.identity,
            k,
            self.pixel_len(),
            &self.centered(img),
        ))
    }

    fn features_vjp(&self, img: &ImageTensor, grad_features: &[f64]) -> Result<Vec<f64>> {
        self.check_pixels(img)?;
        let k = self
            .config
            .identity_dim
            .ok_or(EditError::IdentityUnavailable)?;
        Ok(matvec_t(
            &self.weights.identity,
            k,
            self.pixel_len(),
            grad_features,
        ))
    }
}

impl Inverter for ToyLinearBackend {
    fn invert(&self, img: &ImageTensor) -> Result<WPlusCode> {
        self.check_pixels(img)?;
        let pinv = self
            .pseudo_inverse
            .as_ref()
            .ok_or(EditError::InverterUnavailable)?;
        let offset = self.pre_clamp_pixels(&self.weights.style_bias);
        let target: Vec<f64> = img
            .pixels()
            .iter()
            .zip(&offset)
            .map(|(x, c)| x - c)
            .collect();
        let target = nalgebra::DVector::from_vec(target);
        let w = pinv * target;
        let geom = &self.config.geometry;
        WPlusCode::from_values(geom.num_layers, geom.latent_dim, w.as_slice().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendBundle;

    #[test]
    fn style_map_identity_flattens_w() {
        let mut cfg = ToyConfig::small(3);
        cfg.style_map = StyleMap::Identity;
        let backend = ToyLinearBackend::new(cfg).unwrap();
        let w = WPlusCode::from_values(6, 4, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let s = backend.to_style(&w).unwrap();
        assert_eq!(s.values(), w.values());
    }

    #[test]
    fn identity_style_map_requires_matching_widths() {
        let mut cfg = ToyConfig::small(3);
        cfg.style_map = StyleMap::Identity;
        cfg.geometry = LatentGeometry::new(6, 4, vec![4, 4, 3, 4, 4, 4], [2, 4]).unwrap();
        assert!(ToyLinearBackend::new(cfg).is_err());
    }

    #[test]
    fn same_seed_same_fingerprint() {
        let a = ToyLinearBackend::new(ToyConfig::small(11)).unwrap();
        let b = ToyLinearBackend::new(ToyConfig::small(11)).unwrap();
        let c = ToyLinearBackend::new(ToyConfig::small(12)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn matrices_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = ToyLinearBackend::new(ToyConfig::small(5)).unwrap();
        a.save_matrices(dir.path()).unwrap();
        let b = ToyLinearBackend::load_matrices(ToyConfig::small(5), dir.path()).unwrap();
        for (x, y) in a.generator_matrix().iter().zip(b.generator_matrix()) {
            assert_eq!(*x as f32, *y as f32);
        }
        let mut wrong = ToyConfig::small(5);
        wrong.embed_dim = 9;
        assert!(ToyLinearBackend::load_matrices(wrong, dir.path()).is_err());
    }

    #[test]
    fn unknown_sentences_are_seeded_and_stable() {
        let backend = ToyLinearBackend::new(ToyConfig::small(1)).unwrap();
        let a = TextEmbedder::features(&backend, "a photo of a dog").unwrap();
        let b = TextEmbedder::features(&backend, "a photo of a dog").unwrap();
        let c = TextEmbedder::features(&backend, "a photo of a cat").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn anchor_zeroes_first_embedder_row() {
        let mut cfg = ToyConfig::small(2);
        cfg.embed_anchor = 100.0;
        cfg.pixel_mean = cfg.pixel_offset;
        let backend = ToyLinearBackend::new(cfg).unwrap();
        let pixels = backend.pixel_len();
        assert!(backend.embedder_matrix()[..pixels]
            .iter()
            .all(|v| *v == 0.0));
        let bundle = BackendBundle::toy(backend);
        let img = bundle
            .generate_from_wplus(&WPlusCode::zeros_for(bundle.geometry()))
            .unwrap();
        let e = bundle.embed_image(&img).unwrap();
        assert!((e.values()[0] - 1.0).abs() < 1e-12);
    }
}
