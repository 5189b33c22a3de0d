//! Contracts for the pretrained components (generators, joint image/text
//! embedders, identity embedder, inverter) and the bundle that ties one
//! consistent set of them together.
//!
//! Every embedding that leaves the gateway is unit-normalized here, whatever
//! the adapter returns. Adapters used for gradient-based editing also expose
//! vector-Jacobian products so losses can be pulled back to latent codes.

mod config;
mod image;
mod toy;

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::latent::{LatentGeometry, StyleCode, WPlusCode};

pub use self::config::{BackendConfig, RealWeights};
pub use self::image::{ImageShape, ImageTensor};
pub use self::toy::{StyleMap, ToyConfig, ToyLinearBackend};

/// Unit-norm tolerance on embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Generator over W+.
pub trait Generator: Send + Sync {
    fn geometry(&self) -> &LatentGeometry;
    fn image_shape(&self) -> ImageShape;
    fn generate(&self, w: &WPlusCode) -> Result<ImageTensor>;
    /// Pulls a gradient with respect to the output pixels back to the
    /// flattened W+ code.
    fn generate_vjp(&self, w: &WPlusCode, grad_pixels: &[f64]) -> Result<Vec<f64>>;
    /// Draws a code from the generator's latent prior.
    fn sample_latent(&self, rng: &mut dyn RngCore) -> WPlusCode;
}

/// Generator over the style space S, plus the W+ to S affine map.
pub trait StyleGenerator: Send + Sync {
    fn geometry(&self) -> &LatentGeometry;
    fn to_style(&self, w: &WPlusCode) -> Result<StyleCode>;
    fn generate_style(&self, s: &StyleCode) -> Result<ImageTensor>;
}

/// Image tower of the joint embedding. Returns raw (pre-normalization)
/// features.
pub trait ImageEmbedder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>>;
    fn features_vjp(&self, img: &ImageTensor, grad_features: &[f64]) -> Result<Vec<f64>>;
}

/// Text tower of the joint embedding. Returns raw features.
pub trait TextEmbedder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn features(&self, sentence: &str) -> Result<Vec<f64>>;
}

/// Face-recognition embedder. Returns raw features.
pub trait IdentityEmbedder: Send + Sync {
    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>>;
    fn features_vjp(&self, img: &ImageTensor, grad_features: &[f64]) -> Result<Vec<f64>>;
}

/// Encoder from images to W+ codes.
pub trait Inverter: Send + Sync {
    fn invert(&self, img: &ImageTensor) -> Result<WPlusCode>;
}

/// Vector in the joint language-image embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEmbedding {
    values: Vec<f64>,
    normalized: bool,
}

impl JointEmbedding {
    /// Normalizes `values` to unit length. Fails on a zero or non-finite vector.
    pub fn normalize(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() {
            return Err(EditError::NonFinite("embedding norm".into()));
        }
        if norm == 0.0 {
            return Err(EditError::InvalidArgument(
                "cannot normalize a zero embedding".into(),
            ));
        }
        Ok(JointEmbedding {
            values: values.into_iter().map(|v| v / norm).collect(),
            normalized: true,
        })
    }

    /// Wraps raw values without normalizing.
    pub fn raw(values: Vec<f64>) -> Self {
        JointEmbedding {
            values,
            normalized: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &JointEmbedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(EditError::shape(
                format!("embedding of dim {}", self.dim()),
                format!("{}", other.dim()),
            ));
        }
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Gradient of `v / |v|` pulled back from a gradient on the unit vector.
pub(crate) fn normalize_vjp(raw: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let norm = l2_norm(raw);
    if norm == 0.0 {
        return vec![0.0; raw.len()];
    }
    let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let along = dot(&unit, grad_unit);
    grad_unit
        .iter()
        .zip(&unit)
        .map(|(g, u)| (g - along * u) / norm)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Real,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Toy => "toy",
            BackendKind::Real => "real",
        }
    }
}

/// One consistent set of backend components.
#[derive(Clone)]
pub struct BackendBundle {
    kind: BackendKind,
    fingerprint: String,
    geometry: LatentGeometry,
    generator: Arc<dyn Generator>,
    styles: Arc<dyn StyleGenerator>,
    image_embedder: Arc<dyn ImageEmbedder>,
    text_embedder: Arc<dyn TextEmbedder>,
    identity: Option<Arc<dyn IdentityEmbedder>>,
    inverter: Option<Arc<dyn Inverter>>,
}

impl std::fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendBundle")
            .field("kind", &self.kind)
            .field("fingerprint", &self.fingerprint)
            .field("geometry", &self.geometry)
            .field("identity", &self.identity.is_some())
            .field("inverter", &self.inverter.is_some())
            .finish()
    }
}

impl BackendBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: BackendKind,
        fingerprint: String,
        generator: Arc<dyn Generator>,
        styles: Arc<dyn StyleGenerator>,
        image_embedder: Arc<dyn ImageEmbedder>,
        text_embedder: Arc<dyn TextEmbedder>,
        identity: Option<Arc<dyn IdentityEmbedder>>,
        inverter: Option<Arc<dyn Inverter>>,
    ) -> Result<Self> {
        let geometry = generator.geometry().clone();
        geometry.validate()?;
        if styles.geometry() != &geometry {
            return Err(EditError::InvalidGeometry(
                "generator and style generator disagree on geometry".into(),
            ));
        }
        if image_embedder.embed_dim() != text_embedder.embed_dim() {
            return Err(EditError::shape(
                format!("text embed_dim {}", image_embedder.embed_dim()),
                format!("{}", text_embedder.embed_dim()),
            ));
        }
        Ok(BackendBundle {
            kind,
            fingerprint,
            geometry,
            generator,
            styles,
            image_embedder,
            text_embedder,
            identity,
            inverter,
        })
    }

    /// Bundle backed entirely by one toy linear backend.
    pub fn toy(backend: ToyLinearBackend) -> Self {
        let fingerprint = backend.fingerprint().to_string();
        let has_identity = backend.has_identity();
        let has_inverter = backend.has_inverter();
        let shared = Arc::new(backend);
        let identity: Option<Arc<dyn IdentityEmbedder>> = if has_identity {
            Some(shared.clone())
        } else {
            None
        };
        let inverter: Option<Arc<dyn Inverter>> = if has_inverter {
            Some(shared.clone())
        } else {
            None
        };
        BackendBundle::new(
            BackendKind::Toy,
            fingerprint,
            shared.clone(),
            shared.clone(),
            shared.clone(),
            shared,
            identity,
            inverter,
        )
        .expect("toy backend components are consistent")
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn geometry(&self) -> &LatentGeometry {
        &self.geometry
    }

    pub fn embed_dim(&self) -> usize {
        self.image_embedder.embed_dim()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.generator.image_shape()
    }

    pub fn has_identity(&self) -> bool {
        self.identity.is_some()
    }

    pub fn has_inverter(&self) -> bool {
        self.inverter.is_some()
    }

    pub fn generator(&self) -> &dyn Generator {
        self.generator.as_ref()
    }

    pub fn generate_from_wplus(&self, w: &WPlusCode) -> Result<ImageTensor> {
        w.conforms(&self.geometry)?;
        self.generator.generate(w)
    }

    pub fn generate_from_style(&self, s: &StyleCode) -> Result<ImageTensor> {
        s.conforms(&self.geometry)?;
        self.styles.generate_style(s)
    }

    pub fn wplus_to_style(&self, w: &WPlusCode) -> Result<StyleCode> {
        w.conforms(&self.geometry)?;
        self.styles.to_style(w)
    }

    pub fn sample_latent(&self, rng: &mut dyn RngCore) -> WPlusCode {
        self.generator.sample_latent(rng)
    }

    /// Pulls a pixel gradient back to W+ through the generator.
    pub fn generate_vjp(&self, w: &WPlusCode, grad_pixels: &[f64]) -> Result<Vec<f64>> {
        w.conforms(&self.geometry)?;
        if grad_pixels.len() != self.image_shape().pixel_len() {
            return Err(EditError::shape(
                format!("{} pixel gradients", self.image_shape().pixel_len()),
                format!("{}", grad_pixels.len()),
            ));
        }
        self.generator.generate_vjp(w, grad_pixels)
    }

    pub fn embed_image(&self, img: &ImageTensor) -> Result<JointEmbedding> {
        JointEmbedding::normalize(self.image_embedder.features(img)?)
    }

    /// Pulls a gradient on the unit image embedding back to pixels.
    pub fn embed_image_vjp(&self, img: &ImageTensor, grad_unit: &[f64]) -> Result<Vec<f64>> {
        let raw = self.image_embedder.features(img)?;
        let grad_raw = normalize_vjp(&raw, grad_unit);
        self.image_embedder.features_vjp(img, &grad_raw)
    }

    pub fn embed_text(&self, sentence: &str) -> Result<JointEmbedding> {
        JointEmbedding::normalize(self.text_embedder.features(sentence)?)
    }

    /// Cosine distance `1 - <embed_image(img), embed_text(sentence)>`.
    pub fn clip_distance(&self, img: &ImageTensor, sentence: &str) -> Result<f64> {
        let text = self.embed_text(sentence)?;
        self.clip_distance_to(img, &text)
    }

    /// Cosine distance against an already embedded text.
    pub fn clip_distance_to(&self, img: &ImageTensor, text: &JointEmbedding) -> Result<f64> {
        let image = self.embed_image(img)?;
        Ok((1.0 - image.dot(text)?).clamp(0.0, 2.0))
    }

    fn identity_backend(&self) -> Result<&dyn IdentityEmbedder> {
        self.identity
            .as_deref()
            .ok_or(EditError::IdentityUnavailable)
    }

    /// Unit-normalized identity embedding of an image.
    pub fn identity_embedding(&self, img: &ImageTensor) -> Result<JointEmbedding> {
        JointEmbedding::normalize(self.identity_backend()?.features(img)?)
    }

    /// Pulls a gradient on the unit identity embedding back to pixels.
    pub fn identity_vjp(&self, img: &ImageTensor, grad_unit: &[f64]) -> Result<Vec<f64>> {
        let backend = self.identity_backend()?;
        let raw = backend.features(img)?;
        backend.features_vjp(img, &normalize_vjp(&raw, grad_unit))
    }

    /// `1 - <R(G(w_source)), R(G(w_candidate))>` with both identity
    /// embeddings re-normalized.
    pub fn identity_loss(&self, w_source: &WPlusCode, w_candidate: &WPlusCode) -> Result<f64> {
        self.identity_backend()?;
        let source = self.identity_embedding(&self.generate_from_wplus(w_source)?)?;
        let candidate = self.identity_embedding(&self.generate_from_wplus(w_candidate)?)?;
        Ok(1.0 - source.dot(&candidate)?)
    }

    pub fn invert_image(&self, img: &ImageTensor) -> Result<WPlusCode> {
        let inverter = self
            .inverter
            .as_deref()
            .ok_or(EditError::InverterUnavailable)?;
        let w = inverter.invert(img)?;
        w.conforms(&self.geometry)?;
        Ok(w)
    }
}
