//! Image-space guidance terms: the text-driven cosine distance plus the
//! alternatives used by fixtures and ablations.

use crate::error::{EditError, Result};
use crate::gateway::{BackendBundle, ImageTensor, JointEmbedding};

/// A differentiable loss on a rendered image.
pub trait Guidance: Send + Sync {
    fn loss(&self, backend: &BackendBundle, img: &ImageTensor) -> Result<f64>;

    /// Loss and its gradient with respect to the image pixels.
    fn loss_and_grad(&self, backend: &BackendBundle, img: &ImageTensor) -> Result<(f64, Vec<f64>)>;
}

/// Cosine distance between the image embedding and a text embedding.
#[derive(Debug, Clone)]
pub struct TextGuidance {
    prompt: String,
    text: JointEmbedding,
}

impl TextGuidance {
    pub fn new(backend: &BackendBundle, prompt: &str) -> Result<Self> {
        if prompt.trim().is_empty() {
            return Err(EditError::InvalidArgument(
                "prompt must not be empty".into(),
            ));
        }
        Ok(TextGuidance {
            prompt: prompt.to_string(),
            text: backend.embed_text(prompt)?,
        })
    }

    /// Guidance towards an arbitrary unit embedding.
    pub fn from_embedding(label: impl Into<String>, text: JointEmbedding) -> Result<Self> {
        if !text.is_normalized() {
            return Err(EditError::InvalidArgument(
                "guidance embedding must be normalized".into(),
            ));
        }
        Ok(TextGuidance {
            prompt: label.into(),
            text,
        })
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn embedding(&self) -> &JointEmbedding {
        &self.text
    }
}

impl Guidance for TextGuidance {
    fn loss(&self, backend: &BackendBundle, img: &ImageTensor) -> Result<f64> {
        backend.clip_distance_to(img, &self.text)
    }

    fn loss_and_grad(&self, backend: &BackendBundle, img: &ImageTensor) -> Result<(f64, Vec<f64>)> {
        let loss = self.loss(backend, img)?;
        let grad_unit: Vec<f64> = self.text.values().iter().map(|t| -t).collect();
        Ok((loss, backend.embed_image_vjp(img, &grad_unit)?))
    }
}

/// `1 - <R(x), r>` against a fixed reference identity embedding. Replaces
/// the text term in the identity-only ablation.
#[derive(Debug, Clone)]
pub struct IdentityReference {
    reference: JointEmbedding,
}

impl IdentityReference {
    pub fn from_image(backend: &BackendBundle, reference: &ImageTensor) -> Result<Self> {
        Ok(IdentityReference {
            reference: backend.identity_embedding(reference)?,
        })
    }
}

impl Guidance for IdentityReference {
    fn loss(&self, backend: &BackendBundle, img: &ImageTensor) -> Result<f64> {
        Ok(1.0 - backend.identity_embedding(img)?.dot(&self.reference)?)
    }

    fn loss_and_grad(&self, backend: &BackendBundle, img: &ImageTensor) -> Result<(f64, Vec<f64>)> {
        let loss = self.loss(backend, img)?;
        let grad_unit: Vec<f64> = self.reference.values().iter().map(|r| -r).collect();
        Ok((loss, backend.identity_vjp(img, &grad_unit)?))
    }
}

/// `0.5 * |x - target|^2` on raw pixels. A quadratic stand-in for the text
/// term whose minimizer is available in closed form.
#[derive(Debug, Clone)]
pub struct PixelQuadratic {
    target: Vec<f64>,
}

impl PixelQuadratic {
    pub fn new(target: Vec<f64>) -> Self {
        PixelQuadratic { target }
    }

    fn residual(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.pixels().len() != self.target.len() {
            return Err(EditError::shape(
                format!("{} pixels", self.target.len()),
                format!("{}", img.pixels().len()),
            ));
        }
        Ok(img
            .pixels()
            .iter()
            .zip(&self.target)
            .map(|(x, y)| x - y)
            .collect())
    }
}

impl Guidance for PixelQuadratic {
    fn loss(&self, _backend: &BackendBundle, img: &ImageTensor) -> Result<f64> {
        Ok(0.5 * self.residual(img)?.iter().map(|r| r * r).sum::<f64>())
    }

    fn loss_and_grad(
        &self,
        _backend: &BackendBundle,
        img: &ImageTensor,
    ) -> Result<(f64, Vec<f64>)> {
        let r = self.residual(img)?;
        Ok((0.5 * r.iter().map(|v| v * v).sum::<f64>(), r))
    }
}
