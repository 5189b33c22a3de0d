use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Self {
        ImageShape { height, width }
    }

    /// Number of scalars in an RGB image of this shape.
    pub fn pixel_len(&self) -> usize {
        self.height * self.width * 3
    }
}

/// `H x W x 3` image with channel values in `[0, 1]`, stored row-major
/// (height, width, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: ImageShape,
    pixels: Vec<f64>,
    pub source: Option<String>,
}

impl ImageTensor {
    pub fn new(shape: ImageShape, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.pixel_len() {
            return Err(EditError::shape(
                format!("{} pixel values", shape.pixel_len()),
                format!("{}", pixels.len()),
            ));
        }
        if let Some(i) = pixels
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(EditError::Image(format!(
                "pixel value {} at {i} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(ImageTensor {
            shape,
            pixels,
            source: None,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Quantizes to 8 bits per channel and encodes as PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = RgbImage::from_raw(self.shape.width as u32, self.shape.height as u32, raw)
            .ok_or_else(|| EditError::Image("pixel buffer does not match shape".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| EditError::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decodes a PNG (any color type) into an RGB tensor.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| EditError::Image(e.to_string()))?;
        let rgb = decoded.to_rgb8();
        let shape = ImageShape::new(rgb.height() as usize, rgb.width() as usize);
        let pixels = rgb
            .into_raw()
            .into_iter()
            .map(|b| b as f64 / 255.0)
            .collect();
        ImageTensor::new(shape, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let shape = ImageShape::new(2, 3);
        let pixels = (0..18).map(|i| (i * 14) as f64 / 255.0).collect();
        let img = ImageTensor::new(shape, pixels).unwrap();
        let back = ImageTensor::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back.shape(), shape);
        assert_eq!(back.pixels(), img.pixels());
    }

    #[test]
    fn rejects_out_of_range_and_garbage() {
        assert!(ImageTensor::new(ImageShape::new(1, 1), vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(ImageShape::new(1, 1), vec![0.0]).is_err());
        assert!(ImageTensor::from_png(b"not a png").is_err());
    }
}
