//! Latent-space data model: extended (per-layer) latent codes, flat style
//! codes, sparse style directions, and the coarse/medium/fine layer grouping.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EditError, Result};

/// Layer layout shared by every latent code and style code of one generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGeometry {
    pub num_layers: usize,
    pub latent_dim: usize,
    /// Channel width of each style layer. The number of style layers is
    /// backend-defined and need not equal `num_layers`.
    pub style_channel_counts: Vec<usize>,
    /// Two cut indices: coarse = `0..b0`, medium = `b0..b1`, fine = `b1..num_layers`.
    pub group_boundaries: [usize; 2],
}

/// One of the three layer groups a W+ code is split into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    Coarse,
    Medium,
    Fine,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Coarse, LayerGroup::Medium, LayerGroup::Fine];

    pub fn index(self) -> usize {
        match self {
            LayerGroup::Coarse => 0,
            LayerGroup::Medium => 1,
            LayerGroup::Fine => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Coarse => "coarse",
            LayerGroup::Medium => "medium",
            LayerGroup::Fine => "fine",
        }
    }
}

impl std::str::FromStr for LayerGroup {
    type Err = EditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(LayerGroup::Coarse),
            "medium" => Ok(LayerGroup::Medium),
            "fine" => Ok(LayerGroup::Fine),
            other => Err(EditError::InvalidArgument(format!(
                "unknown layer group {other:?}"
            ))),
        }
    }
}

impl LatentGeometry {
    /// Builds and validates a geometry.
    pub fn new(
        num_layers: usize,
        latent_dim: usize,
        style_channel_counts: Vec<usize>,
        group_boundaries: [usize; 2],
    ) -> Result<Self> {
        let geom = LatentGeometry {
            num_layers,
            latent_dim,
            style_channel_counts,
            group_boundaries,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Geometry whose style space has one layer-sized block of `latent_dim`
    /// channels per layer.
    pub fn uniform(
        num_layers: usize,
        latent_dim: usize,
        group_boundaries: [usize; 2],
    ) -> Result<Self> {
        Self::new(
            num_layers,
            latent_dim,
            vec![latent_dim; num_layers],
            group_boundaries,
        )
    }

    /// 18 layers of 512 with the conventional (4, 8) cut points.
    pub fn stylegan_1024() -> Self {
        // Input widths of the 17 modulated convolutions of a 1024px
        // synthesis network; tRGB layers are excluded.
        let counts = vec![
            512, 512, 512, 512, 512, 512, 512, 512, 512, 512, 256, 256, 128, 128, 64, 64, 32,
        ];
        LatentGeometry {
            num_layers: 18,
            latent_dim: 512,
            style_channel_counts: counts,
            group_boundaries: [4, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(EditError::InvalidGeometry(
                "num_layers must be positive".into(),
            ));
        }
        if self.latent_dim == 0 {
            return Err(EditError::InvalidGeometry(
                "latent_dim must be positive".into(),
            ));
        }
        let [b0, b1] = self.group_boundaries;
        if b0 >= b1 {
            return Err(EditError::InvalidGeometry(format!(
                "group boundaries must be strictly increasing, got ({b0}, {b1})"
            )));
        }
        if b0 < 1 || b1 > self.num_layers - 1 {
            return Err(EditError::InvalidGeometry(format!(
                "group boundaries ({b0}, {b1}) must lie within [1, {}]",
                self.num_layers.saturating_sub(1)
            )));
        }
        if self.style_channel_counts.is_empty() {
            return Err(EditError::InvalidGeometry(
                "no style layers declared".into(),
            ));
        }
        if self.style_channel_counts.contains(&0) {
            return Err(EditError::InvalidGeometry(
                "style channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_style_channels(&self) -> usize {
        self.style_channel_counts.iter().sum()
    }

    /// Number of scalars in a flattened W+ code.
    pub fn wplus_len(&self) -> usize {
        self.num_layers * self.latent_dim
    }

    /// Layer range covered by `group`.
    pub fn group_layers(&self, group: LayerGroup) -> Range<usize> {
        let [b0, b1] = self.group_boundaries;
        match group {
            LayerGroup::Coarse => 0..b0,
            LayerGroup::Medium => b0..b1,
            LayerGroup::Fine => b1..self.num_layers,
        }
    }

    /// Flat offset of the first style channel of each layer, plus the total
    /// as a trailing entry.
    pub fn style_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers + 1);
        let mut acc = 0;
        offsets.push(0);
        for &c in &self.style_channel_counts {
            acc += c;
            offsets.push(acc);
        }
        offsets
    }

    /// Maps a flat style channel index to `(layer, channel within layer)`.
    pub fn locate_channel(&self, channel: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (layer, &count) in self.style_channel_counts.iter().enumerate() {
            if channel < start + count {
                return Some((layer, channel - start));
            }
            start += count;
        }
        None
    }

    /// Stable content hash, used to bind checkpoints and stats to a geometry.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("geometry serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

/// Extended latent code: a `layers x latent_dim` matrix stored row-major.
///
/// Also used for the per-group slices produced by [`split_wplus`], which are
/// simply codes with fewer layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WPlusCode {
    layers: usize,
    latent_dim: usize,
    values: Vec<f64>,
}

impl WPlusCode {
    pub fn from_values(layers: usize, latent_dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * latent_dim {
            return Err(EditError::shape(
                format!("{layers}x{latent_dim} = {} values", layers * latent_dim),
                format!("{} values", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EditError::NonFinite(format!(
                "W+ entry {i} is {}",
                values[i]
            )));
        }
        Ok(WPlusCode {
            layers,
            latent_dim,
            values,
        })
    }

    pub fn zeros(layers: usize, latent_dim: usize) -> Self {
        WPlusCode {
            layers,
            latent_dim,
            values: vec![0.0; layers * latent_dim],
        }
    }

    pub fn zeros_for(geom: &LatentGeometry) -> Self {
        Self::zeros(geom.num_layers, geom.latent_dim)
    }

    /// Broadcasts a single W vector to every layer.
    pub fn broadcast(w: &[f64], layers: usize) -> Result<Self> {
        let values = w.iter().copied().cycle().take(w.len() * layers).collect();
        Self::from_values(layers, w.len(), values)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        &self.values[index * self.latent_dim..(index + 1) * self.latent_dim]
    }

    pub fn conforms(&self, geom: &LatentGeometry) -> Result<()> {
        if self.layers != geom.num_layers || self.latent_dim != geom.latent_dim {
            return Err(EditError::shape(
                format!("{}x{}", geom.num_layers, geom.latent_dim),
                format!("{}x{}", self.layers, self.latent_dim),
            ));
        }
        Ok(())
    }

    fn same_shape(&self, other: &WPlusCode) -> Result<()> {
        if self.layers != other.layers || self.latent_dim != other.latent_dim {
            return Err(EditError::shape(
                format!("{}x{}", self.layers, self.latent_dim),
                format!("{}x{}", other.layers, other.latent_dim),
            ));
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn add(&self, other: &WPlusCode) -> Result<WPlusCode> {
        self.same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        WPlusCode::from_values(self.layers, self.latent_dim, values)
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &WPlusCode) -> Result<WPlusCode> {
        self.same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        WPlusCode::from_values(self.layers, self.latent_dim, values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Splits a conforming W+ code into its coarse, medium and fine slices.
pub fn split_wplus(
    w: &WPlusCode,
    geom: &LatentGeometry,
) -> Result<(WPlusCode, WPlusCode, WPlusCode)> {
    geom.validate()?;
    w.conforms(geom)?;
    let d = geom.latent_dim;
    let slice = |group: LayerGroup| {
        let layers = geom.group_layers(group);
        WPlusCode {
            layers: layers.len(),
            latent_dim: d,
            values: w.values[layers.start * d..layers.end * d].to_vec(),
        }
    };
    Ok((
        slice(LayerGroup::Coarse),
        slice(LayerGroup::Medium),
        slice(LayerGroup::Fine),
    ))
}

/// Inverse of [`split_wplus`].
pub fn merge_wplus(
    coarse: &WPlusCode,
    medium: &WPlusCode,
    fine: &WPlusCode,
    geom: &LatentGeometry,
) -> Result<WPlusCode> {
    geom.validate()?;
    let mut values = Vec::with_capacity(geom.wplus_len());
    for (group, part) in LayerGroup::ALL.into_iter().zip([coarse, medium, fine]) {
        let expected = geom.group_layers(group).len();
        if part.layers != expected || part.latent_dim != geom.latent_dim {
            return Err(EditError::shape(
                format!("{} slice of {}x{}", group.name(), expected, geom.latent_dim),
                format!("{}x{}", part.layers, part.latent_dim),
            ));
        }
        values.extend_from_slice(&part.values);
    }
    WPlusCode::from_values(geom.num_layers, geom.latent_dim, values)
}

/// Flat style-space activation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    values: Vec<f64>,
}

impl StyleCode {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EditError::NonFinite(format!(
                "style entry {i} is {}",
                values[i]
            )));
        }
        Ok(StyleCode { values })
    }

    pub fn for_geometry(geom: &LatentGeometry, values: Vec<f64>) -> Result<Self> {
        let code = Self::from_values(values)?;
        code.conforms(geom)?;
        Ok(code)
    }

    pub fn zeros(geom: &LatentGeometry) -> Self {
        StyleCode {
            values: vec![0.0; geom.total_style_channels()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn conforms(&self, geom: &LatentGeometry) -> Result<()> {
        let expected = geom.total_style_channels();
        if self.values.len() != expected {
            return Err(EditError::shape(
                format!("{expected} style channels"),
                format!("{}", self.values.len()),
            ));
        }
        Ok(())
    }
}

/// Direction in style space; usually sparse.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StyleDirection {
    values: Vec<f64>,
    active_count: usize,
}

impl StyleDirection {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EditError::NonFinite(format!(
                "direction entry {i} is {}",
                values[i]
            )));
        }
        let active_count = values.iter().filter(|v| **v != 0.0).count();
        Ok(StyleDirection {
            values,
            active_count,
        })
    }

    pub fn zeros(len: usize) -> Self {
        StyleDirection {
            values: vec![0.0; len],
            active_count: 0,
        }
    }

    /// Direction that is zero except for `value` at `channel`.
    pub fn one_hot(len: usize, channel: usize, value: f64) -> Result<Self> {
        if channel >= len {
            return Err(EditError::InvalidArgument(format!(
                "channel {channel} out of range for {len} channels"
            )));
        }
        let mut values = vec![0.0; len];
        values[channel] = value;
        Self::from_values(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    /// Indices of nonzero channels in ascending order.
    pub fn active_channels(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sets one channel, keeping the active count in sync.
    pub fn set(&mut self, channel: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(EditError::NonFinite(format!("direction value {value}")));
        }
        let slot = self
            .values
            .get_mut(channel)
            .ok_or_else(|| EditError::InvalidArgument(format!("channel {channel} out of range")))?;
        match (*slot != 0.0, value != 0.0) {
            (false, true) => self.active_count += 1,
            (true, false) => self.active_count -= 1,
            _ => {}
        }
        *slot = value;
        Ok(())
    }
}

/// `s + alpha * d`.
pub fn add_direction(s: &StyleCode, d: &StyleDirection, alpha: f64) -> Result<StyleCode> {
    if !alpha.is_finite() {
        return Err(EditError::NonFinite(format!("alpha = {alpha}")));
    }
    if s.len() != d.len() {
        return Err(EditError::shape(
            format!("direction of {} channels", s.len()),
            format!("{}", d.len()),
        ));
    }
    let values = s
        .values
        .iter()
        .zip(&d.values)
        .map(|(si, di)| si + alpha * di)
        .collect();
    StyleCode::from_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(layers: usize, dim: usize) -> WPlusCode {
        let values = (0..layers * dim).map(|i| i as f64 * 0.5 - 3.0).collect();
        WPlusCode::from_values(layers, dim, values).unwrap()
    }

    #[test]
    fn split_eighteen_layers_default_boundaries() {
        let geom = LatentGeometry::uniform(18, 4, [4, 8]).unwrap();
        let (c, m, f) = split_wplus(&ramp(18, 4), &geom).unwrap();
        assert_eq!((c.layers(), m.layers(), f.layers()), (4, 4, 10));
    }

    #[test]
    fn split_six_layer_toy() {
        let geom = LatentGeometry::uniform(6, 3, [2, 4]).unwrap();
        let (c, m, f) = split_wplus(&ramp(6, 3), &geom).unwrap();
        assert_eq!((c.layers(), m.layers(), f.layers()), (2, 2, 2));
        assert_eq!(c.layer(1), ramp(6, 3).layer(1));
        assert_eq!(f.layer(0), ramp(6, 3).layer(4));
    }

    #[test]
    fn non_increasing_boundaries_rejected() {
        let err = LatentGeometry::uniform(18, 4, [8, 4]).unwrap_err();
        assert!(matches!(err, EditError::InvalidGeometry(_)));
        assert!(LatentGeometry::uniform(18, 4, [0, 4]).is_err());
        assert!(LatentGeometry::uniform(18, 4, [4, 18]).is_err());
        assert!(LatentGeometry::new(3, 4, vec![4, 0, 4], [1, 2]).is_err());
        assert!(LatentGeometry::new(3, 4, vec![], [1, 2]).is_err());
    }

    #[test]
    fn split_rejects_wrong_shape() {
        let geom = LatentGeometry::uniform(6, 3, [2, 4]).unwrap();
        assert!(split_wplus(&ramp(5, 3), &geom).is_err());
    }

    #[test]
    fn merge_rejects_wrong_slices() {
        let geom = LatentGeometry::uniform(6, 3, [2, 4]).unwrap();
        let (c, m, f) = split_wplus(&ramp(6, 3), &geom).unwrap();
        assert!(merge_wplus(&m, &c, &f.clone(), &geom).is_ok()); // 2/2/2 all same size
        let wide = WPlusCode::zeros(3, 3);
        assert!(merge_wplus(&c, &m, &wide, &geom).is_err());
        let narrow = WPlusCode::zeros(2, 2);
        assert!(merge_wplus(&narrow, &m, &f, &geom).is_err());
    }

    #[test]
    fn merge_all_zero_slices() {
        let geom = LatentGeometry::uniform(18, 4, [4, 8]).unwrap();
        let w = merge_wplus(
            &WPlusCode::zeros(4, 4),
            &WPlusCode::zeros(4, 4),
            &WPlusCode::zeros(10, 4),
            &geom,
        )
        .unwrap();
        assert_eq!(w, WPlusCode::zeros_for(&geom));
    }

    #[test]
    fn add_direction_cases() {
        let geom = LatentGeometry::new(3, 2, vec![2, 2, 2], [1, 2]).unwrap();
        let s = StyleCode::for_geometry(&geom, vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0]).unwrap();
        let d = StyleDirection::from_values(vec![0.0, 1.0, 0.0, -0.5, 0.0, 2.0]).unwrap();
        assert_eq!(add_direction(&s, &d, 0.0).unwrap(), s);
        let twice = add_direction(&add_direction(&s, &d, 1.0).unwrap(), &d, 1.0).unwrap();
        let once = add_direction(&s, &d, 2.0).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(add_direction(&s, &d, f64::NAN).is_err());
        assert!(add_direction(&s, &StyleDirection::zeros(3), 1.0).is_err());
    }

    #[test]
    fn one_hot_perturbation_of_sigma_times_five() {
        let s = StyleCode::from_values(vec![0.1, 0.2, 0.3]).unwrap();
        let sigma = 0.7;
        let d = StyleDirection::one_hot(3, 1, sigma).unwrap();
        let out = add_direction(&s, &d, 5.0).unwrap();
        assert_eq!(out.values(), &[0.1, 0.2 + 5.0 * sigma, 0.3]);
    }

    #[test]
    fn direction_active_count_tracks_mutation() {
        let mut d = StyleDirection::from_values(vec![0.0, 1.0, 0.0, -2.0]).unwrap();
        assert_eq!(d.active_count(), 2);
        d.set(0, 0.5).unwrap();
        assert_eq!(d.active_count(), 3);
        d.set(1, 0.0).unwrap();
        assert_eq!(d.active_count(), 2);
        d.set(1, 0.0).unwrap();
        assert_eq!(d.active_count(), 2);
        assert_eq!(d.active_channels(), vec![0, 3]);
        assert!(d.set(9, 1.0).is_err());
        assert!(d.set(0, f64::INFINITY).is_err());
    }

    #[test]
    fn rejects_non_finite_codes() {
        assert!(WPlusCode::from_values(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(StyleCode::from_values(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn locate_channel_uses_offsets() {
        let geom = LatentGeometry::new(3, 2, vec![2, 3, 1], [1, 2]).unwrap();
        assert_eq!(geom.style_offsets(), vec![0, 2, 5, 6]);
        assert_eq!(geom.locate_channel(0), Some((0, 0)));
        assert_eq!(geom.locate_channel(4), Some((1, 2)));
        assert_eq!(geom.locate_channel(5), Some((2, 0)));
        assert_eq!(geom.locate_channel(6), None);
    }

    #[test]
    fn real_generator_geometry_is_valid() {
        let geom = LatentGeometry::stylegan_1024();
        geom.validate().unwrap();
        assert_eq!(geom.total_style_channels(), 6048);
    }
}
