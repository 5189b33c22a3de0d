//! Prompt-specific residual mapper over W+.
//!
//! The mapper is three independent fully-connected networks, one per layer
//! group. Each consumes its group's layers flattened into one vector and emits
//! a residual of the same size:
//!
//! ```text
//! M(w) = (M_coarse(w_c), M_medium(w_m), M_fine(w_f))
//! ```
//!
//! A disabled branch contributes an exact zero block. The final layer of each
//! branch starts at zero, so an untrained mapper is the identity edit.

mod checkpoint;
mod similarity;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::latent::{LatentGeometry, LayerGroup, WPlusCode};
use crate::optimizer::L2Mode;

pub use self::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use self::similarity::{direction_similarity_report, ResidualField, SimilarityReport};
pub use self::train::{
    apply_mapper, mapper_gradient_check, mapper_loss, mapper_loss_with, mean_mapper_loss,
    sample_training_latents, train_mapper, train_mapper_with,
};

/// Slope of the leaky rectifier between hidden layers.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub enabled_branches: Vec<LayerGroup>,
    pub layers_per_branch: usize,
    pub hidden_dim: usize,
    pub lambda_l2: f64,
    pub lambda_id: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub l2_mode: L2Mode,
    /// Start every branch's final layer at zero (identity edit).
    #[serde(default = "default_true")]
    pub zero_init_output: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            enabled_branches: LayerGroup::ALL.to_vec(),
            layers_per_branch: 4,
            hidden_dim: 512,
            lambda_l2: 0.8,
            lambda_id: 0.1,
            steps: 50_000,
            batch_size: 2,
            learning_rate: 0.5e-3,
            seed: 0,
            l2_mode: L2Mode::Norm,
            zero_init_output: true,
        }
    }
}

impl MapperConfig {
    /// Weights for edits that are meant to change identity.
    pub fn identity_changing() -> Self {
        MapperConfig {
            lambda_l2: 2.0,
            lambda_id: 0.0,
            ..Default::default()
        }
    }

    /// Coarse and medium branches only; keeps fine-level attributes such as
    /// color fixed.
    pub fn without_fine() -> Self {
        MapperConfig {
            enabled_branches: vec![LayerGroup::Coarse, LayerGroup::Medium],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_branches.is_empty() {
            return Err(EditError::InvalidArgument(
                "at least one branch must be enabled".into(),
            ));
        }
        if self.layers_per_branch == 0 || self.hidden_dim == 0 {
            return Err(EditError::InvalidArgument(
                "layers_per_branch and hidden_dim must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(EditError::InvalidArgument(
                "batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EditError::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        for (name, v) in [("lambda_l2", self.lambda_l2), ("lambda_id", self.lambda_id)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EditError::InvalidArgument(format!(
                    "{name} must be non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn is_enabled(&self, group: LayerGroup) -> bool {
        self.enabled_branches.contains(&group)
    }
}

/// Location of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseSlot {
    weight: usize,
    bias: usize,
    inputs: usize,
    outputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    group: LayerGroup,
    /// First latent layer of the group and the flattened width.
    first_layer: usize,
    width: usize,
    layers: Vec<DenseSlot>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub prompt: String,
    pub steps: usize,
    pub loss_history: Vec<f64>,
}

/// Trained (or freshly initialized) mapper.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperModel {
    config: MapperConfig,
    geometry: LatentGeometry,
    branches: Vec<Branch>,
    params: Vec<f64>,
    pub meta: TrainingMeta,
}

/// Forward-pass values kept for back-propagation.
struct BranchCache {
    /// Input to every layer, then the final output.
    activations: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl MapperModel {
    /// Builds a mapper with seeded Gaussian weights, zero biases and (by
    /// default) a zero final layer.
    pub fn new(geometry: &LatentGeometry, config: MapperConfig) -> Result<Self> {
        config.validate()?;
        geometry.validate()?;
        let mut branches = Vec::new();
        let mut cursor = 0;
        for group in LayerGroup::ALL {
            if !config.is_enabled(group) {
                continue;
            }
            let range = geometry.group_layers(group);
            let width = range.len() * geometry.latent_dim;
            let mut layers = Vec::with_capacity(config.layers_per_branch);
            for i in 0..config.layers_per_branch {
                let inputs = if i == 0 { width } else { config.hidden_dim };
                let outputs = if i + 1 == config.layers_per_branch {
                    width
                } else {
                    config.hidden_dim
                };
                layers.push(DenseSlot {
                    weight: cursor,
                    bias: cursor + inputs * outputs,
                    inputs,
                    outputs,
                });
                cursor += inputs * outputs + outputs;
            }
            branches.push(Branch {
                group,
                first_layer: range.start,
                width,
                layers,
            });
        }

        let mut params = vec![0.0; cursor];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for branch in &branches {
            let last = branch.layers.len() - 1;
            for (i, slot) in branch.layers.iter().enumerate() {
                if i == last && config.zero_init_output {
                    continue;
                }
                let scale = 1.0 / (slot.inputs as f64).sqrt();
                for p in &mut params[slot.weight..slot.weight + slot.inputs * slot.outputs] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p = z * scale;
                }
            }
        }
        Ok(MapperModel {
            config,
            geometry: geometry.clone(),
            branches,
            params,
            meta: TrainingMeta::default(),
        })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn geometry(&self) -> &LatentGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replaces the parameter vector (same length required).
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(EditError::shape(
                format!("{} parameters", self.params.len()),
                format!("{}", params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(EditError::NonFinite("mapper parameter".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Sets every enabled branch's final bias to the matching slice of
    /// `residual` and zeroes its final weights, so the mapper outputs
    /// `residual` (masked to enabled groups) for every input.
    pub fn set_constant_residual(&mut self, residual: &WPlusCode) -> Result<()> {
        residual.conforms(&self.geometry)?;
        let d = self.geometry.latent_dim;
        for branch in &self.branches {
            let slot = *branch.layers.last().expect("branch has layers");
            let start = branch.first_layer * d;
            self.params[slot.weight..slot.weight + slot.inputs * slot.outputs]
                .iter_mut()
                .for_each(|p| *p = 0.0);
            self.params[slot.bias..slot.bias + slot.outputs]
                .copy_from_slice(&residual.values()[start..start + branch.width]);
        }
        Ok(())
    }

    fn branch_forward(&self, branch: &Branch, input: &[f64]) -> BranchCache {
        let mut activations = Vec::with_capacity(branch.layers.len() + 1);
        let mut pre = Vec::with_capacity(branch.layers.len());
        activations.push(input.to_vec());
        let last = branch.layers.len() - 1;
        for (i, slot) in branch.layers.iter().enumerate() {
            let x = activations.last().expect("input present");
            let w = &self.params[slot.weight..slot.weight + slot.inputs * slot.outputs];
            let b = &self.params[slot.bias..slot.bias + slot.outputs];
            let z: Vec<f64> = (0..slot.outputs)
                .map(|o| {
                    b[o] + w[o * slot.inputs..(o + 1) * slot.inputs]
                        .iter()
                        .zip(x)
                        .map(|(a, v)| a * v)
                        .sum::<f64>()
                })
                .collect();
            let a = if i == last {
                z.clone()
            } else {
                z.iter().map(|v| leaky(*v)).collect()
            };
            pre.push(z);
            activations.push(a);
        }
        BranchCache { activations, pre }
    }

    /// Residual `M(w)`, shaped like `w`.
    pub fn forward(&self, w: &WPlusCode) -> Result<WPlusCode> {
        w.conforms(&self.geometry)?;
        let d = self.geometry.latent_dim;
        let mut out = vec![0.0; self.geometry.wplus_len()];
        for branch in &self.branches {
            let start = branch.first_layer * d;
            let cache = self.branch_forward(branch, &w.values()[start..start + branch.width]);
            out[start..start + branch.width]
                .copy_from_slice(cache.activations.last().expect("output present"));
        }
        WPlusCode::from_values(self.geometry.num_layers, d, out)
    }

    /// Residual and the parameter gradient of `<grad_residual, M(w)>`.
    pub(crate) fn forward_backward(
        &self,
        w: &WPlusCode,
        grad_residual: impl Fn(&WPlusCode) -> Result<Vec<f64>>,
    ) -> Result<(WPlusCode, Vec<f64>)> {
        w.conforms(&self.geometry)?;
        let d = self.geometry.latent_dim;
        let mut out = vec![0.0; self.geometry.wplus_len()];
        let mut caches = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let start = branch.first_layer * d;
            let cache = self.branch_forward(branch, &w.values()[start..start + branch.width]);
            out[start..start + branch.width]
                .copy_from_slice(cache.activations.last().expect("output present"));
            caches.push(cache);
        }
        let residual = WPlusCode::from_values(self.geometry.num_layers, d, out)?;
        let upstream = grad_residual(&residual)?;
        let mut grad = vec![0.0; self.params.len()];
        for (branch, cache) in self.branches.iter().zip(&caches) {
            let start = branch.first_layer * d;
            let mut delta = upstream[start..start + branch.width].to_vec();
            let last = branch.layers.len() - 1;
            for (i, slot) in branch.layers.iter().enumerate().rev() {
                if i != last {
                    delta
                        .iter_mut()
                        .zip(&cache.pre[i])
                        .for_each(|(g, z)| *g *= leaky_grad(*z));
                }
                let x = &cache.activations[i];
                for o in 0..slot.outputs {
                    let g = delta[o];
                    grad[slot.bias + o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    let row = slot.weight + o * slot.inputs;
                    for (gw, xv) in grad[row..row + slot.inputs].iter_mut().zip(x) {
                        *gw += g * xv;
                    }
                }
                if i > 0 {
                    let w_mat = &self.params[slot.weight..slot.weight + slot.inputs * slot.outputs];
                    let mut prev = vec![0.0; slot.inputs];
                    for (o, g) in delta.iter().enumerate() {
                        if *g == 0.0 {
                            continue;
                        }
                        for (p, a) in prev
                            .iter_mut()
                            .zip(&w_mat[o * slot.inputs..(o + 1) * slot.inputs])
                        {
                            *p += a * g;
                        }
                    }
                    delta = prev;
                }
            }
        }
        Ok((residual, grad))
    }

    /// Groups with a trainable branch.
    pub fn enabled_groups(&self) -> Vec<LayerGroup> {
        self.branches.iter().map(|b| b.group).collect()
    }
}
