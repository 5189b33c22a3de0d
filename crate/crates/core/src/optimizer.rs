//! Per-image latent optimization in W+:
//!
//! ```text
//! argmin_w  D(G(w), t) + lambda_l2 * |w - w_s|_2 + lambda_id * L_id(w)
//! L_id(w) = 1 - <R(G(w_s)), R(G(w))>
//! ```
//!
//! solved by gradient descent through the fixed generator and embedders.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::gateway::{dot, BackendBundle, JointEmbedding};
use crate::gradcheck::{self, GradCheckReport};
use crate::guidance::{Guidance, TextGuidance};
use crate::latent::WPlusCode;

/// How the latent-distance penalty is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Mode {
    /// `|w - w_s|_2`, the literal reading of the objective.
    #[default]
    Norm,
    /// `|w - w_s|_2^2`.
    Squared,
}

impl L2Mode {
    /// Penalty value and its gradient with respect to `diff`.
    pub(crate) fn penalty(self, diff: &[f64]) -> (f64, Vec<f64>) {
        let sq = dot(diff, diff);
        match self {
            L2Mode::Squared => (sq, diff.iter().map(|d| 2.0 * d).collect()),
            L2Mode::Norm => {
                let norm = sq.sqrt();
                // Zero subgradient at the kink.
                if norm == 0.0 {
                    (0.0, vec![0.0; diff.len()])
                } else {
                    (norm, diff.iter().map(|d| d / norm).collect())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub lambda_l2: f64,
    pub lambda_id: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub l2_mode: L2Mode,
    /// Heavy-ball momentum; 0 gives plain gradient descent.
    #[serde(default)]
    pub momentum: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            lambda_l2: 0.008,
            lambda_id: 0.0,
            steps: 250,
            learning_rate: 0.1,
            seed: 0,
            l2_mode: L2Mode::Norm,
            momentum: 0.0,
        }
    }
}

impl OptimizeConfig {
    /// Weights used for the published celebrity edits.
    pub fn preset(name: &str) -> Option<Self> {
        let (lambda_l2, lambda_id) = match name {
            "beyonce" => (0.004, 0.0),
            "beard" => (0.008, 0.005),
            "trump" => (0.0025, 0.0),
            _ => return None,
        };
        Some(OptimizeConfig {
            lambda_l2,
            lambda_id,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(EditError::InvalidArgument(
                "steps must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EditError::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("lambda_l2", self.lambda_l2), ("lambda_id", self.lambda_id)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EditError::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EditError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Objective value and its unweighted terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub clip: f64,
    pub l2: f64,
    pub id: f64,
}

impl ObjectiveTerms {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.clip.is_finite()
            && self.l2.is_finite()
            && self.id.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeTrace {
    /// Objective at the iterate each step started from.
    pub records: Vec<ObjectiveTerms>,
    /// Objective at the returned code.
    pub final_terms: ObjectiveTerms,
    pub final_code: WPlusCode,
}

impl OptimizeTrace {
    /// CSV with columns `step,total,clip,l2,id`. The last row is the final
    /// iterate.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer
            .write_record(["step", "total", "clip", "l2", "id"])
            .map_err(csv_err)?;
        for (step, t) in self.records.iter().chain([&self.final_terms]).enumerate() {
            writer
                .write_record([
                    step.to_string(),
                    t.total.to_string(),
                    t.clip.to_string(),
                    t.l2.to_string(),
                    t.id.to_string(),
                ])
                .map_err(csv_err)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> EditError {
    EditError::Format(format!("csv: {e}"))
}

/// Precomputed pieces shared by every evaluation against one source code.
struct Problem<'a> {
    backend: &'a BackendBundle,
    guidance: &'a dyn Guidance,
    source: &'a WPlusCode,
    source_identity: Option<JointEmbedding>,
    cfg: &'a OptimizeConfig,
}

impl<'a> Problem<'a> {
    fn new(
        backend: &'a BackendBundle,
        guidance: &'a dyn Guidance,
        source: &'a WPlusCode,
        cfg: &'a OptimizeConfig,
    ) -> Result<Self> {
        source.conforms(backend.geometry())?;
        let source_identity = if cfg.lambda_id > 0.0 {
            if !backend.has_identity() {
                return Err(EditError::IdentityUnavailable);
            }
            Some(backend.identity_embedding(&backend.generate_from_wplus(source)?)?)
        } else {
            None
        };
        Ok(Problem {
            backend,
            guidance,
            source,
            source_identity,
            cfg,
        })
    }

    fn evaluate(
        &self,
        w: &WPlusCode,
        with_grad: bool,
    ) -> Result<(ObjectiveTerms, Option<Vec<f64>>)> {
        w.conforms(self.backend.geometry())?;
        let img = self.backend.generate_from_wplus(w)?;
        let diff = w.sub(self.source)?;
        let (l2, l2_grad) = self.cfg.l2_mode.penalty(diff.values());

        let (clip, mut grad_pixels) = if with_grad {
            let (loss, g) = self.guidance.loss_and_grad(self.backend, &img)?;
            (loss, Some(g))
        } else {
            (self.guidance.loss(self.backend, &img)?, None)
        };

        let mut id = 0.0;
        if let Some(source_id) = &self.source_identity {
            let current = self.backend.identity_embedding(&img)?;
            id = 1.0 - source_id.dot(&current)?;
            if let Some(gp) = grad_pixels.as_mut() {
                let grad_unit: Vec<f64> = source_id
                    .values()
                    .iter()
                    .map(|r| -self.cfg.lambda_id * r)
                    .collect();
                let id_pixels = self.backend.identity_vjp(&img, &grad_unit)?;
                gp.iter_mut().zip(id_pixels).for_each(|(a, b)| *a += b);
            }
        }

        let total = clip + self.cfg.lambda_l2 * l2 + self.cfg.lambda_id * id;
        let terms = ObjectiveTerms {
            total,
            clip,
            l2,
            id,
        };
        let grad = match grad_pixels {
            Some(gp) => {
                let mut g = self.backend.generate_vjp(w, &gp)?;
                g.iter_mut()
                    .zip(&l2_grad)
                    .for_each(|(a, b)| *a += self.cfg.lambda_l2 * b);
                Some(g)
            }
            None => None,
        };
        Ok((terms, grad))
    }
}

/// Evaluates the objective at `w`.
pub fn objective(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    w: &WPlusCode,
    w_source: &WPlusCode,
    cfg: &OptimizeConfig,
) -> Result<ObjectiveTerms> {
    Ok(Problem::new(backend, guidance, w_source, cfg)?
        .evaluate(w, false)?
        .0)
}

/// Objective at `w` together with its gradient over the flattened code.
pub fn objective_with_grad(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    w: &WPlusCode,
    w_source: &WPlusCode,
    cfg: &OptimizeConfig,
) -> Result<(ObjectiveTerms, Vec<f64>)> {
    let (terms, grad) = Problem::new(backend, guidance, w_source, cfg)?.evaluate(w, true)?;
    Ok((terms, grad.expect("gradient requested")))
}

/// Runs `cfg.steps` gradient steps starting from `w_source`.
pub fn optimize_latent(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    w_source: &WPlusCode,
    cfg: &OptimizeConfig,
) -> Result<OptimizeTrace> {
    optimize_latent_with_progress(backend, guidance, w_source, cfg, |_, _| {})
}

/// As [`optimize_latent`], reporting `(completed_steps, total_steps)` after
/// every step.
pub fn optimize_latent_with_progress<P: FnMut(usize, usize)>(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    w_source: &WPlusCode,
    cfg: &OptimizeConfig,
    mut progress: P,
) -> Result<OptimizeTrace> {
    cfg.validate()?;
    let problem = Problem::new(backend, guidance, w_source, cfg)?;
    let geom = backend.geometry();
    let mut w = w_source.clone();
    let mut velocity = vec![0.0; geom.wplus_len()];
    let mut records = Vec::with_capacity(cfg.steps);
    let diverged = |step: usize, records: &[ObjectiveTerms], reason: String| EditError::Diverged {
        step,
        reason,
        history: records.iter().map(|t| t.total).collect(),
    };

    for step in 0..cfg.steps {
        let (terms, grad) = problem.evaluate(&w, true)?;
        let grad = grad.expect("gradient requested");
        if !terms.is_finite() {
            return Err(diverged(
                step,
                &records,
                format!("non-finite loss {terms:?}"),
            ));
        }
        records.push(terms);
        let mut next = w.values().to_vec();
        for ((x, v), g) in next.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *x -= cfg.learning_rate * *v;
        }
        w = WPlusCode::from_values(geom.num_layers, geom.latent_dim, next)
            .map_err(|e| diverged(step, &records, e.to_string()))?;
        progress(step + 1, cfg.steps);
    }

    let (final_terms, _) = problem.evaluate(&w, false)?;
    if !final_terms.is_finite() {
        return Err(diverged(
            cfg.steps,
            &records,
            format!("non-finite loss {final_terms:?}"),
        ));
    }
    Ok(OptimizeTrace {
        records,
        final_terms,
        final_code: w,
    })
}

/// Optimizes towards a text prompt.
pub fn optimize_prompt(
    backend: &BackendBundle,
    w_source: &WPlusCode,
    prompt: &str,
    cfg: &OptimizeConfig,
) -> Result<OptimizeTrace> {
    let guidance = TextGuidance::new(backend, prompt)?;
    optimize_latent(backend, &guidance, w_source, cfg)
}

/// Checks the analytic objective gradient against central differences on
/// `probe_count` coordinates chosen with `cfg.seed`.
pub fn gradient_check(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    w: &WPlusCode,
    w_source: &WPlusCode,
    cfg: &OptimizeConfig,
    probe_count: usize,
) -> Result<GradCheckReport> {
    let coords = gradcheck::probe_coordinates(w.values().len(), probe_count, cfg.seed)?;
    let problem = Problem::new(backend, guidance, w_source, cfg)?;
    let (_, grad) = problem.evaluate(w, true)?;
    let (layers, dim) = (w.layers(), w.latent_dim());
    gradcheck::check_gradient(
        |x| {
            let probe = WPlusCode::from_values(layers, dim, x.to_vec())?;
            Ok(problem.evaluate(&probe, false)?.0.total)
        },
        w.values(),
        &grad.expect("gradient requested"),
        &coords,
        gradcheck::DEFAULT_STEP,
    )
}
