use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MapperConfig, MapperModel};
use crate::error::{EditError, Result};
use crate::gateway::{BackendBundle, ImageTensor};
use crate::gradcheck::{self, GradCheckReport};
use crate::guidance::{Guidance, TextGuidance};
use crate::latent::WPlusCode;
use crate::optimizer::ObjectiveTerms;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Loss of one latent and, optionally, its parameter gradient.
fn loss_terms(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    model: &MapperModel,
    w: &WPlusCode,
    with_grad: bool,
) -> Result<(ObjectiveTerms, Option<Vec<f64>>)> {
    let cfg = model.config();
    if cfg.lambda_id > 0.0 && !backend.has_identity() {
        return Err(EditError::IdentityUnavailable);
    }
    w.conforms(backend.geometry())?;
    if model.geometry() != backend.geometry() {
        return Err(EditError::InvalidGeometry(
            "mapper geometry does not match backend".into(),
        ));
    }
    let source_identity = if cfg.lambda_id > 0.0 {
        Some(backend.identity_embedding(&backend.generate_from_wplus(w)?)?)
    } else {
        None
    };

    let mut terms = ObjectiveTerms {
        total: 0.0,
        clip: 0.0,
        l2: 0.0,
        id: 0.0,
    };
    let evaluate = |residual: &WPlusCode,
                    want_grad: bool|
     -> Result<(ObjectiveTerms, Option<Vec<f64>>)> {
        let edited = w.add(residual)?;
        let img: ImageTensor = backend.generate_from_wplus(&edited)?;
        let (l2, l2_grad) = cfg.l2_mode.penalty(residual.values());
        let (clip, mut grad_pixels) = if want_grad {
            let (loss, g) = guidance.loss_and_grad(backend, &img)?;
            (loss, Some(g))
        } else {
            (guidance.loss(backend, &img)?, None)
        };
        let mut id = 0.0;
        if let Some(src) = &source_identity {
            let current = backend.identity_embedding(&img)?;
            id = 1.0 - src.dot(&current)?;
            if let Some(gp) = grad_pixels.as_mut() {
                let grad_unit: Vec<f64> = src.values().iter().map(|r| -cfg.lambda_id * r).collect();
                let extra = backend.identity_vjp(&img, &grad_unit)?;
                gp.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
            }
        }
        let t = ObjectiveTerms {
            total: clip + cfg.lambda_l2 * l2 + cfg.lambda_id * id,
            clip,
            l2,
            id,
        };
        let grad = match grad_pixels {
            Some(gp) => {
                let mut g = backend.generate_vjp(&edited, &gp)?;
                g.iter_mut()
                    .zip(&l2_grad)
                    .for_each(|(a, b)| *a += cfg.lambda_l2 * b);
                Some(g)
            }
            None => None,
        };
        Ok((t, grad))
    };

    if with_grad {
        let cell = std::cell::Cell::new(terms);
        let (_, grad) = model.forward_backward(w, |residual| {
            let (t, g) = evaluate(residual, true)?;
            cell.set(t);
            Ok(g.expect("gradient requested"))
        })?;
        terms = cell.get();
        Ok((terms, Some(grad)))
    } else {
        let residual = model.forward(w)?;
        Ok((evaluate(&residual, false)?.0, None))
    }
}

/// Mapper loss for one latent under an arbitrary guidance term.
pub fn mapper_loss_with(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    model: &MapperModel,
    w: &WPlusCode,
) -> Result<ObjectiveTerms> {
    Ok(loss_terms(backend, guidance, model, w, false)?.0)
}

/// `D(G(w + M(w)), t) + lambda_l2 |M(w)|_2 + lambda_id L_id`.
pub fn mapper_loss(
    backend: &BackendBundle,
    model: &MapperModel,
    w: &WPlusCode,
    prompt: &str,
) -> Result<ObjectiveTerms> {
    let guidance = TextGuidance::new(backend, prompt)?;
    mapper_loss_with(backend, &guidance, model, w)
}

/// Mean total loss over `latents`.
pub fn mean_mapper_loss(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    model: &MapperModel,
    latents: &[WPlusCode],
) -> Result<f64> {
    if latents.is_empty() {
        return Err(EditError::InvalidArgument("no latents given".into()));
    }
    let mut sum = 0.0;
    for w in latents {
        sum += mapper_loss_with(backend, guidance, model, w)?.total;
    }
    Ok(sum / latents.len() as f64)
}

/// Mean loss and mean parameter gradient over a batch.
fn batch_gradient(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    model: &MapperModel,
    batch: &[&WPlusCode],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for w in batch {
        let (t, g) = loss_terms(backend, guidance, model, w, true)?;
        loss += t.total;
        grad.iter_mut()
            .zip(g.expect("gradient requested"))
            .for_each(|(a, b)| *a += b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Draws `count` training codes from the generator prior.
pub fn sample_training_latents(backend: &BackendBundle, count: usize, seed: u64) -> Vec<WPlusCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| backend.sample_latent(&mut rng))
        .collect()
}

/// Trains a mapper for a text prompt.
pub fn train_mapper(
    backend: &BackendBundle,
    latents: &[WPlusCode],
    prompt: &str,
    cfg: &MapperConfig,
) -> Result<MapperModel> {
    let guidance = TextGuidance::new(backend, prompt)?;
    train_mapper_with(backend, &guidance, prompt, latents, cfg, |_, _| {})
}

/// Trains a mapper with Adam on mini-batches drawn with `cfg.seed`, reporting
/// `(completed_steps, total_steps)` after each step.
pub fn train_mapper_with<P: FnMut(usize, usize)>(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    label: &str,
    latents: &[WPlusCode],
    cfg: &MapperConfig,
    mut progress: P,
) -> Result<MapperModel> {
    cfg.validate()?;
    if latents.is_empty() {
        return Err(EditError::InvalidArgument(
            "training needs at least one latent".into(),
        ));
    }
    if cfg.lambda_id > 0.0 && !backend.has_identity() {
        return Err(EditError::IdentityUnavailable);
    }
    for w in latents {
        w.conforms(backend.geometry())?;
    }
    let mut model = MapperModel::new(backend.geometry(), cfg.clone())?;
    model.meta.prompt = label.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_7070_6572);
    let mut m1 = vec![0.0; model.param_count()];
    let mut m2 = vec![0.0; model.param_count()];
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<&WPlusCode> = (0..cfg.batch_size)
            .map(|_| &latents[rng.random_range(0..latents.len())])
            .collect();
        let (loss, grad) = batch_gradient(backend, guidance, &model, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(EditError::Diverged {
                step,
                reason: format!("non-finite mapper loss {loss}"),
                history,
            });
        }
        history.push(loss);
        let t = (step + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (a, b)) in model
            .params_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m1.iter_mut().zip(m2.iter_mut()))
        {
            *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * g;
            *b = ADAM_BETA2 * *b + (1.0 - ADAM_BETA2) * g * g;
            *p -= cfg.learning_rate * (*a / c1) / ((*b / c2).sqrt() + ADAM_EPS);
        }
        progress(step + 1, cfg.steps);
    }
    model.meta.steps = cfg.steps;
    model.meta.loss_history = history;
    Ok(model)
}

/// `w + M(w)` and its rendering.
pub fn apply_mapper(
    backend: &BackendBundle,
    model: &MapperModel,
    w: &WPlusCode,
) -> Result<(WPlusCode, ImageTensor)> {
    if model.geometry() != backend.geometry() {
        return Err(EditError::InvalidGeometry(
            "mapper geometry does not match backend".into(),
        ));
    }
    let edited = w.add(&model.forward(w)?)?;
    let image = backend.generate_from_wplus(&edited)?;
    Ok((edited, image))
}

/// Checks parameter gradients of the single-latent mapper loss against
/// central differences on `probe_count` parameters chosen with `seed`.
pub fn mapper_gradient_check(
    backend: &BackendBundle,
    guidance: &dyn Guidance,
    model: &MapperModel,
    w: &WPlusCode,
    probe_count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let coords = gradcheck::probe_coordinates(model.param_count(), probe_count, seed)?;
    let (_, grad) = loss_terms(backend, guidance, model, w, true)?;
    let mut probe = model.clone();
    gradcheck::check_gradient(
        |params| {
            probe.params_mut().copy_from_slice(params);
            Ok(loss_terms(backend, guidance, &probe, w, false)?.0.total)
        },
        model.params(),
        &grad.expect("gradient requested"),
        &coords,
        gradcheck::DEFAULT_STEP,
    )
}
