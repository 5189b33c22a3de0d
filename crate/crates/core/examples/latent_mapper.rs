//! Trains a small mapper for one prompt, saves the checkpoint, reloads it
//! and applies it to unseen latents.
//!
//!     cargo run --example latent_mapper [-- OUT_DIR]

use std::path::PathBuf;

use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use latent_edit::guidance::TextGuidance;
use latent_edit::mapper::{
    apply_mapper, load_checkpoint, mean_mapper_loss, sample_training_latents, save_checkpoint,
    train_mapper, MapperConfig,
};

fn main() -> latent_edit::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example-output".into()),
    );
    std::fs::create_dir_all(&out)?;

    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(0))?);
    let prompt = "a face with purple hair";
    let train = sample_training_latents(&backend, 64, 1);
    let held_out = sample_training_latents(&backend, 8, 2);

    let cfg = MapperConfig {
        hidden_dim: 32,
        steps: 400,
        learning_rate: 2e-3,
        ..MapperConfig::without_fine()
    };
    let model = train_mapper(&backend, &train, prompt, &cfg)?;
    let history = &model.meta.loss_history;
    println!(
        "trained {} parameters: batch loss {:.4} -> {:.4}",
        model.param_count(),
        history.first().copied().unwrap_or_default(),
        history.last().copied().unwrap_or_default()
    );

    let guidance = TextGuidance::new(&backend, prompt)?;
    println!(
        "held-out mean loss {:.4}",
        mean_mapper_loss(&backend, &guidance, &model, &held_out)?
    );

    let bytes = save_checkpoint(&model)?;
    std::fs::write(out.join("purple-hair.mapper"), &bytes)?;
    let reloaded = load_checkpoint(&bytes, Some(backend.geometry()))?;

    for (i, w) in held_out.iter().take(3).enumerate() {
        let (_, image) = apply_mapper(&backend, &reloaded, w)?;
        std::fs::write(
            out.join(format!("mapper-{i}-before.png")),
            backend.generate_from_wplus(w)?.to_png()?,
        )?;
        std::fs::write(out.join(format!("mapper-{i}-after.png")), image.to_png()?)?;
    }
    println!("wrote checkpoint and renders to {}", out.display());
    Ok(())
}
