//! Measures how input-dependent a mapper's manipulation steps are: cosine
//! similarity between the residuals of every pair of latents.
//!
//!     cargo run --example direction_similarity

use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use latent_edit::latent::WPlusCode;
use latent_edit::mapper::{
    direction_similarity_report, sample_training_latents, train_mapper, MapperConfig, MapperModel,
};

fn main() -> latent_edit::Result<()> {
    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(0))?);
    let geom = backend.geometry().clone();
    let latents = sample_training_latents(&backend, 50, 3);

    // A mapper that always returns the same step.
    let mut constant = MapperModel::new(
        &geom,
        MapperConfig {
            hidden_dim: 8,
            ..MapperConfig::default()
        },
    )?;
    let step = WPlusCode::from_values(
        geom.num_layers,
        geom.latent_dim,
        (0..geom.wplus_len())
            .map(|i| (i as f64 * 0.37).sin())
            .collect(),
    )?;
    constant.set_constant_residual(&step)?;
    let r = direction_similarity_report(&constant, &latents)?;
    println!(
        "constant step:  mean {:.4}  std {:.4}  ({} pairs)",
        r.mean, r.std, r.pair_count
    );

    // An untrained, randomly initialized mapper.
    let random = MapperModel::new(
        &geom,
        MapperConfig {
            hidden_dim: 32,
            zero_init_output: false,
            seed: 4,
            ..MapperConfig::default()
        },
    )?;
    let r = direction_similarity_report(&random, &latents)?;
    println!("random init:    mean {:.4}  std {:.4}", r.mean, r.std);

    let cfg = MapperConfig {
        hidden_dim: 32,
        steps: 200,
        learning_rate: 2e-3,
        ..MapperConfig::default()
    };
    let trained = train_mapper(&backend, &latents, "a face with grey hair", &cfg)?;
    let r = direction_similarity_report(&trained, &latents)?;
    println!(
        "trained mapper: mean {:.4}  std {:.4}  (excluded {} zero-step pairs)",
        r.mean, r.std, r.excluded_pairs
    );
    Ok(())
}
