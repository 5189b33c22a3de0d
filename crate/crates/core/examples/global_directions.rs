//! Precomputes channel statistics on the toy backend, then sweeps the
//! disentanglement threshold for one prompt pair and writes the renders.
//!
//!     cargo run --example global_directions [-- OUT_DIR]

use std::path::PathBuf;

use latent_edit::directions::{
    channel_relevance, edit_global, encode_prompt_pair, precompute_channel_stats, rank_channels,
    PromptSpec, Sparsity, StatsParams, TemplateBank, FACE_DEFAULTS, GREY_HAIR_BETAS,
};
use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_edit::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example-output".into()),
    );
    std::fs::create_dir_all(&out)?;

    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(0))?);
    let stats = precompute_channel_stats(&backend, &StatsParams::default(), |done, total| {
        if done == total {
            println!("precomputed {total} channels");
        }
    })?;
    println!("inert channels: {:?}", stats.inert_channels());

    let spec = PromptSpec::new("grey hair", "hair")?;
    let bank = TemplateBank::imagenet();
    let delta_t = encode_prompt_pair(&backend, &spec, &bank)?;
    let relevance = channel_relevance(&stats, &delta_t)?;
    println!("most relevant channels:");
    for c in rank_channels(&relevance).into_iter().take(5) {
        println!("  channel {c:>2}  R = {:+.4}", relevance[c]);
    }

    let w = backend.sample_latent(&mut ChaCha8Rng::seed_from_u64(1));
    let s = backend.wplus_to_style(&w)?;
    std::fs::write(
        out.join("global-original.png"),
        backend.generate_from_style(&s)?.to_png()?,
    )?;

    for beta in GREY_HAIR_BETAS {
        let edit = edit_global(
            &backend,
            &stats,
            &s,
            &spec,
            &bank,
            Sparsity::Beta(beta),
            4.0,
        )?;
        println!(
            "beta {beta:.2}: {} active channels",
            edit.direction.active_count()
        );
        std::fs::write(
            out.join(format!("global-beta-{beta:.2}.png")),
            edit.image.to_png()?,
        )?;
    }

    let edit = edit_global(
        &backend,
        &stats,
        &s,
        &spec,
        &bank,
        Sparsity::K(FACE_DEFAULTS.k),
        FACE_DEFAULTS.alpha,
    )?;
    println!(
        "k {}: beta resolved to {:.4}, saturated {}",
        FACE_DEFAULTS.k, edit.beta_used, edit.saturated
    );
    std::fs::write(out.join("global-k20.png"), edit.image.to_png()?)?;
    println!("wrote renders to {}", out.display());
    Ok(())
}
