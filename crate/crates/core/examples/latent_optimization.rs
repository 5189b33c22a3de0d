//! Optimizes a sampled latent towards a text prompt and prints the loss trace.
//!
//!     cargo run --example latent_optimization [-- OUT_DIR]

use std::path::PathBuf;

use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use latent_edit::optimizer::{optimize_prompt, OptimizeConfig};
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
    let w_source = backend.sample_latent(&mut ChaCha8Rng::seed_from_u64(2));

    let cfg = OptimizeConfig {
        steps: 100,
        ..OptimizeConfig::preset("beard").expect("known preset")
    };
    let trace = optimize_prompt(&backend, &w_source, "a man with a beard", &cfg)?;
    for (step, t) in trace.records.iter().enumerate().step_by(20) {
        println!(
            "step {step:>3}  total {:.5}  clip {:.5}  l2 {:.4}  id {:.5}",
            t.total, t.clip, t.l2, t.id
        );
    }
    let f = trace.final_terms;
    println!(
        "final     total {:.5}  clip {:.5}  l2 {:.4}  id {:.5}",
        f.total, f.clip, f.l2, f.id
    );

    std::fs::write(
        out.join("optimize-source.png"),
        backend.generate_from_wplus(&w_source)?.to_png()?,
    )?;
    std::fs::write(
        out.join("optimize-result.png"),
        backend.generate_from_wplus(&trace.final_code)?.to_png()?,
    )?;
    std::fs::write(out.join("optimize-trace.csv"), trace.to_csv()?)?;
    println!("wrote renders and trace to {}", out.display());
    Ok(())
}
