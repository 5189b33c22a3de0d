//! Persists channel statistics and a mapper checkpoint in a content-addressed
//! store, then reopens the store and reads them back.
//!
//!     cargo run --example artifact_store [-- STORE_DIR]

use latent_edit::directions::{precompute_channel_stats, ChannelStats, StatsParams};
use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use latent_edit::mapper::{load_checkpoint, save_checkpoint, MapperConfig, MapperModel};
use latent_edit::store::{content_fingerprint, ArtifactKey, ArtifactKind, ArtifactStore};

fn main() -> latent_edit::Result<()> {
    let root = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "example-store".into());
    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(0))?);

    {
        let store = ArtifactStore::open(&root)?;
        let params = StatsParams {
            sample_count: 200,
            pair_count: 20,
            ..StatsParams::default()
        };
        let stats = precompute_channel_stats(&backend, &params, |_, _| {})?;
        let key = ArtifactKey::new(ArtifactKind::Stats, stats.key(), backend.fingerprint());
        let rec = store.put(&key, &stats.encode()?)?;
        println!("stored stats {} ({} bytes)", rec.key.fingerprint, rec.size);
        // Identical bytes under the same key are accepted again.
        store.put(&key, &stats.encode()?)?;

        let model = MapperModel::new(
            backend.geometry(),
            MapperConfig {
                hidden_dim: 16,
                ..MapperConfig::default()
            },
        )?;
        let bytes = save_checkpoint(&model)?;
        let key = ArtifactKey::new(
            ArtifactKind::Mapper,
            content_fingerprint(&bytes),
            "identity",
        );
        store.put(&key, &bytes)?;
    }

    let store = ArtifactStore::open(&root)?;
    for kind in ArtifactKind::ALL {
        for rec in store.list(kind) {
            println!(
                "{:>6}  {}  label {:?}  {} bytes",
                kind.to_string(),
                rec.key.fingerprint,
                rec.key.label,
                rec.size
            );
        }
    }
    let rec = store
        .find_label(ArtifactKind::Stats, backend.fingerprint())
        .expect("stats stored");
    let stats = ChannelStats::decode(&store.get(ArtifactKind::Stats, &rec.key.fingerprint)?)?;
    stats.check_backend(&backend)?;
    println!(
        "reloaded stats: {} channels x {} dims",
        stats.channels(),
        stats.embed_dim()
    );

    let rec = store
        .find_label(ArtifactKind::Mapper, "identity")
        .expect("mapper stored");
    let model = load_checkpoint(
        &store.get(ArtifactKind::Mapper, &rec.key.fingerprint)?,
        Some(backend.geometry()),
    )?;
    println!("reloaded mapper with {} parameters", model.param_count());
    Ok(())
}
