//! Runs the HTTP service on the toy backend.
//!
//!     cargo run --example serve [-- 127.0.0.1:8080 STORE_DIR]
//!
//! Then, for example:
//!
//!     curl -s localhost:8080/health
//!     curl -s -X POST localhost:8080/directions/precompute -H 'content-type: application/json' -d '{}'
//!     curl -s -F image=@face.png localhost:8080/images

use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use latent_edit::service::{serve, AppState, ServiceOptions};

#[tokio::main]
async fn main() -> latent_edit::Result<()> {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .init();
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let root = args.next().unwrap_or_else(|| "example-store".into());
    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(0))?);
    let state = AppState::new(backend, ServiceOptions::new(root))?;
    let addr = addr
        .parse()
        .map_err(|e| latent_edit::EditError::InvalidArgument(format!("bad address {addr}: {e}")))?;
    serve(state, addr).await
}
