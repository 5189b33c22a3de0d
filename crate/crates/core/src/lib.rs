//! Text-driven editing of images produced by style-based generators.
//!
//! Three editing methods share one set of pluggable backends
//! ([`gateway::BackendBundle`]):
//!
//! * [`optimizer`]: per-image latent optimization in W+ against a text prompt,
//!   with L2 and identity penalties.
//! * [`mapper`]: a prompt-specific residual network over the coarse, medium
//!   and fine layer groups of W+.
//! * [`directions`]: input-agnostic style-space directions assembled from
//!   precomputed per-channel statistics.
//!
//! [`store`] persists artifacts, [`service`] exposes everything over HTTP and
//! [`cli`] mirrors the service for scripting.

pub mod cli;
pub mod codec;
pub mod directions;
pub mod error;
pub mod gateway;
pub mod gradcheck;
pub mod guidance;
pub mod latent;
pub mod mapper;
pub mod optimizer;
pub mod service;
pub mod store;

pub use error::{EditError, Result};
