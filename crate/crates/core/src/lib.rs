//! Visibility-aware scene completion on truncated signed distance fields.
//!
//! Partial depth scans are fused into block-sparse TSDF volumes that keep an
//! explicit "never observed" state per voxel. Dense chunks of those volumes are
//! compressed by a masked VAE, a masked flow-matching velocity model learns the
//! latent distribution from observed geometry only, and a zero-initialized
//! control branch turns the generator into a scan completer. Scenes larger than
//! one chunk are sampled with overlap-averaged tiling.

pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fusion;
pub mod layout;
pub mod par;
pub mod pipeline;
pub mod surface;
pub mod tensor;
pub mod tiling;
pub mod vae;
pub mod voxgrid;

pub use error::{Error, Result};
