//! Block-sparse activation pruning for memory-compressed neural-network
//! training.
//!
//! The crate provides the BSR compressed format and its byte accounting
//! (`bsr`), l2 top-k block pruning (`pruner`), skip-aware block-sparse
//! kernels and the dense-forward/sparse-backward linear operator
//! (`sparse_ops`), a minimal reverse-mode tape with optimizers (`autograd`),
//! a ResMLP-style model builder (`resmlp`), dataset ingestion (`datasets`),
//! and logical memory accounting (`memstat`).

pub mod autograd;
pub mod bsr;
pub mod datasets;
pub mod error;
pub mod memstat;
pub mod pruner;
pub mod resmlp;
pub mod sparse_ops;
pub mod tensor;

pub use error::{CoreError, Result};

/// Round half up, truncating to usize. This is the counting rule shared by
/// the pruner's top-k (`k = round(s*N)`) and the compression accounting, so
/// both sides of every comparison agree bit-for-bit.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}
