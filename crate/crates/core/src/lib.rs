//! Gradient-free merging of low-rank task updates that share one base model.
//!
//! The crate aligns per-task weight updates with a joint singular value
//! decomposition, applies classical merge rules (scaled summation,
//! sign-elected trimming, random-drop rescaling) in the aligned space, and
//! reconstructs a single merged update. Around that core it provides
//! checkpoint I/O, representation-similarity diagnostics, and a small
//! evaluation/sweep harness.

pub mod adapter;
pub mod align;
pub mod analysis;
pub mod container;
pub mod error;
pub mod eval;
pub mod merge;
pub mod seed;
mod svd;
pub mod sweep;
pub mod tensor;
pub mod update;

pub use align::{knots_decompose, knots_merge, run_merge, AlignedDecomposition};
pub use analysis::{cka_linear, pairwise_update_cka, task_vector_cosine, CkaMode, CkaReport};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalTask, ForwardSpec};
pub use merge::{ConcatAxis, MergeConfig, MergeMethod, MergedUpdate};
pub use sweep::{sweep, SweepGrids, SweepResult, SweepSettings};
pub use tensor::{Tensor, TensorMap};
pub use update::TaskUpdate;
