//! Dense dual-attention U-Net for cardiac MR segmentation.
//!
//! The crate is self-contained: a small rank-4 tensor type with a
//! define-by-run autodiff [`Tape`], the attention blocks, the full network,
//! Dice/Hausdorff metrics, a synthetic cardiac phantom generator, and an
//! ADAM training loop with k-fold cross-validation.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ops::Mode;
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Real, Shape4, Tensor4};
