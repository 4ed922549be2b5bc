//! Differentiable histogram-of-oriented-gradients descriptor.
//!
//! The HOG pipeline (gray conversion, derivative masks, orientation voting,
//! tent-filter spatial binning, global normalization) is written entirely in
//! terms of the primitives of a small reverse-mode autodiff [`Tape`], so the
//! descriptor can be differentiated with respect to every pixel. On top of
//! that sit two optimizers:
//!
//! * [`preimage`]: reconstruct an image whose descriptor matches a target.
//! * [`align`]: recover a 2D similarity pose by maximizing descriptor
//!   similarity.
//!
//! [`metrics`] scores reconstructions, [`io`] reads and writes images and
//! descriptor files, and [`parallel`] fans independent work items out over
//! threads when the `parallel` feature is enabled.

pub mod align;
pub mod autodiff;
pub mod error;
pub mod hog;
pub mod io;
pub mod metrics;
pub mod parallel;
pub mod preimage;
pub mod tensor;
pub mod verify;

pub use autodiff::{Kernel, Tape, Var};
pub use error::{Error, Result};
pub use hog::{HogConfig, HogDescriptor, NormStyle, Orientation};
pub use io::Image;
pub use tensor::Tensor;
