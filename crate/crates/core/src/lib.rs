//! Channel pruning for convolutional networks.
//!
//! For a convolution with `C` input channels, sampled per-channel partial
//! sums of its outputs form a `C x N` matrix `A` whose column sums `B` are
//! the outputs themselves. Pruning keeps the rows of `A` chosen by an SVD
//! followed by pivoted QR, fits one scale per kept row by least squares,
//! folds the scales into the kernel and drops the matching output channels
//! of the producing layer. Bottleneck units get joint sampling for
//! projection shortcuts and a back-to-front pass with shortcut channel
//! sampling for identity shortcuts.

pub mod analysis;
pub mod archs;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod inference;
pub mod linalg;
pub mod prune;
pub mod sampling;
pub mod tensor;

pub use error::{Error, LoadError, Result};
