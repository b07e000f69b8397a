//! Small rectified-linear networks trained with dropout, and the machinery
//! needed to study them as ensembles.
//!
//! The crate is organised around the sub-network view of dropout: a
//! [`masks::DropoutMask`] selects one member of the implicit ensemble, the
//! [`model`] module evaluates and differentiates that member, and
//! [`ensemble`] combines all members exactly (by enumeration) or
//! approximately (weight scaling, Monte Carlo).
//!
//! - [`model`]: parameters, masked forward pass, backpropagation, max-norm
//!   projection and the binary model file format.
//! - [`masks`]: mask sampling and canonical enumeration order.
//! - [`ensemble`]: inference rules over the mask space.
//! - [`training`]: momentum SGD, early stopping, and the plain, dropout,
//!   fixed-mask and dropout-boosting criteria.
//! - [`data`]: MNIST, CoverType and the synthetic diamond task.
//! - [`analysis`]: error rates and the Wilcoxon signed-rank test.

pub mod analysis;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod masks;
pub mod model;
pub mod training;

pub use error::{Error, Result};
