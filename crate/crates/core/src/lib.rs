//! Physically-constrained transfer learning for hyperspectral pixel
//! classification.
//!
//! Pixels from a labeled source scene and an unlabeled target scene are
//! projected by one shared stick-breaking encoder onto the abundance simplex.
//! An affine-transfer decoder reconstructs each domain from the shared
//! abundances, a mutual-information discriminator keeps the abundances
//! informative about their pixels, and a densely connected 3-D CNN trained on
//! source abundance patches classifies target pixels without retraining.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod classifier;
pub mod config;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
