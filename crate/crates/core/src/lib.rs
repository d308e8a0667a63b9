//! Manifold attention network (MAtt) for EEG trial classification.
//!
//! A trial flows through a linear convolutional feature extractor, is cut
//! into epochs whose covariances live on the SPD manifold, passes through a
//! manifold attention module built on the Log-Euclidean metric, and is mapped
//! back to a flat space for a softmax classifier. Gradients are exact
//! (reverse mode over matrix operations, Daleckii–Krein rules for the
//! spectral functions) and the attention weights are optimized on the
//! manifold of row-orthonormal matrices.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod model;
pub mod sampling;
pub mod spd;
pub mod train;

pub use error::{MattError, Result};
