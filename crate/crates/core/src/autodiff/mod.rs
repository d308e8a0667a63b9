//! Reverse-mode differentiation over the matrix operations the network
//! needs, plus Riemannian updates for row-orthonormal parameters.

pub mod spectral;
pub mod stiefel;
pub mod tape;

pub use spectral::{vjp_spectral, FnPair, SpectralFn, SpectralFunction};
pub use stiefel::{retract_qr, stiefel_step, stiefel_tangent, StiefelParam};
pub use tape::{backward, Gradients, Node, NodeId, Op, Tape, UnaryFn};
