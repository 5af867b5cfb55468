//! Group equivariant vision transformer layers: lifting and group
//! self-attention with an equivariant relative positional encoding, on a
//! small reverse-mode differentiation core.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoding;
pub mod group;
pub mod harness;
pub mod layers;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use group::{AffineElement, FiniteGroup, GroupElement, GroupError, GroupKind};
pub use scalar::Scalar;
pub use tensor::{finite_diff_check, GradCheck, Tensor, TensorError};
