//! Self-supervised representation learning with the tree-Wasserstein distance.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` / `f64`); the
//! `*64` aliases below fix the double-precision types the trainer and the
//! CLI use.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod heads;
pub mod linalg;
pub mod losses;
pub mod ot;
pub mod scalar;
pub mod seeds;
pub mod train;
pub mod tree;
pub mod twd;
pub mod verify;

pub use scalar::Scalar;

pub type Tensor64 = linalg::Tensor<f64>;
pub type DiffGraph64 = linalg::DiffGraph<f64>;
pub type Tree64 = tree::TreeTopology<f64>;
pub type Simplex64 = tree::SimplexVector<f64>;
pub type Tree32 = tree::TreeTopology<f32>;
pub type Simplex32 = tree::SimplexVector<f32>;
