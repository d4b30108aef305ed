//! Lookup multivariate Kolmogorov-Arnold networks on the CPU.
//!
//! Each lmKAN layer replaces a dense layer with trainable two-dimensional
//! piecewise-bilinear functions evaluated by spline lookup on a fixed,
//! non-uniform sigma grid. The crate covers evaluation, gradients, training
//! with a phased schedule and Hessian regularization, inference-time fusion,
//! FLOP accounting, serialization and benchmarking.

pub mod batchnorm;
pub mod bench;
pub mod conv;
pub mod cost;
pub mod error;
pub mod fusion;
pub mod hessian;
pub mod io;
pub mod layer;
pub mod linear;
pub mod model;
pub mod precond;
pub mod rng;
pub mod sigma_grid;
pub mod spline2d;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layer::{LmKanLayer, TileConfig};
pub use model::{Activation, Block, LmKanSpec, MlpSpec, Model};
pub use precond::{PrecondBlock, PrecondMode};
pub use sigma_grid::{sigma, sigma_inv, SigmaGrid};
pub use spline2d::{eval2d, Func2D};
pub use tensor::Matrix;
