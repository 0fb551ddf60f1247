//! Contextual CRF semantic segmentation: CNN-parameterized unary and pairwise
//! potentials over a feature-map graph, trained piecewise, predicted with
//! mean-field inference and a dense-CRF refinement stage.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod ops;
pub mod tape;
pub mod optim;
pub mod gradcheck;
pub mod labels;
pub mod graph;
pub mod featmap;
pub mod potentials;
pub mod train;
pub mod infer;
pub mod dataset;
pub mod metrics;
pub mod checkpoint;
pub mod config;
pub mod imageio;
pub mod ablate;

pub use error::{CtxError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training precision.
pub type Real = f32;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
