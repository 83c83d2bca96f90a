//! Facial action unit detection with per-AU spatial attention and a
//! spatio-temporal graph network over AU relations.
//!
//! Everything numerical is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases below fix the element type.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod stgcn;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{Config, Preset};
pub use error::{Error, Result};
pub use graph::{HopDistance, RelationGraph};
pub use model::AuModel;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TapeF64 = Tape<f64>;
pub type TapeF32 = Tape<f32>;
pub type RelationGraphF64 = RelationGraph<f64>;
pub type RelationGraphF32 = RelationGraph<f32>;
pub type AuModelF64 = AuModel<f64>;
pub type AuModelF32 = AuModel<f32>;
pub type DatasetF64 = data::Dataset<f64>;
pub type DatasetF32 = data::Dataset<f32>;
