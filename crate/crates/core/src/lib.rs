#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod spd;
pub mod stem;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type SpdMatrix64 = geometry::SpdMatrix<f64>;
pub type SpdBatch64 = geometry::SpdBatch<f64>;
