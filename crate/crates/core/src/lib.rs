pub mod checkpoint;
pub mod data;
pub mod error;
pub mod lru;
pub mod matryoshka;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
