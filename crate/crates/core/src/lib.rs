pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod experiment;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod seeding;
pub mod synthdata;
pub mod tensor;
pub mod tmr;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = network::ModelParams<f32>;
pub type Model64 = network::ModelParams<f64>;
pub type Trainer64<'c> = training::Trainer<'c, f64>;
