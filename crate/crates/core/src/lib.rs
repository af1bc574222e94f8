//! Data-free quantization: a conditional generator trained against a frozen
//! teacher's batch-norm statistics produces synthetic data for calibrating
//! and fine-tuning low-bit students.

pub mod bn_stats;
pub mod checkpoint;
pub mod classify;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod grid;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod quant;
pub mod scalar;
pub mod student;
pub mod tensor;
pub mod zscgan;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Classifier32 = nn::Classifier<f32>;
pub type Teacher32 = nn::TeacherModel<f32>;
pub type Generator32 = nn::ConditionalGenerator<f32>;
pub type QuantSpec32 = quant::QuantizedModelSpec<f32>;
