//! Time-dense recurrent flow network: tensors, reverse-mode autodiff, the
//! model itself and a small training loop.

pub mod config;
pub mod kernels;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use config::KeyValues;
pub use model::{model_forward, model_step, FlowPrior, Model, ModelConfig, ModelState};
pub use params::ModelParams;
pub use tensor::Tensor;
pub use train::{train, train_toy, Adam, LrSchedule, TrainConfig, TrainReport, TrainingSample};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("parameters: {0}")]
    Params(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("model state is not initialized; prime it with bin 0 first")]
    NotInitialized,
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },
}
