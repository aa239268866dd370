pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod risk;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{CrossformerModel, ModelConfig, PredictionSeries};
