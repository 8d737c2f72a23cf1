//! Style-example-guided paragraph generation on a small CPU transformer
//! stack: tape autodiff, style-conditioned decoders, the four-term training
//! objective, evaluation metrics and a reproducible trainer.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
