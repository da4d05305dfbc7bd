//! Neural models over mini-language programs: the token encoder, the relaxed
//! interpreter models (IPA-GNN and Exception IPA-GNN), sequence and MIL
//! baselines, and the training/evaluation loop.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod ipagnn;
pub mod metrics;
pub mod model;
pub mod train;
pub mod vocab;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{
    EncoderConfig, EncoderMode, MilAggregation, MilConfig, MilLocality, ModelKind, ModulationConfig, ModulationMethod,
    Pooling, TrainConfig,
};
pub use metrics::MetricsReport;
pub use model::{Model, Prediction};
pub use vocab::{Encoded, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} ids exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("modulation method `{0}` needs a resource description")]
    MissingDescription(&'static str),
    #[error("non-finite loss on example {example_id}")]
    NonFiniteLoss { example_id: usize },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Autodiff(#[from] ipagnn_autodiff::Error),
    #[error(transparent)]
    Parse(#[from] ipagnn_core::minilang::ParseError),
    #[error(transparent)]
    Corpus(#[from] ipagnn_core::corpus::CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
