use thiserror::Error;

use crate::data::DataError;
use crate::loss::LossError;
use crate::model::ModelError;
use crate::neuron::NeuronError;
use crate::optim::OptimError;
use crate::quantizer::QuantError;
use crate::tensor::TensorError;

/// Broad failure classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Format,
    Data,
    Numeric,
    Shape,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Format => 4,
            ErrorCategory::Data => 5,
            ErrorCategory::Numeric => 6,
            ErrorCategory::Shape => 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Tensor(_) => ErrorCategory::Shape,
            Error::Quant(_) => ErrorCategory::Config,
            Error::Neuron(NeuronError::NumericFault { .. }) => ErrorCategory::Numeric,
            Error::Neuron(_) => ErrorCategory::Shape,
            Error::Model(e) => e.category(),
            Error::Loss(LossError::Tensor(_)) => ErrorCategory::Shape,
            Error::Loss(_) => ErrorCategory::Data,
            Error::Optim(_) => ErrorCategory::Numeric,
            Error::Data(e) => e.category(),
            Error::Config(_) => ErrorCategory::Config,
            Error::Diverged { .. } => ErrorCategory::Numeric,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }
}
