use std::io;

use crate::net::Model;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged {
        epoch: usize,
        loss: f64,
        best: Box<Model>,
    },
    #[error("separability needs at least 2 classes with 2 images each, got {0}")]
    InsufficientClasses(usize),
    #[error("baseline separability {0} is not positive")]
    DegenerateBaseline(f64),
    #[error("unknown layer id {0}")]
    UnknownLayer(usize),
    #[error("invalid prune amount {0}")]
    InvalidAmount(f64),
    #[error("layer {0} has no weights")]
    NoWeights(usize),
    #[error("budget {budget} exceeds {available} prunable units")]
    BudgetTooLarge { budget: usize, available: usize },
    #[error("all clustering weights are zero")]
    ZeroMass,
    #[error("model has zero cost under the selected criteria")]
    ZeroCost,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Library module that raises this kind of error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::InvalidShape(_)
            | Error::CorruptModel(_)
            | Error::Format { .. }
            | Error::UnsupportedVersion(_) => "tensor-net",
            Error::TrainingDiverged { .. } => "trainer",
            Error::EmptyDataset => "data",
            Error::InsufficientClasses(_) | Error::DegenerateBaseline(_) => "sensitivity",
            Error::UnknownLayer(_)
            | Error::InvalidAmount(_)
            | Error::NoWeights(_)
            | Error::BudgetTooLarge { .. } => "pruner",
            Error::ZeroMass => "wsq",
            Error::ZeroCost => "profiler",
            Error::InvalidConfig(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "InvalidShape",
            Error::CorruptModel(_) => "CorruptModel",
            Error::Format { .. } => "FormatError",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::EmptyDataset => "EmptyDataset",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::InsufficientClasses(_) => "InsufficientClasses",
            Error::DegenerateBaseline(_) => "DegenerateBaseline",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::InvalidAmount(_) => "InvalidAmount",
            Error::NoWeights(_) => "NoWeights",
            Error::BudgetTooLarge { .. } => "BudgetTooLarge",
            Error::ZeroMass => "ZeroMass",
            Error::ZeroCost => "ZeroCost",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::InvalidShape(msg.into())
}
