use std::fmt;

use stillframe::evaluation::EvalError;
use stillframe::models::ModelError;
use stillframe::scenegen::{DatasetError, GenerationError};
use stillframe::training::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Runtime,
}

/// A command error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self { kind, error: error.into() }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Config, anyhow::anyhow!("{msg}"))
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Data, anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Runtime, anyhow::anyhow!("{msg}"))
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Runtime => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::Config(_) => Kind::Config,
        ModelError::Checkpoint { .. } | ModelError::Io { .. } => Kind::Data,
        ModelError::Divisibility { .. } | ModelError::Shape(_) => Kind::Data,
    }
}

fn dataset_kind(e: &DatasetError) -> Kind {
    match e {
        DatasetError::Generation(_) => Kind::Config,
        _ => Kind::Data,
    }
}

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::Config(_) | EvalError::Generation(_) => Kind::Config,
        EvalError::Dataset(d) => dataset_kind(d),
        EvalError::Model(m) => model_kind(m),
        EvalError::Shape(_) | EvalError::NoKnownPixels => Kind::Data,
        EvalError::Io { .. } | EvalError::Png { .. } => Kind::Runtime,
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) | TrainError::Loss(_) => Kind::Config,
            TrainError::Dataset(d) => dataset_kind(d),
            TrainError::Model(m) => model_kind(m),
            TrainError::Eval(v) => eval_kind(v),
            TrainError::Image(_) => Kind::Data,
            TrainError::NonFinite(_) | TrainError::Io { .. } => Kind::Runtime,
        };
        Self::new(kind, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::new(eval_kind(&e), e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Self::new(dataset_kind(&e), e)
    }
}

impl From<GenerationError> for Failure {
    fn from(e: GenerationError) -> Self {
        Self::new(Kind::Config, e)
    }
}
