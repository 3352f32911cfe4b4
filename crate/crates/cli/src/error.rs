use neurodecode::ctc::CtcError;
use neurodecode::dataio::DataError;
use neurodecode::model::ModelError;
use neurodecode::training::TrainError;

/// Failures with their process exit codes.
#[derive(Debug, PartialEq, Eq)]
pub enum Failure {
    Config(String),
    Io(String),
    Diverged(String),
    Checkpoint(String),
    TrialTooShort(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Diverged(_) => 4,
            Failure::Checkpoint(_) => 5,
            Failure::TrialTooShort(_) => 6,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m)
            | Failure::Io(m)
            | Failure::Diverged(m)
            | Failure::Checkpoint(m)
            | Failure::TrialTooShort(m) => m,
        }
    }

    pub fn data(e: DataError) -> Self {
        match e {
            DataError::Spec(_) => Failure::Config(e.to_string()),
            e => Failure::Io(e.to_string()),
        }
    }

    /// Model errors met while loading a checkpoint.
    pub fn checkpoint(e: ModelError) -> Self {
        match e {
            ModelError::TrialTooShort { .. } => Failure::TrialTooShort(e.to_string()),
            e => Failure::Checkpoint(e.to_string()),
        }
    }

    pub fn model(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Input(_) | ModelError::SessionOutOfRange { .. } => {
                Failure::Config(e.to_string())
            }
            ModelError::TrialTooShort { .. } => Failure::TrialTooShort(e.to_string()),
            ModelError::Io { .. } => Failure::Io(e.to_string()),
            e => Failure::Checkpoint(e.to_string()),
        }
    }

    pub fn train(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Config(e.to_string()),
            TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
            TrainError::Checkpoint { .. } => Failure::Checkpoint(e.to_string()),
            TrainError::Io { .. } => Failure::Io(e.to_string()),
            TrainError::Model(m) => Failure::model(m),
            TrainError::Ctc(c @ CtcError::NotNormalized { .. }) => Failure::Diverged(c.to_string()),
            TrainError::Ctc(c) => Failure::Config(c.to_string()),
        }
    }
}
