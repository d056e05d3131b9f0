//! The joint task + alignment objective, the training loop, and checkpoint
//! persistence.
//!
//! The total objective per step is `L_total = L_task + alpha * L_align`,
//! where `L_task` is cross-entropy of the entity head at the masked target
//! plus a next-token language-modeling term, and `L_align` is the summed
//! squared Euclidean distance between the contextual and knowledge vectors
//! of knowledge-bearing tokens.

mod checkpoint;
mod config;
mod model;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, FORMAT_VERSION};
pub use config::{OptimizerChoice, TrainConfig};
pub use model::{alignment_loss_value, Model, SentencePrediction};
pub use run::{train, StepRecord, TrainHistory, HISTORY_CSV_HEADER};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corpus sentence {index} has {len} tokens, exceeding max_len {max_len}")]
    SentenceTooLong { index: usize, len: usize, max_len: usize },
    #[error("corpus mentions unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] crate::kgdata::DataError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Encoder(#[from] crate::graph_encoder::EncoderError),
    #[error(transparent)]
    Context(#[from] crate::context_encoder::ContextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// True when the error is a numeric blow-up (NaN/Inf) rather than a
    /// contract violation; the training loop turns these into a DIVERGED
    /// flag instead of failing.
    pub fn is_numeric_blowup(&self) -> bool {
        use crate::numerics::NumericsError::NonFinite;
        matches!(
            self,
            TrainError::Numerics(NonFinite { .. })
                | TrainError::Encoder(crate::graph_encoder::EncoderError::Numerics(NonFinite { .. }))
                | TrainError::Context(crate::context_encoder::ContextError::Numerics(NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Stream tags for deriving independent RNG streams from the run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const COVERAGE: u64 = 3;
    pub const PERTURB: u64 = 4;
}
