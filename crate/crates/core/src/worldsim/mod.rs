//! Synthetic task world standing in for a language model.
//!
//! Every query carries a pretabulated baseline outcome and, per second-pass
//! context, the outcome the memory-conditioned pass would produce if the
//! injected entries are applicable or not. Confidences are drawn from a
//! family with a known correct-vs-incorrect AUC. Embeddings put each query
//! and entry on a topic axis, so retrieval finds same-topic entries.
//!
//! All draws are keyed on `(seed, ...)` so a world regenerates bit for bit,
//! and outcome draws are keyed on entry identity rather than content, which
//! makes content-edit comparisons use common random numbers.

mod confidence;
mod embedding;
mod spec;
mod world;

pub use confidence::{auc_for_shape, shape_for_auc, ConfidenceModel};
pub use embedding::topic_embedding;
pub use spec::WorldSpec;
pub use world::{
    calibrate_help_prob, oracle_accuracy, ContentVersion, ContextOutcome, EntryInfo, EpisodeRef,
    ExampleOutcomeRow, World,
};

use crate::bank::BankError;
use crate::config::ConfigError;
use crate::controller::ControllerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("{key} = {value} is not a probability")]
    InvalidProbability { key: &'static str, value: f64 },
    #[error("invalid world: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}
