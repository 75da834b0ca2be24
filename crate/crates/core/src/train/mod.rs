//! Pretraining with the joint intra-item and graph-conditioned masked
//! language objectives, and retrieval finetuning with a squared hinge loss.

mod finetune;
mod hinge;
mod pretrain;

#[cfg(test)]
mod tests;

use crate::eval::EvalError;
use crate::model::ModelError;
use crate::nn::NnError;

pub use finetune::{
    finetune, restore, validation_map_at_1, BoundRetriever, ModelEmbedder, FinetuneConfig, FinetuneOutcome, FinetuneRecord,
    GridRun, Retriever, DEFAULT_LR_GRID, ITEM_MAP, SESSION_MAP,
};
pub use hinge::{hinge_loss, hinge_loss_tape, DEFAULT_EPS_NEG, DEFAULT_EPS_POS};
pub use pretrain::{pretrain, pretrain_step, PretrainConfig, PretrainRecord, PretrainSummary, StepOutcome};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
