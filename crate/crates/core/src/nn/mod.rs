//! A small dense-tensor engine: row-major matrices, a reverse-mode tape,
//! fused masked multi-head attention, Adam and checkpoints.
//!
//! All math is generic over [`Real`] so the same code runs in `f64` for
//! gradient checks and `f32` for training.

mod attention;
mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod real;
mod schedule;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use attention::{multihead_self_attention, AttentionMask};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta,
    CKPT_HEADER,
};
pub use gradcheck::{
    gradcheck, relative_error, GradcheckOptions, GradcheckReport, ParamCheck, GRADCHECK_STEP,
    GRADCHECK_TOL,
};
pub use layers::{
    normal_tensor, uniform_tensor, LayerNorm, Linear, SelfAttention, TransformerBlock, MLP_RATIO,
};
pub use params::{AdamConfig, ParamId, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use real::{Dtype, Real};
pub use schedule::{lr_schedule, DEFAULT_FLOOR_LR, DEFAULT_PEAK_LR, DEFAULT_WARMUP_FRAC};
pub use tape::{AttnLayout, Gradients, Segment, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{heads} heads do not divide width {width}")]
    Heads { heads: usize, width: usize },
    #[error("attention mask row {row} allows no position")]
    EmptyMaskRow { row: usize },
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("learning-rate floor {floor} exceeds peak {peak}")]
    FloorAbovePeak { floor: f64, peak: f64 },
    #[error("schedule step {step} outside 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
