//! Small decoder-only language model trained with next-token prediction.

mod checkpoint;
mod config;
mod features;
mod model;
mod scalar;
mod train;

pub use checkpoint::{load_checkpoint, named_blocks, save_checkpoint, BlockEntry, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LmConfig, TrainRecipe};
pub use features::{extract_features, write_feature_file};
pub use model::{ntp_loss, row_losses, ForwardCache, LayerSpans, Logits, LmParams, ParamLayout, Span};
pub use scalar::Scalar;
pub use train::{
    evaluate, read_eval_csv, train, train_observed, window_losses, write_eval_csv, EvalReport, EvalWindows, TrainData, TrainOutcome,
    EVAL_CSV_HEADER,
};
