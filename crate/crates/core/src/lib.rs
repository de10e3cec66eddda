//! Sparse-feature click-through-rate models (LR, FM, DNN, Wide & Deep) and
//! their memory-augmented variants, which keep a like and a dislike vector
//! per user and feed them to the network beside the feature embeddings.
//!
//! Everything runs in `f64` with hand-written gradients and Adagrad, over
//! time-ordered streams read from tab-separated files.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod numeric;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{DatasetSchema, FieldSpec, FieldValue, Instance};
pub use error::{CheckpointError, Error, Result};
pub use eval::{auc, evaluate_model, mean_logloss, EvalReport, ScoredSet};
pub use memory::UserMemoryStore;
pub use model::{ModelKind, ModelParams};
pub use train::{train_step, ModelState, TrainConfig, Trainer};
