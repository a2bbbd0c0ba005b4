//! Training stages, checkpoints and evaluation.

pub mod checkpoint;
pub mod eval;
pub mod train;

pub use checkpoint::{Checkpoint, Stage};
pub use eval::{evaluate, run_eval, EvalReport, EvalRow};
pub use train::{compute_pairs, pairs_to_tsv, read_pairs, run_adapt, run_warmup, AdaptOutcome, RunOptions, WarmupOutcome};
