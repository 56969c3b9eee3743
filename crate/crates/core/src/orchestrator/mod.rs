//! Training loop, checkpoints, synthetic data and the command-line front end.

pub mod cli;
pub mod config;
pub mod model;
pub mod synthetic;
pub mod trainer;

pub use config::{DiffusionLossMode, SingletonGuidance, TrainConfig};
pub use model::{BatchPlan, DiffusionDraw, LossTerms, Model};
pub use synthetic::{make_synthetic, SynthKind, SynthParams, Synthetic};
pub use trainer::{load_model, training_subsequences, EpochLog, Trainer, VALID_K};
