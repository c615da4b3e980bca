//! Cross-modal attention encoders and contrastive pre-training for paired
//! document images and token sequences, on a small reverse-mode autodiff
//! engine.
//!
//! The usual entry points are [`RunConfig`] for settings, [`generate_corpus`]
//! or [`read_corpus`] for data, [`pretrain`] and [`probe`] for training and
//! evaluation, [`ablate`] for the module/objective comparison and
//! [`gradcheck_report`] for the finite-difference audit.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cross_modal;
pub mod data;
pub mod encoders;
pub mod error;
pub mod grad_audit;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use ablation::{ablate, AblationTable};
pub use autodiff::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Preset, RunConfig};
pub use data::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusRecord, SyntheticCorpusSpec};
pub use error::{Error, Result};
pub use grad_audit::{gradcheck_report, GradCheckReport};
pub use losses::{LossConfig, LossReport};
pub use model::Model;
pub use tensor::Tensor;
pub use train::{pretrain, probe, MetricsRecord, ProbeReport};
