//! Multi-label classification from partially labeled data.
//!
//! Four training strategies over precomputed frame embeddings, sharing one
//! attention-pooled multiple-instance classifier:
//!
//! * **B0**: missing labels are treated as negatives.
//! * **B1**: missing labels are masked out of the loss.
//! * **LE**: label enhancing. A B0 teacher flags likely missing positives,
//!   which are masked out while a fresh student trains.
//! * **MT**: Mean Teacher. Masked BCE plus a consistency term against an
//!   exponential moving average of the student.
//!
//! Data-parallel work (per-clip forward/backward passes, batch prediction,
//! replicated runs) goes through [`exec::Execution`]; disabling the
//! `parallel` feature falls back to sequential loops with identical results.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod io;
pub mod label_enhance;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optimizer;
pub mod seed;
pub mod synthetic;
pub mod trainers;

pub use dataset::{split_train_val, Dataset, EmbeddingSequence, Split};
pub use error::{Error, Result};
pub use exec::Execution;
pub use labels::{drop_labels, label_coverage, LabelState, PartialLabelMatrix};
pub use network::{AttentionMILParams, ModelShape, NoiseSpec};
pub use trainers::{Method, TrainConfig, TrainReport};
