//! Fine-tuning of small multilayer perceptrons with LoRA adapters, including the
//! skip topology (every adapter feeds the last layer) and a per-sample cache of
//! frozen-path activations that lets repeated samples skip the base network.
//!
//! Arithmetic is single-precision, hand-written and single-threaded; every
//! matrix kernel reports its multiply-accumulate count to a [`linalg::MacCounter`].

pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod network;
pub mod skipcache;
pub mod trainer;

pub use data::{gen_drifted, load_csv, Dataset, DriftSpec, LabelColumn, Standardizer};
pub use error::{Error, Result};
pub use linalg::{MacCounter, Matrix};
pub use network::{Checkpoint, FineTuneMode, Model, ModelSpec, ParamId};
pub use skipcache::SkipCache;
pub use trainer::{evaluate, finetune, grad_check, pretrain, RunMetrics, TrainConfig};
