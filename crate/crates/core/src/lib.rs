//! Instance-wise prompt tuning on a frozen, desk-scale transformer.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense tensors, reverse-mode tape, Adam, gradient checking
//! - [`text`]: vocabulary, task templates, JSONL ingestion, splits, synthetic corpora
//! - [`backbone`]: masked-LM transformer, prompted forward pass, checkpoints, accounting
//! - [`prompts`]: prompt strategies (task prompt, prefix, random/pretrained/encoder IPT)
//! - [`knowledge`]: category-classifier pretraining that seeds the prompt table
//! - [`harness`]: frozen-backbone training, few-shot protocol, sweeps, reports
//! - [`analysis`]: PCA projection, distance statistics, nearest-token case studies
//! - [`cli`]: the `ipt` command-line driver

pub mod analysis;
pub mod backbone;
pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod knowledge;
pub mod prompts;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
