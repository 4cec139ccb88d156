//! Binary authorship verification toolkit.
//!
//! The pipeline: disassembler-exported CFGs come in as CFG-JSON ([`cfg`]),
//! get flattened into flow-aware opcode n-gram sequences ([`trace`]), train a
//! mixture-of-shared LSTM language model per candidate author
//! ([`model`], [`train`]), and anonymous binaries are scored against each
//! candidate by normalized language-model loss ([`verify`]). The evaluation
//! harness ([`eval`]) builds verification pairs and computes AUC-ROC/AP, and
//! [`synth`] generates Markov-mixture corpora with an exact likelihood oracle
//! for controlled experiments.

pub mod cfg;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod trace;
pub mod train;
pub mod verify;
