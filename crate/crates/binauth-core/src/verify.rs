//! Verification scoring: per-author loss arrays for an anonymous binary and
//! the normalized score `(l_i - Avg(L)) / Var(L)`. Lower scores mean the
//! candidate author is more likely the developer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::Cfg;
use crate::model::{binary_loss, pretrain_binary_loss, ModelError, MosModel, PretrainModel};
use crate::trace::{encode_binary, Vocabulary};
use crate::train::TrainConfig;

/// Variance below this is treated as degenerate: every candidate model scores
/// the binary identically and the normalized score carries no information.
pub const DEGENERATE_VAR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("binary {binary_id} produced no chunks under the current extraction settings")]
    EmptyBinary { binary_id: String },
    #[error("verification needs at least 2 candidate authors, model has {0}")]
    TooFewAuthors(usize),
    #[error("unknown author {0}")]
    UnknownAuthor(String),
    #[error("author index {author} out of range ({n_authors} authors)")]
    BadAuthorIndex { author: usize, n_authors: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A binary's mean cross-entropy under every candidate author's language
/// model, in candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossArray {
    pub binary_id: String,
    pub author_ids: Vec<String>,
    pub losses: Vec<f64>,
}

impl LossArray {
    pub fn argmin(&self) -> usize {
        self.losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite losses"))
            .map(|(i, _)| i)
            .expect("non-empty loss array")
    }
}

/// The normalized verification score for one (author, binary) pair, with the
/// statistics it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationScore {
    pub binary_id: String,
    pub author_id: String,
    pub score: f64,
    pub loss: f64,
    pub avg: f64,
    pub var: f64,
    pub degenerate: bool,
}

impl VerificationScore {
    /// Higher-is-positive orientation for ROC/AP computations.
    pub fn detection_score(&self) -> f64 {
        -self.score
    }
}

/// Either the mixture-of-shared model or a bundle of independent per-author
/// language models (the "naive" architecture variant). Both expose the same
/// scoring surface.
#[derive(Debug, Clone)]
pub enum StyleModel {
    Mos(MosModel),
    PerAuthor {
        author_ids: Vec<String>,
        models: Vec<PretrainModel>,
    },
}

impl StyleModel {
    pub fn author_ids(&self) -> &[String] {
        match self {
            StyleModel::Mos(m) => &m.author_ids,
            StyleModel::PerAuthor { author_ids, .. } => author_ids,
        }
    }

    pub fn n_authors(&self) -> usize {
        self.author_ids().len()
    }

    /// Extraction settings the model was trained with (n-gram size, hop).
    pub fn extraction(&self) -> (usize, usize) {
        match self {
            StyleModel::Mos(m) => (m.dims.ngram, m.dims.hop),
            StyleModel::PerAuthor { models, .. } => (models[0].dims.ngram, models[0].dims.hop),
        }
    }

    pub fn binary_loss_for(
        &self,
        author: usize,
        chunks: &[crate::trace::TrainingChunk],
    ) -> Result<f64, ModelError> {
        match self {
            StyleModel::Mos(m) => binary_loss(m, author, chunks),
            StyleModel::PerAuthor { models, .. } => pretrain_binary_loss(&models[author], chunks),
        }
    }
}

/// Compute the loss array of `binary` against every candidate author,
/// preprocessing exactly as the training path does.
pub fn loss_array_any(
    model: &StyleModel,
    binary: &Cfg,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<LossArray, VerifyError> {
    let (ngram, hop) = model.extraction();
    debug_assert_eq!(ngram, cfg.ngram, "model/config n-gram mismatch");
    debug_assert_eq!(hop, cfg.hop, "model/config hop mismatch");
    let chunks = encode_binary(binary, vocab, cfg.ngram, cfg.truncation, cfg.hop, "<anonymous>");
    if chunks.is_empty() {
        return Err(VerifyError::EmptyBinary { binary_id: binary.binary_id.clone() });
    }
    let losses = (0..model.n_authors())
        .map(|author| model.binary_loss_for(author, &chunks))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(LossArray {
        binary_id: binary.binary_id.clone(),
        author_ids: model.author_ids().to_vec(),
        losses,
    })
}

pub fn loss_array(
    model: &MosModel,
    binary: &Cfg,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<LossArray, VerifyError> {
    loss_array_any(&StyleModel::Mos(model.clone()), binary, cfg, vocab)
}

/// Normalize one entry of the loss array by the array's own population mean
/// and population variance. A near-zero variance yields score 0 with the
/// degenerate flag set.
pub fn score(array: &LossArray, author: usize) -> Result<VerificationScore, VerifyError> {
    let n = array.losses.len();
    if n < 2 {
        return Err(VerifyError::TooFewAuthors(n));
    }
    if author >= n {
        return Err(VerifyError::BadAuthorIndex { author, n_authors: n });
    }
    let avg = array.losses.iter().sum::<f64>() / n as f64;
    let var = array.losses.iter().map(|l| (l - avg) * (l - avg)).sum::<f64>() / n as f64;
    let loss = array.losses[author];
    let (value, degenerate) = if var < DEGENERATE_VAR {
        log::warn!(
            "degenerate loss array for {}: all candidate models score it identically",
            array.binary_id
        );
        (0.0, true)
    } else {
        ((loss - avg) / var, false)
    };
    Ok(VerificationScore {
        binary_id: array.binary_id.clone(),
        author_id: array.author_ids[author].clone(),
        score: value,
        loss,
        avg,
        var,
        degenerate,
    })
}

pub fn score_by_id(array: &LossArray, author_id: &str) -> Result<VerificationScore, VerifyError> {
    let author = array
        .author_ids
        .iter()
        .position(|a| a == author_id)
        .ok_or_else(|| VerifyError::UnknownAuthor(author_id.to_string()))?;
    score(array, author)
}
