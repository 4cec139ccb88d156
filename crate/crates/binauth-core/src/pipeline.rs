//! End-to-end orchestration: manifests in, trained model and scored
//! verification pairs out. Shared by the command-line tool and the
//! experiment suites.

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::{load_cfg, Cfg, CfgError, CorpusManifest};
use crate::eval::{mix_collaborators, EvalError, PairLabel, VerificationPair};
use crate::model::ModelError;
use crate::seed;
use crate::synth::{oracle_loss_array, GroundTruth, SynthError};
use crate::trace::{
    build_vocab, encode_binary, extract_ngram_sequences, TraceError, TrainingChunk, Vocabulary,
};
use crate::train::{
    finetune, init_from_pretrained, joint_train, pretrain, train_lm_from, AuthorCorpus,
    TrainConfig, TrainError, TrainRecord,
};
use crate::verify::{loss_array_any, score_by_id, StyleModel, VerificationScore, VerifyError};

const TAG_NAIVE: u64 = 0x2000;
const TAG_MIX: u64 = 0x3000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cfg(#[from] CfgError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Model/pipeline variants compared in the architecture sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Independent language model per author.
    Naive,
    /// Mixture-of-shared with a single shared encoder, joint training only.
    SingleEncoder,
    /// Full mixture-of-shared, joint training only.
    Mos,
    /// Mixture-of-shared plus the two-phase pipeline (fine-tuning, no
    /// regularization).
    MosOpt,
    /// The full method: mixture-of-shared, fine-tuning, decoder
    /// regularization.
    MosOptReg,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Naive,
        Architecture::SingleEncoder,
        Architecture::Mos,
        Architecture::MosOpt,
        Architecture::MosOptReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Naive => "naive",
            Architecture::SingleEncoder => "single-encoder",
            Architecture::Mos => "mos",
            Architecture::MosOpt => "mos-opt",
            Architecture::MosOptReg => "mos-opt-reg",
        }
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture {s:?}"))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Vocabulary plus encoded chunks for the pre-training corpus and every
/// candidate author.
pub struct EncodedCorpora {
    pub vocab: Vocabulary,
    pub pretrain_chunks: Vec<TrainingChunk>,
    pub authors: Vec<AuthorCorpus>,
}

/// Load both corpora, build the vocabulary from the pre-training corpus
/// (capped at `vocab_cap`), and encode everything into training chunks.
pub fn prepare_corpora(
    pretrain_manifest: &CorpusManifest,
    train_manifest: &CorpusManifest,
    cfg: &TrainConfig,
) -> Result<EncodedCorpora, PipelineError> {
    let pretrain_cfgs = load_manifest_cfgs(pretrain_manifest)?;
    let sequences: Vec<_> = pretrain_cfgs
        .iter()
        .flat_map(|(_, cfgs)| cfgs)
        .flat_map(|c| extract_ngram_sequences(c, cfg.ngram))
        .collect();
    let vocab = build_vocab(&sequences, cfg.vocab_cap)?;

    let mut pretrain_chunks = Vec::new();
    for (author_id, cfgs) in &pretrain_cfgs {
        for c in cfgs {
            pretrain_chunks.extend(encode_binary(
                c,
                &vocab,
                cfg.ngram,
                cfg.truncation,
                cfg.hop,
                author_id,
            ));
        }
    }

    let train_cfgs = load_manifest_cfgs(train_manifest)?;
    let authors = train_cfgs
        .into_iter()
        .map(|(author_id, cfgs)| {
            let chunks = cfgs
                .iter()
                .flat_map(|c| {
                    encode_binary(c, &vocab, cfg.ngram, cfg.truncation, cfg.hop, &author_id)
                })
                .collect();
            AuthorCorpus { author_id, chunks }
        })
        .collect();

    Ok(EncodedCorpora { vocab, pretrain_chunks, authors })
}

/// CFGs per author, loaded in parallel, manifest order preserved.
pub fn load_manifest_cfgs(
    manifest: &CorpusManifest,
) -> Result<Vec<(String, Vec<Cfg>)>, PipelineError> {
    manifest
        .authors
        .par_iter()
        .map(|author| {
            let cfgs = author
                .samples
                .iter()
                .map(|p| load_cfg(p))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((author.author_id.clone(), cfgs))
        })
        .collect()
}

/// A trained scoring model with everything needed to verify binaries.
pub struct TrainedPipeline {
    pub model: StyleModel,
    pub vocab: Vocabulary,
    pub cfg: TrainConfig,
    pub records: Vec<TrainRecord>,
}

/// One scored verification pair.
#[derive(Debug, Clone)]
pub struct ScoredPair {
    pub detection: f64,
    pub positive: bool,
    pub score: VerificationScore,
}

pub fn scored_to_metric_input(scored: &[ScoredPair]) -> Vec<(f64, bool)> {
    scored.iter().map(|s| (s.detection, s.positive)).collect()
}

/// Run pre-training plus the architecture-specific candidate stage.
pub fn train_architecture(
    corpora: &EncodedCorpora,
    cfg: &TrainConfig,
    arch: Architecture,
) -> Result<TrainedPipeline, PipelineError> {
    let (pre, mut records) = pretrain(&corpora.pretrain_chunks, corpora.vocab.size(), cfg)?;
    let author_ids: Vec<String> = corpora.authors.iter().map(|a| a.author_id.clone()).collect();

    let model = match arch {
        Architecture::Naive => {
            let results: Vec<_> = corpora
                .authors
                .par_iter()
                .enumerate()
                .map(|(i, author)| {
                    train_lm_from(
                        pre.clone(),
                        &author.chunks,
                        cfg.joint_epochs,
                        "naive",
                        Some(&author.author_id),
                        seed::derive(cfg.seed, TAG_NAIVE + i as u64),
                        cfg,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut models = Vec::with_capacity(results.len());
            for (m, recs) in results {
                models.push(m);
                records.extend(recs);
            }
            StyleModel::PerAuthor { author_ids, models }
        }
        Architecture::SingleEncoder
        | Architecture::Mos
        | Architecture::MosOpt
        | Architecture::MosOptReg => {
            let mut stage_cfg = cfg.clone();
            if arch == Architecture::SingleEncoder {
                stage_cfg.encoders = 1;
            }
            if arch == Architecture::MosOpt {
                stage_cfg.lambda = 0.0;
            }
            let model = init_from_pretrained(&pre, author_ids, &stage_cfg)?;
            let (model, joint_records) = joint_train(model, &corpora.authors, &stage_cfg)?;
            records.extend(joint_records);
            let model = match arch {
                Architecture::SingleEncoder | Architecture::Mos => model,
                _ => {
                    let (model, ft_records) = finetune(model, &corpora.authors, &stage_cfg)?;
                    records.extend(ft_records);
                    model
                }
            };
            StyleModel::Mos(model)
        }
    };
    Ok(TrainedPipeline { model, vocab: corpora.vocab.clone(), cfg: cfg.clone(), records })
}

impl TrainedPipeline {
    /// Score pairs whose binaries live on disk. Each distinct path is loaded
    /// and scored once; loss arrays are computed in parallel.
    pub fn score_pairs(&self, pairs: &[VerificationPair]) -> Result<Vec<ScoredPair>, PipelineError> {
        let mut unique: Vec<&PathBuf> = Vec::new();
        let mut index: HashMap<&PathBuf, usize> = HashMap::new();
        for pair in pairs {
            if !index.contains_key(&pair.path) {
                index.insert(&pair.path, unique.len());
                unique.push(&pair.path);
            }
        }
        let arrays = unique
            .par_iter()
            .map(|path| {
                let binary = load_cfg(path)?;
                Ok(loss_array_any(&self.model, &binary, &self.cfg, &self.vocab)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        pairs
            .iter()
            .map(|pair| {
                let array = &arrays[index[&pair.path]];
                let score = score_by_id(array, &pair.author_id)?;
                Ok(ScoredPair {
                    detection: score.detection_score(),
                    positive: pair.label == PairLabel::Positive,
                    score,
                })
            })
            .collect()
    }

    /// Score pairs against explicit in-memory binaries (one per pair).
    pub fn score_pair_cfgs(
        &self,
        pairs: &[VerificationPair],
        cfgs: &[Cfg],
    ) -> Result<Vec<ScoredPair>, PipelineError> {
        assert_eq!(pairs.len(), cfgs.len());
        let arrays = cfgs
            .par_iter()
            .map(|binary| Ok(loss_array_any(&self.model, binary, &self.cfg, &self.vocab)?))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        pairs
            .iter()
            .zip(&arrays)
            .map(|(pair, array)| {
                let score = score_by_id(array, &pair.author_id)?;
                Ok(ScoredPair {
                    detection: score.detection_score(),
                    positive: pair.label == PairLabel::Positive,
                    score,
                })
            })
            .collect()
    }
}

/// Score the same pairs with the generator's exact-likelihood oracle, using
/// the same candidate-set normalization as the verifier.
pub fn oracle_score_pairs(
    truth: &GroundTruth,
    pairs: &[VerificationPair],
) -> Result<Vec<ScoredPair>, PipelineError> {
    let cfgs = pairs
        .par_iter()
        .map(|pair| Ok(load_cfg(&pair.path)?))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    oracle_score_pair_cfgs(truth, pairs, &cfgs)
}

pub fn oracle_score_pair_cfgs(
    truth: &GroundTruth,
    pairs: &[VerificationPair],
    cfgs: &[Cfg],
) -> Result<Vec<ScoredPair>, PipelineError> {
    assert_eq!(pairs.len(), cfgs.len());
    let arrays = cfgs
        .par_iter()
        .map(|binary| Ok(oracle_loss_array(truth, binary)?))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    pairs
        .iter()
        .zip(&arrays)
        .map(|(pair, array)| {
            let score = score_by_id(array, &pair.author_id)?;
            // Detection statistic: the candidate's log-likelihood margin over
            // the best competing candidate (the loss array holds negated
            // per-opcode log-likelihoods).
            let own_idx = array
                .author_ids
                .iter()
                .position(|a| a == &pair.author_id)
                .expect("author present");
            let own = -array.losses[own_idx];
            let best_other = array
                .losses
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != own_idx)
                .map(|(_, l)| -l)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(ScoredPair {
                detection: own - best_other,
                positive: pair.label == PairLabel::Positive,
                score,
            })
        })
        .collect()
}

/// For every pair, build the collaborator-mixed variant of its binary: two
/// donor authors other than the pair's candidate contribute whole functions
/// from their training samples until the original share approaches
/// `proportion` from above.
pub fn mixed_pair_cfgs(
    pairs: &[VerificationPair],
    train_manifest: &CorpusManifest,
    proportion: f64,
    mix_seed: u64,
) -> Result<Vec<Cfg>, PipelineError> {
    let candidate_ids: Vec<&str> =
        train_manifest.authors.iter().map(|a| a.author_id.as_str()).collect();
    let mut cache: HashMap<PathBuf, Cfg> = HashMap::new();
    let mut load_cached = |path: &PathBuf| -> Result<Cfg, PipelineError> {
        if let Some(c) = cache.get(path) {
            return Ok(c.clone());
        }
        let c = load_cfg(path)?;
        cache.insert(path.clone(), c.clone());
        Ok(c)
    };

    let mut out = Vec::with_capacity(pairs.len());
    for (idx, pair) in pairs.iter().enumerate() {
        let binary = load_cached(&pair.path)?;
        if proportion >= 1.0 {
            out.push(binary);
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive(mix_seed, TAG_MIX + idx as u64));
        let mut donors: Vec<usize> = (0..candidate_ids.len())
            .filter(|&i| candidate_ids[i] != pair.author_id)
            .collect();
        assert!(donors.len() >= 2, "need at least 3 candidate authors for mixing");
        for k in 0..2 {
            let j = rng.gen_range(k..donors.len());
            donors.swap(k, j);
        }
        let mut donor_cfgs = Vec::with_capacity(2);
        for &d in &donors[..2] {
            let samples = &train_manifest.authors[d].samples;
            let pick = rng.gen_range(0..samples.len());
            donor_cfgs.push(load_cached(&samples[pick])?);
        }
        let donor_refs: Vec<&Cfg> = donor_cfgs.iter().collect();
        out.push(mix_collaborators(&binary, &donor_refs, proportion, rng.gen())?);
    }
    Ok(out)
}

/// Nested ratio subsets: keep every positive and its first `ratio` negatives.
/// Requires the `build_pairs` layout (each positive followed by its
/// negatives), which makes lower-ratio pair sets strict subsets of higher
/// ones so AUC/AP comparisons across ratios see the same scored pairs.
pub fn subset_pairs_by_ratio(pairs: &[VerificationPair], ratio: usize) -> Vec<usize> {
    let mut keep = Vec::new();
    let mut negatives_kept = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        match pair.label {
            PairLabel::Positive => {
                negatives_kept = 0;
                keep.push(i);
            }
            PairLabel::Negative => {
                if negatives_kept < ratio {
                    negatives_kept += 1;
                    keep.push(i);
                }
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::NegativeOrigin;

    fn pair(author: &str, label: PairLabel) -> VerificationPair {
        VerificationPair {
            author_id: author.into(),
            path: PathBuf::from(format!("{author}.json")),
            label,
            negative_origin: matches!(label, PairLabel::Negative)
                .then_some(NegativeOrigin::Wild),
        }
    }

    #[test]
    fn ratio_subsets_are_nested() {
        let mut pairs = Vec::new();
        for _ in 0..3 {
            pairs.push(pair("a", PairLabel::Positive));
            for _ in 0..4 {
                pairs.push(pair("a", PairLabel::Negative));
            }
        }
        let r1 = subset_pairs_by_ratio(&pairs, 1);
        let r2 = subset_pairs_by_ratio(&pairs, 2);
        let r4 = subset_pairs_by_ratio(&pairs, 4);
        assert_eq!(r1.len(), 6);
        assert_eq!(r2.len(), 9);
        assert_eq!(r4.len(), 15);
        assert!(r1.iter().all(|i| r2.contains(i)));
        assert!(r2.iter().all(|i| r4.contains(i)));
    }

    #[test]
    fn architecture_names_roundtrip() {
        for arch in Architecture::ALL {
            assert_eq!(arch.name().parse::<Architecture>().unwrap(), arch);
        }
        assert!("resnet".parse::<Architecture>().is_err());
    }
}
