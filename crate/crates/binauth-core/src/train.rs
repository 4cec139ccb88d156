//! Three-stage optimization: external pre-training, joint training of the
//! mixture-of-shared model, and per-author decoder fine-tuning with L1
//! regularization toward the other decoders.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    backward, backward_decoder_only, forward_author_traced, pretrain_backward, pretrain_forward,
    pretrain_forward_traced, GateMode, ModelDims, ModelError, MosGrads, MosModel, PretrainGrads,
    PretrainModel,
};
use crate::nn::{adam_step, Affine, AffineGrads, AdamState};
use crate::seed;
use crate::trace::TrainingChunk;

const TAG_PRETRAIN_INIT: u64 = 0x01;
const TAG_PRETRAIN_SHUFFLE: u64 = 0x02;
const TAG_PRETRAIN_SPLIT: u64 = 0x03;
const TAG_INIT_TRANSFER: u64 = 0x04;
const TAG_JOINT: u64 = 0x05;
const TAG_FINETUNE: u64 = 0x1000;
const TAG_DEV_SPLIT: u64 = 0x4000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty corpus: nothing to train on")]
    EmptyCorpus,
    #[error("author {author_id} has no chunks")]
    EmptyAuthor { author_id: String },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// All training hyperparameters. The defaults are the reference settings:
/// 5-gram units with 3-hop targets, 20-step truncation, hidden size 64,
/// 5 shared encoders, Adam at 1e-2 and regularization weight 1e-4.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ngram: usize,
    pub hop: usize,
    pub truncation: usize,
    pub hidden_dim: usize,
    pub encoders: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub vocab_cap: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub finetune_epochs: usize,
    pub symmetry_break_eps: f64,
    pub seed: u64,
    pub per_dimension_gate: bool,
    /// Scale copied decoder weights by 2/s at transfer so the 0.5-gated sum of
    /// near-identical encoders reproduces the pre-trained logits.
    pub rescale_decoder_init: bool,
    /// Held-out fraction of the pre-training corpus used for early stopping.
    pub holdout_fraction: f64,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ngram: 5,
            hop: 3,
            truncation: 20,
            hidden_dim: 64,
            encoders: 5,
            learning_rate: 1e-2,
            lambda: 1e-4,
            vocab_cap: 20_000,
            batch_size: 32,
            pretrain_epochs: 20,
            joint_epochs: 30,
            finetune_epochs: 10,
            symmetry_break_eps: 1e-3,
            seed: 42,
            per_dimension_gate: false,
            rescale_decoder_init: true,
            holdout_fraction: 0.1,
            early_stop_patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn gate_mode(&self) -> GateMode {
        if self.per_dimension_gate {
            GateMode::PerDimension
        } else {
            GateMode::PerEncoder
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("ngram", self.ngram),
            ("hop", self.hop),
            ("truncation", self.truncation),
            ("hidden_dim", self.hidden_dim),
            ("encoders", self.encoders),
            ("vocab_cap", self.vocab_cap),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::ConfigMismatch(format!("{name} must be positive")));
            }
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::ConfigMismatch("learning_rate must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::ConfigMismatch("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(TrainError::ConfigMismatch("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: String,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    pub loss: f64,
}

/// A candidate author's encoded training chunks.
#[derive(Debug, Clone)]
pub struct AuthorCorpus {
    pub author_id: String,
    pub chunks: Vec<TrainingChunk>,
}

struct AffineAdam {
    w: AdamState,
    b: AdamState,
}

impl AffineAdam {
    fn new(layer: &Affine, lr: f64) -> Self {
        Self {
            w: AdamState::new(layer.w.data().len(), lr),
            b: AdamState::new(layer.b.len(), lr),
        }
    }

    fn step(&mut self, layer: &mut Affine, grads: &AffineGrads) {
        adam_step(layer.w.data_mut(), grads.w.data(), &mut self.w).expect("affine w shapes");
        adam_step(&mut layer.b, &grads.b, &mut self.b).expect("affine b shapes");
    }
}

struct LstmAdam {
    w_ih: AdamState,
    w_hh: AdamState,
    bias: AdamState,
}

impl LstmAdam {
    fn new(params: &crate::nn::LstmParams, lr: f64) -> Self {
        Self {
            w_ih: AdamState::new(params.w_ih.data().len(), lr),
            w_hh: AdamState::new(params.w_hh.data().len(), lr),
            bias: AdamState::new(params.bias.len(), lr),
        }
    }

    fn step(&mut self, params: &mut crate::nn::LstmParams, grads: &crate::nn::LstmGrads) {
        adam_step(params.w_ih.data_mut(), grads.w_ih.data(), &mut self.w_ih).expect("lstm w_ih");
        adam_step(params.w_hh.data_mut(), grads.w_hh.data(), &mut self.w_hh).expect("lstm w_hh");
        adam_step(&mut params.bias, &grads.bias, &mut self.bias).expect("lstm bias");
    }
}

/// Number of contiguous slices a batch is split into for parallel gradient
/// evaluation; group results are summed in index order so the total is
/// independent of thread scheduling.
const GRAD_GROUPS: usize = 4;

fn pretrain_batch_grads(
    model: &PretrainModel,
    batch: &[&TrainingChunk],
    grads: &mut PretrainGrads,
) -> f64 {
    grads.reset();
    let scale = 1.0 / batch.len() as f64;
    if batch.len() < GRAD_GROUPS * 2 {
        let mut loss = 0.0;
        for chunk in batch {
            let trace = pretrain_forward_traced(model, chunk).expect("validated chunk");
            loss += trace.mean_loss();
            pretrain_backward(trace, model, grads, scale);
        }
        return loss * scale;
    }
    let group_len = batch.len().div_ceil(GRAD_GROUPS);
    let partials: Vec<(PretrainGrads, f64)> = batch
        .par_chunks(group_len)
        .map(|group| {
            let mut g = PretrainGrads::zeros(model);
            let mut loss = 0.0;
            for chunk in group {
                let trace = pretrain_forward_traced(model, chunk).expect("validated chunk");
                loss += trace.mean_loss();
                pretrain_backward(trace, model, &mut g, scale);
            }
            (g, loss)
        })
        .collect();
    let mut loss = 0.0;
    for (g, l) in &partials {
        grads.add_assign(g);
        loss += l;
    }
    loss * scale
}

fn mos_batch_grads(
    model: &MosModel,
    author: usize,
    batch: &[&TrainingChunk],
    grads: &mut MosGrads,
) -> f64 {
    grads.reset();
    let scale = 1.0 / batch.len() as f64;
    if batch.len() < GRAD_GROUPS * 2 {
        let mut loss = 0.0;
        for chunk in batch {
            let trace = forward_author_traced(model, author, chunk).expect("validated chunk");
            loss += trace.mean_loss();
            backward(trace, model, grads, scale);
        }
        return loss * scale;
    }
    let group_len = batch.len().div_ceil(GRAD_GROUPS);
    let partials: Vec<(MosGrads, f64)> = batch
        .par_chunks(group_len)
        .map(|group| {
            let mut g = MosGrads::zeros(model, author);
            let mut loss = 0.0;
            for chunk in group {
                let trace = forward_author_traced(model, author, chunk).expect("validated chunk");
                loss += trace.mean_loss();
                backward(trace, model, &mut g, scale);
            }
            (g, loss)
        })
        .collect();
    let mut loss = 0.0;
    for (g, l) in &partials {
        grads.add_assign(g);
        loss += l;
    }
    loss * scale
}

fn mean_position_loss(model: &PretrainModel, chunks: &[&TrainingChunk]) -> f64 {
    let mut total = 0.0;
    let mut positions = 0usize;
    for chunk in chunks {
        let (_, losses) = pretrain_forward(model, chunk).expect("validated chunk");
        total += losses.iter().sum::<f64>();
        positions += losses.len();
    }
    total / positions as f64
}

/// Train the single-encoder language model on an unlabeled corpus. A held-out
/// split early-stops the epoch budget; the best-scoring snapshot is returned.
pub fn pretrain(
    chunks: &[TrainingChunk],
    vocab_size: usize,
    cfg: &TrainConfig,
) -> Result<(PretrainModel, Vec<TrainRecord>), TrainError> {
    cfg.validate()?;
    if chunks.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let dims = ModelDims {
        vocab: vocab_size,
        embed: cfg.hidden_dim,
        hidden: cfg.hidden_dim,
        encoders: 1,
        authors: 1,
        ngram: cfg.ngram,
        hop: cfg.hop,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_PRETRAIN_INIT));
    let mut model = PretrainModel::init(dims, &mut init_rng);
    let mut records = Vec::new();
    if cfg.pretrain_epochs == 0 {
        return Ok((model, records));
    }

    // Held-out split for early stopping.
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_PRETRAIN_SPLIT));
    let mut indices: Vec<usize> = (0..chunks.len()).collect();
    indices.shuffle(&mut split_rng);
    let held = ((chunks.len() as f64 * cfg.holdout_fraction) as usize).min(chunks.len() - 1);
    let (held_idx, train_idx) = indices.split_at(held);
    let held_chunks: Vec<&TrainingChunk> = held_idx.iter().map(|&i| &chunks[i]).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let mut emb_state = AdamState::new(model.embedding.data().len(), cfg.learning_rate);
    let mut enc_state = LstmAdam::new(&model.encoder, cfg.learning_rate);
    let mut dec_state = AffineAdam::new(&model.decoder, cfg.learning_rate);
    let mut grads = PretrainGrads::zeros(&model);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_PRETRAIN_SHUFFLE));
    let mut best: Option<(f64, PretrainModel)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.pretrain_epochs {
        train_order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in train_order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingChunk> = batch_idx.iter().map(|&i| &chunks[i]).collect();
            let loss = pretrain_batch_grads(&model, &batch, &mut grads);
            adam_step(model.embedding.data_mut(), grads.embedding.data(), &mut emb_state)
                .expect("embedding shapes");
            enc_state.step(&mut model.encoder, &grads.encoder);
            dec_state.step(&mut model.decoder, &grads.decoder);
            epoch_loss += loss;
            batches += 1;
        }
        records.push(TrainRecord {
            stage: "pretrain".into(),
            epoch,
            author: None,
            loss: epoch_loss / batches as f64,
        });

        if !held_chunks.is_empty() {
            let held_loss = mean_position_loss(&model, &held_chunks);
            let improved = best.as_ref().map_or(true, |(b, _)| held_loss < *b);
            if improved {
                best = Some((held_loss, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, best_model)) = best {
        model = best_model;
    }
    Ok((model, records))
}

/// Continue training a single-encoder language model on a fixed corpus for a
/// fixed epoch budget (no held-out split). Used for the per-author
/// independent-model architecture variant.
pub fn train_lm_from(
    mut model: PretrainModel,
    chunks: &[TrainingChunk],
    epochs: usize,
    stage: &str,
    author: Option<&str>,
    shuffle_seed: u64,
    cfg: &TrainConfig,
) -> Result<(PretrainModel, Vec<TrainRecord>), TrainError> {
    cfg.validate()?;
    if chunks.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut records = Vec::new();
    let mut emb_state = AdamState::new(model.embedding.data().len(), cfg.learning_rate);
    let mut enc_state = LstmAdam::new(&model.encoder, cfg.learning_rate);
    let mut dec_state = AffineAdam::new(&model.decoder, cfg.learning_rate);
    let mut grads = PretrainGrads::zeros(&model);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingChunk> = batch_idx.iter().map(|&i| &chunks[i]).collect();
            let loss = pretrain_batch_grads(&model, &batch, &mut grads);
            adam_step(model.embedding.data_mut(), grads.embedding.data(), &mut emb_state)
                .expect("embedding shapes");
            enc_state.step(&mut model.encoder, &grads.encoder);
            dec_state.step(&mut model.decoder, &grads.decoder);
            epoch_loss += loss;
            batches += 1;
        }
        records.push(TrainRecord {
            stage: stage.to_string(),
            epoch,
            author: author.map(|a| a.to_string()),
            loss: epoch_loss / batches as f64,
        });
    }
    Ok((model, records))
}

/// Build the mixture-of-shared model from a pre-trained language model:
/// embedding copied, each shared encoder gets an independent uniform(-eps,
/// eps) nudge so shared gradients cannot keep them identical, gates start at
/// zero (every activation 0.5), and decoders are copies (rescaled by 2/s when
/// configured, which preserves the pre-trained logits under 0.5 gates).
pub fn init_from_pretrained(
    pre: &PretrainModel,
    author_ids: Vec<String>,
    cfg: &TrainConfig,
) -> Result<MosModel, TrainError> {
    cfg.validate()?;
    if author_ids.is_empty() {
        return Err(TrainError::ConfigMismatch("no authors".into()));
    }
    if pre.dims.ngram != cfg.ngram || pre.dims.hop != cfg.hop {
        return Err(TrainError::ConfigMismatch(format!(
            "pre-trained model was extracted with n={}, hop={}, config says n={}, hop={}",
            pre.dims.ngram, pre.dims.hop, cfg.ngram, cfg.hop
        )));
    }
    if pre.dims.hidden != cfg.hidden_dim {
        return Err(TrainError::ConfigMismatch(format!(
            "pre-trained hidden dim {} != configured {}",
            pre.dims.hidden, cfg.hidden_dim
        )));
    }
    let gate_mode = cfg.gate_mode();
    let dims = ModelDims {
        encoders: cfg.encoders,
        authors: author_ids.len(),
        ..pre.dims
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_INIT_TRANSFER));
    let eps = cfg.symmetry_break_eps;
    let mut perturb = |v: &mut [f64]| {
        if eps > 0.0 {
            for x in v.iter_mut() {
                *x += rng.gen_range(-eps..=eps);
            }
        }
    };
    let encoders = (0..cfg.encoders)
        .map(|_| {
            let mut enc = pre.encoder.clone();
            perturb(enc.w_ih.data_mut());
            perturb(enc.w_hh.data_mut());
            perturb(&mut enc.bias);
            enc
        })
        .collect();
    let gate_dim = gate_mode.gate_dim(cfg.encoders, dims.hidden);
    let decoder_scale = if cfg.rescale_decoder_init { 2.0 / cfg.encoders as f64 } else { 1.0 };
    let decoders = (0..author_ids.len())
        .map(|_| {
            let mut dec = pre.decoder.clone();
            if decoder_scale != 1.0 {
                dec.w.data_mut().iter_mut().for_each(|v| *v *= decoder_scale);
            }
            dec
        })
        .collect();
    Ok(MosModel {
        dims,
        gate_mode,
        embedding: pre.embedding.clone(),
        encoders,
        gates: (0..author_ids.len()).map(|_| Affine::zeros(dims.embed, gate_dim)).collect(),
        decoders,
        author_ids,
    })
}

/// Cycles through one author's chunks in seeded shuffled order.
struct BatchQueue {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchQueue {
    fn new(len: usize) -> Self {
        Self { order: (0..len).collect(), cursor: len } // forces initial shuffle
    }

    fn next_batch<R: Rng>(&mut self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        let mut batch = Vec::with_capacity(batch_size.min(self.order.len()));
        for _ in 0..batch_size.min(self.order.len()) {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn check_corpus(model: &MosModel, corpus: &[AuthorCorpus]) -> Result<(), TrainError> {
    if corpus.len() != model.dims.authors {
        return Err(TrainError::ConfigMismatch(format!(
            "corpus has {} authors, model has {}",
            corpus.len(),
            model.dims.authors
        )));
    }
    for (i, author) in corpus.iter().enumerate() {
        if author.author_id != model.author_ids[i] {
            return Err(TrainError::ConfigMismatch(format!(
                "author order mismatch at {i}: corpus {:?}, model {:?}",
                author.author_id, model.author_ids[i]
            )));
        }
        if author.chunks.is_empty() {
            return Err(TrainError::EmptyAuthor { author_id: author.author_id.clone() });
        }
    }
    Ok(())
}

/// Joint training. Each iteration samples one author uniformly, draws that
/// author's next mini-batch, and applies Adam to the shared embedding, all
/// encoders, and the sampled author's gate and decoder. Other authors'
/// specific parameters (and their optimizer states) are untouched that step.
///
/// A held-out slice of every author's chunks early-stops the epoch budget:
/// per-author corpora are small enough that training to the full budget
/// memorizes them. The best-scoring snapshot is returned.
pub fn joint_train(
    mut model: MosModel,
    corpus: &[AuthorCorpus],
    cfg: &TrainConfig,
) -> Result<(MosModel, Vec<TrainRecord>), TrainError> {
    cfg.validate()?;
    check_corpus(&model, corpus)?;
    let n_authors = corpus.len();
    let mut records = Vec::new();
    if cfg.joint_epochs == 0 {
        return Ok((model, records));
    }

    // Per-author development split for early stopping. The split is at
    // binary granularity: held chunks must come from binaries the stage never
    // trains on, otherwise the holdout rewards memorization.
    let mut train_idx: Vec<Vec<usize>> = Vec::with_capacity(n_authors);
    let mut held_idx: Vec<Vec<usize>> = Vec::with_capacity(n_authors);
    for (author, data) in corpus.iter().enumerate() {
        let (t, h) = dev_split_by_binary(&data.chunks, cfg, author as u64);
        train_idx.push(t);
        held_idx.push(h);
    }
    let have_holdout = held_idx.iter().any(|h| !h.is_empty());

    let mut emb_state = AdamState::new(model.embedding.data().len(), cfg.learning_rate);
    let mut enc_states: Vec<LstmAdam> =
        model.encoders.iter().map(|e| LstmAdam::new(e, cfg.learning_rate)).collect();
    let mut gate_states: Vec<AffineAdam> =
        model.gates.iter().map(|g| AffineAdam::new(g, cfg.learning_rate)).collect();
    let mut dec_states: Vec<AffineAdam> =
        model.decoders.iter().map(|d| AffineAdam::new(d, cfg.learning_rate)).collect();

    let mut queues: Vec<BatchQueue> =
        corpus.iter().map(|_| BatchQueue::new(0)).collect();
    for (q, idx) in queues.iter_mut().zip(&train_idx) {
        *q = BatchQueue::new(idx.len());
    }
    let iterations_per_epoch: usize =
        train_idx.iter().map(|t| t.len().div_ceil(cfg.batch_size)).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_JOINT));
    let mut grads_per_author: Vec<MosGrads> =
        (0..n_authors).map(|a| MosGrads::zeros(&model, a)).collect();

    let mut best: Option<(f64, MosModel)> = None;
    let mut since_best = 0usize;
    for epoch in 0..cfg.joint_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..iterations_per_epoch {
            let author = rng.gen_range(0..n_authors);
            let batch_idx = queues[author].next_batch(cfg.batch_size, &mut rng);
            let batch: Vec<&TrainingChunk> = batch_idx
                .iter()
                .map(|&i| &corpus[author].chunks[train_idx[author][i]])
                .collect();
            let grads = &mut grads_per_author[author];
            let loss = mos_batch_grads(&model, author, &batch, grads);
            adam_step(model.embedding.data_mut(), grads.embedding.data(), &mut emb_state)
                .expect("embedding shapes");
            for (enc, (state, g)) in model
                .encoders
                .iter_mut()
                .zip(enc_states.iter_mut().zip(&grads.encoders))
            {
                state.step(enc, g);
            }
            gate_states[author].step(&mut model.gates[author], &grads.gate);
            dec_states[author].step(&mut model.decoders[author], &grads.decoder);
            epoch_loss += loss;
        }
        records.push(TrainRecord {
            stage: "joint".into(),
            epoch,
            author: None,
            loss: epoch_loss / iterations_per_epoch as f64,
        });

        if have_holdout {
            let held_loss = held_self_loss(&model, corpus, &held_idx);
            let improved = best.as_ref().map_or(true, |(b, _)| held_loss < *b);
            if improved {
                best = Some((held_loss, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, best_model)) = best {
        model = best_model;
    }
    Ok((model, records))
}

/// Split one author's chunks into (train, dev) index sets at binary
/// granularity, deterministic in (seed, author). Authors with a single
/// binary get no dev split.
fn dev_split_by_binary(
    chunks: &[TrainingChunk],
    cfg: &TrainConfig,
    author_tag: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, chunk) in chunks.iter().enumerate() {
        match groups.iter_mut().find(|(id, _)| *id == chunk.binary_id) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((&chunk.binary_id, vec![i])),
        }
    }
    if groups.len() < 2 {
        return ((0..chunks.len()).collect(), Vec::new());
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_DEV_SPLIT + author_tag));
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    let held_groups = ((groups.len() as f64 * cfg.holdout_fraction).round() as usize)
        .max(1)
        .min(groups.len() - 1);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (rank, &g) in order.iter().enumerate() {
        if rank < held_groups {
            held.extend(groups[g].1.iter().copied());
        } else {
            train.extend(groups[g].1.iter().copied());
        }
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Mean held-out position loss of every author under their own model.
fn held_self_loss(model: &MosModel, corpus: &[AuthorCorpus], held_idx: &[Vec<usize>]) -> f64 {
    let per_author: Vec<(f64, usize)> = corpus
        .par_iter()
        .enumerate()
        .map(|(author, data)| {
            let mut total = 0.0;
            let mut positions = 0usize;
            for &i in &held_idx[author] {
                let (_, losses) = crate::model::forward_author(model, author, &data.chunks[i])
                    .expect("validated chunk");
                total += losses.iter().sum::<f64>();
                positions += losses.len();
            }
            (total, positions)
        })
        .collect();
    let total: f64 = per_author.iter().map(|(t, _)| t).sum();
    let positions: usize = per_author.iter().map(|(_, p)| p).sum();
    if positions == 0 {
        f64::INFINITY
    } else {
        total / positions as f64
    }
}

/// Fine-tune each author's decoder independently against the joint-training
/// snapshot: only (W, b) of that decoder move, driven by the author's own
/// chunks plus `lambda`-weighted L1 pull toward the other decoders' snapshot.
/// Shared layers and gates are untouched; author passes are order-independent
/// and run in parallel.
pub fn finetune(
    mut model: MosModel,
    corpus: &[AuthorCorpus],
    cfg: &TrainConfig,
) -> Result<(MosModel, Vec<TrainRecord>), TrainError> {
    cfg.validate()?;
    check_corpus(&model, corpus)?;
    if cfg.finetune_epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let n = model.dims.authors;
    let snapshot: Vec<Affine> = model.decoders.clone();
    // The pairwise regularizer is averaged over the n(n-1) ordered pairs;
    // during author i's pass only i's own terms carry gradient.
    let reg_scale = if n > 1 { cfg.lambda / (n * (n - 1)) as f64 } else { 0.0 };

    let results: Vec<(Affine, Vec<TrainRecord>)> = (0..n)
        .into_par_iter()
        .map(|author| {
            let mut decoder = snapshot[author].clone();
            let mut records = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                cfg.seed,
                TAG_FINETUNE + author as u64,
            ));
            let mut state = AffineAdam::new(&decoder, cfg.learning_rate);
            let mut grads = AffineGrads::zeros(&decoder);
            let chunks = &corpus[author].chunks;

            // Held-out split of the author's own chunks for early stopping.
            let mut all: Vec<usize> = (0..chunks.len()).collect();
            all.shuffle(&mut rng);
            let held = ((chunks.len() as f64 * cfg.holdout_fraction) as usize).min(all.len() - 1);
            let (held_idx, train_part) = all.split_at(held);
            let mut order: Vec<usize> = train_part.to_vec();

            // Scoring model with this author's live decoder swapped in.
            let mut scratch = model.clone();
            let mut best: Option<(f64, Affine)> = None;
            let mut since_best = 0usize;
            for epoch in 0..cfg.finetune_epochs {
                order.shuffle(&mut rng);
                let mut epoch_loss = 0.0;
                let mut batches = 0usize;
                for batch_idx in order.chunks(cfg.batch_size) {
                    scratch.decoders[author] = decoder.clone();
                    grads.reset();
                    let scale = 1.0 / batch_idx.len() as f64;
                    let mut loss = 0.0;
                    for &i in batch_idx {
                        let trace = forward_author_traced(&scratch, author, &chunks[i])
                            .expect("validated chunk");
                        loss += trace.mean_loss();
                        backward_decoder_only(trace, &mut grads, scale);
                    }
                    if reg_scale > 0.0 {
                        accumulate_l1_pull(&decoder, &snapshot, author, reg_scale, &mut grads);
                    }
                    state.step(&mut decoder, &grads);
                    epoch_loss += loss * scale;
                    batches += 1;
                }
                records.push(TrainRecord {
                    stage: "finetune".into(),
                    epoch,
                    author: Some(corpus[author].author_id.clone()),
                    loss: epoch_loss / batches as f64,
                });

                if !held_idx.is_empty() {
                    scratch.decoders[author] = decoder.clone();
                    let mut total = 0.0;
                    let mut positions = 0usize;
                    for &i in held_idx {
                        let (_, losses) =
                            crate::model::forward_author(&scratch, author, &chunks[i])
                                .expect("validated chunk");
                        total += losses.iter().sum::<f64>();
                        positions += losses.len();
                    }
                    let held_loss = total / positions as f64;
                    let improved = best.as_ref().map_or(true, |(b, _)| held_loss < *b);
                    if improved {
                        best = Some((held_loss, decoder.clone()));
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= cfg.early_stop_patience {
                            break;
                        }
                    }
                }
            }
            if let Some((_, best_decoder)) = best {
                decoder = best_decoder;
            }
            (decoder, records)
        })
        .collect();

    let mut records = Vec::new();
    for (author, (decoder, recs)) in results.into_iter().enumerate() {
        model.decoders[author] = decoder;
        records.extend(recs);
    }
    Ok((model, records))
}

/// Subgradient of `reg_scale * Σ_{j≠i} |own − snapshot_j|_1` w.r.t. `own`.
fn accumulate_l1_pull(
    own: &Affine,
    snapshot: &[Affine],
    author: usize,
    reg_scale: f64,
    grads: &mut AffineGrads,
) {
    fn sign(d: f64) -> f64 {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
    for (j, other) in snapshot.iter().enumerate() {
        if j == author {
            continue;
        }
        for (g, (a, b)) in grads
            .w
            .data_mut()
            .iter_mut()
            .zip(own.w.data().iter().zip(other.w.data()))
        {
            *g += reg_scale * sign(a - b);
        }
        for (g, (a, b)) in grads.b.iter_mut().zip(own.b.iter().zip(&other.b)) {
            *g += reg_scale * sign(a - b);
        }
    }
}
