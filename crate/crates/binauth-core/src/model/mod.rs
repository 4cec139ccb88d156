//! The mixture-of-shared language model: a shared embedding, `s` shared LSTM
//! encoders, and per-author gate and decoder layers. Every author reads the
//! same encoder states; the author's gate decides how to combine them and the
//! author's decoder turns the combination into next-unit logits.
//!
//! Hidden state resets at every chunk boundary, so gradients are truncated
//! structurally: nothing flows across chunks.

mod serialize;

pub use serialize::{
    load_mos, load_pretrain, read_mos, read_pretrain, save_mos, save_pretrain, write_mos,
    write_pretrain, ModelIoError,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    acc_ab, acc_t_ab, axpy, dot, lstm_backward_seq, lstm_forward_seq, sigmoid, softmax_xent_row,
    Affine, AffineGrads, LstmGrads, LstmParams, LstmSeqCache, Tensor2,
};
use crate::trace::TrainingChunk;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown author index {author} (model has {n_authors})")]
    UnknownAuthor { author: usize, n_authors: usize },
    #[error("chunk contains id {id} outside vocabulary of size {vocab}")]
    ShapeMismatch { id: u32, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("binary produced no chunks")]
    EmptyBinary,
    #[error("loss weights must be non-negative and sum to 1")]
    InvalidWeights,
}

/// All dimensions of a model, also stored in checkpoint headers. `ngram` and
/// `hop` record the extraction settings the model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub encoders: usize,
    pub authors: usize,
    pub ngram: usize,
    pub hop: usize,
}

/// How an author's gate weighs the shared encoders: one scalar per encoder
/// (the default) or one weight per encoder per hidden dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    PerEncoder,
    PerDimension,
}

impl GateMode {
    pub fn gate_dim(self, encoders: usize, hidden: usize) -> usize {
        match self {
            GateMode::PerEncoder => encoders,
            GateMode::PerDimension => encoders * hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosModel {
    pub dims: ModelDims,
    pub gate_mode: GateMode,
    pub embedding: Tensor2,        // (|V|, d_e)
    pub encoders: Vec<LstmParams>, // shared by all authors
    pub gates: Vec<Affine>,        // one per author
    pub decoders: Vec<Affine>,     // one per author
    pub author_ids: Vec<String>,
}

/// The single-encoder language model used for external pre-training (and for
/// the per-author "naive" architecture variant).
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub dims: ModelDims, // encoders = 1, authors = 1
    pub embedding: Tensor2,
    pub encoder: LstmParams,
    pub decoder: Affine,
}

pub const INIT_WEIGHT_SCALE: f64 = 0.08;

fn init_lstm<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> LstmParams {
    LstmParams {
        w_ih: Tensor2::uniform(4 * hidden, input, INIT_WEIGHT_SCALE, rng),
        w_hh: Tensor2::uniform(4 * hidden, hidden, INIT_WEIGHT_SCALE, rng),
        bias: vec![0.0; 4 * hidden],
    }
}

impl PretrainModel {
    /// Fresh model: uniform(-0.08, 0.08) weights, zero biases.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        Self {
            embedding: Tensor2::uniform(dims.vocab, dims.embed, INIT_WEIGHT_SCALE, rng),
            encoder: init_lstm(dims.embed, dims.hidden, rng),
            decoder: Affine {
                w: Tensor2::uniform(dims.vocab, dims.hidden, INIT_WEIGHT_SCALE, rng),
                b: vec![0.0; dims.vocab],
            },
            dims: ModelDims { encoders: 1, authors: 1, ..dims },
        }
    }
}

impl MosModel {
    /// Fresh model with zeroed gates (every gate activation starts at 0.5).
    pub fn init<R: Rng>(
        dims: ModelDims,
        gate_mode: GateMode,
        author_ids: Vec<String>,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dims.authors, author_ids.len());
        let gate_dim = gate_mode.gate_dim(dims.encoders, dims.hidden);
        Self {
            embedding: Tensor2::uniform(dims.vocab, dims.embed, INIT_WEIGHT_SCALE, rng),
            encoders: (0..dims.encoders).map(|_| init_lstm(dims.embed, dims.hidden, rng)).collect(),
            gates: (0..dims.authors).map(|_| Affine::zeros(dims.embed, gate_dim)).collect(),
            decoders: (0..dims.authors)
                .map(|_| Affine {
                    w: Tensor2::uniform(dims.vocab, dims.hidden, INIT_WEIGHT_SCALE, rng),
                    b: vec![0.0; dims.vocab],
                })
                .collect(),
            dims,
            gate_mode,
            author_ids,
        }
    }

    pub fn author_index(&self, author_id: &str) -> Option<usize> {
        self.author_ids.iter().position(|a| a == author_id)
    }

    fn check_author(&self, author: usize) -> Result<(), ModelError> {
        if author >= self.dims.authors {
            return Err(ModelError::UnknownAuthor { author, n_authors: self.dims.authors });
        }
        Ok(())
    }

    fn check_chunk(&self, chunk: &TrainingChunk) -> Result<(), ModelError> {
        for &id in chunk.input_ids.iter().chain(&chunk.target_ids) {
            if id as usize >= self.dims.vocab {
                return Err(ModelError::ShapeMismatch { id, vocab: self.dims.vocab });
            }
        }
        Ok(())
    }
}

fn gather_rows(embedding: &Tensor2, ids: &[u32]) -> Tensor2 {
    let mut xs = Tensor2::zeros(ids.len(), embedding.cols());
    for (t, &id) in ids.iter().enumerate() {
        xs.row_mut(t).copy_from_slice(embedding.row(id as usize));
    }
    xs
}

/// Everything recorded during one chunk's forward pass. Backward consumes the
/// value, so a second backward over the same recording is a compile error.
pub struct ChunkForward {
    author: usize,
    input_ids: Vec<u32>,
    target_ids: Vec<u32>,
    xs: Tensor2,
    enc_caches: Vec<LstmSeqCache>,
    gate_act: Tensor2,
    mixed: Tensor2,
    probs: Tensor2,
    pub losses: Vec<f64>,
}

impl ChunkForward {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

struct ForwardParts {
    xs: Tensor2,
    enc_caches: Vec<LstmSeqCache>,
    gate_act: Tensor2,
    mixed: Tensor2,
    logits: Tensor2,
}

fn forward_parts(model: &MosModel, author: usize, chunk: &TrainingChunk) -> ForwardParts {
    let len = chunk.len();
    let d_h = model.dims.hidden;
    let xs = gather_rows(&model.embedding, &chunk.input_ids);

    let enc_caches: Vec<LstmSeqCache> =
        model.encoders.iter().map(|enc| lstm_forward_seq(enc, &xs)).collect();

    let gate = &model.gates[author];
    let mut gate_act = Tensor2::zeros(len, gate.out_dim());
    gate.forward_batch(&xs, &mut gate_act);
    gate_act.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut mixed = Tensor2::zeros(len, d_h);
    for t in 0..len {
        let row = mixed.row_mut(t);
        match model.gate_mode {
            GateMode::PerEncoder => {
                for (j, cache) in enc_caches.iter().enumerate() {
                    axpy(gate_act.row(t)[j], cache.hidden.row(t), row);
                }
            }
            GateMode::PerDimension => {
                for (j, cache) in enc_caches.iter().enumerate() {
                    let gate_row = &gate_act.row(t)[j * d_h..(j + 1) * d_h];
                    let h = cache.hidden.row(t);
                    for k in 0..d_h {
                        row[k] += gate_row[k] * h[k];
                    }
                }
            }
        }
    }

    let mut logits = Tensor2::zeros(len, model.dims.vocab);
    model.decoders[author].forward_batch(&mixed, &mut logits);

    ForwardParts { xs, enc_caches, gate_act, mixed, logits }
}

/// Per-unit cross-entropies and their mean for one chunk under one author's
/// language model. States reset at the chunk start.
pub fn forward_author(
    model: &MosModel,
    author: usize,
    chunk: &TrainingChunk,
) -> Result<(f64, Vec<f64>), ModelError> {
    model.check_author(author)?;
    model.check_chunk(chunk)?;
    if chunk.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let parts = forward_parts(model, author, chunk);
    let losses: Vec<f64> = chunk
        .target_ids
        .iter()
        .enumerate()
        .map(|(t, &target)| xent_of_row(parts.logits.row(t), target as usize))
        .collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((mean, losses))
}

/// Cross-entropy of one logits row without materializing the softmax.
fn xent_of_row(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    sum.ln() - (row[target] - max)
}

/// Forward pass that records the computation for [`backward`].
pub fn forward_author_traced(
    model: &MosModel,
    author: usize,
    chunk: &TrainingChunk,
) -> Result<ChunkForward, ModelError> {
    model.check_author(author)?;
    model.check_chunk(chunk)?;
    if chunk.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut parts = forward_parts(model, author, chunk);
    let losses: Vec<f64> = chunk
        .target_ids
        .iter()
        .enumerate()
        .map(|(t, &target)| softmax_xent_row(parts.logits.row_mut(t), target as usize))
        .collect();
    Ok(ChunkForward {
        author,
        input_ids: chunk.input_ids.clone(),
        target_ids: chunk.target_ids.clone(),
        xs: parts.xs,
        enc_caches: parts.enc_caches,
        gate_act: parts.gate_act,
        mixed: parts.mixed,
        probs: parts.logits,
        losses,
    })
}

/// Gradient buffers for the parameters one optimization step touches: the
/// shared blocks plus a single author's gate and decoder.
#[derive(Debug, Clone)]
pub struct MosGrads {
    pub embedding: Tensor2,
    pub encoders: Vec<LstmGrads>,
    pub gate: AffineGrads,
    pub decoder: AffineGrads,
}

impl MosGrads {
    pub fn zeros(model: &MosModel, author: usize) -> Self {
        Self {
            embedding: Tensor2::zeros(model.embedding.rows(), model.embedding.cols()),
            encoders: model.encoders.iter().map(LstmGrads::zeros).collect(),
            gate: AffineGrads::zeros(&model.gates[author]),
            decoder: AffineGrads::zeros(&model.decoders[author]),
        }
    }

    pub fn reset(&mut self) {
        self.embedding.fill(0.0);
        self.encoders.iter_mut().for_each(LstmGrads::reset);
        self.gate.reset();
        self.decoder.reset();
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.embedding.add_assign(&other.embedding);
        for (a, b) in self.encoders.iter_mut().zip(&other.encoders) {
            a.add_assign(b);
        }
        self.gate.add_assign(&other.gate);
        self.decoder.add_assign(&other.decoder);
    }
}

/// Exact reverse-mode gradients of `scale * mean_loss` for the recorded
/// chunk. Consuming `trace` is what prevents a double backward.
pub fn backward(trace: ChunkForward, model: &MosModel, grads: &mut MosGrads, scale: f64) {
    let len = trace.losses.len();
    let d_h = model.dims.hidden;
    let author = trace.author;
    let per_pos = scale / len as f64;

    // d mean_loss / d logits = (probs - onehot) / len, reusing the probs buffer.
    let mut dlogits = trace.probs;
    for (t, &target) in trace.target_ids.iter().enumerate() {
        let row = dlogits.row_mut(t);
        row.iter_mut().for_each(|v| *v *= per_pos);
        row[target as usize] -= per_pos;
        axpy(1.0, row, &mut grads.decoder.b);
    }

    let decoder = &model.decoders[author];
    let gate = &model.gates[author];
    acc_t_ab(&dlogits, &trace.mixed, &mut grads.decoder.w);
    let mut dmixed = Tensor2::zeros(len, d_h);
    acc_ab(&dlogits, &decoder.w, &mut dmixed);

    let mut dxs = Tensor2::zeros(len, model.dims.embed);
    let mut dgate_pre = Tensor2::zeros(len, trace.gate_act.cols());
    let mut denc_h: Vec<Tensor2> =
        (0..model.dims.encoders).map(|_| Tensor2::zeros(len, d_h)).collect();

    for t in 0..len {
        let dm = dmixed.row(t);
        let gact = trace.gate_act.row(t);
        let dgp = dgate_pre.row_mut(t);
        match model.gate_mode {
            GateMode::PerEncoder => {
                for (j, cache) in trace.enc_caches.iter().enumerate() {
                    let h = cache.hidden.row(t);
                    let dg = dot(dm, h);
                    dgp[j] = dg * gact[j] * (1.0 - gact[j]);
                    axpy(gact[j], dm, denc_h[j].row_mut(t));
                }
            }
            GateMode::PerDimension => {
                for (j, cache) in trace.enc_caches.iter().enumerate() {
                    let h = cache.hidden.row(t);
                    let dh = denc_h[j].row_mut(t);
                    for k in 0..d_h {
                        let g = gact[j * d_h + k];
                        dgp[j * d_h + k] = dm[k] * h[k] * g * (1.0 - g);
                        dh[k] += dm[k] * g;
                    }
                }
            }
        }
        axpy(1.0, dgate_pre.row(t), &mut grads.gate.b);
    }
    acc_t_ab(&dgate_pre, &trace.xs, &mut grads.gate.w);
    acc_ab(&dgate_pre, &gate.w, &mut dxs);

    for (j, enc) in model.encoders.iter().enumerate() {
        lstm_backward_seq(enc, &trace.xs, &trace.enc_caches[j], &denc_h[j], &mut grads.encoders[j], &mut dxs);
    }

    for (t, &id) in trace.input_ids.iter().enumerate() {
        axpy(1.0, dxs.row(t), grads.embedding.row_mut(id as usize));
    }
}

/// Decoder-only gradients of `scale * mean_loss`; used by fine-tuning, where
/// everything upstream of the decoder is frozen.
pub fn backward_decoder_only(
    trace: ChunkForward,
    grads: &mut AffineGrads,
    scale: f64,
) {
    let len = trace.losses.len();
    let per_pos = scale / len as f64;
    let mut dlogits = trace.probs;
    for (t, &target) in trace.target_ids.iter().enumerate() {
        let row = dlogits.row_mut(t);
        row.iter_mut().for_each(|v| *v *= per_pos);
        row[target as usize] -= per_pos;
        axpy(1.0, row, &mut grads.b);
    }
    acc_t_ab(&dlogits, &trace.mixed, &mut grads.w);
}

/// Weighted joint loss over one mini-batch per sampled author. Each author's
/// contribution is the mean of their chunks' mean losses.
pub fn joint_loss(
    model: &MosModel,
    batches: &[(usize, Vec<&TrainingChunk>)],
    weights: &[f64],
) -> Result<f64, ModelError> {
    if batches.is_empty() || batches.iter().any(|(_, chunks)| chunks.is_empty()) {
        return Err(ModelError::EmptyBatch);
    }
    if weights.len() != batches.len()
        || weights.iter().any(|&w| w < 0.0)
        || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(ModelError::InvalidWeights);
    }
    let mut total = 0.0;
    for ((author, chunks), &w) in batches.iter().zip(weights) {
        let mut sum = 0.0;
        for chunk in chunks {
            sum += forward_author(model, *author, chunk)?.0;
        }
        total += w * (sum / chunks.len() as f64);
    }
    Ok(total)
}

/// L1 distance between this author's decoder and every other author's:
/// `Σ_{j≠i} |W_i − W_j|_1 + |b_i − b_j|_1`. A single-author model has nothing
/// to regularize against and scores 0.
pub fn decoder_reg_loss(model: &MosModel, author: usize) -> Result<f64, ModelError> {
    model.check_author(author)?;
    if model.dims.authors < 2 {
        log::warn!("decoder regularization requested with a single author; returning 0");
        return Ok(0.0);
    }
    let own = &model.decoders[author];
    let mut total = 0.0;
    for (j, other) in model.decoders.iter().enumerate() {
        if j == author {
            continue;
        }
        total += l1_distance(own.w.data(), other.w.data());
        total += l1_distance(&own.b, &other.b);
    }
    Ok(total)
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean per-unit cross-entropy over all supervised positions of all chunks of
/// one binary, under one author's language model.
pub fn binary_loss(
    model: &MosModel,
    author: usize,
    chunks: &[TrainingChunk],
) -> Result<f64, ModelError> {
    if chunks.is_empty() {
        return Err(ModelError::EmptyBinary);
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for chunk in chunks {
        let (_, losses) = forward_author(model, author, chunk)?;
        total += losses.iter().sum::<f64>();
        positions += losses.len();
    }
    Ok(total / positions as f64)
}

/// Forward loss of the single-encoder pre-training model over one chunk.
pub fn pretrain_forward(
    model: &PretrainModel,
    chunk: &TrainingChunk,
) -> Result<(f64, Vec<f64>), ModelError> {
    let (mean, losses, _) = pretrain_forward_inner(model, chunk, false)?;
    debug_assert!(mean.is_finite());
    Ok((mean, losses))
}

pub struct PretrainForward {
    input_ids: Vec<u32>,
    target_ids: Vec<u32>,
    xs: Tensor2,
    cache: LstmSeqCache,
    probs: Tensor2,
    pub losses: Vec<f64>,
}

impl PretrainForward {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

fn pretrain_forward_inner(
    model: &PretrainModel,
    chunk: &TrainingChunk,
    keep_probs: bool,
) -> Result<(f64, Vec<f64>, Option<(Tensor2, LstmSeqCache, Tensor2)>), ModelError> {
    if chunk.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for &id in chunk.input_ids.iter().chain(&chunk.target_ids) {
        if id as usize >= model.dims.vocab {
            return Err(ModelError::ShapeMismatch { id, vocab: model.dims.vocab });
        }
    }
    let xs = gather_rows(&model.embedding, &chunk.input_ids);
    let cache = lstm_forward_seq(&model.encoder, &xs);
    let mut logits = Tensor2::zeros(chunk.len(), model.dims.vocab);
    model.decoder.forward_batch(&cache.hidden, &mut logits);
    let losses: Vec<f64> = if keep_probs {
        chunk
            .target_ids
            .iter()
            .enumerate()
            .map(|(t, &target)| softmax_xent_row(logits.row_mut(t), target as usize))
            .collect()
    } else {
        chunk
            .target_ids
            .iter()
            .enumerate()
            .map(|(t, &target)| xent_of_row(logits.row(t), target as usize))
            .collect()
    };
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let kept = keep_probs.then(|| (xs, cache, logits));
    Ok((mean, losses, kept))
}

pub fn pretrain_forward_traced(
    model: &PretrainModel,
    chunk: &TrainingChunk,
) -> Result<PretrainForward, ModelError> {
    let (_, losses, kept) = pretrain_forward_inner(model, chunk, true)?;
    let (xs, cache, probs) = kept.expect("probs requested");
    Ok(PretrainForward {
        input_ids: chunk.input_ids.clone(),
        target_ids: chunk.target_ids.clone(),
        xs,
        cache,
        probs,
        losses,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainGrads {
    pub embedding: Tensor2,
    pub encoder: LstmGrads,
    pub decoder: AffineGrads,
}

impl PretrainGrads {
    pub fn zeros(model: &PretrainModel) -> Self {
        Self {
            embedding: Tensor2::zeros(model.embedding.rows(), model.embedding.cols()),
            encoder: LstmGrads::zeros(&model.encoder),
            decoder: AffineGrads::zeros(&model.decoder),
        }
    }

    pub fn reset(&mut self) {
        self.embedding.fill(0.0);
        self.encoder.reset();
        self.decoder.reset();
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.embedding.add_assign(&other.embedding);
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
    }
}

pub fn pretrain_backward(
    trace: PretrainForward,
    model: &PretrainModel,
    grads: &mut PretrainGrads,
    scale: f64,
) {
    let len = trace.losses.len();
    let per_pos = scale / len as f64;
    let mut dlogits = trace.probs;
    let mut dh = Tensor2::zeros(len, model.dims.hidden);
    let mut dxs = Tensor2::zeros(len, model.dims.embed);
    for (t, &target) in trace.target_ids.iter().enumerate() {
        let row = dlogits.row_mut(t);
        row.iter_mut().for_each(|v| *v *= per_pos);
        row[target as usize] -= per_pos;
        axpy(1.0, row, &mut grads.decoder.b);
    }
    acc_t_ab(&dlogits, &trace.cache.hidden, &mut grads.decoder.w);
    acc_ab(&dlogits, &model.decoder.w, &mut dh);
    lstm_backward_seq(&model.encoder, &trace.xs, &trace.cache, &dh, &mut grads.encoder, &mut dxs);
    for (t, &id) in trace.input_ids.iter().enumerate() {
        axpy(1.0, dxs.row(t), grads.embedding.row_mut(id as usize));
    }
}

/// Mean per-position loss of a pre-training-shaped model over a whole binary.
pub fn pretrain_binary_loss(
    model: &PretrainModel,
    chunks: &[TrainingChunk],
) -> Result<f64, ModelError> {
    if chunks.is_empty() {
        return Err(ModelError::EmptyBinary);
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for chunk in chunks {
        let (_, losses) = pretrain_forward(model, chunk)?;
        total += losses.iter().sum::<f64>();
        positions += losses.len();
    }
    Ok(total / positions as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(vocab: usize, d: usize, s: usize, authors: usize) -> ModelDims {
        ModelDims { vocab, embed: d, hidden: d, encoders: s, authors, ngram: 1, hop: 1 }
    }

    fn chunk(inputs: &[u32], targets: &[u32]) -> TrainingChunk {
        TrainingChunk {
            input_ids: inputs.to_vec(),
            target_ids: targets.to_vec(),
            author_id: "a".into(),
            binary_id: "b".into(),
            seq_idx: 0,
        }
    }

    fn random_chunk(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> TrainingChunk {
        use rand::Rng;
        let inputs: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let targets: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        chunk(&inputs, &targets)
    }

    fn random_mos(rng: &mut ChaCha8Rng, d: ModelDims, mode: GateMode) -> MosModel {
        use rand::Rng;
        let ids = (0..d.authors).map(|i| format!("a{i}")).collect();
        let mut model = MosModel::init(d, mode, ids, rng);
        // Give gates some non-trivial weights too.
        for gate in &mut model.gates {
            let rows = gate.w.rows();
            let cols = gate.w.cols();
            gate.w = Tensor2::uniform(rows, cols, 0.4, rng);
            gate.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        model
    }

    #[test]
    fn single_encoder_with_saturated_gate_matches_pretrain_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = dims(11, 6, 1, 1);
        let pre = PretrainModel::init(d, &mut rng);
        let mut mos = MosModel::init(d, GateMode::PerEncoder, vec!["a0".into()], &mut rng);
        mos.embedding = pre.embedding.clone();
        mos.encoders[0] = pre.encoder.clone();
        mos.decoders[0] = pre.decoder.clone();
        // sigmoid(50) rounds to exactly 1.0 in f64, pinning the gate open.
        mos.gates[0].b = vec![50.0];

        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let c = random_chunk(&mut rng2, 11, 7);
            let (mos_loss, mos_per) = forward_author(&mos, 0, &c).unwrap();
            let (pre_loss, pre_per) = pretrain_forward(&pre, &c).unwrap();
            assert_eq!(mos_per, pre_per);
            assert_eq!(mos_loss, pre_loss);
        }
    }

    #[test]
    fn identical_encoders_reduce_to_gate_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dims(9, 5, 2, 1);
        let mut model = random_mos(&mut rng, d, GateMode::PerEncoder);
        model.encoders[1] = model.encoders[0].clone();
        let c = random_chunk(&mut rng, 9, 6);

        let (_, losses) = forward_author(&model, 0, &c).unwrap();

        // Closed form: r_t = (g0 + g1) · h_t over a single encoder run.
        let xs = gather_rows(&model.embedding, &c.input_ids);
        let cache = lstm_forward_seq(&model.encoders[0], &xs);
        for (t, &target) in c.target_ids.iter().enumerate() {
            let mut pre = model.gates[0].b.clone();
            model.gates[0].w.matvec_acc(xs.row(t), &mut pre);
            let gsum = sigmoid(pre[0]) + sigmoid(pre[1]);
            let r: Vec<f64> = cache.hidden.row(t).iter().map(|h| gsum * h).collect();
            let mut logits = model.decoders[0].b.clone();
            model.decoders[0].w.matvec_acc(&r, &mut logits);
            let expect = xent_of_row(&logits, target as usize);
            assert!((losses[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_params_give_exact_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = dims(9, 4, 3, 2);
        let ids = vec!["a0".into(), "a1".into()];
        let model = MosModel::init(d, GateMode::PerEncoder, ids, &mut rng);
        let c = random_chunk(&mut rng, 9, 5);
        let trace = forward_author_traced(&model, 0, &c).unwrap();
        assert!(trace.gate_act.data().iter().all(|&g| g == 0.5));
        // r_t must equal 0.5 * sum of encoder states.
        for t in 0..c.len() {
            for k in 0..d.hidden {
                let sum: f64 = trace.enc_caches.iter().map(|e| e.hidden.row(t)[k]).sum();
                assert!((trace.mixed.row(t)[k] - 0.5 * sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_activations_stay_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_mos(&mut rng, dims(9, 4, 3, 2), GateMode::PerEncoder);
        let c = random_chunk(&mut rng, 9, 8);
        let trace = forward_author_traced(&model, 1, &c).unwrap();
        assert!(trace.gate_act.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn perturbing_one_author_leaves_others_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = random_mos(&mut rng, dims(12, 5, 2, 3), GateMode::PerEncoder);
        let c = random_chunk(&mut rng, 12, 6);
        let before: Vec<Vec<f64>> = (0..3)
            .map(|a| forward_author(&model, a, &c).unwrap().1)
            .collect();
        model.gates[1].b[0] += 0.37;
        model.decoders[1].w.data_mut()[3] -= 0.61;
        for a in [0usize, 2] {
            let after = forward_author(&model, a, &c).unwrap().1;
            assert_eq!(before[a], after, "author {a} affected by author 1's parameters");
        }
        let after1 = forward_author(&model, 1, &c).unwrap().1;
        assert_ne!(before[1], after1);
    }

    #[test]
    fn perturbing_an_encoder_touches_every_author() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = random_mos(&mut rng, dims(12, 5, 2, 3), GateMode::PerEncoder);
        let c = random_chunk(&mut rng, 12, 6);
        let before: Vec<f64> = (0..3).map(|a| forward_author(&model, a, &c).unwrap().0).collect();
        model.encoders[1].w_hh.data_mut()[0] += 0.25;
        for a in 0..3 {
            let after = forward_author(&model, a, &c).unwrap().0;
            assert_ne!(before[a], after, "author {a} unaffected by shared encoder change");
        }
    }

    #[test]
    fn joint_loss_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_mos(&mut rng, dims(9, 4, 2, 2), GateMode::PerEncoder);
        let c0 = random_chunk(&mut rng, 9, 5);
        let c1 = random_chunk(&mut rng, 9, 5);

        let single = joint_loss(&model, &[(0, vec![&c0])], &[1.0]).unwrap();
        let (direct, _) = forward_author(&model, 0, &c0).unwrap();
        assert!((single - direct).abs() < 1e-15);

        // Two authors scoring the same data: equal weights average the losses.
        let l0 = forward_author(&model, 0, &c1).unwrap().0;
        let l1 = forward_author(&model, 1, &c1).unwrap().0;
        let mixed =
            joint_loss(&model, &[(0, vec![&c1]), (1, vec![&c1])], &[0.5, 0.5]).unwrap();
        assert!((mixed - 0.5 * (l0 + l1)).abs() < 1e-12);

        assert!(matches!(
            joint_loss(&model, &[], &[]),
            Err(ModelError::EmptyBatch)
        ));
        assert!(matches!(
            joint_loss(&model, &[(0, vec![&c0])], &[0.7]),
            Err(ModelError::InvalidWeights)
        ));
    }

    #[test]
    fn reg_loss_identical_decoders_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = random_mos(&mut rng, dims(9, 4, 2, 3), GateMode::PerEncoder);
        let proto = model.decoders[0].clone();
        for d in &mut model.decoders {
            *d = proto.clone();
        }
        assert_eq!(decoder_reg_loss(&model, 1).unwrap(), 0.0);
    }

    #[test]
    fn reg_loss_single_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = random_mos(&mut rng, dims(9, 4, 2, 2), GateMode::PerEncoder);
        model.decoders[1] = model.decoders[0].clone();
        model.decoders[1].w.data_mut()[5] += 0.5;
        let reg = decoder_reg_loss(&model, 0).unwrap();
        assert!((reg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_decoder_loss_is_ln_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = dims(17, 4, 2, 2);
        let mut model = random_mos(&mut rng, d, GateMode::PerEncoder);
        for dec in &mut model.decoders {
            dec.w.fill(0.0);
            dec.b.iter_mut().for_each(|b| *b = 0.0);
        }
        let chunks = vec![random_chunk(&mut rng, 17, 6), random_chunk(&mut rng, 17, 3)];
        let loss = binary_loss(&model, 0, &chunks).unwrap();
        assert!((loss - (17.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn binary_loss_is_position_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = random_mos(&mut rng, dims(9, 4, 2, 1), GateMode::PerEncoder);
        let chunks = vec![random_chunk(&mut rng, 9, 7), random_chunk(&mut rng, 9, 2)];
        let loss = binary_loss(&model, 0, &chunks).unwrap();
        let (_, la) = forward_author(&model, 0, &chunks[0]).unwrap();
        let (_, lb) = forward_author(&model, 0, &chunks[1]).unwrap();
        let expect =
            (la.iter().sum::<f64>() + lb.iter().sum::<f64>()) / (la.len() + lb.len()) as f64;
        assert!((loss - expect).abs() < 1e-12);
        let single = binary_loss(&model, 0, &chunks[..1]).unwrap();
        let (mean0, _) = forward_author(&model, 0, &chunks[0]).unwrap();
        assert!((single - mean0).abs() < 1e-15);
    }

    #[test]
    fn unknown_author_and_bad_ids_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = random_mos(&mut rng, dims(9, 4, 2, 2), GateMode::PerEncoder);
        let c = random_chunk(&mut rng, 9, 4);
        assert!(matches!(
            forward_author(&model, 5, &c),
            Err(ModelError::UnknownAuthor { .. })
        ));
        let bad = chunk(&[0, 40], &[1, 2]);
        assert!(matches!(
            forward_author(&model, 0, &bad),
            Err(ModelError::ShapeMismatch { .. })
        ));
        assert!(matches!(binary_loss(&model, 0, &[]), Err(ModelError::EmptyBinary)));
    }

    #[test]
    fn per_dimension_gate_forward_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = dims(9, 3, 2, 1);
        let model = random_mos(&mut rng, d, GateMode::PerDimension);
        let c = random_chunk(&mut rng, 9, 4);
        let trace = forward_author_traced(&model, 0, &c).unwrap();
        for t in 0..c.len() {
            for k in 0..d.hidden {
                let mut expect = 0.0;
                for j in 0..d.encoders {
                    expect +=
                        trace.gate_act.row(t)[j * d.hidden + k] * trace.enc_caches[j].hidden.row(t)[k];
                }
                assert!((trace.mixed.row(t)[k] - expect).abs() < 1e-12);
            }
        }
    }
}
