//! Flow-aware opcode traces: edge sequences from CFGs, sliding-window n-gram
//! units, frequency-capped vocabulary, and encoded training chunks with
//! multi-hop prediction targets.

use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::cfg::Cfg;

/// Joins the mnemonics of an n-gram unit; mnemonics themselves never contain
/// whitespace after canonicalization.
pub const NGRAM_SEP: &str = " ";

/// Reserved surface form for the out-of-vocabulary unit at id 0.
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("empty corpus: no n-gram units to build a vocabulary from")]
    EmptyCorpus,
}

/// The opcode trace along one CFG edge: source block trace, then destination
/// block trace. For an edgeless function each block trace stands alone so the
/// binary still produces units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSequence {
    pub opcodes: Vec<String>,
}

/// Opcode n-gram units from one edge sequence under a stride-1 window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramSequence {
    pub units: Vec<String>,
}

/// One edge sequence per edge, in file order; functions with blocks but no
/// edges contribute each block's own trace instead.
pub fn extract_edge_sequences(cfg: &Cfg) -> Vec<EdgeSequence> {
    let mut out = Vec::new();
    for func in &cfg.functions {
        if func.blocks.is_empty() {
            continue;
        }
        if func.edges.is_empty() {
            for block in &func.blocks {
                out.push(EdgeSequence { opcodes: block.opcodes.clone() });
            }
            continue;
        }
        let by_id: HashMap<u64, &Vec<String>> =
            func.blocks.iter().map(|b| (b.id, &b.opcodes)).collect();
        for &(src, dst) in &func.edges {
            let mut opcodes = by_id[&src].clone();
            opcodes.extend(by_id[&dst].iter().cloned());
            out.push(EdgeSequence { opcodes });
        }
    }
    out
}

/// Stride-1 window of size `n`; sequences shorter than `n` yield no units.
pub fn to_ngrams(seq: &EdgeSequence, n: usize) -> NgramSequence {
    assert!(n >= 1, "window size must be at least 1");
    if seq.opcodes.len() < n {
        return NgramSequence { units: Vec::new() };
    }
    let units = seq
        .opcodes
        .windows(n)
        .map(|w| w.join(NGRAM_SEP))
        .collect();
    NgramSequence { units }
}

/// Extraction plus tokenization for a whole binary.
pub fn extract_ngram_sequences(cfg: &Cfg, n: usize) -> Vec<NgramSequence> {
    extract_edge_sequences(cfg)
        .iter()
        .map(|seq| to_ngrams(seq, n))
        .filter(|s| !s.units.is_empty())
        .collect()
}

/// Dense token-to-id map: UNK at 0, then the top `cap` tokens by frequency,
/// ties broken lexicographically. Deterministic for a fixed corpus and cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub const UNK: u32 = 0;

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuild from an id-ordered token list (as stored in model sidecars).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .skip(1) // id 0 is reserved for UNK
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { token_to_id, tokens }
    }
}

pub fn build_vocab<'a, I>(corpus: I, cap: usize) -> Result<Vocabulary, TraceError>
where
    I: IntoIterator<Item = &'a NgramSequence>,
{
    assert!(cap >= 1, "vocabulary cap must be at least 1");
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for seq in corpus {
        for unit in &seq.units {
            *counts.entry(unit.as_str()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(TraceError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap);

    let mut tokens = Vec::with_capacity(ranked.len() + 1);
    tokens.push(UNK_TOKEN.to_string());
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

/// An encoded truncation window. `target_ids[t]` is the unit `hop` positions
/// ahead of `input_ids[t]`; a chunk never spans two edge sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingChunk {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub author_id: String,
    pub binary_id: String,
    /// Index of the originating edge sequence within its binary.
    pub seq_idx: u32,
}

impl TrainingChunk {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

/// Provenance attached to every chunk cut from one binary.
#[derive(Debug, Clone)]
pub struct ChunkSource {
    pub author_id: String,
    pub binary_id: String,
}

/// Encoding statistics; `dropped_sequences` counts sequences too short to
/// supply even one supervised position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub dropped_sequences: usize,
    pub positions: usize,
}

/// Cut every sequence into chunks of at most `truncation` supervised
/// positions, mapping out-of-vocabulary units to UNK. Sequences with fewer
/// than `hop + 1` units are dropped and counted.
pub fn encode_chunks_with_stats(
    seqs: &[NgramSequence],
    vocab: &Vocabulary,
    truncation: usize,
    hop: usize,
    source: &ChunkSource,
) -> (Vec<TrainingChunk>, EncodeStats) {
    assert!(truncation >= 1, "truncation must be at least 1");
    assert!(hop >= 1, "hop must be at least 1");
    let mut chunks = Vec::new();
    let mut stats = EncodeStats::default();
    for (seq_idx, seq) in seqs.iter().enumerate() {
        let len = seq.units.len();
        if len < hop + 1 {
            stats.dropped_sequences += 1;
            continue;
        }
        let ids: Vec<u32> = seq.units.iter().map(|u| vocab.id(u)).collect();
        let supervised = len - hop;
        stats.positions += supervised;
        let mut start = 0;
        while start < supervised {
            let end = (start + truncation).min(supervised);
            chunks.push(TrainingChunk {
                input_ids: ids[start..end].to_vec(),
                target_ids: ids[start + hop..end + hop].to_vec(),
                author_id: source.author_id.clone(),
                binary_id: source.binary_id.clone(),
                seq_idx: seq_idx as u32,
            });
            start = end;
        }
    }
    (chunks, stats)
}

pub fn encode_chunks(
    seqs: &[NgramSequence],
    vocab: &Vocabulary,
    truncation: usize,
    hop: usize,
    source: &ChunkSource,
) -> Vec<TrainingChunk> {
    encode_chunks_with_stats(seqs, vocab, truncation, hop, source).0
}

/// Full binary-to-chunks path shared by training and verification.
pub fn encode_binary(
    cfg: &Cfg,
    vocab: &Vocabulary,
    n: usize,
    truncation: usize,
    hop: usize,
    author_id: &str,
) -> Vec<TrainingChunk> {
    let seqs = extract_ngram_sequences(cfg, n);
    let source = ChunkSource { author_id: author_id.to_string(), binary_id: cfg.binary_id.clone() };
    encode_chunks(&seqs, vocab, truncation, hop, &source)
}

/// Token dump for external diffing: `<binary_id>\t<seq_idx>\t<token>`.
pub fn write_token_dump<W: Write>(
    w: &mut W,
    binary_id: &str,
    seqs: &[NgramSequence],
) -> std::io::Result<()> {
    for (idx, seq) in seqs.iter().enumerate() {
        for unit in &seq.units {
            writeln!(w, "{binary_id}\t{idx}\t{unit}")?;
        }
    }
    Ok(())
}
