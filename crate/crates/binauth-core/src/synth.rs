//! Synthetic corpus generation. Authors are mixtures over a small set of
//! shared first-order Markov opcode patterns; a separation knob `delta`
//! interpolates between all-authors-identical (0) and sharply individual
//! mixtures (1). Because the generative process is known exactly, a Bayes
//! likelihood oracle upper-bounds what any verifier can achieve on the data.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::{AuthorSamples, BasicBlock, Cfg, CorpusManifest, CorpusRole, Function};
use crate::seed;

const TAG_PATTERN: u64 = 0x100;
const TAG_AUTHOR: u64 = 0x200;
const TAG_BINARY: u64 = 0x10_000;

const MNEMONICS: &[&str] = &[
    "mov", "add", "sub", "push", "pop", "cmp", "jmp", "je", "jne", "call", "ret", "lea", "xor",
    "test", "and", "or", "shl", "shr", "mul", "div", "inc", "dec", "nop", "jg", "jl", "jge",
    "jle", "movzx", "movsx", "imul", "idiv", "neg",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("unknown author {0} in ground truth")]
    UnknownAuthor(String),
    #[error("binary {binary_id} contains opcode {opcode:?} outside the generator alphabet")]
    UnknownBinary { binary_id: String, opcode: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A shared style pattern: a first-order Markov chain over the opcode
/// alphabet with an explicit initial distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StylePattern {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

/// An author's mixture weights over the shared patterns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthAuthor {
    pub author_id: String,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_authors: usize,
    pub samples_per_author: usize,
    pub test_samples_per_author: usize,
    pub wild_authors: usize,
    pub wild_samples_per_author: usize,
    pub pretrain_authors: usize,
    pub pretrain_samples_per_author: usize,
    pub blocks_per_binary: usize,
    pub opcodes_per_block: usize,
    pub alphabet_size: usize,
    pub patterns: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_authors: 10,
            samples_per_author: 5,
            test_samples_per_author: 2,
            wild_authors: 10,
            wild_samples_per_author: 2,
            pretrain_authors: 10,
            pretrain_samples_per_author: 5,
            blocks_per_binary: 20,
            opcodes_per_block: 10,
            alphabet_size: 12,
            patterns: 5,
            delta: 0.8,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("n_authors", self.n_authors),
            ("samples_per_author", self.samples_per_author),
            ("test_samples_per_author", self.test_samples_per_author),
            ("wild_authors", self.wild_authors),
            ("wild_samples_per_author", self.wild_samples_per_author),
            ("pretrain_authors", self.pretrain_authors),
            ("pretrain_samples_per_author", self.pretrain_samples_per_author),
            ("blocks_per_binary", self.blocks_per_binary),
            ("opcodes_per_block", self.opcodes_per_block),
            ("alphabet_size", self.alphabet_size),
            ("patterns", self.patterns),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SynthError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(SynthError::InvalidConfig("delta must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything the generator knows, persisted as `truth.json` for the oracle
/// and the test suite; never consumed by the verifier itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub alphabet: Vec<String>,
    pub patterns: Vec<StylePattern>,
    pub candidate_authors: Vec<SynthAuthor>,
    pub wild_authors: Vec<SynthAuthor>,
    pub pretrain_authors: Vec<SynthAuthor>,
    /// binary_id -> author_id for every emitted binary.
    pub provenance: Vec<(String, String)>,
}

impl GroundTruth {
    pub fn author(&self, author_id: &str) -> Result<&SynthAuthor, SynthError> {
        self.candidate_authors
            .iter()
            .chain(&self.wild_authors)
            .chain(&self.pretrain_authors)
            .find(|a| a.author_id == author_id)
            .ok_or_else(|| SynthError::UnknownAuthor(author_id.to_string()))
    }

    pub fn author_of_binary(&self, binary_id: &str) -> Option<&str> {
        self.provenance
            .iter()
            .find(|(b, _)| b == binary_id)
            .map(|(_, a)| a.as_str())
    }
}

/// Generator output: the four manifests (already resolved to absolute paths)
/// plus ground truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub pretrain: CorpusManifest,
    pub train: CorpusManifest,
    pub test: CorpusManifest,
    pub wild: CorpusManifest,
    pub truth: GroundTruth,
}

fn alphabet(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| {
            MNEMONICS
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("op{i}"))
        })
        .collect()
}

/// A random probability vector from powered exponential draws; higher
/// `exponent` concentrates mass on fewer entries. Mixing in a uniform floor
/// keeps every outcome possible so oracle likelihoods stay finite.
fn spiky_distribution<R: Rng>(len: usize, exponent: f64, floor: f64, rng: &mut R) -> Vec<f64> {
    let mut raw: Vec<f64> = (0..len)
        .map(|_| {
            let e = -(rng.gen_range(1e-12..1.0f64)).ln();
            e.powf(exponent)
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    let uniform = 1.0 / len as f64;
    for v in raw.iter_mut() {
        *v = (1.0 - floor) * (*v / sum) + floor * uniform;
    }
    raw
}

fn sample_pattern(alphabet_size: usize, rng: &mut ChaCha8Rng) -> StylePattern {
    StylePattern {
        initial: spiky_distribution(alphabet_size, 3.0, 0.05, rng),
        transitions: (0..alphabet_size)
            .map(|_| spiky_distribution(alphabet_size, 3.0, 0.05, rng))
            .collect(),
    }
}

/// Mean symmetric per-step divergence between two chains, averaged over rows.
fn pattern_divergence(a: &StylePattern, b: &StylePattern) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.transitions.iter().zip(&b.transitions) {
        for (&pa, &pb) in ra.iter().zip(rb) {
            total += (pa - pb) * (pa / pb).ln();
        }
    }
    total / a.transitions.len() as f64
}

/// Draw patterns that stay mutually distinguishable: near-identical chains
/// would collapse the mixture geometry no matter how separated the author
/// weights are.
fn sample_separated_patterns(cfg: &SynthConfig) -> Vec<StylePattern> {
    let mut patterns: Vec<StylePattern> = Vec::with_capacity(cfg.patterns);
    for k in 0..cfg.patterns {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_PATTERN + k as u64));
        let mut best: Option<(f64, StylePattern)> = None;
        for _ in 0..50 {
            let draw = sample_pattern(cfg.alphabet_size, &mut rng);
            let div = patterns
                .iter()
                .map(|p| pattern_divergence(p, &draw))
                .fold(f64::INFINITY, f64::min);
            if div >= 1.0 {
                best = Some((div, draw));
                break;
            }
            if best.as_ref().map_or(true, |(d, _)| div > *d) {
                best = Some((div, draw));
            }
        }
        patterns.push(best.expect("at least one draw").1);
    }
    patterns
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Draw an author's raw mixture direction, rejecting draws that land too close
/// to an already-placed author. Without this, unlucky seeds produce candidate
/// and wild authors with near-identical mixtures, which no verifier (not even
/// the exact-likelihood oracle) can tell apart.
fn sample_author(
    id: String,
    cfg: &SynthConfig,
    tag: u64,
    placed: &mut Vec<Vec<f64>>,
) -> SynthAuthor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_AUTHOR + tag));
    let min_dist = 1.0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut own = None;
    for _ in 0..200 {
        // Moderate concentration: authors should occupy diverse interior
        // points of the simplex, not pile onto the pattern corners.
        let draw = spiky_distribution(cfg.patterns, 1.5, 0.0, &mut rng);
        let dist = placed.iter().map(|p| l1(p, &draw)).fold(f64::INFINITY, f64::min);
        if dist >= min_dist {
            own = Some(draw);
            break;
        }
        if best.as_ref().map_or(true, |(d, _)| dist > *d) {
            best = Some((dist, draw));
        }
    }
    let own = own.unwrap_or_else(|| best.expect("at least one draw").1);
    placed.push(own.clone());
    let uniform = 1.0 / cfg.patterns as f64;
    let weights = own
        .iter()
        .map(|w| (1.0 - cfg.delta) * uniform + cfg.delta * w)
        .collect();
    SynthAuthor { author_id: id, weights }
}

fn draw<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.gen_range(0.0..1.0);
    for (i, &p) in dist.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    dist.len() - 1
}

/// Generate one binary: blocks are partitioned into small functions, every
/// non-entry block gets at least one incoming edge from an earlier block, and
/// each block's opcodes run one Markov pattern drawn from the author mixture.
fn generate_binary(
    binary_id: &str,
    author: &SynthAuthor,
    truth_patterns: &[StylePattern],
    alphabet: &[String],
    cfg: &SynthConfig,
    binary_seed: u64,
) -> Cfg {
    let mut rng = ChaCha8Rng::seed_from_u64(binary_seed);
    let mut functions = Vec::new();
    let mut remaining = cfg.blocks_per_binary;
    let mut fn_idx = 0usize;
    while remaining > 0 {
        let size = rng.gen_range(1..=4usize.min(remaining)).min(remaining);
        let mut blocks = Vec::with_capacity(size);
        for b in 0..size {
            let pattern = &truth_patterns[draw(&author.weights, &mut rng)];
            let mut opcodes = Vec::with_capacity(cfg.opcodes_per_block);
            let mut state = draw(&pattern.initial, &mut rng);
            opcodes.push(alphabet[state].clone());
            for _ in 1..cfg.opcodes_per_block {
                state = draw(&pattern.transitions[state], &mut rng);
                opcodes.push(alphabet[state].clone());
            }
            blocks.push(BasicBlock { id: b as u64, opcodes });
        }
        let mut edges = Vec::new();
        for b in 1..size {
            edges.push((rng.gen_range(0..b) as u64, b as u64));
        }
        // A few extra forward edges for graph variety.
        for _ in 0..size / 2 {
            let src = rng.gen_range(0..size) as u64;
            let dst = rng.gen_range(0..size) as u64;
            if !edges.contains(&(src, dst)) {
                edges.push((src, dst));
            }
        }
        functions.push(Function { name: format!("fn{fn_idx}"), blocks, edges });
        fn_idx += 1;
        remaining -= size;
    }
    Cfg { binary_id: binary_id.to_string(), functions }
}

/// Generate the full corpus under `out_dir`: CFG-JSON files in `cfgs/`, the
/// four manifests, and `truth.json`. Byte-deterministic for a fixed config.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: std::io::Error| SynthError::Io { path: p.clone(), source }
    };
    let cfg_dir = out_dir.join("cfgs");
    fs::create_dir_all(&cfg_dir).map_err(io_err(&cfg_dir))?;

    let alphabet = alphabet(cfg.alphabet_size);
    let patterns = sample_separated_patterns(cfg);

    // Candidates and wilds share one separation pool; pre-training authors
    // are unconstrained (broad coverage is what pre-training wants).
    let mut placed: Vec<Vec<f64>> = Vec::new();
    let candidates: Vec<SynthAuthor> = (0..cfg.n_authors)
        .map(|i| sample_author(format!("author{i:02}"), cfg, i as u64, &mut placed))
        .collect();
    let wild: Vec<SynthAuthor> = (0..cfg.wild_authors)
        .map(|i| sample_author(format!("wild{i:02}"), cfg, 1000 + i as u64, &mut placed))
        .collect();
    let mut unconstrained = Vec::new();
    let pretrain: Vec<SynthAuthor> = (0..cfg.pretrain_authors)
        .map(|i| sample_author(format!("ext{i:02}"), cfg, 2000 + i as u64, &mut unconstrained))
        .collect();

    let mut provenance = Vec::new();
    let mut binary_counter = 0u64;
    let mut emit = |author: &SynthAuthor,
                    binary_id: String,
                    provenance: &mut Vec<(String, String)>|
     -> Result<PathBuf, SynthError> {
        let bin_seed = seed::derive(cfg.seed, TAG_BINARY + binary_counter);
        binary_counter += 1;
        let graph = generate_binary(&binary_id, author, &patterns, &alphabet, cfg, bin_seed);
        let path = cfg_dir.join(format!("{binary_id}.json"));
        fs::write(&path, graph.to_json()).map_err(io_err(&path))?;
        provenance.push((binary_id, author.author_id.clone()));
        Ok(path)
    };

    let mut manifest_for = |authors: &[SynthAuthor],
                            count: usize,
                            suffix: &str,
                            role: CorpusRole,
                            provenance: &mut Vec<(String, String)>|
     -> Result<CorpusManifest, SynthError> {
        let mut entries = Vec::new();
        for author in authors {
            let mut samples = Vec::new();
            for j in 0..count {
                let binary_id = format!("{}_{suffix}{j}", author.author_id);
                samples.push(emit(author, binary_id, provenance)?);
            }
            entries.push(AuthorSamples { author_id: author.author_id.clone(), samples });
        }
        Ok(CorpusManifest { role, authors: entries })
    };

    let pretrain_manifest = manifest_for(
        &pretrain,
        cfg.pretrain_samples_per_author,
        "ext",
        CorpusRole::Pretrain,
        &mut provenance,
    )?;
    let train_manifest = manifest_for(
        &candidates,
        cfg.samples_per_author,
        "train",
        CorpusRole::Train,
        &mut provenance,
    )?;
    let test_manifest = manifest_for(
        &candidates,
        cfg.test_samples_per_author,
        "test",
        CorpusRole::Test,
        &mut provenance,
    )?;
    let wild_manifest = manifest_for(
        &wild,
        cfg.wild_samples_per_author,
        "wild",
        CorpusRole::Test,
        &mut provenance,
    )?;

    let truth = GroundTruth {
        config: cfg.clone(),
        alphabet,
        patterns,
        candidate_authors: candidates,
        wild_authors: wild,
        pretrain_authors: pretrain,
        provenance,
    };

    for (manifest, name) in [
        (&pretrain_manifest, "pretrain.manifest.json"),
        (&train_manifest, "train.manifest.json"),
        (&test_manifest, "test.manifest.json"),
        (&wild_manifest, "wild.manifest.json"),
    ] {
        let path = out_dir.join(name);
        let text = serde_json::to_string_pretty(manifest).expect("manifest serialization");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    let truth_path = out_dir.join("truth.json");
    let text = serde_json::to_string(&truth).expect("truth serialization");
    fs::write(&truth_path, text).map_err(io_err(&truth_path))?;

    Ok(SynthOutput {
        pretrain: pretrain_manifest,
        train: train_manifest,
        test: test_manifest,
        wild: wild_manifest,
        truth,
    })
}

pub fn load_truth(path: &Path) -> Result<GroundTruth, SynthError> {
    let text = fs::read_to_string(path)
        .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text)
        .map_err(|e| SynthError::InvalidConfig(format!("bad truth file: {e}")))
}

/// Exact per-opcode log-likelihood of a binary under an author's generative
/// mixture: each block marginalizes over patterns,
/// `ln Σ_p w_p · init_p(o_1) Π_t trans_p(o_t → o_t+1)`.
pub fn bayes_oracle_score(
    truth: &GroundTruth,
    author: &SynthAuthor,
    binary: &Cfg,
) -> Result<f64, SynthError> {
    let index: HashMap<&str, usize> =
        truth.alphabet.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut total = 0.0;
    let mut opcodes = 0usize;
    for func in &binary.functions {
        for block in &func.blocks {
            let ids: Vec<usize> = block
                .opcodes
                .iter()
                .map(|op| {
                    index.get(op.as_str()).copied().ok_or_else(|| SynthError::UnknownBinary {
                        binary_id: binary.binary_id.clone(),
                        opcode: op.clone(),
                    })
                })
                .collect::<Result<_, _>>()?;
            if ids.is_empty() {
                continue;
            }
            // log-sum-exp over patterns.
            let log_terms: Vec<f64> = truth
                .patterns
                .iter()
                .zip(&author.weights)
                .map(|(pattern, &w)| {
                    let mut ll = w.max(1e-300).ln() + pattern.initial[ids[0]].ln();
                    for pair in ids.windows(2) {
                        ll += pattern.transitions[pair[0]][pair[1]].ln();
                    }
                    ll
                })
                .collect();
            let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + log_terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
            total += lse;
            opcodes += ids.len();
        }
    }
    Ok(total / opcodes as f64)
}

/// Oracle loss array over the candidate set: negated per-opcode likelihood,
/// shaped like the verifier's loss array so the same normalization applies.
pub fn oracle_loss_array(
    truth: &GroundTruth,
    binary: &Cfg,
) -> Result<crate::verify::LossArray, SynthError> {
    let losses = truth
        .candidate_authors
        .iter()
        .map(|author| bayes_oracle_score(truth, author, binary).map(|ll| -ll))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(crate::verify::LossArray {
        binary_id: binary.binary_id.clone(),
        author_ids: truth.candidate_authors.iter().map(|a| a.author_id.clone()).collect(),
        losses,
    })
}
