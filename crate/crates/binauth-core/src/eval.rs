//! Evaluation harness: verification-pair construction, AUC-ROC and average
//! precision, collaborator mixing for multi-programmer robustness runs, and
//! the cosine-similarity feature baseline.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::{load_cfg, Cfg, CfgError, CorpusManifest};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("metric needs both classes; got only one")]
    OneClassOnly,
    #[error("infeasible mixing proportion: {0}")]
    ProportionInfeasible(String),
    #[error("test sample {path} of author {author_id} also appears in their training set")]
    SampleLeak { author_id: String, path: PathBuf },
    #[error(transparent)]
    Cfg(#[from] CfgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeOrigin {
    InCandidateSet,
    Wild,
}

/// One verification pair: does `author_id` look like the developer of the
/// binary at `path`?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub author_id: String,
    pub path: PathBuf,
    pub label: PairLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_origin: Option<NegativeOrigin>,
}

/// Threshold-free metrics over a scored pair set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc_roc: f64,
    pub ap: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

/// Build positive and negative verification pairs.
///
/// Every unseen test sample of a candidate author becomes one positive pair.
/// Each positive gets `ratio_neg_per_pos` negatives against the same author;
/// negative slots alternate between in-candidate-set and wild origins so the
/// two halves are balanced globally (an odd total favors in-set by one).
pub fn build_pairs(
    test_manifest: &CorpusManifest,
    candidate_train: &CorpusManifest,
    wild_pool: &CorpusManifest,
    ratio_neg_per_pos: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>, EvalError> {
    assert!(ratio_neg_per_pos >= 1, "need at least one negative per positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Candidate authors keep the training-manifest order.
    let candidates: Vec<&str> =
        candidate_train.authors.iter().map(|a| a.author_id.as_str()).collect();
    let candidate_set: HashSet<&str> = candidates.iter().copied().collect();
    for author in &wild_pool.authors {
        if candidate_set.contains(author.author_id.as_str()) {
            return Err(EvalError::InsufficientSamples(format!(
                "wild pool overlaps candidate set at {:?}",
                author.author_id
            )));
        }
    }

    // No positive test binary may appear in its author's training samples.
    let train_paths: BTreeMap<&str, HashSet<&PathBuf>> = candidate_train
        .authors
        .iter()
        .map(|a| (a.author_id.as_str(), a.samples.iter().collect()))
        .collect();
    for author in &test_manifest.authors {
        if let Some(trained) = train_paths.get(author.author_id.as_str()) {
            for path in &author.samples {
                if trained.contains(path) {
                    return Err(EvalError::SampleLeak {
                        author_id: author.author_id.clone(),
                        path: path.clone(),
                    });
                }
            }
        }
    }

    let test_samples: BTreeMap<&str, &[PathBuf]> = test_manifest
        .authors
        .iter()
        .map(|a| (a.author_id.as_str(), a.samples.as_slice()))
        .collect();

    let mut pairs = Vec::new();
    let mut positives = Vec::new();
    for &author in &candidates {
        let samples = test_samples.get(author).copied().unwrap_or(&[]);
        for path in samples {
            positives.push((author, path.clone()));
        }
    }
    if positives.is_empty() {
        return Err(EvalError::InsufficientSamples(
            "no candidate author has unseen test samples".into(),
        ));
    }

    let wild_samples: Vec<&PathBuf> =
        wild_pool.authors.iter().flat_map(|a| a.samples.iter()).collect();

    let mut used: HashSet<(String, PathBuf)> = HashSet::new();
    let mut slot = 0usize;
    for (author, path) in &positives {
        pairs.push(VerificationPair {
            author_id: author.to_string(),
            path: path.clone(),
            label: PairLabel::Positive,
            negative_origin: None,
        });
        for _ in 0..ratio_neg_per_pos {
            let origin = if slot % 2 == 0 {
                NegativeOrigin::InCandidateSet
            } else {
                NegativeOrigin::Wild
            };
            slot += 1;
            let pool: Vec<&PathBuf> = match origin {
                NegativeOrigin::InCandidateSet => candidates
                    .iter()
                    .filter(|&&other| other != *author)
                    .flat_map(|&other| test_samples.get(other).copied().unwrap_or(&[]).iter())
                    .filter(|p| !used.contains(&(author.to_string(), (**p).clone())))
                    .collect(),
                NegativeOrigin::Wild => wild_samples
                    .iter()
                    .copied()
                    .filter(|p| !used.contains(&(author.to_string(), (**p).clone())))
                    .collect(),
            };
            if pool.is_empty() {
                return Err(EvalError::InsufficientSamples(format!(
                    "ran out of {origin:?} negatives for author {author}"
                )));
            }
            let choice = pool[rng.gen_range(0..pool.len())].clone();
            used.insert((author.to_string(), choice.clone()));
            pairs.push(VerificationPair {
                author_id: author.to_string(),
                path: choice,
                label: PairLabel::Negative,
                negative_origin: Some(origin),
            });
        }
    }
    Ok(pairs)
}

/// AUC-ROC as the tie-aware pair-ordering probability (rank-sum form): the
/// probability that a random positive outranks a random negative, ties
/// crediting one half.
pub fn auc_roc(scores: &[(f64, bool)]) -> Result<f64, EvalError> {
    let n_pos = scores.iter().filter(|(_, pos)| *pos).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.partial_cmp(&scores[b].0).expect("finite scores"));

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if scores[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = n_pos as f64;
    let n = n_neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: precision accumulated at each positive in descending
/// score order, divided by the number of positives. Ties keep input order.
pub fn average_precision(scores: &[(f64, bool)]) -> Result<f64, EvalError> {
    let n_pos = scores.iter().filter(|(_, pos)| *pos).count();
    if n_pos == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: equal scores keep their input order.
    order.sort_by(|&a, &b| scores[b].0.partial_cmp(&scores[a].0).expect("finite scores"));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if scores[idx].1 {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// ROC curve points as (fpr, tpr), one per distinct threshold, for CSV export.
pub fn roc_curve(scores: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let n_pos = scores.iter().filter(|(_, pos)| *pos).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].0.partial_cmp(&scores[a].0).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]].0;
        while i < order.len() && scores[order[i]].0 == threshold {
            if scores[order[i]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    points
}

/// Mix two collaborators' functions into a binary until the original author's
/// opcode share sits as close to `major_proportion` as greedy whole-function
/// insertion allows without dropping below it. `major_proportion` of 1.0
/// returns the binary unchanged.
pub fn mix_collaborators(
    binary: &Cfg,
    collaborators: &[&Cfg],
    major_proportion: f64,
    seed: u64,
) -> Result<Cfg, EvalError> {
    if !(0.6..=1.0).contains(&major_proportion) {
        return Err(EvalError::ProportionInfeasible(format!(
            "major proportion {major_proportion} outside [0.6, 1.0]"
        )));
    }
    if collaborators.is_empty() || collaborators.iter().any(|c| c.opcode_count() == 0) {
        return Err(EvalError::ProportionInfeasible(
            "collaborator CFGs must be non-empty".into(),
        ));
    }
    let original = binary.opcode_count() as f64;
    let mut donors: Vec<(usize, &crate::cfg::Function)> = Vec::new();
    for (k, collab) in collaborators.iter().enumerate() {
        for func in &collab.functions {
            if !func.blocks.is_empty() {
                donors.push((k, func));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    donors.shuffle(&mut rng);

    let mut mixed = binary.clone();
    let mut foreign = 0.0;
    for (k, func) in donors {
        let size: usize = func.blocks.iter().map(|b| b.opcodes.len()).sum();
        let share = original / (original + foreign + size as f64);
        if share >= major_proportion {
            let mut inserted = func.clone();
            inserted.name = format!("collab{k}__{}", inserted.name);
            mixed.functions.push(inserted);
            foreign += size as f64;
        }
    }
    Ok(mixed)
}

/// Measured share of the original author's opcodes in a mixed binary.
pub fn major_share(original: &Cfg, mixed: &Cfg) -> f64 {
    original.opcode_count() as f64 / mixed.opcode_count() as f64
}

/// Sparse opcode-n-gram count features (n = 1, 2, 3 within block traces) plus
/// block-level bigram tokens along edges, L2-normalized.
pub fn feature_vector(cfg: &Cfg) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for func in &cfg.functions {
        for block in &func.blocks {
            for n in 1..=3usize {
                if block.opcodes.len() >= n {
                    for w in block.opcodes.windows(n) {
                        *counts.entry(format!("g{n}:{}", w.join(" "))).or_insert(0.0) += 1.0;
                    }
                }
            }
        }
        let by_id: BTreeMap<u64, &Vec<String>> =
            func.blocks.iter().map(|b| (b.id, &b.opcodes)).collect();
        for &(src, dst) in &func.edges {
            let token = format!("bb:{}>{}", by_id[&src].join(" "), by_id[&dst].join(" "));
            *counts.entry(token).or_insert(0.0) += 1.0;
        }
    }
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in counts.values_mut() {
            *v /= norm;
        }
    }
    counts
}

pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut dot = 0.0;
    for (k, va) in small {
        if let Some(vb) = large.get(k) {
            dot += va * vb;
        }
    }
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Similarity baseline: an author's profile is the mean of their normalized
/// training-sample feature vectors; a pair's detection score is the cosine
/// between profile and sample vector.
pub fn cosine_baseline(
    train_manifest: &CorpusManifest,
    pairs: &[VerificationPair],
) -> Result<MetricReport, EvalError> {
    let mut profiles: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for author in &train_manifest.authors {
        if author.samples.is_empty() {
            continue;
        }
        let mut profile: BTreeMap<String, f64> = BTreeMap::new();
        for path in &author.samples {
            let cfg = load_cfg(path)?;
            for (k, v) in feature_vector(&cfg) {
                *profile.entry(k).or_insert(0.0) += v;
            }
        }
        let m = author.samples.len() as f64;
        profile.values_mut().for_each(|v| *v /= m);
        profiles.insert(author.author_id.clone(), profile);
    }

    let mut sample_vectors: BTreeMap<PathBuf, BTreeMap<String, f64>> = BTreeMap::new();
    let mut scored = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let profile = profiles.get(&pair.author_id).ok_or_else(|| {
            EvalError::InsufficientSamples(format!("no profile for author {}", pair.author_id))
        })?;
        if !sample_vectors.contains_key(&pair.path) {
            let cfg = load_cfg(&pair.path)?;
            sample_vectors.insert(pair.path.clone(), feature_vector(&cfg));
        }
        let vector = &sample_vectors[&pair.path];
        scored.push((cosine(profile, vector), pair.label == PairLabel::Positive));
    }
    metric_report(&scored, serde_json::Value::Null)
}

/// AUC-ROC and AP over (detection score, is_positive) observations.
pub fn metric_report(
    scores: &[(f64, bool)],
    config: serde_json::Value,
) -> Result<MetricReport, EvalError> {
    let n_pos = scores.iter().filter(|(_, p)| *p).count();
    Ok(MetricReport {
        auc_roc: auc_roc(scores)?,
        ap: average_precision(scores)?,
        n_pos,
        n_neg: scores.len() - n_pos,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::{AuthorSamples, BasicBlock, CorpusRole, Function};

    #[test]
    fn perfect_separation_gives_auc_one() {
        let scores = vec![(0.9, true), (0.8, true), (0.1, false)];
        assert_eq!(auc_roc(&scores).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let scores = vec![(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(auc_roc(&scores).unwrap(), 0.5);
    }

    #[test]
    fn one_class_is_rejected() {
        assert!(matches!(auc_roc(&[(0.5, true)]), Err(EvalError::OneClassOnly)));
        assert!(matches!(average_precision(&[(0.5, false)]), Err(EvalError::OneClassOnly)));
    }

    #[test]
    fn label_flip_complements_auc() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Distinct scores so there are no ties.
        let scores: Vec<(f64, bool)> =
            (0..40).map(|i| (i as f64 + rng.gen_range(0.0..0.5), rng.gen_bool(0.5))).collect();
        let n_pos = scores.iter().filter(|(_, p)| *p).count();
        if n_pos == 0 || n_pos == scores.len() {
            return;
        }
        let flipped: Vec<(f64, bool)> = scores.iter().map(|&(s, p)| (s, !p)).collect();
        let a = auc_roc(&scores).unwrap();
        let b = auc_roc(&flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_transform_leaves_auc_unchanged() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let scores: Vec<(f64, bool)> =
            (0..60).map(|_| (rng.gen_range(-3.0..3.0), rng.gen_bool(0.4))).collect();
        let transformed: Vec<(f64, bool)> =
            scores.iter().map(|&(s, p)| (s.exp() + 3.0 * s, p)).collect();
        let a = auc_roc(&scores).unwrap();
        let b = auc_roc(&transformed).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ap_all_positives_first_is_one() {
        let scores = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(average_precision(&scores).unwrap(), 1.0);
    }

    #[test]
    fn ap_single_positive_ranked_second_is_half() {
        let scores = vec![(0.9, false), (0.8, true)];
        assert_eq!(average_precision(&scores).unwrap(), 0.5);
    }

    fn manifest(role: CorpusRole, authors: &[(&str, &[&str])]) -> CorpusManifest {
        CorpusManifest {
            role,
            authors: authors
                .iter()
                .map(|(id, paths)| AuthorSamples {
                    author_id: id.to_string(),
                    samples: paths.iter().map(PathBuf::from).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn ratio_one_splits_negatives_evenly() {
        let test = manifest(
            CorpusRole::Test,
            &[
                ("a0", &["t/a0_0.json", "t/a0_1.json"]),
                ("a1", &["t/a1_0.json", "t/a1_1.json"]),
                ("a2", &["t/a2_0.json", "t/a2_1.json"]),
                ("a3", &["t/a3_0.json", "t/a3_1.json"]),
                ("a4", &["t/a4_0.json", "t/a4_1.json"]),
            ],
        );
        let train = manifest(
            CorpusRole::Train,
            &[
                ("a0", &["r/a0.json"]),
                ("a1", &["r/a1.json"]),
                ("a2", &["r/a2.json"]),
                ("a3", &["r/a3.json"]),
                ("a4", &["r/a4.json"]),
            ],
        );
        let wild = manifest(
            CorpusRole::Test,
            &[("w0", &["w/w0_0.json", "w/w0_1.json", "w/w0_2.json", "w/w0_3.json", "w/w0_4.json"])],
        );
        let pairs = build_pairs(&test, &train, &wild, 1, 9).unwrap();
        let positives = pairs.iter().filter(|p| p.label == PairLabel::Positive).count();
        let negatives: Vec<_> = pairs.iter().filter(|p| p.label == PairLabel::Negative).collect();
        assert_eq!(positives, 10);
        assert_eq!(negatives.len(), 10);
        let in_set = negatives
            .iter()
            .filter(|p| p.negative_origin == Some(NegativeOrigin::InCandidateSet))
            .count();
        assert_eq!(in_set, 5);
        assert_eq!(negatives.len() - in_set, 5);
    }

    #[test]
    fn ratio_eight_gives_four_four_per_positive() {
        // Five candidates, one test sample each: every author's in-set pool is
        // exactly the four foreign samples the 8:1 ratio needs.
        let test = manifest(
            CorpusRole::Test,
            &[
                ("a0", &["t/a0.json"]),
                ("a1", &["t/a1.json"]),
                ("a2", &["t/a2.json"]),
                ("a3", &["t/a3.json"]),
                ("a4", &["t/a4.json"]),
            ],
        );
        let train = manifest(
            CorpusRole::Train,
            &[
                ("a0", &["r/a0.json"]),
                ("a1", &["r/a1.json"]),
                ("a2", &["r/a2.json"]),
                ("a3", &["r/a3.json"]),
                ("a4", &["r/a4.json"]),
            ],
        );
        let wild = manifest(
            CorpusRole::Test,
            &[(
                "w0",
                &["w/0.json", "w/1.json", "w/2.json", "w/3.json", "w/4.json", "w/5.json"],
            )],
        );
        let pairs = build_pairs(&test, &train, &wild, 8, 10).unwrap();
        for author in ["a0", "a1", "a2", "a3", "a4"] {
            let negs: Vec<_> = pairs
                .iter()
                .filter(|p| p.author_id == author && p.label == PairLabel::Negative)
                .collect();
            assert_eq!(negs.len(), 8);
            let in_set = negs
                .iter()
                .filter(|p| p.negative_origin == Some(NegativeOrigin::InCandidateSet))
                .count();
            assert_eq!(in_set, 4, "author {author}");
        }
    }

    #[test]
    fn train_test_leak_is_detected() {
        let test = manifest(CorpusRole::Test, &[("a0", &["shared.json"]), ("a1", &["t1.json"])]);
        let train = manifest(CorpusRole::Train, &[("a0", &["shared.json"]), ("a1", &["r1.json"])]);
        let wild = manifest(CorpusRole::Test, &[("w0", &["w0.json"])]);
        assert!(matches!(
            build_pairs(&test, &train, &wild, 1, 0),
            Err(EvalError::SampleLeak { .. })
        ));
    }

    #[test]
    fn pairs_are_deterministic() {
        let test = manifest(
            CorpusRole::Test,
            &[("a0", &["t0.json", "t1.json"]), ("a1", &["t2.json", "t3.json"])],
        );
        let train = manifest(CorpusRole::Train, &[("a0", &["r0.json"]), ("a1", &["r1.json"])]);
        let wild = manifest(CorpusRole::Test, &[("w0", &["w0.json", "w1.json"])]);
        let a = build_pairs(&test, &train, &wild, 1, 5).unwrap();
        let b = build_pairs(&test, &train, &wild, 1, 5).unwrap();
        assert_eq!(a, b);
    }

    fn block(id: u64, count: usize) -> BasicBlock {
        BasicBlock { id, opcodes: (0..count).map(|_| "mov".to_string()).collect() }
    }

    fn cfg_with_functions(id: &str, sizes: &[usize]) -> Cfg {
        Cfg {
            binary_id: id.into(),
            functions: sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| Function {
                    name: format!("f{i}"),
                    blocks: vec![block(0, n), block(1, n)],
                    edges: vec![(0, 1)],
                })
                .collect(),
        }
    }

    #[test]
    fn proportion_one_is_identity() {
        let orig = cfg_with_functions("b", &[4, 4]);
        let donor = cfg_with_functions("d", &[3]);
        let mixed = mix_collaborators(&orig, &[&donor, &donor], 1.0, 3).unwrap();
        assert_eq!(mixed, orig);
    }

    #[test]
    fn proportion_bound_is_respected() {
        let orig = cfg_with_functions("b", &[10, 10]);
        let d1 = cfg_with_functions("d1", &[2, 2, 2, 2, 2]);
        let d2 = cfg_with_functions("d2", &[2, 2, 2, 2, 2]);
        for &p in &[0.6, 0.7, 0.8, 0.9] {
            let mixed = mix_collaborators(&orig, &[&d1, &d2], p, 11).unwrap();
            let share = major_share(&orig, &mixed);
            assert!(share >= p - 1e-12, "share {share} below {p}");
            assert!(share <= 1.0);
        }
    }

    #[test]
    fn out_of_range_proportion_is_rejected() {
        let orig = cfg_with_functions("b", &[4]);
        let donor = cfg_with_functions("d", &[2]);
        assert!(mix_collaborators(&orig, &[&donor], 0.5, 0).is_err());
        assert!(mix_collaborators(&orig, &[&donor], 1.1, 0).is_err());
    }

    #[test]
    fn identical_vectors_have_cosine_one() {
        let cfg = cfg_with_functions("b", &[3, 2]);
        let v = feature_vector(&cfg);
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vectors_have_cosine_zero() {
        let mut a = BTreeMap::new();
        a.insert("g1:mov".to_string(), 1.0);
        let mut b = BTreeMap::new();
        b.insert("g1:ret".to_string(), 1.0);
        assert_eq!(cosine(&a, &b), 0.0);
    }
}
