//! Temporary calibration probe (not part of the shipped suite).

use std::time::Instant;

use binauth_core::eval::{build_pairs, metric_report};
use binauth_core::pipeline::{
    oracle_score_pairs, prepare_corpora, scored_to_metric_input, train_architecture, Architecture,
};
use binauth_core::synth::{generate_corpus, SynthConfig};
use binauth_core::train::TrainConfig;

#[test]
#[ignore]
fn calibrate() {
    for seed in [0u64, 1] {
        let t0 = Instant::now();
        let synth_cfg = SynthConfig { delta: 0.8, seed, ..SynthConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let out = generate_corpus(&synth_cfg, dir.path()).unwrap();
        let t_gen = t0.elapsed();

        let pairs = build_pairs(&out.test, &out.train, &out.wild, 1, seed ^ 0xBEEF).unwrap();
        let oracle_scored = oracle_score_pairs(&out.truth, &pairs).unwrap();
        let oracle = metric_report(&scored_to_metric_input(&oracle_scored), serde_json::Value::Null)
            .unwrap();
        let t_oracle = t0.elapsed();

        let train_cfg = TrainConfig { ngram: 3, vocab_cap: 2000, seed, ..TrainConfig::default() };
        let corpora = prepare_corpora(&out.pretrain, &out.train, &train_cfg).unwrap();
        eprintln!(
            "seed {seed}: vocab {} pretrain_chunks {} author_chunks {:?}",
            corpora.vocab.size(),
            corpora.pretrain_chunks.len(),
            corpora.authors.iter().map(|a| a.chunks.len()).sum::<usize>()
        );
        let t_prep = t0.elapsed();
        let trained = train_architecture(&corpora, &train_cfg, Architecture::MosOptReg).unwrap();
        let t_train = t0.elapsed();
        let scored = trained.score_pairs(&pairs).unwrap();
        let metrics =
            metric_report(&scored_to_metric_input(&scored), serde_json::Value::Null).unwrap();
        let t_score = t0.elapsed();

        let baseline = binauth_core::eval::cosine_baseline(&out.train, &pairs).unwrap();

        // ---- diagnostics ----
        for stage in ["pretrain", "joint", "finetune"] {
            let losses: Vec<f64> = trained
                .records
                .iter()
                .filter(|r| r.stage == stage)
                .map(|r| r.loss)
                .collect();
            if !losses.is_empty() {
                eprintln!(
                    "  {stage}: first {:.4} last {:.4} ({} records)",
                    losses[0],
                    losses[losses.len() - 1],
                    losses.len()
                );
            }
        }
        //

        // Self vs cross loss on train and test binaries.
        use binauth_core::cfg::load_cfg;
        use binauth_core::verify::loss_array_any;
        let mut self_train = Vec::new();
        let mut cross_train = Vec::new();
        for (ai, author) in out.train.authors.iter().enumerate() {
            for path in &author.samples {
                let arr =
                    loss_array_any(&trained.model, &load_cfg(path).unwrap(), &train_cfg, &trained.vocab)
                        .unwrap();
                for (j, &l) in arr.losses.iter().enumerate() {
                    if j == ai {
                        self_train.push(l);
                    } else {
                        cross_train.push(l);
                    }
                }
            }
        }
        let mut self_test = Vec::new();
        let mut cross_test = Vec::new();
        let mut var_sum = 0.0;
        let mut var_n = 0usize;
        for (ai, author) in out.test.authors.iter().enumerate() {
            for path in &author.samples {
                let arr =
                    loss_array_any(&trained.model, &load_cfg(path).unwrap(), &train_cfg, &trained.vocab)
                        .unwrap();
                let avg = arr.losses.iter().sum::<f64>() / arr.losses.len() as f64;
                var_sum +=
                    arr.losses.iter().map(|l| (l - avg) * (l - avg)).sum::<f64>() / arr.losses.len() as f64;
                var_n += 1;
                for (j, &l) in arr.losses.iter().enumerate() {
                    if j == ai {
                        self_test.push(l);
                    } else {
                        cross_test.push(l);
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        eprintln!(
            "  self/cross train: {:.4}/{:.4}  test: {:.4}/{:.4}  mean loss-array var: {:.6}",
            mean(&self_train),
            mean(&cross_train),
            mean(&self_test),
            mean(&cross_test),
            var_sum / var_n as f64
        );
        // Margin detection instead of the normalized score.
        let margin_scored: Vec<(f64, bool)> = scored
            .iter()
            .map(|s| {
                (s.score.loss * -1.0, s.positive) // raw loss, lower = accept
            })
            .collect();
        let raw_auc = binauth_core::eval::auc_roc(&margin_scored).unwrap();
        eprintln!("  raw-loss AUC {raw_auc:.4} (eq11 AUC {:.4})", metrics.auc_roc);

        eprintln!(
            "seed {seed}: oracle_auc {:.4} binmlm_auc {:.4} baseline_auc {:.4} | gen {:.1?} oracle {:.1?} prep {:.1?} train {:.1?} score {:.1?} total {:.1?}",
            oracle.auc_roc,
            metrics.auc_roc,
            baseline.auc_roc,
            t_gen,
            t_oracle - t_gen,
            t_prep - t_oracle,
            t_train - t_prep,
            t_score - t_train,
            t0.elapsed()
        );
    }
}
