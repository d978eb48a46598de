//! End-to-end checks of the experiment commands through `run_manifest`,
//! on a micro pipeline trained in-process.

use std::fs;
use std::path::{Path, PathBuf};

use readapt_core::arith::PartialAdaptation;
use readapt_core::checkpoint::load_checkpoint;
use readapt_core::eval::{evaluate, load_beir_dataset};
use readapt_core::harness::{run_manifest, CommandSpec, ExperimentManifest, HEAD_PATTERN};
use readapt_core::model::{EncoderConfig, ModelParams, Pooling, LM_HEAD};
use readapt_core::synth::SyntheticDomainSpec;
use readapt_core::train::{DoraTrainConfig, TrainConfig};

struct Pipeline {
    #[allow(dead_code)]
    root: tempfile::TempDir,
    dataset_a: PathBuf,
    dataset_b: PathBuf,
    pretrained: PathBuf,
    retriever: PathBuf,
    adapter: PathBuf,
}

fn encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 128,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 16,
        pooling: Pooling::Mean,
        seed,
    }
}

fn quick_train(seed: u64, epochs: usize, lr: f32) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr,
        epochs,
        max_len: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn spec(domain: &str, seed: u64, n_docs: usize, n_queries: usize) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        seed,
        domain: domain.to_string(),
        n_topics: 4,
        lexicon_size: 8,
        n_docs,
        doc_len: (6, 10),
        n_queries,
        query_len: (2, 4),
        noise_rate: 0.1,
        shared_vocab_size: 48,
    }
}

fn manifest(seed: u64, out: &Path, command: CommandSpec) -> ExperimentManifest {
    ExperimentManifest::new(seed, out, command)
}

/// Generates two domains and trains the three artifacts.
fn build_pipeline(seed: u64) -> Pipeline {
    let root = tempfile::tempdir().unwrap();
    let p = |name: &str| root.path().join(name);

    run_manifest(&manifest(
        seed,
        &p("dsA"),
        CommandSpec::GenSynthetic {
            spec: spec("alpha", seed, 24, 16),
        },
    ))
    .unwrap();
    run_manifest(&manifest(
        seed + 1,
        &p("dsB"),
        CommandSpec::GenSynthetic {
            spec: spec("beta", seed + 1, 24, 10),
        },
    ))
    .unwrap();

    run_manifest(&manifest(
        seed,
        &p("pre"),
        CommandSpec::Pretrain {
            corpora: vec![p("dsA"), p("dsB")],
            encoder: encoder(seed),
            train: quick_train(seed, 2, 2e-3),
        },
    ))
    .unwrap();

    run_manifest(&manifest(
        seed,
        &p("ret"),
        CommandSpec::TrainRetriever {
            pretrained: p("pre/pretrained.rackpt"),
            dataset: p("dsA"),
            train: quick_train(seed, 2, 1e-3),
        },
    ))
    .unwrap();

    run_manifest(&manifest(
        seed,
        &p("ada"),
        CommandSpec::TrainAdapter {
            pretrained: p("pre/pretrained.rackpt"),
            corpus: p("dsB"),
            dora: DoraTrainConfig::default(),
            train: quick_train(seed, 1, 2e-3),
        },
    ))
    .unwrap();

    Pipeline {
        dataset_a: p("dsA"),
        dataset_b: p("dsB"),
        pretrained: p("pre/pretrained.rackpt"),
        retriever: p("ret/retriever.rackpt"),
        adapter: p("ada/adapter.rackpt"),
        root,
    }
}

fn readapt_to(pipe: &Pipeline, out: &Path, alpha: f32, beta: f32) -> PathBuf {
    run_manifest(&manifest(
        0,
        out,
        CommandSpec::Readapt {
            pretrained: pipe.pretrained.clone(),
            retriever: pipe.retriever.clone(),
            adapter: pipe.adapter.clone(),
            scalars: PartialAdaptation { alpha, beta },
            head_patterns: vec![HEAD_PATTERN.to_string()],
        },
    ))
    .unwrap();
    out.join("readapted.rackpt")
}

#[test]
fn readapt_beta_only_reconstructs_retriever_backbone() {
    let pipe = build_pipeline(40);
    let out = tempfile::tempdir().unwrap();
    let path = readapt_to(&pipe, out.path(), 0.0, 1.0);
    let rebuilt = load_checkpoint(&path).unwrap();
    let retriever = load_checkpoint(&pipe.retriever).unwrap();
    for (name, t) in rebuilt.tensors() {
        if name == LM_HEAD {
            continue; // head delta was dropped; the head stays pretrained
        }
        let want = retriever.get(name).unwrap();
        for (x, y) in t.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{name}");
        }
    }
}

#[test]
fn readapt_neutral_scalars_reproduce_pretrained_bit_exact() {
    let pipe = build_pipeline(41);
    let out = tempfile::tempdir().unwrap();
    let path = readapt_to(&pipe, out.path(), 0.0, 0.0);
    let rebuilt = load_checkpoint(&path).unwrap();
    let pretrained = load_checkpoint(&pipe.pretrained).unwrap();
    assert!(rebuilt.bit_eq(&pretrained));
}

#[test]
fn readapted_beta_only_evaluates_like_the_retriever() {
    let pipe = build_pipeline(42);
    let out = tempfile::tempdir().unwrap();
    let path = readapt_to(&pipe, out.path(), 0.0, 1.0);

    let dataset = load_beir_dataset(&pipe.dataset_b).unwrap();
    let rebuilt = ModelParams::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    let retriever =
        ModelParams::from_checkpoint(load_checkpoint(&pipe.retriever).unwrap()).unwrap();
    let a = evaluate(&rebuilt, &dataset, &[10]).unwrap();
    let b = evaluate(&retriever, &dataset, &[10]).unwrap();
    for (qid, ra) in &a.per_query {
        let rb = &b.per_query[qid];
        for (hit_a, hit_b) in ra.ranking.iter().zip(&rb.ranking) {
            assert_eq!(hit_a.doc_id, hit_b.doc_id, "{qid}");
            assert!((hit_a.score - hit_b.score).abs() <= 1e-5, "{qid}");
        }
    }
}

#[test]
fn eval_command_writes_reports_and_delta_table() {
    let pipe = build_pipeline(43);
    let out = tempfile::tempdir().unwrap();
    let summary = run_manifest(&manifest(
        0,
        out.path(),
        CommandSpec::Eval {
            checkpoint: pipe.retriever.clone(),
            dataset: pipe.dataset_b.clone(),
            k: 10,
            baseline: Some(pipe.pretrained.clone()),
        },
    ))
    .unwrap();
    for file in ["report.json", "report.tsv", "delta.json", "delta.tsv", "manifest.json"] {
        assert!(out.path().join(file).exists(), "{file}");
    }
    assert!(summary.metrics.contains_key("ndcg@10"));
    assert!(summary.metrics.contains_key("delta_ndcg@10"));

    // aggregate equals the mean of the per-query table
    let report: readapt_core::eval::EvalReport =
        serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap())
            .unwrap();
    let mean: f64 = report
        .per_query
        .values()
        .map(|r| r.metrics["ndcg@10"])
        .sum::<f64>()
        / report.per_query.len() as f64;
    assert!((report.metrics["ndcg@10"] - mean).abs() < 1e-12);
}

#[test]
fn ablate_splits_partitions_and_arms() {
    let pipe = build_pipeline(44);
    let out = tempfile::tempdir().unwrap();
    let summary = run_manifest(&manifest(
        7,
        out.path(),
        CommandSpec::AblateSplits {
            pretrained: pipe.pretrained.clone(),
            retriever: pipe.retriever.clone(),
            dataset: pipe.dataset_b.clone(),
            dora: DoraTrainConfig::default(),
            train: quick_train(7, 1, 2e-3),
            scalars: PartialAdaptation::default(),
            k: 10,
        },
    ))
    .unwrap();
    let report: readapt_core::harness::AblationReport =
        serde_json::from_str(&fs::read_to_string(out.path().join("ablate_splits.json")).unwrap())
            .unwrap();
    assert_eq!(
        report.partition_sizes["with"] + report.partition_sizes["without"],
        report.partition_sizes["total"]
    );
    assert_eq!(report.arms.len(), 3);
    for (name, arm) in &report.arms {
        match arm {
            readapt_core::harness::AblationArm::Ok {
                delta_vs_retriever, ..
            } => {
                assert!(
                    delta_vs_retriever["ndcg@10"].is_finite(),
                    "{name} delta not finite"
                );
            }
            readapt_core::harness::AblationArm::Skipped { .. } => {
                panic!("{name} should not be skipped in this fixture")
            }
        }
    }
    assert!(summary.metrics.contains_key("both_delta_ndcg@10"));
    assert!(out.path().join("ablate_splits.tsv").exists());
}

#[test]
fn ablate_splits_skips_empty_partition_when_all_docs_judged() {
    let pipe = build_pipeline(45);
    // every doc judged: as many queries as docs, spec pairs each query to a
    // distinct source doc by construction when n_queries == n_docs
    let root = tempfile::tempdir().unwrap();
    let ds = root.path().join("dsFull");
    run_manifest(&manifest(
        9,
        &ds,
        CommandSpec::GenSynthetic {
            spec: spec("gamma", 9, 12, 12),
        },
    ))
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    run_manifest(&manifest(
        9,
        out.path(),
        CommandSpec::AblateSplits {
            pretrained: pipe.pretrained.clone(),
            retriever: pipe.retriever.clone(),
            dataset: ds,
            dora: DoraTrainConfig::default(),
            train: quick_train(9, 1, 2e-3),
            scalars: PartialAdaptation::default(),
            k: 10,
        },
    ))
    .unwrap();
    let report: readapt_core::harness::AblationReport =
        serde_json::from_str(&fs::read_to_string(out.path().join("ablate_splits.json")).unwrap())
            .unwrap();
    assert_eq!(report.partition_sizes["without"], 0);
    assert!(matches!(
        report.arms["without"],
        readapt_core::harness::AblationArm::Skipped { .. }
    ));
    assert!(matches!(
        report.arms["with"],
        readapt_core::harness::AblationArm::Ok { .. }
    ));
}

#[test]
fn cross_domain_self_comparison_is_zero_and_algebra_holds() {
    let pipe = build_pipeline(46);
    // a second adapter trained on domain A's corpus plays the cross-domain one
    let root = tempfile::tempdir().unwrap();
    let cross_dir = root.path().join("adaCross");
    run_manifest(&manifest(
        11,
        &cross_dir,
        CommandSpec::TrainAdapter {
            pretrained: pipe.pretrained.clone(),
            corpus: pipe.dataset_a.clone(),
            dora: DoraTrainConfig::default(),
            train: quick_train(11, 1, 2e-3),
        },
    ))
    .unwrap();

    let out = tempfile::tempdir().unwrap();
    run_manifest(&manifest(
        0,
        out.path(),
        CommandSpec::CrossDomain {
            pretrained: pipe.pretrained.clone(),
            retriever: pipe.retriever.clone(),
            adapter_domain: pipe.adapter.clone(),
            adapter_cross: cross_dir.join("adapter.rackpt"),
            dataset: pipe.dataset_b.clone(),
            scalars: PartialAdaptation::default(),
            k: 10,
        },
    ))
    .unwrap();
    let report: readapt_core::harness::CrossDomainReport =
        serde_json::from_str(&fs::read_to_string(out.path().join("cross_domain.json")).unwrap())
            .unwrap();
    // (cross - base) - (domain - base) == (cross - domain)
    for metric in report.base.keys() {
        let lhs = report.delta_cross_vs_base[metric] - report.delta_domain_vs_base[metric];
        let rhs = report.delta_cross_vs_domain[metric];
        assert!((lhs - rhs).abs() <= 1e-6, "{metric}: {lhs} vs {rhs}");
    }

    // self-comparison: the same adapter on both sides zeroes the domain column
    let out2 = tempfile::tempdir().unwrap();
    run_manifest(&manifest(
        0,
        out2.path(),
        CommandSpec::CrossDomain {
            pretrained: pipe.pretrained.clone(),
            retriever: pipe.retriever.clone(),
            adapter_domain: pipe.adapter.clone(),
            adapter_cross: pipe.adapter.clone(),
            dataset: pipe.dataset_b.clone(),
            scalars: PartialAdaptation::default(),
            k: 10,
        },
    ))
    .unwrap();
    let self_report: readapt_core::harness::CrossDomainReport =
        serde_json::from_str(&fs::read_to_string(out2.path().join("cross_domain.json")).unwrap())
            .unwrap();
    for (metric, value) in &self_report.delta_cross_vs_domain {
        assert_eq!(*value, 0.0, "{metric} self-delta must be exactly zero");
    }
}

#[test]
fn scalar_sweep_rows_and_alpha_zero_identity() {
    let pipe = build_pipeline(47);
    let out = tempfile::tempdir().unwrap();
    run_manifest(&manifest(
        0,
        out.path(),
        CommandSpec::ScalarSweep {
            pretrained: pipe.pretrained.clone(),
            retriever: pipe.retriever.clone(),
            adapter: pipe.adapter.clone(),
            dataset: pipe.dataset_b.clone(),
            alphas: vec![0.0, 0.5, 1.0],
            beta: 1.0,
            k: 10,
        },
    ))
    .unwrap();
    let csv = fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 3);

    let rows_json: Vec<readapt_core::harness::SweepRow> =
        serde_json::from_str(&fs::read_to_string(out.path().join("sweep.json")).unwrap()).unwrap();
    let score_at = |alpha: f32| -> f64 {
        rows_json
            .iter()
            .find(|r| r.alpha == alpha)
            .unwrap()
            .metrics["ndcg@10"]
    };

    // alpha = 0 equals the beta-only readapted model exactly
    let beta_dir = tempfile::tempdir().unwrap();
    let beta_only = readapt_to(&pipe, &beta_dir.path().join("b"), 0.0, 1.0);
    let dataset = load_beir_dataset(&pipe.dataset_b).unwrap();
    let params = ModelParams::from_checkpoint(load_checkpoint(&beta_only).unwrap()).unwrap();
    let report = evaluate(&params, &dataset, &[10]).unwrap();
    assert_eq!(score_at(0.0), report.metrics["ndcg@10"]);

    // max over the sweep dominates any member
    let max = rows_json
        .iter()
        .map(|r| r.metrics["ndcg@10"])
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max >= score_at(0.5));
}

#[test]
fn commands_never_mutate_their_inputs() {
    let pipe = build_pipeline(48);
    let before_pre = fs::read(&pipe.pretrained).unwrap();
    let before_ret = fs::read(&pipe.retriever).unwrap();
    let before_ada = fs::read(&pipe.adapter).unwrap();
    let before_corpus = fs::read(pipe.dataset_b.join("corpus.jsonl")).unwrap();

    let out = tempfile::tempdir().unwrap();
    readapt_to(&pipe, out.path(), 0.5, 1.0);
    let out2 = tempfile::tempdir().unwrap();
    run_manifest(&manifest(
        0,
        out2.path(),
        CommandSpec::Eval {
            checkpoint: pipe.retriever.clone(),
            dataset: pipe.dataset_b.clone(),
            k: 10,
            baseline: None,
        },
    ))
    .unwrap();

    assert_eq!(before_pre, fs::read(&pipe.pretrained).unwrap());
    assert_eq!(before_ret, fs::read(&pipe.retriever).unwrap());
    assert_eq!(before_ada, fs::read(&pipe.adapter).unwrap());
    assert_eq!(before_corpus, fs::read(pipe.dataset_b.join("corpus.jsonl")).unwrap());
}
