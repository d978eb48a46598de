//! Experiment commands driven by JSON manifests.
//!
//! Every command takes an [`ExperimentManifest`], writes its outputs under
//! the manifest's `out` directory, and finishes by writing the manifest
//! itself next to them as `manifest.json`. Commands are deterministic
//! functions of their manifest: re-running one reproduces every output byte
//! for byte. Inputs (checkpoints, datasets) are never mutated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arith::{
    drop_head, extract_readapter, readapt, to_dense_delta, LowRankAdapter, PartialAdaptation,
    ReAdapter,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{evaluate, load_beir_dataset, load_corpus, EvalReport, RetrievalDataset};
use crate::model::{EncoderConfig, ModelParams};
use crate::synth::{gen_synthetic, SyntheticDomainSpec};
use crate::train::{
    pretrain_lm, train_knowledge_adapter, train_retriever, DoraTrainConfig, StepRecord,
    TrainConfig,
};

pub const HEAD_PATTERN: &str = "lm_head.*";

/// A fully specified, replayable experiment command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    /// Toolkit version that produced the manifest.
    pub version: String,
    /// Master seed recorded for provenance; the nested configs carry the
    /// seeds that are actually consumed.
    pub seed: u64,
    pub out: PathBuf,
    #[serde(flatten)]
    pub command: CommandSpec,
}

impl ExperimentManifest {
    pub fn new(seed: u64, out: impl Into<PathBuf>, command: CommandSpec) -> Self {
        ExperimentManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            out: out.into(),
            command,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn command_name(&self) -> &'static str {
        match &self.command {
            CommandSpec::GenSynthetic { .. } => "gen-synthetic",
            CommandSpec::Pretrain { .. } => "pretrain",
            CommandSpec::TrainRetriever { .. } => "train-retriever",
            CommandSpec::TrainAdapter { .. } => "train-adapter",
            CommandSpec::Readapt { .. } => "readapt",
            CommandSpec::Eval { .. } => "eval",
            CommandSpec::AblateSplits { .. } => "ablate-splits",
            CommandSpec::CrossDomain { .. } => "cross-domain",
            CommandSpec::ScalarSweep { .. } => "scalar-sweep",
            CommandSpec::SizeCorrelation { .. } => "size-correlation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum CommandSpec {
    GenSynthetic {
        spec: SyntheticDomainSpec,
    },
    Pretrain {
        /// Dataset directories whose corpora are concatenated as raw text.
        corpora: Vec<PathBuf>,
        encoder: EncoderConfig,
        train: TrainConfig,
    },
    TrainRetriever {
        pretrained: PathBuf,
        /// BEIR-layout directory supplying (query, positive) pairs via qrels.
        dataset: PathBuf,
        train: TrainConfig,
    },
    TrainAdapter {
        pretrained: PathBuf,
        /// Directory whose corpus.jsonl is the unlabeled training text.
        corpus: PathBuf,
        dora: DoraTrainConfig,
        train: TrainConfig,
    },
    Readapt {
        pretrained: PathBuf,
        retriever: PathBuf,
        adapter: PathBuf,
        scalars: PartialAdaptation,
        head_patterns: Vec<String>,
    },
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        k: usize,
        /// When present, a baseline-vs-checkpoint delta table is emitted.
        baseline: Option<PathBuf>,
    },
    AblateSplits {
        pretrained: PathBuf,
        retriever: PathBuf,
        dataset: PathBuf,
        dora: DoraTrainConfig,
        train: TrainConfig,
        scalars: PartialAdaptation,
        k: usize,
    },
    CrossDomain {
        pretrained: PathBuf,
        retriever: PathBuf,
        /// Adapter trained on the evaluation domain.
        adapter_domain: PathBuf,
        /// Adapter trained on a different domain.
        adapter_cross: PathBuf,
        dataset: PathBuf,
        scalars: PartialAdaptation,
        k: usize,
    },
    ScalarSweep {
        pretrained: PathBuf,
        retriever: PathBuf,
        adapter: PathBuf,
        dataset: PathBuf,
        alphas: Vec<f32>,
        beta: f32,
        k: usize,
    },
    SizeCorrelation {
        /// CSV with a `size,delta_ndcg` header.
        points: PathBuf,
    },
}

/// What a command produced: file paths plus headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunSummary {
    fn push(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }
}

/// Executes a manifest and writes `manifest.json` next to the outputs.
pub fn run_manifest(manifest: &ExperimentManifest) -> Result<RunSummary> {
    fs::create_dir_all(&manifest.out).map_err(|e| Error::io(&manifest.out, e))?;
    let mut summary = match &manifest.command {
        CommandSpec::GenSynthetic { spec } => cmd_gen_synthetic(spec, &manifest.out)?,
        CommandSpec::Pretrain {
            corpora,
            encoder,
            train,
        } => cmd_pretrain(corpora, encoder, train, &manifest.out)?,
        CommandSpec::TrainRetriever {
            pretrained,
            dataset,
            train,
        } => cmd_train_retriever(pretrained, dataset, train, &manifest.out)?,
        CommandSpec::TrainAdapter {
            pretrained,
            corpus,
            dora,
            train,
        } => cmd_train_adapter(pretrained, corpus, dora, train, &manifest.out)?,
        CommandSpec::Readapt {
            pretrained,
            retriever,
            adapter,
            scalars,
            head_patterns,
        } => cmd_readapt(
            pretrained,
            retriever,
            adapter,
            *scalars,
            head_patterns,
            &manifest.out,
        )?,
        CommandSpec::Eval {
            checkpoint,
            dataset,
            k,
            baseline,
        } => cmd_eval(checkpoint, dataset, *k, baseline.as_deref(), &manifest.out)?,
        CommandSpec::AblateSplits {
            pretrained,
            retriever,
            dataset,
            dora,
            train,
            scalars,
            k,
        } => cmd_ablate_splits(
            pretrained,
            retriever,
            dataset,
            dora,
            train,
            *scalars,
            *k,
            &manifest.out,
        )?,
        CommandSpec::CrossDomain {
            pretrained,
            retriever,
            adapter_domain,
            adapter_cross,
            dataset,
            scalars,
            k,
        } => cmd_cross_domain(
            pretrained,
            retriever,
            adapter_domain,
            adapter_cross,
            dataset,
            *scalars,
            *k,
            &manifest.out,
        )?,
        CommandSpec::ScalarSweep {
            pretrained,
            retriever,
            adapter,
            dataset,
            alphas,
            beta,
            k,
        } => cmd_scalar_sweep(
            pretrained,
            retriever,
            adapter,
            dataset,
            alphas,
            *beta,
            *k,
            &manifest.out,
        )?,
        CommandSpec::SizeCorrelation { points } => cmd_size_correlation(points, &manifest.out)?,
    };
    let manifest_path = manifest.out.join("manifest.json");
    write_json(&manifest_path, manifest)?;
    summary.push(manifest_path);
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_train_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut out = String::new();
    for record in log {
        writeln!(out, "{}", serde_json::to_string(record)?).expect("string write");
    }
    write_text(path, &out)
}

fn load_params(path: &Path) -> Result<ModelParams> {
    ModelParams::from_checkpoint(load_checkpoint(path)?)
}

/// (query text, positive document text) pairs from a dataset's qrels.
pub fn pairs_from_dataset(dataset: &RetrievalDataset) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for (qid, judgments) in dataset.judged_queries() {
        for (did, &grade) in judgments {
            if grade > 0 {
                pairs.push((
                    dataset.queries[qid].clone(),
                    dataset.corpus[did].clone(),
                ));
            }
        }
    }
    pairs
}

fn corpus_texts(corpus: &BTreeMap<String, String>) -> Vec<String> {
    corpus.values().cloned().collect()
}

fn cmd_gen_synthetic(spec: &SyntheticDomainSpec, out: &Path) -> Result<RunSummary> {
    let dataset = gen_synthetic(spec, out)?;
    let mut summary = RunSummary::default();
    summary.push(out.join("corpus.jsonl"));
    summary.push(out.join("queries.jsonl"));
    summary.push(out.join("qrels/test.tsv"));
    summary.metrics.insert("n_docs".to_string(), dataset.corpus.len() as f64);
    summary
        .metrics
        .insert("n_queries".to_string(), dataset.queries.len() as f64);
    Ok(summary)
}

fn cmd_pretrain(
    corpora: &[PathBuf],
    encoder: &EncoderConfig,
    train: &TrainConfig,
    out: &Path,
) -> Result<RunSummary> {
    if corpora.is_empty() {
        return Err(Error::Invalid("no corpora given".to_string()));
    }
    let mut docs = Vec::new();
    for dir in corpora {
        docs.extend(corpus_texts(&load_corpus(dir)?));
    }
    let outcome = pretrain_lm(encoder, &docs, train)?;
    let ckpt_path = out.join("pretrained.rackpt");
    save_checkpoint(outcome.params.checkpoint(), &ckpt_path)?;
    let log_path = out.join("train_log.jsonl");
    write_train_log(&log_path, &outcome.log)?;

    let mut summary = RunSummary::default();
    summary.push(ckpt_path);
    summary.push(log_path);
    summary.metrics.insert("n_docs".to_string(), docs.len() as f64);
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        summary.metrics.insert("first_loss".to_string(), first.loss);
        summary.metrics.insert("last_loss".to_string(), last.loss);
    }
    Ok(summary)
}

fn cmd_train_retriever(
    pretrained: &Path,
    dataset_dir: &Path,
    train: &TrainConfig,
    out: &Path,
) -> Result<RunSummary> {
    let pre = load_params(pretrained)?;
    let dataset = load_beir_dataset(dataset_dir)?;
    let pairs = pairs_from_dataset(&dataset);
    let outcome = train_retriever(&pre, &pairs, train)?;
    let ckpt_path = out.join("retriever.rackpt");
    save_checkpoint(outcome.params.checkpoint(), &ckpt_path)?;
    let log_path = out.join("train_log.jsonl");
    write_train_log(&log_path, &outcome.log)?;

    let mut summary = RunSummary::default();
    summary.push(ckpt_path);
    summary.push(log_path);
    summary.metrics.insert("n_pairs".to_string(), pairs.len() as f64);
    if let Some(last) = outcome.log.last() {
        summary.metrics.insert("last_loss".to_string(), last.loss);
    }
    Ok(summary)
}

fn cmd_train_adapter(
    pretrained: &Path,
    corpus_dir: &Path,
    dora: &DoraTrainConfig,
    train: &TrainConfig,
    out: &Path,
) -> Result<RunSummary> {
    let pre = load_params(pretrained)?;
    let corpus = load_corpus(corpus_dir)?;
    let docs = corpus_texts(&corpus);
    let outcome = train_knowledge_adapter(&pre, &docs, dora, train)?;
    let adapter_path = out.join("adapter.rackpt");
    save_checkpoint(&outcome.adapter.to_checkpoint()?, &adapter_path)?;
    let log_path = out.join("train_log.jsonl");
    write_train_log(&log_path, &outcome.log)?;

    let mut summary = RunSummary::default();
    summary.push(adapter_path);
    summary.push(log_path);
    summary.metrics.insert("n_docs".to_string(), docs.len() as f64);
    if let Some(last) = outcome.log.last() {
        summary.metrics.insert("last_loss".to_string(), last.loss);
    }
    Ok(summary)
}

/// Loads an adapter container and materializes it as a dense knowledge delta
/// against `base`: DoRA containers are merged and differenced, dense
/// knowledge containers pass through.
fn load_knowledge_delta(path: &Path, base: &Checkpoint) -> Result<ReAdapter> {
    let ckpt = load_checkpoint(path)?;
    match ckpt.metadata().get(crate::arith::meta::ROLE).map(String::as_str) {
        Some(crate::arith::meta::ROLE_DORA) => {
            let adapter = LowRankAdapter::from_checkpoint(&ckpt)?;
            to_dense_delta(base, &adapter)
        }
        Some(crate::arith::meta::ROLE_KNOWLEDGE) => ReAdapter::from_checkpoint(&ckpt),
        other => Err(Error::InvalidConfig(format!(
            "adapter container role {other:?}; expected \"dora\" or \"knowledge\""
        ))),
    }
}

/// The recomposition flow: extract the retriever's delta, densify the
/// knowledge adapter, drop head weights from both, recompose.
pub fn readapt_params(
    pretrained: &ModelParams,
    retriever: &ModelParams,
    knowledge: &ReAdapter,
    scalars: PartialAdaptation,
    head_patterns: &[String],
) -> Result<ModelParams> {
    let delta = extract_readapter(retriever.checkpoint(), pretrained.checkpoint())?;
    let delta = drop_head(&delta, head_patterns)?;
    let knowledge = drop_head(knowledge, head_patterns)?;
    let composed = readapt(pretrained.checkpoint(), &knowledge, &delta, scalars)?;
    ModelParams::from_checkpoint(composed)
}

fn cmd_readapt(
    pretrained: &Path,
    retriever: &Path,
    adapter: &Path,
    scalars: PartialAdaptation,
    head_patterns: &[String],
    out: &Path,
) -> Result<RunSummary> {
    let pre = load_params(pretrained)?;
    let ret = load_params(retriever)?;
    let knowledge = load_knowledge_delta(adapter, pre.checkpoint())?;
    let composed = readapt_params(&pre, &ret, &knowledge, scalars, head_patterns)?;
    let ckpt_path = out.join("readapted.rackpt");
    save_checkpoint(composed.checkpoint(), &ckpt_path)?;

    let mut summary = RunSummary::default();
    summary.push(ckpt_path);
    summary
        .metrics
        .insert("alpha".to_string(), f64::from(scalars.alpha));
    summary
        .metrics
        .insert("beta".to_string(), f64::from(scalars.beta));
    Ok(summary)
}

/// Side-by-side aggregate metrics with their differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub checkpoint: BTreeMap<String, f64>,
    pub baseline: BTreeMap<String, f64>,
    pub delta: BTreeMap<String, f64>,
}

fn delta_report(primary: &EvalReport, baseline: &EvalReport) -> DeltaReport {
    let delta = primary
        .metrics
        .iter()
        .filter_map(|(k, v)| baseline.metrics.get(k).map(|b| (k.clone(), v - b)))
        .collect();
    DeltaReport {
        checkpoint: primary.metrics.clone(),
        baseline: baseline.metrics.clone(),
        delta,
    }
}

fn delta_tsv(report: &DeltaReport) -> String {
    let mut out = String::from("metric\tcheckpoint\tbaseline\tdelta\n");
    for (metric, delta) in &report.delta {
        writeln!(
            out,
            "{metric}\t{}\t{}\t{delta}",
            report.checkpoint[metric], report.baseline[metric]
        )
        .expect("string write");
    }
    out
}

fn cmd_eval(
    checkpoint: &Path,
    dataset_dir: &Path,
    k: usize,
    baseline: Option<&Path>,
    out: &Path,
) -> Result<RunSummary> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".to_string()));
    }
    let params = load_params(checkpoint)?;
    let dataset = load_beir_dataset(dataset_dir)?;
    let report = evaluate(&params, &dataset, &[k])?;

    let mut summary = RunSummary::default();
    let json_path = out.join("report.json");
    write_json(&json_path, &report)?;
    summary.push(json_path);
    let tsv_path = out.join("report.tsv");
    write_text(&tsv_path, &report.to_tsv())?;
    summary.push(tsv_path);
    summary.metrics = report.metrics.clone();

    if let Some(baseline_path) = baseline {
        let base_params = load_params(baseline_path)?;
        let base_report = evaluate(&base_params, &dataset, &[k])?;
        let delta = delta_report(&report, &base_report);
        let dj = out.join("delta.json");
        write_json(&dj, &delta)?;
        summary.push(dj);
        let dt = out.join("delta.tsv");
        write_text(&dt, &delta_tsv(&delta))?;
        summary.push(dt);
        for (metric, value) in &delta.delta {
            summary.metrics.insert(format!("delta_{metric}"), *value);
        }
    }
    Ok(summary)
}

/// One arm of the queried-vs-unqueried corpus ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AblationArm {
    Ok {
        corpus_size: usize,
        metrics: BTreeMap<String, f64>,
        delta_vs_retriever: BTreeMap<String, f64>,
    },
    Skipped {
        corpus_size: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub retriever_metrics: BTreeMap<String, f64>,
    /// `with` = documents referenced by any test qrels row.
    pub arms: BTreeMap<String, AblationArm>,
    pub partition_sizes: BTreeMap<String, usize>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate_splits(
    pretrained: &Path,
    retriever: &Path,
    dataset_dir: &Path,
    dora: &DoraTrainConfig,
    train: &TrainConfig,
    scalars: PartialAdaptation,
    k: usize,
    out: &Path,
) -> Result<RunSummary> {
    let pre = load_params(pretrained)?;
    let ret = load_params(retriever)?;
    let dataset = load_beir_dataset(dataset_dir)?;
    if dataset.judged_queries().next().is_none() {
        return Err(Error::Invalid("dataset has no qrels".to_string()));
    }

    // "with" = documents appearing in any test qrels row, regardless of grade
    let judged_docs: std::collections::BTreeSet<&String> = dataset
        .qrels
        .values()
        .flat_map(|j| j.keys())
        .collect();
    let with: BTreeMap<String, String> = dataset
        .corpus
        .iter()
        .filter(|(id, _)| judged_docs.contains(id))
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();
    let without: BTreeMap<String, String> = dataset
        .corpus
        .iter()
        .filter(|(id, _)| !judged_docs.contains(id))
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();

    let retriever_report = evaluate(&ret, &dataset, &[k])?;
    let mut report = AblationReport {
        retriever_metrics: retriever_report.metrics.clone(),
        arms: BTreeMap::new(),
        partition_sizes: BTreeMap::from([
            ("with".to_string(), with.len()),
            ("without".to_string(), without.len()),
            ("total".to_string(), dataset.corpus.len()),
        ]),
    };

    let mut summary = RunSummary::default();
    let arms: [(&str, &BTreeMap<String, String>); 3] = [
        ("with", &with),
        ("without", &without),
        ("both", &dataset.corpus),
    ];
    for (name, corpus) in arms {
        if corpus.is_empty() {
            report.arms.insert(
                name.to_string(),
                AblationArm::Skipped {
                    corpus_size: 0,
                    reason: "empty corpus partition".to_string(),
                },
            );
            continue;
        }
        let docs = corpus_texts(corpus);
        let outcome = train_knowledge_adapter(&pre, &docs, dora, train)?;
        let adapter_path = out.join(format!("adapter_{name}.rackpt"));
        save_checkpoint(&outcome.adapter.to_checkpoint()?, &adapter_path)?;
        summary.push(adapter_path);

        let knowledge = to_dense_delta(pre.checkpoint(), &outcome.adapter)?;
        let composed = readapt_params(
            &pre,
            &ret,
            &knowledge,
            scalars,
            &[HEAD_PATTERN.to_string()],
        )?;
        let ckpt_path = out.join(format!("readapted_{name}.rackpt"));
        save_checkpoint(composed.checkpoint(), &ckpt_path)?;
        summary.push(ckpt_path);

        let arm_report = evaluate(&composed, &dataset, &[k])?;
        let arm_json = out.join(format!("report_{name}.json"));
        write_json(&arm_json, &arm_report)?;
        summary.push(arm_json);

        let delta: BTreeMap<String, f64> = arm_report
            .metrics
            .iter()
            .filter_map(|(m, v)| report.retriever_metrics.get(m).map(|b| (m.clone(), v - b)))
            .collect();
        for (m, v) in &delta {
            summary.metrics.insert(format!("{name}_delta_{m}"), *v);
        }
        report.arms.insert(
            name.to_string(),
            AblationArm::Ok {
                corpus_size: corpus.len(),
                metrics: arm_report.metrics.clone(),
                delta_vs_retriever: delta,
            },
        );
    }

    let json_path = out.join("ablate_splits.json");
    write_json(&json_path, &report)?;
    summary.push(json_path);

    let mut tsv = String::from("arm\tcorpus_size\tndcg\tdelta_vs_retriever\n");
    let key = format!("ndcg@{k}");
    for (name, arm) in &report.arms {
        match arm {
            AblationArm::Ok {
                corpus_size,
                metrics,
                delta_vs_retriever,
            } => {
                writeln!(
                    tsv,
                    "{name}\t{corpus_size}\t{}\t{}",
                    metrics.get(&key).copied().unwrap_or(f64::NAN),
                    delta_vs_retriever.get(&key).copied().unwrap_or(f64::NAN)
                )
                .expect("string write");
            }
            AblationArm::Skipped { corpus_size, reason } => {
                writeln!(tsv, "{name}\t{corpus_size}\tskipped: {reason}\t-").expect("string write");
            }
        }
    }
    let tsv_path = out.join("ablate_splits.tsv");
    write_text(&tsv_path, &tsv)?;
    summary.push(tsv_path);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub base: BTreeMap<String, f64>,
    pub in_domain: BTreeMap<String, f64>,
    pub cross_domain: BTreeMap<String, f64>,
    pub delta_domain_vs_base: BTreeMap<String, f64>,
    pub delta_cross_vs_base: BTreeMap<String, f64>,
    pub delta_cross_vs_domain: BTreeMap<String, f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_cross_domain(
    pretrained: &Path,
    retriever: &Path,
    adapter_domain: &Path,
    adapter_cross: &Path,
    dataset_dir: &Path,
    scalars: PartialAdaptation,
    k: usize,
    out: &Path,
) -> Result<RunSummary> {
    let pre = load_params(pretrained)?;
    let ret = load_params(retriever)?;
    let dataset = load_beir_dataset(dataset_dir)?;
    let head = [HEAD_PATTERN.to_string()];

    let base_report = evaluate(&ret, &dataset, &[k])?;

    let knowledge_domain = load_knowledge_delta(adapter_domain, pre.checkpoint())?;
    let domain_params = readapt_params(&pre, &ret, &knowledge_domain, scalars, &head)?;
    let domain_report = evaluate(&domain_params, &dataset, &[k])?;

    let knowledge_cross = load_knowledge_delta(adapter_cross, pre.checkpoint())?;
    let cross_params = readapt_params(&pre, &ret, &knowledge_cross, scalars, &head)?;
    let cross_report = evaluate(&cross_params, &dataset, &[k])?;

    let diff = |a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
        a.iter()
            .filter_map(|(m, v)| b.get(m).map(|w| (m.clone(), v - w)))
            .collect()
    };
    let report = CrossDomainReport {
        delta_domain_vs_base: diff(&domain_report.metrics, &base_report.metrics),
        delta_cross_vs_base: diff(&cross_report.metrics, &base_report.metrics),
        delta_cross_vs_domain: diff(&cross_report.metrics, &domain_report.metrics),
        base: base_report.metrics,
        in_domain: domain_report.metrics,
        cross_domain: cross_report.metrics,
    };

    let mut summary = RunSummary::default();
    let json_path = out.join("cross_domain.json");
    write_json(&json_path, &report)?;
    summary.push(json_path);

    let key = format!("ndcg@{k}");
    let mut tsv = String::from("model\tndcg\tdelta_vs_base\tdelta_vs_domain\n");
    writeln!(tsv, "base\t{}\t0\t-", report.base[&key]).expect("string write");
    writeln!(
        tsv,
        "in_domain\t{}\t{}\t0",
        report.in_domain[&key], report.delta_domain_vs_base[&key]
    )
    .expect("string write");
    writeln!(
        tsv,
        "cross_domain\t{}\t{}\t{}",
        report.cross_domain[&key],
        report.delta_cross_vs_base[&key],
        report.delta_cross_vs_domain[&key]
    )
    .expect("string write");
    let tsv_path = out.join("cross_domain.tsv");
    write_text(&tsv_path, &tsv)?;
    summary.push(tsv_path);

    summary
        .metrics
        .insert("base_ndcg".to_string(), report.base[&key]);
    summary
        .metrics
        .insert("delta_cross_vs_base".to_string(), report.delta_cross_vs_base[&key]);
    summary.metrics.insert(
        "delta_cross_vs_domain".to_string(),
        report.delta_cross_vs_domain[&key],
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f32,
    pub metrics: BTreeMap<String, f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_scalar_sweep(
    pretrained: &Path,
    retriever: &Path,
    adapter: &Path,
    dataset_dir: &Path,
    alphas: &[f32],
    beta: f32,
    k: usize,
    out: &Path,
) -> Result<RunSummary> {
    if alphas.is_empty() {
        return Err(Error::Invalid("alpha list is empty".to_string()));
    }
    let pre = load_params(pretrained)?;
    let ret = load_params(retriever)?;
    let dataset = load_beir_dataset(dataset_dir)?;
    let knowledge = load_knowledge_delta(adapter, pre.checkpoint())?;
    let head = [HEAD_PATTERN.to_string()];

    let key = format!("ndcg@{k}");
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let scalars = PartialAdaptation::new(alpha, beta)?;
        let composed = readapt_params(&pre, &ret, &knowledge, scalars, &head)?;
        let report = evaluate(&composed, &dataset, &[k])?;
        rows.push(SweepRow {
            alpha,
            metrics: report.metrics,
        });
    }

    let mut summary = RunSummary::default();
    let json_path = out.join("sweep.json");
    write_json(&json_path, &rows)?;
    summary.push(json_path);

    let mut csv = format!("alpha,ndcg@{k}\n");
    for row in &rows {
        writeln!(csv, "{},{}", row.alpha, row.metrics[&key]).expect("string write");
    }
    let csv_path = out.join("sweep.csv");
    write_text(&csv_path, &csv)?;
    summary.push(csv_path);

    let best = rows
        .iter()
        .map(|r| r.metrics[&key])
        .fold(f64::NEG_INFINITY, f64::max);
    summary.metrics.insert("best_ndcg".to_string(), best);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCorrelation {
    /// Change in nDCG per decade of corpus size.
    pub slope: f64,
    pub intercept: f64,
    pub n_points: usize,
}

/// Ordinary least squares of delta-nDCG on log10(corpus size).
pub fn fit_size_correlation(points: &[(f64, f64)]) -> Result<SizeCorrelation> {
    if points.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    for &(size, _) in points {
        if !(size.is_finite() && size > 0.0) {
            return Err(Error::Invalid(format!(
                "corpus sizes must be positive, got {size}"
            )));
        }
    }
    let xs: Vec<f64> = points.iter().map(|&(s, _)| s.log10()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, d)| d).collect();
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid(
            "need at least 2 distinct corpus sizes".to_string(),
        ));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    Ok(SizeCorrelation {
        slope,
        intercept: y_mean - slope * x_mean,
        n_points: points.len(),
    })
}

/// Parses a `size,delta_ndcg` CSV (header required).
pub fn parse_points_csv(raw: &str, file: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::DatasetFormat {
                file: file.to_string(),
                line: i + 1,
                msg: format!("expected 2 comma-separated fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::DatasetFormat {
                file: file.to_string(),
                line: i + 1,
                msg: format!("{what} {s:?} is not a number"),
            })
        };
        points.push((parse(fields[0], "size")?, parse(fields[1], "delta")?));
    }
    Ok(points)
}

fn cmd_size_correlation(points_path: &Path, out: &Path) -> Result<RunSummary> {
    let raw = fs::read_to_string(points_path).map_err(|e| Error::io(points_path, e))?;
    let points = parse_points_csv(&raw, &points_path.display().to_string())?;
    let fit = fit_size_correlation(&points)?;

    let mut summary = RunSummary::default();
    let json_path = out.join("size_correlation.json");
    write_json(&json_path, &fit)?;
    summary.push(json_path);

    let mut csv = String::from("size,log10_size,delta_ndcg,fitted\n");
    for &(size, delta) in &points {
        let x = size.log10();
        writeln!(csv, "{size},{x},{delta},{}", fit.intercept + fit.slope * x)
            .expect("string write");
    }
    let csv_path = out.join("size_correlation.csv");
    write_text(&csv_path, &csv)?;
    summary.push(csv_path);

    summary.metrics.insert("slope".to_string(), fit.slope);
    summary.metrics.insert("intercept".to_string(), fit.intercept);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_fixture_recovers_exact_line() {
        // (10, +1) and (1000, -1): one decade apart each way from 100
        let fit = fit_size_correlation(&[(10.0, 1.0), (1000.0, -1.0)]).unwrap();
        assert_eq!(fit.slope, -1.0);
        assert_eq!(fit.intercept, 2.0);
        assert_eq!(fit.n_points, 2);
    }

    #[test]
    fn flat_data_has_zero_slope() {
        let fit =
            fit_size_correlation(&[(10.0, 0.25), (100.0, 0.25), (1e6, 0.25)]).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.intercept, 0.25);
    }

    #[test]
    fn reference_corpus_sizes_are_accepted() {
        // the largest and smallest corpus sizes seen in practice
        let fit = fit_size_correlation(&[(8.84e6, -0.4), (3.6e3, 0.6)]).unwrap();
        assert!(fit.slope < 0.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(fit_size_correlation(&[(10.0, 1.0)]).is_err());
        assert!(fit_size_correlation(&[(10.0, 1.0), (10.0, 2.0)]).is_err());
        assert!(fit_size_correlation(&[(0.0, 1.0), (10.0, 2.0)]).is_err());
        assert!(fit_size_correlation(&[(-5.0, 1.0), (10.0, 2.0)]).is_err());
    }

    #[test]
    fn points_csv_round_trip() {
        let raw = "size,delta_ndcg\n10,1.0\n1000,-1.0\n";
        let points = parse_points_csv(raw, "test.csv").unwrap();
        assert_eq!(points, vec![(10.0, 1.0), (1000.0, -1.0)]);
        assert!(parse_points_csv("size,delta\nnope,1.0\n", "t").is_err());
        assert!(parse_points_csv("size,delta\n1,2,3\n", "t").is_err());
    }

    #[test]
    fn manifest_json_round_trip() {
        let manifest = ExperimentManifest::new(
            7,
            "/tmp/out",
            CommandSpec::Readapt {
                pretrained: "/a".into(),
                retriever: "/b".into(),
                adapter: "/c".into(),
                scalars: PartialAdaptation::default(),
                head_patterns: vec![HEAD_PATTERN.to_string()],
            },
        );
        let json = serde_json::to_string_pretty(&manifest).unwrap();
        assert!(json.contains("\"command\": \"readapt\""));
        let back: ExperimentManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.command_name(), "readapt");
    }
}
