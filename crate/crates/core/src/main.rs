//! `readapt` — recompose retrieval checkpoints from unlabeled-data adapters
//! and measure the effect.
//!
//! Every subcommand resolves to an [`ExperimentManifest`], runs it, writes
//! outputs plus the manifest under `--out`, and prints a JSON summary to
//! stdout. `--manifest` replays a previously emitted manifest (optionally
//! redirected with `--out`); reruns are byte-identical. Failures exit
//! nonzero with a machine-readable error JSON on stderr.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use readapt_core::arith::PartialAdaptation;
use readapt_core::error::{Error, Result};
use readapt_core::harness::{run_manifest, CommandSpec, ExperimentManifest, RunSummary, HEAD_PATTERN};
use readapt_core::model::{EncoderConfig, Pooling};
use readapt_core::synth::SyntheticDomainSpec;
use readapt_core::train::{DoraTrainConfig, Schedule, TrainConfig};

#[derive(Parser)]
#[command(
    name = "readapt",
    version,
    about = "Adapter arithmetic for dense retrievers: train, recompose, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Replay a previously emitted manifest (other flags except --out are ignored)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for all seeded configuration in this command
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Use the large-model training profile (batch 4, lr 2e-4, max len 1024)
    #[arg(long)]
    paper_profile: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training-time truncation length (tokens)
    #[arg(long)]
    max_len: Option<usize>,
    /// linear_decay | constant
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    temperature: Option<f32>,
    /// Cap on optimizer steps (fixed-step budget instead of epochs)
    #[arg(long)]
    max_steps: Option<usize>,
}

impl TrainFlags {
    fn build(&self, seed: u64) -> Result<TrainConfig> {
        let mut train = if self.paper_profile {
            TrainConfig::paper_profile()
        } else {
            TrainConfig::default()
        };
        train.seed = seed;
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.lr {
            train.lr = v;
        }
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.max_len {
            train.max_len = v;
        }
        if let Some(s) = &self.schedule {
            train.schedule = parse_schedule(s)?;
        }
        if let Some(v) = self.temperature {
            train.infonce_temperature = v;
        }
        if self.max_steps.is_some() {
            train.max_steps = self.max_steps;
        }
        Ok(train)
    }
}

#[derive(Args, Debug, Default)]
struct DoraFlags {
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha_dora: Option<f32>,
    #[arg(long)]
    dropout: Option<f32>,
    /// Glob pattern for adapter targets (repeatable)
    #[arg(long = "target")]
    targets: Vec<String>,
}

impl DoraFlags {
    fn build(&self, paper_profile: bool) -> DoraTrainConfig {
        let mut dora = if paper_profile {
            DoraTrainConfig::paper_profile()
        } else {
            DoraTrainConfig::default()
        };
        if let Some(v) = self.rank {
            dora.rank = v;
        }
        if let Some(v) = self.alpha_dora {
            dora.alpha_dora = v;
        }
        if let Some(v) = self.dropout {
            dora.dropout_p = v;
        }
        if !self.targets.is_empty() {
            dora.target_patterns = self.targets.clone();
        }
        dora
    }
}

#[derive(Args, Debug, Default)]
struct EncoderFlags {
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    /// Maximum sequence length the position table supports
    #[arg(long)]
    model_max_len: Option<usize>,
    /// mean | last_token
    #[arg(long)]
    pooling: Option<String>,
}

impl EncoderFlags {
    fn build(&self, seed: u64) -> Result<EncoderConfig> {
        let mut config = EncoderConfig {
            seed,
            ..EncoderConfig::default()
        };
        if let Some(v) = self.vocab_size {
            config.vocab_size = v;
        }
        if let Some(v) = self.d_model {
            config.d_model = v;
        }
        if let Some(v) = self.n_layers {
            config.n_layers = v;
        }
        if let Some(v) = self.n_heads {
            config.n_heads = v;
        }
        if let Some(v) = self.d_ff {
            config.d_ff = v;
        }
        if let Some(v) = self.model_max_len {
            config.max_len = v;
        }
        if let Some(p) = &self.pooling {
            config.pooling = parse_pooling(p)?;
        }
        Ok(config)
    }
}

fn parse_schedule(s: &str) -> Result<Schedule> {
    match s {
        "linear_decay" | "linear-decay" => Ok(Schedule::LinearDecay),
        "constant" => Ok(Schedule::Constant),
        other => Err(Error::InvalidConfig(format!(
            "unknown schedule {other:?} (expected linear_decay or constant)"
        ))),
    }
}

fn parse_pooling(s: &str) -> Result<Pooling> {
    match s {
        "mean" => Ok(Pooling::Mean),
        "last_token" | "last-token" => Ok(Pooling::LastToken),
        other => Err(Error::InvalidConfig(format!(
            "unknown pooling {other:?} (expected mean or last_token)"
        ))),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic retrieval domain in the BEIR layout
    GenSynthetic {
        #[command(flatten)]
        common: CommonArgs,
        /// Domain tag; distinct tags share no vocabulary
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        n_topics: Option<usize>,
        #[arg(long)]
        lexicon_size: Option<usize>,
        #[arg(long)]
        n_docs: Option<usize>,
        #[arg(long)]
        doc_len_min: Option<usize>,
        #[arg(long)]
        doc_len_max: Option<usize>,
        #[arg(long)]
        n_queries: Option<usize>,
        #[arg(long)]
        query_len_min: Option<usize>,
        #[arg(long)]
        query_len_max: Option<usize>,
        #[arg(long)]
        noise_rate: Option<f32>,
        #[arg(long)]
        shared_vocab_size: Option<usize>,
    },
    /// Next-token pretraining over one or more corpora
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory containing corpus.jsonl (repeatable)
        #[arg(long = "corpus", required_unless_present = "manifest")]
        corpora: Vec<PathBuf>,
        #[command(flatten)]
        encoder: EncoderFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Contrastive fine-tuning on a dataset's (query, positive) pairs
    TrainRetriever {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "manifest")]
        pretrained: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// DoRA adapter training on unlabeled documents
    TrainAdapter {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "manifest")]
        pretrained: Option<PathBuf>,
        /// Dataset directory containing corpus.jsonl
        #[arg(long, required_unless_present = "manifest")]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        dora: DoraFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Recompose: pretrained + alpha * knowledge + beta * (retriever - pretrained)
    Readapt {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "manifest")]
        pretrained: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        retriever: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        adapter: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        beta: Option<f32>,
        /// Head-weight pattern dropped from both deltas (repeatable)
        #[arg(long = "head-pattern")]
        head_patterns: Vec<String>,
    },
    /// Evaluate a checkpoint on a BEIR-layout dataset
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Second checkpoint; emits a delta table against it
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Adapter ablation over queried / unqueried / full corpus partitions
    AblateSplits {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "manifest")]
        pretrained: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        retriever: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        dora: DoraFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        beta: Option<f32>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Compare in-domain and cross-domain knowledge adapters
    CrossDomain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "manifest")]
        pretrained: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        retriever: Option<PathBuf>,
        /// Adapter trained on the evaluation domain
        #[arg(long, required_unless_present = "manifest")]
        adapter_domain: Option<PathBuf>,
        /// Adapter trained on another domain
        #[arg(long, required_unless_present = "manifest")]
        adapter_cross: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        beta: Option<f32>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Readapt + evaluate across a list of knowledge-adapter strengths
    ScalarSweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "manifest")]
        pretrained: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        retriever: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        adapter: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        dataset: Option<PathBuf>,
        /// Comma-separated alpha values, e.g. 0,0.25,0.5,1.0
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f32>,
        #[arg(long)]
        beta: Option<f32>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Least-squares fit of delta-nDCG against log10 corpus size
    SizeCorrelation {
        #[command(flatten)]
        common: CommonArgs,
        /// CSV with a size,delta_ndcg header
        #[arg(long, required_unless_present = "manifest")]
        points: Option<PathBuf>,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            std::process::exit(1);
        }
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Invalid(format!("missing required flag --{flag}")))
}

/// Loads a replayed manifest, checking the command matches and applying the
/// only permitted override (`--out`).
fn replay(common: &CommonArgs, expect: &str) -> Result<ExperimentManifest> {
    let path = common.manifest.as_ref().expect("caller checked");
    let mut manifest = ExperimentManifest::load(path)?;
    if manifest.command_name() != expect {
        return Err(Error::Invalid(format!(
            "manifest at {} is for {:?}, not {expect:?}",
            path.display(),
            manifest.command_name()
        )));
    }
    if let Some(out) = &common.out {
        manifest.out = out.clone();
    }
    Ok(manifest)
}

fn out_and_seed(common: &CommonArgs) -> Result<(PathBuf, u64)> {
    let out = require(common.out.clone(), "out")?;
    Ok((out, common.seed.unwrap_or(0)))
}

fn run(command: Command) -> Result<RunSummary> {
    let manifest = build_manifest(command)?;
    run_manifest(&manifest)
}

fn build_manifest(command: Command) -> Result<ExperimentManifest> {
    match command {
        Command::GenSynthetic {
            common,
            domain,
            n_topics,
            lexicon_size,
            n_docs,
            doc_len_min,
            doc_len_max,
            n_queries,
            query_len_min,
            query_len_max,
            noise_rate,
            shared_vocab_size,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "gen-synthetic");
            }
            let (out, seed) = out_and_seed(&common)?;
            let mut spec = SyntheticDomainSpec {
                seed,
                ..SyntheticDomainSpec::default()
            };
            if let Some(v) = domain {
                spec.domain = v;
            }
            if let Some(v) = n_topics {
                spec.n_topics = v;
            }
            if let Some(v) = lexicon_size {
                spec.lexicon_size = v;
            }
            if let Some(v) = n_docs {
                spec.n_docs = v;
            }
            spec.doc_len = (
                doc_len_min.unwrap_or(spec.doc_len.0),
                doc_len_max.unwrap_or(spec.doc_len.1),
            );
            if let Some(v) = n_queries {
                spec.n_queries = v;
            }
            spec.query_len = (
                query_len_min.unwrap_or(spec.query_len.0),
                query_len_max.unwrap_or(spec.query_len.1),
            );
            if let Some(v) = noise_rate {
                spec.noise_rate = v;
            }
            if let Some(v) = shared_vocab_size {
                spec.shared_vocab_size = v;
            }
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::GenSynthetic { spec },
            ))
        }
        Command::Pretrain {
            common,
            corpora,
            encoder,
            train,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "pretrain");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::Pretrain {
                    corpora,
                    encoder: encoder.build(seed)?,
                    train: train.build(seed)?,
                },
            ))
        }
        Command::TrainRetriever {
            common,
            pretrained,
            dataset,
            train,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "train-retriever");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::TrainRetriever {
                    pretrained: require(pretrained, "pretrained")?,
                    dataset: require(dataset, "dataset")?,
                    train: train.build(seed)?,
                },
            ))
        }
        Command::TrainAdapter {
            common,
            pretrained,
            corpus,
            dora,
            train,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "train-adapter");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::TrainAdapter {
                    pretrained: require(pretrained, "pretrained")?,
                    corpus: require(corpus, "corpus")?,
                    dora: dora.build(train.paper_profile),
                    train: train.build(seed)?,
                },
            ))
        }
        Command::Readapt {
            common,
            pretrained,
            retriever,
            adapter,
            alpha,
            beta,
            head_patterns,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "readapt");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::Readapt {
                    pretrained: require(pretrained, "pretrained")?,
                    retriever: require(retriever, "retriever")?,
                    adapter: require(adapter, "adapter")?,
                    scalars: scalars_from(alpha, beta)?,
                    head_patterns: patterns_or_default(head_patterns),
                },
            ))
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            k,
            baseline,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "eval");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::Eval {
                    checkpoint: require(checkpoint, "checkpoint")?,
                    dataset: require(dataset, "dataset")?,
                    k: k.unwrap_or(10),
                    baseline,
                },
            ))
        }
        Command::AblateSplits {
            common,
            pretrained,
            retriever,
            dataset,
            dora,
            train,
            alpha,
            beta,
            k,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "ablate-splits");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::AblateSplits {
                    pretrained: require(pretrained, "pretrained")?,
                    retriever: require(retriever, "retriever")?,
                    dataset: require(dataset, "dataset")?,
                    dora: dora.build(train.paper_profile),
                    train: train.build(seed)?,
                    scalars: scalars_from(alpha, beta)?,
                    k: k.unwrap_or(10),
                },
            ))
        }
        Command::CrossDomain {
            common,
            pretrained,
            retriever,
            adapter_domain,
            adapter_cross,
            dataset,
            alpha,
            beta,
            k,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "cross-domain");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::CrossDomain {
                    pretrained: require(pretrained, "pretrained")?,
                    retriever: require(retriever, "retriever")?,
                    adapter_domain: require(adapter_domain, "adapter-domain")?,
                    adapter_cross: require(adapter_cross, "adapter-cross")?,
                    dataset: require(dataset, "dataset")?,
                    scalars: scalars_from(alpha, beta)?,
                    k: k.unwrap_or(10),
                },
            ))
        }
        Command::ScalarSweep {
            common,
            pretrained,
            retriever,
            adapter,
            dataset,
            alphas,
            beta,
            k,
        } => {
            if common.manifest.is_some() {
                return replay(&common, "scalar-sweep");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::ScalarSweep {
                    pretrained: require(pretrained, "pretrained")?,
                    retriever: require(retriever, "retriever")?,
                    adapter: require(adapter, "adapter")?,
                    dataset: require(dataset, "dataset")?,
                    alphas,
                    beta: beta.unwrap_or(1.0),
                    k: k.unwrap_or(10),
                },
            ))
        }
        Command::SizeCorrelation { common, points } => {
            if common.manifest.is_some() {
                return replay(&common, "size-correlation");
            }
            let (out, seed) = out_and_seed(&common)?;
            Ok(ExperimentManifest::new(
                seed,
                out,
                CommandSpec::SizeCorrelation {
                    points: require(points, "points")?,
                },
            ))
        }
    }
}

fn scalars_from(alpha: Option<f32>, beta: Option<f32>) -> Result<PartialAdaptation> {
    let defaults = PartialAdaptation::default();
    PartialAdaptation::new(
        alpha.unwrap_or(defaults.alpha),
        beta.unwrap_or(defaults.beta),
    )
}

fn patterns_or_default(patterns: Vec<String>) -> Vec<String> {
    if patterns.is_empty() {
        vec![HEAD_PATTERN.to_string()]
    } else {
        patterns
    }
}
