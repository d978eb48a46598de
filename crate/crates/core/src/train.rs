//! Trainers for the three checkpoints the adapter arithmetic consumes.
//!
//! * [`pretrain_lm`] — full-parameter next-token training from a fresh init.
//! * [`train_retriever`] — full-parameter contrastive training with in-batch
//!   negatives; the next-token head is frozen and carried through bit-exact.
//! * [`train_knowledge_adapter`] — DoRA adapter training on unlabeled
//!   documents with the base model frozen. Factors start at an exact identity
//!   (`B = 0`, magnitudes at base column norms), so zero steps means zero
//!   learned delta.
//!
//! All loops are single-threaded and deterministic given the seed. Each
//! trainer returns a per-step log (`step`, `loss`, `lr`) suitable for a
//! JSON-lines file.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arith::LowRankAdapter;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::tape::{NodeId, Tape};
use crate::model::tokenizer;
use crate::model::{
    build_infonce_loss, build_lm_batch_loss, EncoderConfig, ModelParams, PlainWeights,
    WeightResolver, LM_HEAD,
};
use crate::pattern::PatternSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearDecay,
    Constant,
}

/// Learning rate at step `t` of `total`: linear decay is `lr0 * (1 - t/total)`.
pub fn lr_at(schedule: Schedule, lr0: f64, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr0,
        Schedule::LinearDecay => lr0 * (1.0 - step as f64 / total.max(1) as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
    pub max_len: usize,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub infonce_temperature: f32,
    /// Hard cap on optimizer steps. With it, runs over different corpus
    /// sizes see identical step budgets (the schedule horizon shrinks to
    /// match); without it, training is epoch-based.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 2e-3,
            epochs: 1,
            max_len: 64,
            schedule: Schedule::LinearDecay,
            optimizer: AdamWConfig::default(),
            seed: 0,
            infonce_temperature: 0.05,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// The large-model training profile: batch 4, AdamW at 2e-4 with linear
    /// scheduling, one epoch, max length 1024. Pair with
    /// [`DoraTrainConfig::paper_profile`].
    pub fn paper_profile() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 2e-4,
            epochs: 1,
            max_len: 1024,
            schedule: Schedule::LinearDecay,
            optimizer: AdamWConfig::default(),
            seed: 0,
            infonce_temperature: 0.05,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".to_string()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig("max_len must be >= 2".to_string()));
        }
        if !(self.infonce_temperature.is_finite() && self.infonce_temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "infonce_temperature must be > 0, got {}",
                self.infonce_temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoraTrainConfig {
    pub rank: usize,
    pub alpha_dora: f32,
    pub dropout_p: f32,
    pub target_patterns: Vec<String>,
}

/// Attention q/k/v plus feed-forward up/down projections.
fn default_dora_targets() -> Vec<String> {
    [
        "enc.*.attn.q.w",
        "enc.*.attn.k.w",
        "enc.*.attn.v.w",
        "enc.*.ff.up.w",
        "enc.*.ff.down.w",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl Default for DoraTrainConfig {
    fn default() -> Self {
        DoraTrainConfig {
            rank: 4,
            alpha_dora: 8.0,
            dropout_p: 0.0,
            target_patterns: default_dora_targets(),
        }
    }
}

impl DoraTrainConfig {
    /// The large-model adapter profile: rank 32, alpha 64, dropout 0.05 on
    /// the same target set.
    pub fn paper_profile() -> Self {
        DoraTrainConfig {
            rank: 32,
            alpha_dora: 64.0,
            dropout_p: 0.05,
            target_patterns: default_dora_targets(),
        }
    }
}

/// One optimizer step as logged to the training JSONL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// A trained checkpoint plus its step log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepRecord>,
}

/// A trained adapter plus its step log.
#[derive(Debug, Clone)]
pub struct AdapterOutcome {
    pub adapter: LowRankAdapter,
    pub log: Vec<StepRecord>,
}

type Master = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn to_master(ckpt: &Checkpoint) -> Master {
    ckpt.tensors()
        .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.to_f64())))
        .collect()
}

fn master_to_checkpoint(master: &Master, metadata: &BTreeMap<String, String>) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    for (name, (shape, data)) in master {
        ckpt.insert(name.clone(), Tensor::from_f64(shape.clone(), data.clone())?)?;
    }
    for (k, v) in metadata {
        ckpt.set_metadata(k.clone(), v.clone());
    }
    Ok(ckpt)
}

/// Decoupled-weight-decay Adam over named f64 buffers.
struct AdamW {
    config: AdamWConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl AdamW {
    fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, params: &mut Master, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, grad) in grads {
            let (_, param) = params.get_mut(name).expect("grad for unknown parameter");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * param[i]);
            }
        }
    }
}

/// Mean next-token loss of a checkpoint over raw documents, without
/// gradients. Used for held-out evaluation.
pub fn lm_eval_loss(params: &ModelParams, docs: &[String], max_len: usize) -> Result<f64> {
    let limit = max_len.min(params.config().max_len);
    let tokens: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| tokenizer::encode_lm(d, params.config().vocab_size, limit))
        .collect();
    let graph = crate::model::lm_loss_graph(params, &tokens)?;
    Ok(graph.loss())
}

fn effective_len(train: &TrainConfig, config: &EncoderConfig) -> usize {
    train.max_len.min(config.max_len)
}

fn planned_steps(batches_per_epoch: usize, train: &TrainConfig) -> usize {
    let total = batches_per_epoch * train.epochs;
    match train.max_steps {
        Some(cap) => total.min(cap),
        None => total,
    }
}

/// Full-parameter next-token pretraining from a fresh seeded init. The corpus
/// is the raw document list; every doc is framed as `[BOS] words [EOS]`.
pub fn pretrain_lm(
    config: &EncoderConfig,
    corpus: &[String],
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".to_string()));
    }
    let params = crate::model::init_params(config)?;
    let limit = effective_len(train, config);
    let docs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|d| tokenizer::encode_lm(d, config.vocab_size, limit))
        .collect();

    let mut master = to_master(params.checkpoint());
    let mut opt = AdamW::new(train.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut log = Vec::new();

    let batches_per_epoch = docs.len().div_ceil(train.batch_size);
    let total_steps = planned_steps(batches_per_epoch, train);
    let mut step = 0;
    'pretrain: for _epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            if step >= total_steps {
                break 'pretrain;
            }
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| docs[i].clone()).collect();
            let mut tape = Tape::new();
            let mut weights = PlainWeights::from_master(&mut tape, &master);
            let loss = build_lm_batch_loss(&mut tape, &mut weights, config, &batch)?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step });
            }
            let lr = lr_at(train.schedule, f64::from(train.lr), step, total_steps);
            let grads = collect_grads(&tape, loss, weights.nodes(), None);
            opt.step(lr, &mut master, &grads);
            log.push(StepRecord {
                step,
                loss: loss_value,
                lr,
            });
            step += 1;
        }
    }

    let mut metadata = params.checkpoint().metadata().clone();
    metadata.insert("provenance".to_string(), "pretrain_lm".to_string());
    metadata.insert("train_config".to_string(), serde_json::to_string(train)?);
    let ckpt = master_to_checkpoint(&master, &metadata)?;
    Ok(TrainOutcome {
        params: ModelParams::new(ckpt, config.clone())?,
        log,
    })
}

/// Full-parameter contrastive training over (query, positive document) text
/// pairs with in-batch negatives. `lm_head.w` is excluded from optimization
/// and carried into the result bit-exact.
pub fn train_retriever(
    pretrained: &ModelParams,
    pairs: &[(String, String)],
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    train.validate()?;
    if train.batch_size < 2 {
        return Err(Error::InvalidConfig(
            "contrastive training needs batch_size >= 2 for in-batch negatives".to_string(),
        ));
    }
    if pairs.len() < train.batch_size {
        return Err(Error::Invalid(format!(
            "need at least batch_size ({}) pairs, got {}",
            train.batch_size,
            pairs.len()
        )));
    }
    let config = pretrained.config().clone();
    let limit = effective_len(train, &config);
    let tokenized: Vec<(Vec<usize>, Vec<usize>)> = pairs
        .iter()
        .map(|(q, d)| {
            (
                tokenizer::encode(q, config.vocab_size, limit),
                tokenizer::encode(d, config.vocab_size, limit),
            )
        })
        .collect();

    let mut master = to_master(pretrained.checkpoint());
    let mut opt = AdamW::new(train.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut log = Vec::new();

    // tail chunks smaller than 2 cannot form negatives and are skipped
    let usable_batches = |n: usize, b: usize| -> usize {
        let full = n / b;
        if n % b >= 2 {
            full + 1
        } else {
            full
        }
    };
    let batches_per_epoch = usable_batches(tokenized.len(), train.batch_size);
    let total_steps = planned_steps(batches_per_epoch, train);
    let mut step = 0;
    'contrastive: for _epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..tokenized.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            if step >= total_steps {
                break 'contrastive;
            }
            if chunk.len() < 2 {
                continue;
            }
            let queries: Vec<Vec<usize>> = chunk.iter().map(|&i| tokenized[i].0.clone()).collect();
            let docs: Vec<Vec<usize>> = chunk.iter().map(|&i| tokenized[i].1.clone()).collect();
            let mut tape = Tape::new();
            let mut weights = PlainWeights::from_master(&mut tape, &master);
            let loss = build_infonce_loss(
                &mut tape,
                &mut weights,
                &config,
                &queries,
                &docs,
                train.infonce_temperature,
            )?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step });
            }
            let lr = lr_at(train.schedule, f64::from(train.lr), step, total_steps);
            let grads = collect_grads(&tape, loss, weights.nodes(), Some(LM_HEAD));
            opt.step(lr, &mut master, &grads);
            log.push(StepRecord {
                step,
                loss: loss_value,
                lr,
            });
            step += 1;
        }
    }

    let mut metadata = pretrained.checkpoint().metadata().clone();
    metadata.insert("provenance".to_string(), "train_retriever".to_string());
    metadata.insert("train_config".to_string(), serde_json::to_string(train)?);
    let mut ckpt = master_to_checkpoint(&master, &metadata)?;
    // the head was never optimized; restore the original tensor to make the
    // freeze guarantee bitwise rather than round-trip-exact
    if let Some(head) = pretrained.checkpoint().get(LM_HEAD) {
        ckpt.insert(LM_HEAD, head.clone())?;
    }
    Ok(TrainOutcome {
        params: ModelParams::new(ckpt, config)?,
        log,
    })
}

fn collect_grads(
    tape: &Tape,
    loss: NodeId,
    nodes: &BTreeMap<String, NodeId>,
    skip: Option<&str>,
) -> BTreeMap<String, Vec<f64>> {
    let all = tape.backward(loss);
    nodes
        .iter()
        .filter(|(name, _)| skip != Some(name.as_str()))
        .map(|(name, node)| (name.clone(), all[node.0].clone()))
        .collect()
}

/// Per-target DoRA state during training.
struct DoraState {
    /// flattened factors in the optimizer master map under these keys
    a_key: String,
    b_key: String,
    m_key: String,
    d: usize,
    k: usize,
}

/// Resolver that substitutes DoRA-adapted projections for target weights.
///
/// For a target `W0` with factors `(A, B, m)` and `V = W0 + s.B.A`, a linear
/// application during training is
///
/// ```text
/// y = x . (m ⊙ W0 / ||V||_col)^T + dropout(x) . (m ⊙ s.B.A / ||V||_col)^T
/// ```
///
/// which equals `x . W'^T` exactly when dropout is off; dropout touches only
/// the low-rank branch's input.
struct DoraWeights<'a> {
    base: BTreeMap<String, NodeId>,
    adapted: BTreeMap<String, AdaptedNodes>,
    dropout_p: f64,
    rng: &'a mut ChaCha8Rng,
}

struct AdaptedNodes {
    /// merged weight (used when dropout is off)
    merged: NodeId,
    /// `m ⊙ W0 / ||V||` and `m ⊙ s.B.A / ||V||` (used when dropout is on)
    base_part: NodeId,
    lora_part: NodeId,
}

impl WeightResolver for DoraWeights<'_> {
    fn node(&mut self, _tape: &mut Tape, name: &str) -> Result<NodeId> {
        self.base
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn linear(&mut self, tape: &mut Tape, input: NodeId, name: &str) -> Result<NodeId> {
        match self.adapted.get(name) {
            None => {
                let w = self.node(tape, name)?;
                Ok(tape.matmul_trans_b(input, w))
            }
            Some(nodes) => {
                if self.dropout_p == 0.0 {
                    Ok(tape.matmul_trans_b(input, nodes.merged))
                } else {
                    let clean = tape.matmul_trans_b(input, nodes.base_part);
                    let (rows, cols) = tape.shape(input);
                    let keep = 1.0 / (1.0 - self.dropout_p);
                    let mask: Vec<f64> = (0..rows * cols)
                        .map(|_| {
                            if self.rng.random::<f64>() < self.dropout_p {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let dropped = tape.dropout(input, mask);
                    let lora = tape.matmul_trans_b(dropped, nodes.lora_part);
                    Ok(tape.add(clean, lora))
                }
            }
        }
    }
}

/// Trains a DoRA adapter with next-token loss on unlabeled documents. The
/// base checkpoint is frozen; only `A`, `B`, and the magnitudes train. `B`
/// starts at zero and magnitudes at the base column norms, so step zero is an
/// exact identity.
pub fn train_knowledge_adapter(
    pretrained: &ModelParams,
    corpus: &[String],
    dora: &DoraTrainConfig,
    train: &TrainConfig,
) -> Result<AdapterOutcome> {
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".to_string()));
    }
    if !pretrained.has_lm_head() {
        return Err(Error::MissingTensor(LM_HEAD.to_string()));
    }
    let config = pretrained.config().clone();
    let patterns = PatternSet::compile(&dora.target_patterns)?;

    // resolve targets: rank-2 projection weights matching any pattern
    let mut targets = Vec::new();
    for (name, tensor) in pretrained.checkpoint().tensors() {
        if !patterns.matches(name) {
            continue;
        }
        if name == "tok_emb.w" || name == "pos_emb.w" {
            return Err(Error::InvalidConfig(format!(
                "DoRA target {name} is an embedding table, not a projection"
            )));
        }
        if tensor.rank() != 2 {
            return Err(Error::InvalidConfig(format!(
                "DoRA target {name} has rank {}, expected 2",
                tensor.rank()
            )));
        }
        targets.push(name.to_string());
    }
    if targets.is_empty() {
        return Err(Error::NoTargetMatch);
    }

    let limit = effective_len(train, &config);
    let docs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|d| tokenizer::encode_lm(d, config.vocab_size, limit))
        .collect();

    // adapter master: A seeded uniform, B zero, m at base column norms
    let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut master: Master = BTreeMap::new();
    let mut states = Vec::new();
    for name in &targets {
        let w0 = pretrained.checkpoint().get(name).expect("target exists");
        let (d, k) = w0.dims2()?;
        if dora.rank == 0 || dora.rank > d.min(k) {
            return Err(Error::InvalidConfig(format!(
                "target {name}: rank {} must be in [1, min({d}, {k})]",
                dora.rank
            )));
        }
        let bound = 1.0 / (k as f64).sqrt();
        let a: Vec<f64> = (0..dora.rank * k)
            .map(|_| init_rng.random_range(-bound..bound))
            .collect();
        let b = vec![0.0; d * dora.rank];
        let mut m = vec![0.0f64; k];
        for (j, mj) in m.iter_mut().enumerate() {
            let norm = (0..d)
                .map(|i| f64::from(w0.data()[i * k + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroColumnNorm {
                    name: name.clone(),
                    col: j,
                });
            }
            *mj = norm;
        }
        let state = DoraState {
            a_key: format!("{name}/a"),
            b_key: format!("{name}/b"),
            m_key: format!("{name}/m"),
            d,
            k,
        };
        master.insert(state.a_key.clone(), (vec![dora.rank, k], a));
        master.insert(state.b_key.clone(), (vec![d, dora.rank], b));
        master.insert(state.m_key.clone(), (vec![k], m));
        states.push(state);
    }

    let scaling = f64::from(dora.alpha_dora) / dora.rank as f64;
    let mut opt = AdamW::new(train.optimizer);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x00d0_0d00);
    let mut log = Vec::new();

    let batches_per_epoch = docs.len().div_ceil(train.batch_size);
    let total_steps = planned_steps(batches_per_epoch, train);
    let mut step = 0;
    'adapter: for _epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(train.batch_size) {
            if step >= total_steps {
                break 'adapter;
            }
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| docs[i].clone()).collect();
            let mut tape = Tape::new();
            let base = PlainWeights::from_checkpoint(&mut tape, pretrained.checkpoint());
            let mut adapted = BTreeMap::new();
            let mut grad_nodes: BTreeMap<String, NodeId> = BTreeMap::new();
            for (name, state) in targets.iter().zip(&states) {
                let w0 = base.nodes()[name];
                let (a_shape, a_data) = &master[&state.a_key];
                let (b_shape, b_data) = &master[&state.b_key];
                let (_, m_data) = &master[&state.m_key];
                let a = tape.leaf(a_shape[0], a_shape[1], a_data.clone());
                let b = tape.leaf(b_shape[0], b_shape[1], b_data.clone());
                let m = tape.leaf(1, state.k, m_data.clone());
                grad_nodes.insert(state.a_key.clone(), a);
                grad_nodes.insert(state.b_key.clone(), b);
                grad_nodes.insert(state.m_key.clone(), m);

                let ba = tape.matmul(b, a);
                let update = tape.scale(ba, scaling);
                let v = tape.add(w0, update);
                let vn = tape.col_normalize(v).map_err(|e| name_col_err(e, name))?;
                let merged = tape.mul_row_vec(vn, m);
                let w0_over = tape.div_col_norms(w0, v).map_err(|e| name_col_err(e, name))?;
                let base_part = tape.mul_row_vec(w0_over, m);
                let ba_over = tape
                    .div_col_norms(update, v)
                    .map_err(|e| name_col_err(e, name))?;
                let lora_part = tape.mul_row_vec(ba_over, m);
                adapted.insert(
                    name.clone(),
                    AdaptedNodes {
                        merged,
                        base_part,
                        lora_part,
                    },
                );
            }
            let mut weights = DoraWeights {
                base: base.nodes().clone(),
                adapted,
                dropout_p: f64::from(dora.dropout_p),
                rng: &mut dropout_rng,
            };
            let loss = build_lm_batch_loss(&mut tape, &mut weights, &config, &batch)?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step });
            }
            let lr = lr_at(train.schedule, f64::from(train.lr), step, total_steps);
            let grads = collect_grads(&tape, loss, &grad_nodes, None);
            opt.step(lr, &mut master, &grads);

            // keep magnitudes strictly positive; AdamW decay alone cannot
            // cross zero at these learning rates, but clamp defensively
            for state in &states {
                let (_, m) = master.get_mut(&state.m_key).expect("magnitude entry");
                for v in m.iter_mut() {
                    if *v < 1e-6 {
                        *v = 1e-6;
                    }
                }
            }
            log.push(StepRecord {
                step,
                loss: loss_value,
                lr,
            });
            step += 1;
        }
    }

    let mut adapter = LowRankAdapter::new(dora.rank, dora.alpha_dora, dora.dropout_p)?;
    for (name, state) in targets.iter().zip(&states) {
        let (a_shape, a_data) = &master[&state.a_key];
        let (b_shape, b_data) = &master[&state.b_key];
        let (m_shape, m_data) = &master[&state.m_key];
        adapter.add_target(
            name.clone(),
            Tensor::from_f64(a_shape.clone(), a_data.clone())?,
            Tensor::from_f64(b_shape.clone(), b_data.clone())?,
            Tensor::from_f64(m_shape.clone(), m_data.clone())?,
            (state.d, state.k),
        )?;
    }
    Ok(AdapterOutcome { adapter, log })
}

fn name_col_err(e: Error, name: &str) -> Error {
    match e {
        Error::ZeroColumnNorm { col, .. } => Error::ZeroColumnNorm {
            name: name.to_string(),
            col,
        },
        other => other,
    }
}
