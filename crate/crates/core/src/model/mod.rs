//! A small deterministic transformer with both a next-token head and pooled
//! text embeddings.
//!
//! The architecture is the smallest one that has the head/backbone split the
//! adapter arithmetic depends on: pre-norm blocks with parameter-free layer
//! norms inside, no projection biases, GELU feed-forward, learned absolute
//! positions, and a final affine norm. The canonical tensor names are
//!
//! ```text
//! tok_emb.w  pos_emb.w
//! enc.L{i}.attn.{q,k,v,o}.w  enc.L{i}.ff.{up,down}.w
//! final_norm.{g,b}
//! lm_head.w            (absent in the retrieval variant)
//! ```
//!
//! Forward math runs on the f64 autodiff tape in [`tape`]; results are rounded
//! to f32 once at the boundary. Everything is deterministic given the seed.

pub mod tape;
pub mod tokenizer;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use tape::{NodeId, Tape};

/// Checkpoint metadata key holding the JSON-serialized [`EncoderConfig`].
pub const META_ENCODER_CONFIG: &str = "encoder_config";

pub const LM_HEAD: &str = "lm_head.w";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    LastToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < tokenizer::RESERVED {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be >= {} (reserved ids), got {}",
                tokenizer::RESERVED,
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig(
                "n_layers and d_ff must be >= 1".to_string(),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical (name, shape) pairs for this config, optionally with the
    /// next-token head. The retrieval variant is the same set minus
    /// `lm_head.w`.
    pub fn canonical_shapes(&self, with_head: bool) -> BTreeMap<String, Vec<usize>> {
        let d = self.d_model;
        let mut shapes = BTreeMap::new();
        shapes.insert("tok_emb.w".to_string(), vec![self.vocab_size, d]);
        shapes.insert("pos_emb.w".to_string(), vec![self.max_len, d]);
        for i in 0..self.n_layers {
            for proj in ["q", "k", "v", "o"] {
                shapes.insert(format!("enc.L{i}.attn.{proj}.w"), vec![d, d]);
            }
            shapes.insert(format!("enc.L{i}.ff.up.w"), vec![self.d_ff, d]);
            shapes.insert(format!("enc.L{i}.ff.down.w"), vec![d, self.d_ff]);
        }
        shapes.insert("final_norm.g".to_string(), vec![d]);
        shapes.insert("final_norm.b".to_string(), vec![d]);
        if with_head {
            shapes.insert(LM_HEAD.to_string(), vec![self.vocab_size, d]);
        }
        shapes
    }
}

/// A checkpoint validated against the canonical name/shape layout of its
/// [`EncoderConfig`] (stored in checkpoint metadata under
/// [`META_ENCODER_CONFIG`]). The next-token head is optional.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    checkpoint: Checkpoint,
    config: EncoderConfig,
}

impl ModelParams {
    pub fn new(checkpoint: Checkpoint, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let expected = config.canonical_shapes(true);
        for (name, tensor) in checkpoint.tensors() {
            match expected.get(name) {
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "tensor {name} is not part of the canonical layout"
                    )))
                }
                Some(shape) if shape.as_slice() != tensor.shape() => {
                    return Err(Error::ShapeMismatch {
                        name: name.to_string(),
                        expected: shape.clone(),
                        got: tensor.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        for name in expected.keys() {
            if name != LM_HEAD && !checkpoint.contains(name) {
                return Err(Error::MissingTensor(name.clone()));
            }
        }
        Ok(ModelParams { checkpoint, config })
    }

    /// Reads the config back out of checkpoint metadata.
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        let json = checkpoint
            .metadata()
            .get(META_ENCODER_CONFIG)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("missing {META_ENCODER_CONFIG} metadata"))
            })?;
        let config: EncoderConfig = serde_json::from_str(json)?;
        ModelParams::new(checkpoint, config)
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn has_lm_head(&self) -> bool {
        self.checkpoint.contains(LM_HEAD)
    }
}

/// Deterministic scaled-uniform init: weights in `±1/sqrt(fan_in)`, norm gain
/// ones, norm bias zeros. Same seed, same bits.
pub fn init_params(config: &EncoderConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let mut ckpt = Checkpoint::new();

    let draw = |rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize| -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data)
    };

    // creation order is fixed; it defines the RNG stream layout
    ckpt.insert("tok_emb.w", draw(&mut rng, vec![config.vocab_size, d], d)?)?;
    ckpt.insert("pos_emb.w", draw(&mut rng, vec![config.max_len, d], d)?)?;
    for i in 0..config.n_layers {
        for proj in ["q", "k", "v", "o"] {
            ckpt.insert(
                format!("enc.L{i}.attn.{proj}.w"),
                draw(&mut rng, vec![d, d], d)?,
            )?;
        }
        ckpt.insert(
            format!("enc.L{i}.ff.up.w"),
            draw(&mut rng, vec![config.d_ff, d], d)?,
        )?;
        ckpt.insert(
            format!("enc.L{i}.ff.down.w"),
            draw(&mut rng, vec![d, config.d_ff], config.d_ff)?,
        )?;
    }
    ckpt.insert("final_norm.g", Tensor::new(vec![d], vec![1.0; d])?)?;
    ckpt.insert("final_norm.b", Tensor::zeros(vec![d])?)?;
    ckpt.insert(LM_HEAD, draw(&mut rng, vec![config.vocab_size, d], d)?)?;

    ckpt.set_metadata(META_ENCODER_CONFIG, serde_json::to_string(config)?);
    ckpt.set_metadata("seed", config.seed.to_string());
    ckpt.set_metadata("provenance", "init");
    ModelParams::new(ckpt, config.clone())
}

fn validate_tokens(tokens: &[usize], config: &EncoderConfig) -> Result<()> {
    if tokens.len() > config.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_len: config.max_len,
        });
    }
    for &t in tokens {
        if t >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// Supplies weight nodes while a graph is being built. `node` hands out the
/// raw tensor (embedding tables, norm parameters); `linear` applies a named
/// projection as `input . W^T`, which is the hook the DoRA trainer uses to
/// substitute adapted weights and branch-specific dropout.
pub(crate) trait WeightResolver {
    fn node(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId>;

    fn linear(&mut self, tape: &mut Tape, input: NodeId, name: &str) -> Result<NodeId> {
        let w = self.node(tape, name)?;
        Ok(tape.matmul_trans_b(input, w))
    }
}

/// Plain resolver: every weight is a tape leaf.
pub(crate) struct PlainWeights {
    nodes: BTreeMap<String, NodeId>,
}

impl PlainWeights {
    pub(crate) fn from_checkpoint(tape: &mut Tape, ckpt: &Checkpoint) -> Self {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in ckpt.tensors() {
            let (rows, cols) = leaf_dims(tensor.shape());
            nodes.insert(name.to_string(), tape.leaf_f32(rows, cols, tensor.data()));
        }
        PlainWeights { nodes }
    }

    pub(crate) fn from_master(
        tape: &mut Tape,
        master: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Self {
        let mut nodes = BTreeMap::new();
        for (name, (shape, data)) in master {
            let (rows, cols) = leaf_dims(shape);
            nodes.insert(name.clone(), tape.leaf(rows, cols, data.clone()));
        }
        PlainWeights { nodes }
    }

    pub(crate) fn nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.nodes
    }
}

/// Tape dimensions of a rank-1 or rank-2 tensor (vectors become single rows).
pub(crate) fn leaf_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => unreachable!("canonical tensors are rank 1 or 2, got {other:?}"),
    }
}

impl WeightResolver for PlainWeights {
    fn node(&mut self, _tape: &mut Tape, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }
}

/// Encoder trunk: token+position embeddings through the pre-norm blocks and
/// the final affine norm. Output is `[len, d_model]`.
pub(crate) fn build_trunk(
    tape: &mut Tape,
    weights: &mut dyn WeightResolver,
    config: &EncoderConfig,
    tokens: &[usize],
) -> Result<NodeId> {
    let tok_emb = weights.node(tape, "tok_emb.w")?;
    let tok = tape.gather(tok_emb, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos_emb = weights.node(tape, "pos_emb.w")?;
    let pos = tape.gather(pos_emb, &positions)?;
    let mut x = tape.add(tok, pos);

    let dh = config.head_dim();
    for i in 0..config.n_layers {
        let h = tape.layer_norm_rows(x);
        let q = weights.linear(tape, h, &format!("enc.L{i}.attn.q.w"))?;
        let k = weights.linear(tape, h, &format!("enc.L{i}.attn.k.w"))?;
        let v = weights.linear(tape, h, &format!("enc.L{i}.attn.v.w"))?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_trans_b(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.causal_softmax(scaled);
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn_out = weights.linear(tape, ctx, &format!("enc.L{i}.attn.o.w"))?;
        x = tape.add(x, attn_out);

        let h2 = tape.layer_norm_rows(x);
        let up = weights.linear(tape, h2, &format!("enc.L{i}.ff.up.w"))?;
        let act = tape.gelu(up);
        let down = weights.linear(tape, act, &format!("enc.L{i}.ff.down.w"))?;
        x = tape.add(x, down);
    }

    let xn = tape.layer_norm_rows(x);
    let gain = weights.node(tape, "final_norm.g")?;
    let scaled = tape.mul_row_vec(xn, gain);
    let bias = weights.node(tape, "final_norm.b")?;
    Ok(tape.add_row_vec(scaled, bias))
}

pub(crate) fn build_lm_logits(
    tape: &mut Tape,
    weights: &mut dyn WeightResolver,
    config: &EncoderConfig,
    tokens: &[usize],
) -> Result<NodeId> {
    let trunk = build_trunk(tape, weights, config, tokens)?;
    weights.linear(tape, trunk, LM_HEAD)
}

/// Pooled, unit-norm embedding as a `1 x d_model` node. Pad positions take
/// part in attention but are excluded from pooling.
pub(crate) fn build_embedding(
    tape: &mut Tape,
    weights: &mut dyn WeightResolver,
    config: &EncoderConfig,
    tokens: &[usize],
) -> Result<NodeId> {
    let keep: Vec<bool> = tokens.iter().map(|&t| t != tokenizer::PAD).collect();
    if tokens.is_empty() || keep.iter().all(|&k| !k) {
        return Err(Error::AllPadInput(format!(
            "sequence of {} tokens has no non-pad position",
            tokens.len()
        )));
    }
    let trunk = build_trunk(tape, weights, config, tokens)?;
    let pooled = match config.pooling {
        Pooling::Mean => tape.mean_pool_rows(trunk, &keep)?,
        Pooling::LastToken => {
            let last = keep.iter().rposition(|&k| k).expect("checked non-pad above");
            tape.row(trunk, last)
        }
    };
    tape.l2_normalize_rows(pooled)
}

/// Causal next-token logits: row `i` scores token `i + 1`. Requires the
/// next-token head.
pub fn forward_lm(params: &ModelParams, tokens: &[usize]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".to_string()));
    }
    validate_tokens(tokens, &params.config)?;
    if !params.has_lm_head() {
        return Err(Error::MissingTensor(LM_HEAD.to_string()));
    }
    let mut tape = Tape::new();
    let mut weights = PlainWeights::from_checkpoint(&mut tape, &params.checkpoint);
    let logits = build_lm_logits(&mut tape, &mut weights, &params.config, tokens)?;
    Tensor::from_f64(
        vec![tokens.len(), params.config.vocab_size],
        tape.value(logits).to_vec(),
    )
}

/// Pooled text embedding, L2-normalized to unit length. Does not touch
/// `lm_head.w` (and works on checkpoints that lack it).
pub fn embed(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::AllPadInput("empty token sequence".to_string()));
    }
    validate_tokens(tokens, &params.config)?;
    let mut tape = Tape::new();
    let mut weights = PlainWeights::from_checkpoint(&mut tape, &params.checkpoint);
    let emb = build_embedding(&mut tape, &mut weights, &params.config, tokens)?;
    Ok(tape.value(emb).iter().map(|&v| v as f32).collect())
}

/// Per-parameter gradients, shaped exactly like the parameters they
/// differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A scalar loss with its tape, ready for one reverse-mode sweep over the
/// registered parameters. Parameters the loss never touches get zero
/// gradients.
pub struct LossGraph {
    tape: Tape,
    loss: NodeId,
    param_nodes: BTreeMap<String, NodeId>,
    param_shapes: BTreeMap<String, Vec<usize>>,
}

impl LossGraph {
    pub fn loss(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    pub fn backward(&self) -> Gradients {
        Gradients {
            grads: self
                .backward_f64()
                .into_iter()
                .map(|(name, g)| {
                    let shape = self.param_shapes[&name].clone();
                    let tensor = Tensor::new(shape, g.into_iter().map(|v| v as f32).collect())
                        .expect("gradient buffer matches parameter shape");
                    (name, tensor)
                })
                .collect(),
        }
    }

    pub(crate) fn backward_f64(&self) -> BTreeMap<String, Vec<f64>> {
        let all = self.tape.backward(self.loss);
        self.param_nodes
            .iter()
            .map(|(name, node)| (name.clone(), all[node.0].clone()))
            .collect()
    }
}

/// Mean next-token cross entropy over a batch of token sequences (each at
/// least 2 tokens long): inputs are `doc[..n-1]`, targets `doc[1..]`, per-doc
/// token mean, then batch mean.
pub fn lm_loss_graph(params: &ModelParams, docs: &[Vec<usize>]) -> Result<LossGraph> {
    if docs.is_empty() {
        return Err(Error::Invalid("empty document batch".to_string()));
    }
    if !params.has_lm_head() {
        return Err(Error::MissingTensor(LM_HEAD.to_string()));
    }
    let mut tape = Tape::new();
    let mut weights = PlainWeights::from_checkpoint(&mut tape, &params.checkpoint);
    let loss = build_lm_batch_loss(&mut tape, &mut weights, &params.config, docs)?;
    let param_nodes = weights.nodes().clone();
    Ok(LossGraph {
        tape,
        loss,
        param_nodes,
        param_shapes: shapes_of(&params.checkpoint),
    })
}

/// Shared builder for the batched next-token loss (per-doc token mean, then
/// batch mean).
pub(crate) fn build_lm_batch_loss(
    tape: &mut Tape,
    weights: &mut dyn WeightResolver,
    config: &EncoderConfig,
    docs: &[Vec<usize>],
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for doc in docs {
        if doc.len() < 2 {
            return Err(Error::Invalid(
                "next-token loss needs documents of at least 2 tokens".to_string(),
            ));
        }
        validate_tokens(doc, config)?;
        let inputs = &doc[..doc.len() - 1];
        let targets = &doc[1..];
        let logits = build_lm_logits(tape, weights, config, inputs)?;
        let ce = tape.cross_entropy_mean(logits, targets)?;
        total = Some(match total {
            None => ce,
            Some(prev) => tape.add(prev, ce),
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / docs.len() as f64))
}

/// In-batch-negative contrastive loss over `B >= 2` (query, document) pairs:
/// `s[i][j] = dot(embed(q_i), embed(d_j))`, softmax over each row at the given
/// temperature, negative log likelihood of the diagonal, batch mean.
pub fn infonce_loss_graph(
    params: &ModelParams,
    queries: &[Vec<usize>],
    docs: &[Vec<usize>],
    temperature: f32,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let mut weights = PlainWeights::from_checkpoint(&mut tape, &params.checkpoint);
    let loss = build_infonce_loss(
        &mut tape,
        &mut weights,
        &params.config,
        queries,
        docs,
        temperature,
    )?;
    let param_nodes = weights.nodes().clone();
    Ok(LossGraph {
        tape,
        loss,
        param_nodes,
        param_shapes: shapes_of(&params.checkpoint),
    })
}

pub(crate) fn build_infonce_loss(
    tape: &mut Tape,
    weights: &mut dyn WeightResolver,
    config: &EncoderConfig,
    queries: &[Vec<usize>],
    docs: &[Vec<usize>],
    temperature: f32,
) -> Result<NodeId> {
    if queries.len() != docs.len() {
        return Err(Error::Invalid(format!(
            "queries ({}) and documents ({}) must pair up",
            queries.len(),
            docs.len()
        )));
    }
    if queries.len() < 2 {
        return Err(Error::Invalid(
            "contrastive batches need at least 2 pairs for in-batch negatives".to_string(),
        ));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let mut q_rows = Vec::with_capacity(queries.len());
    let mut d_rows = Vec::with_capacity(docs.len());
    for q in queries {
        validate_tokens(q, config)?;
        q_rows.push(build_embedding(tape, weights, config, q)?);
    }
    for d in docs {
        validate_tokens(d, config)?;
        d_rows.push(build_embedding(tape, weights, config, d)?);
    }
    let q_mat = tape.stack_rows(&q_rows);
    let d_mat = tape.stack_rows(&d_rows);
    let sims = tape.matmul_trans_b(q_mat, d_mat);
    let logits = tape.scale(sims, 1.0 / f64::from(temperature));
    let targets: Vec<usize> = (0..queries.len()).collect();
    tape.cross_entropy_mean(logits, &targets)
}

fn shapes_of(ckpt: &Checkpoint) -> BTreeMap<String, Vec<usize>> {
    ckpt.tensors()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{filter_keys, FilterMode};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 8,
            pooling: Pooling::Mean,
            seed: 42,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = tiny_config();
        let a = init_params(&config).unwrap();
        let b = init_params(&config).unwrap();
        assert!(a.checkpoint().bit_eq(b.checkpoint()));

        let mut other = config.clone();
        other.seed = 43;
        let c = init_params(&other).unwrap();
        let differs = a
            .checkpoint()
            .tensors()
            .any(|(n, t)| c.checkpoint().get(n).map(|u| !t.bit_eq(u)).unwrap_or(true));
        assert!(differs);
    }

    #[test]
    fn canonical_name_count_for_one_layer_model() {
        let params = init_params(&tiny_config()).unwrap();
        // 2 embeddings + 6 per-layer weights + 2 norm params + head
        assert_eq!(params.checkpoint().len(), 11);
        assert!(params.has_lm_head());
        assert_eq!(
            params.checkpoint().get(LM_HEAD).unwrap().shape(),
            &[16, 8]
        );
    }

    #[test]
    fn forward_lm_shape_contract() {
        let params = init_params(&tiny_config()).unwrap();
        let logits = forward_lm(&params, &[5]).unwrap();
        assert_eq!(logits.shape(), &[1, 16]);
        let logits3 = forward_lm(&params, &[5, 6, 7]).unwrap();
        assert_eq!(logits3.shape(), &[3, 16]);
    }

    #[test]
    fn forward_lm_is_causal() {
        let params = init_params(&tiny_config()).unwrap();
        let a = forward_lm(&params, &[5, 6, 7, 8]).unwrap();
        let b = forward_lm(&params, &[5, 8, 6, 7]).unwrap();
        // position 0 cannot see permuted future tokens
        assert_eq!(a.data()[..16], b.data()[..16]);
        // sanity: later rows do change
        assert_ne!(a.data()[16..], b.data()[16..]);
    }

    #[test]
    fn forward_lm_validates_inputs() {
        let params = init_params(&tiny_config()).unwrap();
        assert!(forward_lm(&params, &[]).is_err());
        assert!(matches!(
            forward_lm(&params, &[16]),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            forward_lm(&params, &[1; 9]),
            Err(Error::SequenceTooLong { .. })
        ));

        let headless = filter_keys(params.checkpoint(), &["lm_head.*"], FilterMode::Drop).unwrap();
        let headless = ModelParams::from_checkpoint(headless).unwrap();
        assert!(matches!(
            forward_lm(&headless, &[1, 2]),
            Err(Error::MissingTensor(n)) if n == LM_HEAD
        ));
    }

    #[test]
    fn embed_is_unit_norm() {
        let params = init_params(&tiny_config()).unwrap();
        let e = embed(&params, &[4, 9, 12]).unwrap();
        assert_eq!(e.len(), 8);
        let norm: f64 = e.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mean_pooling_equals_last_token_for_length_one() {
        let mut config = tiny_config();
        let params = init_params(&config).unwrap();
        let mean = embed(&params, &[7]).unwrap();

        config.pooling = Pooling::LastToken;
        let params_last = ModelParams::new(params.checkpoint().clone(), config).unwrap();
        let last = embed(&params_last, &[7]).unwrap();
        assert_eq!(mean, last);
    }

    #[test]
    fn embedding_ignores_lm_head() {
        let params = init_params(&tiny_config()).unwrap();
        let before = embed(&params, &[4, 9, 12]).unwrap();

        let mut ckpt = params.checkpoint().clone();
        let head = ckpt.get(LM_HEAD).unwrap();
        let perturbed: Vec<f32> = head.data().iter().map(|v| v * -3.5 + 0.25).collect();
        ckpt.insert(LM_HEAD, Tensor::new(head.shape().to_vec(), perturbed).unwrap())
            .unwrap();
        let params2 = ModelParams::from_checkpoint(ckpt).unwrap();
        let after = embed(&params2, &[4, 9, 12]).unwrap();
        assert_eq!(before, after, "embedding must not depend on the head");
    }

    #[test]
    fn embed_rejects_all_pad_input() {
        let params = init_params(&tiny_config()).unwrap();
        assert!(matches!(
            embed(&params, &[tokenizer::PAD, tokenizer::PAD]),
            Err(Error::AllPadInput(_))
        ));
        assert!(matches!(embed(&params, &[]), Err(Error::AllPadInput(_))));
    }

    #[test]
    fn pad_positions_are_excluded_from_pooling() {
        let params = init_params(&tiny_config()).unwrap();
        let plain = embed(&params, &[4, 9]).unwrap();
        let padded = embed(&params, &[4, 9, tokenizer::PAD]).unwrap();
        // trailing pad changes attention rows but not the pooled set;
        // embeddings stay close but need not be identical
        let dot: f64 = plain
            .iter()
            .zip(&padded)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        assert!(dot > 0.9, "padded embedding drifted too far: dot = {dot}");
    }

    #[test]
    fn model_params_round_trips_through_metadata() {
        let params = init_params(&tiny_config()).unwrap();
        let ckpt = params.checkpoint().clone();
        let back = ModelParams::from_checkpoint(ckpt).unwrap();
        assert_eq!(back.config(), params.config());
    }

    #[test]
    fn loss_graph_gradients_cover_all_params() {
        let params = init_params(&tiny_config()).unwrap();
        let graph = lm_loss_graph(&params, &[vec![1, 5, 6, 2]]).unwrap();
        assert!(graph.loss().is_finite());
        let grads = graph.backward();
        assert_eq!(grads.len(), params.checkpoint().len());
        for (name, g) in grads.iter() {
            assert_eq!(
                g.shape(),
                params.checkpoint().get(name).unwrap().shape(),
                "{name}"
            );
        }
    }

    #[test]
    fn forward_and_gradients_are_bit_deterministic() {
        let params = init_params(&tiny_config()).unwrap();
        let tokens = vec![1usize, 5, 9, 13];
        let a = forward_lm(&params, &tokens).unwrap();
        let b = forward_lm(&params, &tokens).unwrap();
        assert!(a.bit_eq(&b));

        let docs = vec![tokens];
        let ga = lm_loss_graph(&params, &docs).unwrap().backward();
        let gb = lm_loss_graph(&params, &docs).unwrap().backward();
        for (name, t) in ga.iter() {
            assert!(t.bit_eq(gb.get(name).unwrap()), "{name}");
        }
    }

    #[test]
    fn infonce_loss_is_ln_b_for_identical_pairs() {
        let params = init_params(&tiny_config()).unwrap();
        // identical texts embed identically, so all similarities are equal
        let seq = vec![5usize, 9, 11];
        let batch: Vec<Vec<usize>> = (0..4).map(|_| seq.clone()).collect();
        let graph = infonce_loss_graph(&params, &batch, &batch, 0.05).unwrap();
        assert!((graph.loss() - (4.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn infonce_rejects_singleton_batches() {
        let params = init_params(&tiny_config()).unwrap();
        let one = vec![vec![5usize, 9]];
        assert!(infonce_loss_graph(&params, &one, &one, 0.05).is_err());
    }

    #[test]
    fn infonce_gradient_skips_lm_head() {
        let params = init_params(&tiny_config()).unwrap();
        let q = vec![vec![5usize, 9], vec![6, 10]];
        let d = vec![vec![7usize, 11], vec![8, 12]];
        let graph = infonce_loss_graph(&params, &q, &d, 0.05).unwrap();
        let grads = graph.backward();
        let head = grads.get(LM_HEAD).unwrap();
        assert!(head.data().iter().all(|&g| g == 0.0));
    }
}
