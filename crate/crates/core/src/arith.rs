//! Adapter arithmetic over checkpoints.
//!
//! Three weight sets meet here: a pretrained base, a fine-tuned model, and a
//! low-rank adapter trained on unlabeled text. [`extract_readapter`] isolates
//! what fine-tuning taught the model as a dense per-tensor delta,
//! [`to_dense_delta`] materializes a trained [`LowRankAdapter`] the same way,
//! and [`readapt`] recomposes `base + alpha * knowledge + beta * readapter`
//! with per-element f64 accumulation. [`drop_head`] removes head weights (for
//! example `lm_head.*`) from a delta before composition, so adapters derived
//! from models with and without a next-token head can be combined.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{align_keys, Checkpoint};
use crate::error::{Error, Result};
use crate::pattern::PatternSet;
use crate::tensor::Tensor;

/// Metadata keys reserved by the adapter container serialization.
pub mod meta {
    pub const ROLE: &str = "role";
    pub const RANK: &str = "rank";
    pub const ALPHA_DORA: &str = "alpha_dora";
    pub const DROPOUT_P: &str = "dropout_p";
    pub const BASE_SHAPES: &str = "base_shapes";
    pub const DROPPED: &str = "dropped";
    pub const ONLY_FINE_TUNED: &str = "only_fine_tuned";
    pub const ONLY_PRETRAINED: &str = "only_pretrained";

    pub const ROLE_READAPTER: &str = "readapter";
    pub const ROLE_KNOWLEDGE: &str = "knowledge";
    pub const ROLE_DORA: &str = "dora";
}

/// Where a dense delta came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSource {
    /// Difference between a fine-tuned model and its pretrained base.
    ReverseEngineered,
    /// Dense materialization of an adapter trained on unlabeled text.
    Knowledge,
}

/// A dense per-tensor delta set, applied as `base + scalar * delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReAdapter {
    deltas: BTreeMap<String, Tensor>,
    source: AdapterSource,
    metadata: BTreeMap<String, String>,
}

impl ReAdapter {
    pub fn new(source: AdapterSource) -> Self {
        ReAdapter {
            deltas: BTreeMap::new(),
            source,
            metadata: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, delta: Tensor) {
        self.deltas.insert(name.into(), delta);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.deltas.get(name)
    }

    pub fn deltas(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.deltas.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.deltas.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn source(&self) -> AdapterSource {
        self.source
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Shapes of the tensors this delta set was derived against, recorded in
    /// metadata as JSON `{name: shape}`.
    fn record_base_shapes(&mut self) {
        let shapes: BTreeMap<&str, &[usize]> = self
            .deltas
            .iter()
            .map(|(k, v)| (k.as_str(), v.shape()))
            .collect();
        self.metadata.insert(
            meta::BASE_SHAPES.to_string(),
            serde_json::to_string(&shapes).expect("shape map serializes"),
        );
    }

    /// Serializes into the checkpoint container with reserved metadata keys.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        for (name, delta) in &self.deltas {
            ckpt.insert(name.clone(), delta.clone())?;
        }
        for (k, v) in &self.metadata {
            ckpt.set_metadata(k.clone(), v.clone());
        }
        let role = match self.source {
            AdapterSource::ReverseEngineered => meta::ROLE_READAPTER,
            AdapterSource::Knowledge => meta::ROLE_KNOWLEDGE,
        };
        ckpt.set_metadata(meta::ROLE, role);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let source = match ckpt.metadata().get(meta::ROLE).map(String::as_str) {
            Some(meta::ROLE_READAPTER) => AdapterSource::ReverseEngineered,
            Some(meta::ROLE_KNOWLEDGE) => AdapterSource::Knowledge,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "container role {other:?} is not a dense adapter"
                )))
            }
        };
        let mut adapter = ReAdapter::new(source);
        for (name, tensor) in ckpt.tensors() {
            adapter.deltas.insert(name.to_string(), tensor.clone());
        }
        for (k, v) in ckpt.metadata() {
            if k != meta::ROLE {
                adapter.metadata.insert(k.clone(), v.clone());
            }
        }
        Ok(adapter)
    }
}

/// DoRA factors for one target tensor of shape `[d, k]`: a low-rank update
/// `B (d x r) . A (r x k)` plus a per-column magnitude vector `m` of length k.
#[derive(Debug, Clone, PartialEq)]
pub struct DoraTarget {
    pub a: Tensor,
    pub b: Tensor,
    pub magnitude: Tensor,
    pub base_shape: (usize, usize),
}

/// A weight-decomposed low-rank adapter.
///
/// Merging replaces each target `W0` with
/// `W'[:, j] = m[j] * V[:, j] / ||V[:, j]||_2` where
/// `V = W0 + (alpha_dora / rank) * B . A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    targets: BTreeMap<String, DoraTarget>,
    rank: usize,
    alpha_dora: f32,
    dropout_p: f32,
}

impl LowRankAdapter {
    pub fn new(rank: usize, alpha_dora: f32, dropout_p: f32) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".to_string()));
        }
        if !(alpha_dora.is_finite() && alpha_dora > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_dora must be a positive finite float, got {alpha_dora}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "dropout_p must be in [0, 1), got {dropout_p}"
            )));
        }
        Ok(LowRankAdapter {
            targets: BTreeMap::new(),
            rank,
            alpha_dora,
            dropout_p,
        })
    }

    /// Adds a target, validating factor shapes against the adapter rank and
    /// the recorded base shape.
    pub fn add_target(
        &mut self,
        name: impl Into<String>,
        a: Tensor,
        b: Tensor,
        magnitude: Tensor,
        base_shape: (usize, usize),
    ) -> Result<()> {
        let name = name.into();
        let (d, k) = base_shape;
        if self.rank > d.min(k) {
            return Err(Error::InvalidConfig(format!(
                "target {name}: rank {} exceeds min({d}, {k})",
                self.rank
            )));
        }
        if a.shape() != [self.rank, k] {
            return Err(Error::ShapeMismatch {
                name: format!("{name} (factor A)"),
                expected: vec![self.rank, k],
                got: a.shape().to_vec(),
            });
        }
        if b.shape() != [d, self.rank] {
            return Err(Error::ShapeMismatch {
                name: format!("{name} (factor B)"),
                expected: vec![d, self.rank],
                got: b.shape().to_vec(),
            });
        }
        if magnitude.shape() != [k] {
            return Err(Error::ShapeMismatch {
                name: format!("{name} (magnitude)"),
                expected: vec![k],
                got: magnitude.shape().to_vec(),
            });
        }
        if let Some(i) = magnitude.data().iter().position(|&m| m <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "target {name}: magnitude[{i}] = {} is not strictly positive",
                magnitude.data()[i]
            )));
        }
        self.targets.insert(
            name,
            DoraTarget {
                a,
                b,
                magnitude,
                base_shape,
            },
        );
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha_dora(&self) -> f32 {
        self.alpha_dora
    }

    pub fn dropout_p(&self) -> f32 {
        self.dropout_p
    }

    pub fn scaling(&self) -> f64 {
        f64::from(self.alpha_dora) / self.rank as f64
    }

    pub fn targets(&self) -> impl Iterator<Item = (&str, &DoraTarget)> {
        self.targets.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&DoraTarget> {
        self.targets.get(name)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Serializes factors as `{target}.dora_{a,b,m}` tensors in the container
    /// format, with rank / alpha / base shapes under reserved metadata keys.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        let mut shapes: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
        for (name, t) in &self.targets {
            ckpt.insert(format!("{name}.dora_a"), t.a.clone())?;
            ckpt.insert(format!("{name}.dora_b"), t.b.clone())?;
            ckpt.insert(format!("{name}.dora_m"), t.magnitude.clone())?;
            shapes.insert(name, [t.base_shape.0, t.base_shape.1]);
        }
        ckpt.set_metadata(meta::ROLE, meta::ROLE_DORA);
        ckpt.set_metadata(meta::RANK, self.rank.to_string());
        ckpt.set_metadata(meta::ALPHA_DORA, self.alpha_dora.to_string());
        ckpt.set_metadata(meta::DROPOUT_P, self.dropout_p.to_string());
        ckpt.set_metadata(meta::BASE_SHAPES, serde_json::to_string(&shapes)?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.metadata().get(meta::ROLE).map(String::as_str) != Some(meta::ROLE_DORA) {
            return Err(Error::InvalidConfig(
                "container role is not \"dora\"".to_string(),
            ));
        }
        let rank: usize = parse_meta(ckpt, meta::RANK)?;
        let alpha_dora: f32 = parse_meta(ckpt, meta::ALPHA_DORA)?;
        let dropout_p: f32 = parse_meta(ckpt, meta::DROPOUT_P)?;
        let shapes_json = ckpt
            .metadata()
            .get(meta::BASE_SHAPES)
            .ok_or_else(|| Error::InvalidConfig("missing base_shapes metadata".to_string()))?;
        let shapes: BTreeMap<String, [usize; 2]> = serde_json::from_str(shapes_json)?;
        let mut adapter = LowRankAdapter::new(rank, alpha_dora, dropout_p)?;
        for (name, [d, k]) in &shapes {
            let lookup = |suffix: &str| -> Result<Tensor> {
                ckpt.get(&format!("{name}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::MissingTensor(format!("{name}.{suffix}")))
            };
            adapter.add_target(
                name.clone(),
                lookup("dora_a")?,
                lookup("dora_b")?,
                lookup("dora_m")?,
                (*d, *k),
            )?;
        }
        Ok(adapter)
    }
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.metadata()
        .get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("missing {key} metadata")))?
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("unparseable {key} metadata")))
}

/// Strength scalars for recomposition: `alpha` weights the knowledge delta,
/// `beta` the reverse-engineered delta. Negative values are allowed; sweeps
/// and task negation both use them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialAdaptation {
    pub alpha: f32,
    pub beta: f32,
}

impl Default for PartialAdaptation {
    fn default() -> Self {
        PartialAdaptation {
            alpha: 0.5,
            beta: 1.0,
        }
    }
}

impl PartialAdaptation {
    pub fn new(alpha: f32, beta: f32) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "partial adaptation scalars must be finite, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(PartialAdaptation { alpha, beta })
    }
}

/// Isolates what fine-tuning taught a model: `delta[n] = fine_tuned[n] - pretrained[n]`
/// for every shared tensor. Tensors present in only one checkpoint are
/// excluded and listed in the adapter metadata.
pub fn extract_readapter(fine_tuned: &Checkpoint, pretrained: &Checkpoint) -> Result<ReAdapter> {
    let alignment = align_keys(fine_tuned, pretrained);
    if let Some(name) = alignment.shape_mismatch.first() {
        let got = fine_tuned.get(name).expect("mismatch name in a").shape();
        let expected = pretrained.get(name).expect("mismatch name in b").shape();
        return Err(Error::ShapeMismatch {
            name: name.clone(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    if alignment.shared.is_empty() {
        return Err(Error::EmptySharedSet);
    }
    let mut adapter = ReAdapter::new(AdapterSource::ReverseEngineered);
    for name in &alignment.shared {
        let ft = fine_tuned.get(name).expect("shared name");
        let pre = pretrained.get(name).expect("shared name");
        let data: Vec<f64> = ft
            .data()
            .iter()
            .zip(pre.data())
            .map(|(&f, &p)| f64::from(f) - f64::from(p))
            .collect();
        let delta = Tensor::from_f64(ft.shape().to_vec(), data)
            .map_err(|e| contextualize(e, name))?;
        adapter.insert(name.clone(), delta);
    }
    adapter.metadata_mut().insert(
        meta::ONLY_FINE_TUNED.to_string(),
        serde_json::to_string(&alignment.only_a)?,
    );
    adapter.metadata_mut().insert(
        meta::ONLY_PRETRAINED.to_string(),
        serde_json::to_string(&alignment.only_b)?,
    );
    adapter.record_base_shapes();
    Ok(adapter)
}

/// Replaces every adapter target `W0` in `base` with the merged DoRA weight.
/// Non-target tensors are carried over bit-identical. Column norms and all
/// accumulations run in f64; each output element is rounded to f32 once.
pub fn merge_dora(base: &Checkpoint, adapter: &LowRankAdapter) -> Result<Checkpoint> {
    let mut out = base.clone();
    for (name, target) in adapter.targets() {
        let w0 = base.get(name).ok_or_else(|| Error::MissingTarget(name.to_string()))?;
        let (d, k) = w0.dims2().map_err(|e| contextualize(e, name))?;
        if (d, k) != target.base_shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![target.base_shape.0, target.base_shape.1],
                got: vec![d, k],
            });
        }
        let merged = merge_one_target(w0, target, adapter.scaling())
            .map_err(|e| zero_norm_with_name(e, name))?;
        let tensor =
            Tensor::from_f64(vec![d, k], merged).map_err(|e| contextualize(e, name))?;
        out.insert(name.to_string(), tensor)?;
    }
    Ok(out)
}

/// f64 merge of a single target; returns the flat `[d, k]` buffer.
fn merge_one_target(w0: &Tensor, target: &DoraTarget, scaling: f64) -> Result<Vec<f64>> {
    let (d, k) = target.base_shape;
    let r = target.a.shape()[0];
    let a = target.a.to_f64();
    let b = target.b.to_f64();
    let w = w0.to_f64();

    // V = W0 + scaling * B.A
    let mut v = vec![0.0f64; d * k];
    for i in 0..d {
        for j in 0..k {
            let mut acc = 0.0f64;
            for p in 0..r {
                acc += b[i * r + p] * a[p * k + j];
            }
            v[i * k + j] = w[i * k + j] + scaling * acc;
        }
    }
    // W'[:, j] = m[j] * V[:, j] / ||V[:, j]||
    let mut out = vec![0.0f64; d * k];
    for j in 0..k {
        let mut norm_sq = 0.0f64;
        for i in 0..d {
            norm_sq += v[i * k + j] * v[i * k + j];
        }
        let norm = norm_sq.sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroColumnNorm {
                name: String::new(),
                col: j,
            });
        }
        let scale = f64::from(target.magnitude.data()[j]) / norm;
        for i in 0..d {
            out[i * k + j] = v[i * k + j] * scale;
        }
    }
    Ok(out)
}

fn zero_norm_with_name(e: Error, name: &str) -> Error {
    match e {
        Error::ZeroColumnNorm { col, .. } => Error::ZeroColumnNorm {
            name: name.to_string(),
            col,
        },
        other => other,
    }
}

fn contextualize(e: Error, name: &str) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{name}: {msg}")),
        Error::InvalidTensor { reason, .. } => Error::InvalidTensor {
            name: name.to_string(),
            reason,
        },
        other => other,
    }
}

/// Materializes a low-rank adapter as a dense delta over its targets, so it
/// composes with dense deltas in [`readapt`]. Equivalent to extracting a
/// delta from the merged checkpoint: target tensors carry `merged - base`,
/// untouched tensors produce no delta (their extracted delta is exactly zero,
/// and missing deltas are treated as zero downstream).
pub fn to_dense_delta(base: &Checkpoint, adapter: &LowRankAdapter) -> Result<ReAdapter> {
    let merged = merge_dora(base, adapter)?;
    let mut out = ReAdapter::new(AdapterSource::Knowledge);
    for (name, _) in adapter.targets() {
        let m = merged.get(name).expect("merged target");
        let b = base.get(name).expect("base target");
        let data: Vec<f64> = m
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f64::from(x) - f64::from(y))
            .collect();
        let delta = Tensor::from_f64(m.shape().to_vec(), data)
            .map_err(|e| contextualize(e, name))?;
        out.insert(name.to_string(), delta);
    }
    out.metadata_mut()
        .insert(meta::RANK.to_string(), adapter.rank().to_string());
    out.metadata_mut()
        .insert(meta::ALPHA_DORA.to_string(), adapter.alpha_dora().to_string());
    out.record_base_shapes();
    Ok(out)
}

/// Recomposition: `out[n] = pretrained[n] + alpha * knowledge[n] + beta * readapter[n]`,
/// treating a missing delta as zero. Accumulation is per element in f64 with a
/// single rounding to f32, so `alpha = beta = 0` returns the pretrained
/// weights bit-identically (untouched tensors are cloned, not recomputed).
pub fn readapt(
    pretrained: &Checkpoint,
    knowledge: &ReAdapter,
    readapter: &ReAdapter,
    scalars: PartialAdaptation,
) -> Result<Checkpoint> {
    let scalars = PartialAdaptation::new(scalars.alpha, scalars.beta)?;
    for adapter in [knowledge, readapter] {
        for (name, delta) in adapter.deltas() {
            let base = pretrained
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if base.shape() != delta.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: base.shape().to_vec(),
                    got: delta.shape().to_vec(),
                });
            }
        }
    }

    let alpha = f64::from(scalars.alpha);
    let beta = f64::from(scalars.beta);
    let mut out = Checkpoint::new();
    for (k, v) in pretrained.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    for (name, base) in pretrained.tensors() {
        let psi = if scalars.alpha != 0.0 { knowledge.get(name) } else { None };
        let delta = if scalars.beta != 0.0 { readapter.get(name) } else { None };
        let tensor = match (psi, delta) {
            // no contribution: bit-identical clone
            (None, None) => base.clone(),
            _ => {
                let mut data = Vec::with_capacity(base.len());
                for i in 0..base.len() {
                    let mut acc = f64::from(base.data()[i]);
                    if let Some(p) = psi {
                        acc += alpha * f64::from(p.data()[i]);
                    }
                    if let Some(d) = delta {
                        acc += beta * f64::from(d.data()[i]);
                    }
                    data.push(acc);
                }
                Tensor::from_f64(base.shape().to_vec(), data)
                    .map_err(|e| contextualize(e, name))?
            }
        };
        out.insert(name.to_string(), tensor)?;
    }
    Ok(out)
}

/// Removes deltas whose names match any pattern. The dropped names (possibly
/// none) are recorded under the `dropped` metadata key.
pub fn drop_head<S: AsRef<str>>(adapter: &ReAdapter, patterns: &[S]) -> Result<ReAdapter> {
    let set = PatternSet::compile(patterns)?;
    let mut out = ReAdapter::new(adapter.source());
    let mut dropped = Vec::new();
    for (name, delta) in adapter.deltas() {
        if set.matches(name) {
            dropped.push(name.to_string());
        } else {
            out.insert(name.to_string(), delta.clone());
        }
    }
    *out.metadata_mut() = adapter.metadata().clone();
    out.metadata_mut()
        .insert(meta::DROPPED.to_string(), serde_json::to_string(&dropped)?);
    Ok(out)
}
