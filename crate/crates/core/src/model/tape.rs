//! Minimal reverse-mode autodiff over 2-D f64 buffers.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the tape
//! in reverse. The op set is exactly what the encoder, the two losses, and
//! DoRA weight construction need. Everything runs in f64 with fixed
//! left-to-right accumulation, so outputs and gradients are bit-deterministic.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Gather { src: NodeId, ids: Vec<usize> },
    Add { a: NodeId, b: NodeId },
    AddRowVec { a: NodeId, v: NodeId },
    MulRowVec { a: NodeId, v: NodeId },
    Matmul { a: NodeId, b: NodeId },
    MatmulTransB { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    CausalSoftmax { a: NodeId },
    LayerNormRows { a: NodeId },
    Gelu { a: NodeId },
    MeanPoolRows { a: NodeId, keep: Vec<bool> },
    Row { a: NodeId, idx: usize },
    L2NormalizeRows { a: NodeId },
    ColNormalize { a: NodeId },
    CrossEntropyMean { logits: NodeId, targets: Vec<usize> },
    StackRows { parts: Vec<NodeId> },
    Sum { a: NodeId },
    Dropout { a: NodeId, mask: Vec<f64> },
    DivColNorms { x: NodeId, v: NodeId },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf holding `rows x cols` values. Leaves receive gradients like any
    /// other node; whether they are trainable is the caller's concern.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "leaf buffer size");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn leaf_f32(&mut self, rows: usize, cols: usize, value: &[f32]) -> NodeId {
        self.leaf(rows, cols, value.iter().map(|&v| f64::from(v)).collect())
    }

    /// Row lookup: `out[i, :] = src[ids[i], :]`.
    pub fn gather(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(src);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: rows,
                });
            }
        }
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            value.extend_from_slice(&self.nodes[src.0].value[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(
            ids.len(),
            cols,
            value,
            Op::Gather {
                src,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(rows, cols, value, Op::Add { a, b })
    }

    /// Broadcast add of a `1 x cols` vector to every row.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(v), (1, cols), "add_row_vec vector shape");
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                value.push(self.nodes[a.0].value[i * cols + j] + self.nodes[v.0].value[j]);
            }
        }
        self.push(rows, cols, value, Op::AddRowVec { a, v })
    }

    /// Broadcast multiply of every row by a `1 x cols` vector. Doubles as
    /// per-column scaling of a matrix.
    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(v), (1, cols), "mul_row_vec vector shape");
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                value.push(self.nodes[a.0].value[i * cols + j] * self.nodes[v.0].value[j]);
            }
        }
        self.push(rows, cols, value, Op::MulRowVec { a, v })
    }

    /// `[m, k] . [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..n {
                    value[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        self.push(m, n, value, Op::Matmul { a, b })
    }

    /// `[m, k] . [n, k]^T -> [m, n]`.
    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_trans_b inner dims");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                value[i * n + j] = acc;
            }
        }
        self.push(m, n, value, Op::MatmulTransB { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(rows, cols, value, Op::Scale { a, c })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= cols, "slice_cols bounds");
        let mut value = Vec::with_capacity(rows * len);
        for i in 0..rows {
            value
                .extend_from_slice(&self.nodes[a.0].value[i * cols + start..i * cols + start + len]);
        }
        self.push(rows, len, value, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let (pr, pc) = self.shape(p);
                assert_eq!(pr, rows, "concat_cols row mismatch");
                value.extend_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
        }
        self.push(
            rows,
            total,
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    /// Row-wise softmax over a square score matrix where row `i` only sees
    /// columns `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        let (n, n2) = self.shape(a);
        assert_eq!(n, n2, "causal_softmax expects square scores");
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; n * n];
        for i in 0..n {
            let row = &av[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                value[i * n + j] = e;
                denom += e;
            }
            for v in &mut value[i * n..i * n + i + 1] {
                *v /= denom;
            }
        }
        self.push(n, n, value, Op::CausalSoftmax { a })
    }

    /// Parameter-free layer norm applied to each row.
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &av[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..cols {
                value[i * cols + j] = (row[j] - mean) * inv;
            }
        }
        self.push(rows, cols, value, Op::LayerNormRows { a })
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        self.push(rows, cols, value, Op::Gelu { a })
    }

    /// Mean over the rows where `keep` is true, producing `1 x cols`.
    pub fn mean_pool_rows(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        assert_eq!(keep.len(), rows, "mean_pool_rows mask length");
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::AllPadInput(
                "mean pooling over zero rows".to_string(),
            ));
        }
        let mut value = vec![0.0; cols];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                let row = &self.nodes[a.0].value[i * cols..(i + 1) * cols];
                for (v, x) in value.iter_mut().zip(row) {
                    *v += x;
                }
            }
        }
        for v in &mut value {
            *v /= count as f64;
        }
        Ok(self.push(
            1,
            cols,
            value,
            Op::MeanPoolRows {
                a,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Selects one row as `1 x cols`.
    pub fn row(&mut self, a: NodeId, idx: usize) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(idx < rows, "row index");
        let value = self.nodes[a.0].value[idx * cols..(idx + 1) * cols].to_vec();
        self.push(1, cols, value, Op::Row { a, idx })
    }

    /// L2-normalizes each row to unit length.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &av[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return Err(Error::NonFinite(format!(
                    "cannot L2-normalize zero row {i}"
                )));
            }
            for j in 0..cols {
                value[i * cols + j] = row[j] / norm;
            }
        }
        Ok(self.push(rows, cols, value, Op::L2NormalizeRows { a }))
    }

    /// L2-normalizes each column to unit length (DoRA direction matrix).
    pub fn col_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows * cols];
        for j in 0..cols {
            let norm = (0..rows)
                .map(|i| av[i * cols + j] * av[i * cols + j])
                .sum::<f64>()
                .sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroColumnNorm {
                    name: String::new(),
                    col: j,
                });
            }
            for i in 0..rows {
                value[i * cols + j] = av[i * cols + j] / norm;
            }
        }
        Ok(self.push(rows, cols, value, Op::ColNormalize { a }))
    }

    /// Mean token-level cross entropy of `logits [n, vocab]` against integer
    /// targets, computed via a stable log-sum-exp. Scalar output.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, vocab) = self.shape(logits);
        assert_eq!(targets.len(), rows, "cross_entropy targets length");
        for &t in targets {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
        }
        let av = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &av[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = vec![total / rows as f64];
        Ok(self.push(
            1,
            1,
            value,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Stacks `1 x cols` rows into `[parts.len(), cols]`.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut value = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            assert_eq!(self.shape(p), (1, cols), "stack_rows part shape");
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(
            parts.len(),
            cols,
            value,
            Op::StackRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        self.push(1, 1, value, Op::Sum { a })
    }

    /// `out[i, j] = x[i, j] / ||v[:, j]||_2` — scales the columns of `x` by
    /// the reciprocal column norms of `v`, with gradients to both. Splitting a
    /// column-normalized sum into per-term contributions uses this.
    pub fn div_col_norms(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(v), (rows, cols), "div_col_norms shapes");
        let xv = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        let mut value = vec![0.0; rows * cols];
        for j in 0..cols {
            let norm = (0..rows)
                .map(|i| vv[i * cols + j] * vv[i * cols + j])
                .sum::<f64>()
                .sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroColumnNorm {
                    name: String::new(),
                    col: j,
                });
            }
            for i in 0..rows {
                value[i * cols + j] = xv[i * cols + j] / norm;
            }
        }
        Ok(self.push(rows, cols, value, Op::DivColNorms { x, v }))
    }

    /// Inverted dropout with a caller-supplied mask of factors
    /// (0.0 for dropped entries, `1/(1-p)` for kept ones).
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert_eq!(mask.len(), rows * cols, "dropout mask size");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        self.push(rows, cols, value, Op::Dropout { a, mask })
    }

    /// Reverse-mode sweep from a scalar loss. Returns one gradient buffer per
    /// node; nodes the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Vec<Vec<f64>> {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.rows * n.cols])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|&x| x == 0.0) {
                grads[idx] = g;
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Gather { src, ids } => {
                    let cols = node.cols;
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            grads[src.0][id * cols + j] += g[i * cols + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (x, gi) in grads[a.0].iter_mut().zip(&g) {
                        *x += gi;
                    }
                    for (x, gi) in grads[b.0].iter_mut().zip(&g) {
                        *x += gi;
                    }
                }
                Op::AddRowVec { a, v } => {
                    let cols = node.cols;
                    for (x, gi) in grads[a.0].iter_mut().zip(&g) {
                        *x += gi;
                    }
                    for i in 0..node.rows {
                        for j in 0..cols {
                            grads[v.0][j] += g[i * cols + j];
                        }
                    }
                }
                Op::MulRowVec { a, v } => {
                    let cols = node.cols;
                    let av = &self.nodes[a.0].value;
                    let vv = &self.nodes[v.0].value;
                    for i in 0..node.rows {
                        for j in 0..cols {
                            grads[a.0][i * cols + j] += g[i * cols + j] * vv[j];
                            grads[v.0][j] += g[i * cols + j] * av[i * cols + j];
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA += g . B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            grads[a.0][i * k + p] += acc;
                        }
                    }
                    // dB += A^T . g
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * g[i * n + j];
                            }
                            grads[b.0][p * n + j] += acc;
                        }
                    }
                }
                Op::MatmulTransB { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA += g . B
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[j * k + p];
                            }
                            grads[a.0][i * k + p] += acc;
                        }
                    }
                    // dB += g^T . A
                    for j in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += g[i * n + j] * av[i * k + p];
                            }
                            grads[b.0][j * k + p] += acc;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    for (x, gi) in grads[a.0].iter_mut().zip(&g) {
                        *x += gi * c;
                    }
                }
                Op::SliceCols { a, start } => {
                    let src_cols = self.shape(*a).1;
                    for i in 0..node.rows {
                        for j in 0..node.cols {
                            grads[a.0][i * src_cols + start + j] += g[i * node.cols + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        for i in 0..node.rows {
                            for j in 0..pc {
                                grads[p.0][i * pc + j] += g[i * node.cols + offset + j];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::CausalSoftmax { a } => {
                    let n = node.rows;
                    for i in 0..n {
                        let y = &node.value[i * n..i * n + i + 1];
                        let gi = &g[i * n..i * n + i + 1];
                        let dot: f64 = y.iter().zip(gi).map(|(yk, gk)| yk * gk).sum();
                        for j in 0..=i {
                            grads[a.0][i * n + j] += y[j] * (gi[j] - dot);
                        }
                    }
                }
                Op::LayerNormRows { a } => {
                    let cols = node.cols;
                    let av = &self.nodes[a.0].value;
                    for i in 0..node.rows {
                        let row = &av[i * cols..(i + 1) * cols];
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gi = &g[i * cols..(i + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                            / cols as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let g_mean = gi.iter().sum::<f64>() / cols as f64;
                        let gy_mean =
                            gi.iter().zip(y).map(|(gk, yk)| gk * yk).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            grads[a.0][i * cols + j] += inv * (gi[j] - g_mean - y[j] * gy_mean);
                        }
                    }
                }
                Op::Gelu { a } => {
                    let av = &self.nodes[a.0].value;
                    let s = (2.0 / std::f64::consts::PI).sqrt();
                    for (i, (&x, gi)) in av.iter().zip(&g).enumerate() {
                        let u = s * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let sech2 = 1.0 - t * t;
                        let d =
                            0.5 * (1.0 + t) + 0.5 * x * sech2 * s * (1.0 + 3.0 * GELU_C * x * x);
                        grads[a.0][i] += gi * d;
                    }
                }
                Op::MeanPoolRows { a, keep } => {
                    let cols = node.cols;
                    let count = keep.iter().filter(|&&k| k).count() as f64;
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            for j in 0..cols {
                                grads[a.0][i * cols + j] += g[j] / count;
                            }
                        }
                    }
                }
                Op::Row { a, idx: ridx } => {
                    let cols = node.cols;
                    for j in 0..cols {
                        grads[a.0][ridx * cols + j] += g[j];
                    }
                }
                Op::L2NormalizeRows { a } => {
                    let cols = node.cols;
                    let av = &self.nodes[a.0].value;
                    for i in 0..node.rows {
                        let row = &av[i * cols..(i + 1) * cols];
                        let gi = &g[i * cols..(i + 1) * cols];
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let dot: f64 = row.iter().zip(gi).map(|(x, gk)| x * gk).sum();
                        let n3 = norm * norm * norm;
                        for j in 0..cols {
                            grads[a.0][i * cols + j] += gi[j] / norm - row[j] * dot / n3;
                        }
                    }
                }
                Op::ColNormalize { a } => {
                    let (rows, cols) = (node.rows, node.cols);
                    let av = &self.nodes[a.0].value;
                    for j in 0..cols {
                        let norm = (0..rows)
                            .map(|i| av[i * cols + j] * av[i * cols + j])
                            .sum::<f64>()
                            .sqrt();
                        let dot: f64 =
                            (0..rows).map(|i| av[i * cols + j] * g[i * cols + j]).sum();
                        let n3 = norm * norm * norm;
                        for i in 0..rows {
                            grads[a.0][i * cols + j] +=
                                g[i * cols + j] / norm - av[i * cols + j] * dot / n3;
                        }
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let vocab = self.shape(*logits).1;
                    let av = &self.nodes[logits.0].value;
                    let scale = g[0] / targets.len() as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &av[i * vocab..(i + 1) * vocab];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / denom;
                            let one_hot = if j == t { 1.0 } else { 0.0 };
                            grads[logits.0][i * vocab + j] += scale * (p - one_hot);
                        }
                    }
                }
                Op::StackRows { parts } => {
                    let cols = node.cols;
                    for (i, &p) in parts.iter().enumerate() {
                        for j in 0..cols {
                            grads[p.0][j] += g[i * cols + j];
                        }
                    }
                }
                Op::Sum { a } => {
                    for x in grads[a.0].iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Dropout { a, mask } => {
                    for (i, (gi, m)) in g.iter().zip(mask).enumerate() {
                        grads[a.0][i] += gi * m;
                    }
                }
                Op::DivColNorms { x, v } => {
                    let (rows, cols) = (node.rows, node.cols);
                    let xv = &self.nodes[x.0].value;
                    let vv = &self.nodes[v.0].value;
                    for j in 0..cols {
                        let norm = (0..rows)
                            .map(|i| vv[i * cols + j] * vv[i * cols + j])
                            .sum::<f64>()
                            .sqrt();
                        let gx_dot: f64 =
                            (0..rows).map(|i| g[i * cols + j] * xv[i * cols + j]).sum();
                        let n3 = norm * norm * norm;
                        for i in 0..rows {
                            grads[x.0][i * cols + j] += g[i * cols + j] / norm;
                            grads[v.0][i * cols + j] -= gx_dot * vv[i * cols + j] / n3;
                        }
                    }
                }
            }
            grads[idx] = g;
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient with respect to a leaf's values, where
    /// `eval` rebuilds the whole graph from scratch and returns the loss.
    fn numerical_grad<F>(values: &[f64], eval: F, h: f64) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut grad = vec![0.0; values.len()];
        let mut work = values.to_vec();
        for i in 0..values.len() {
            let orig = work[i];
            work[i] = orig + h;
            let plus = eval(&work);
            work[i] = orig - h;
            let minus = eval(&work);
            work[i] = orig;
            grad[i] = (plus - minus) / (2.0 * h);
        }
        grad
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                ((a - n) / denom).abs() < tol,
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(2, 3, vec![1.0; 6]);
        let c = tape.leaf(1, 1, vec![5.0]);
        let grads = tape.backward(c);
        assert!(grads[w.0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sum_loss_has_unit_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(2, 3, vec![0.5; 6]);
        let loss = tape.sum(w);
        let grads = tape.backward(loss);
        assert!(grads[w.0].iter().all(|&g| g == 1.0));
    }

    /// Weighted-sum readout so the scalar loss depends on every output element.
    fn readout(tape: &mut Tape, out: NodeId, weights: &[f64]) -> NodeId {
        let (r, c) = tape.shape(out);
        let w = tape.leaf(r, c, weights.to_vec());
        let mut acc = None;
        for i in 0..r {
            let row_o = tape.row(out, i);
            let row_w = tape.row(w, i);
            let dot = tape.matmul_trans_b(row_o, row_w); // 1x1
            acc = Some(match acc {
                None => dot,
                Some(prev) => tape.add(prev, dot),
            });
        }
        let _ = c;
        acc.unwrap()
    }

    /// Per-op finite-difference checks: every op in the autodiff set is
    /// exercised individually against a central-difference oracle.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 1e-5;
        let tol = 1e-6;

        type Builder = Box<dyn Fn(&mut Tape, NodeId) -> NodeId>;
        let cases: Vec<(&str, usize, usize, Builder)> = vec![
            ("gelu", 2, 4, Box::new(|t, x| t.gelu(x))),
            ("layer_norm", 2, 5, Box::new(|t, x| t.layer_norm_rows(x))),
            ("causal_softmax", 4, 4, Box::new(|t, x| t.causal_softmax(x))),
            ("scale", 2, 3, Box::new(|t, x| t.scale(x, -1.7))),
            (
                "l2_normalize",
                2,
                4,
                Box::new(|t, x| t.l2_normalize_rows(x).unwrap()),
            ),
            (
                "col_normalize",
                4,
                3,
                Box::new(|t, x| t.col_normalize(x).unwrap()),
            ),
            (
                "mean_pool",
                3,
                4,
                Box::new(|t, x| t.mean_pool_rows(x, &[true, false, true]).unwrap()),
            ),
            ("row", 3, 4, Box::new(|t, x| t.row(x, 1))),
            ("slice_cols", 2, 6, Box::new(|t, x| t.slice_cols(x, 1, 3))),
            (
                "gather",
                4,
                3,
                Box::new(|t, x| t.gather(x, &[2, 0, 2]).unwrap()),
            ),
            (
                "cross_entropy",
                3,
                5,
                Box::new(|t, x| t.cross_entropy_mean(x, &[1, 4, 0]).unwrap()),
            ),
            (
                "stack_and_concat",
                2,
                4,
                Box::new(|t, x| {
                    let r0 = t.row(x, 0);
                    let r1 = t.row(x, 1);
                    let stacked = t.stack_rows(&[r1, r0, r1]);
                    let left = t.slice_cols(stacked, 0, 2);
                    let right = t.slice_cols(stacked, 2, 2);
                    t.concat_cols(&[right, left])
                }),
            ),
        ];

        for (name, rows, cols, build_op) in &cases {
            let input = rand_vec(&mut rng, rows * cols);
            let out_size = {
                let mut t = Tape::new();
                let x = t.leaf(*rows, *cols, input.clone());
                let o = build_op(&mut t, x);
                let (r, c) = t.shape(o);
                r * c
            };
            let weights = rand_vec(&mut rng, out_size);

            let run = |vals: &[f64]| -> (Tape, NodeId, NodeId) {
                let mut t = Tape::new();
                let x = t.leaf(*rows, *cols, vals.to_vec());
                let o = build_op(&mut t, x);
                let loss = if t.shape(o) == (1, 1) {
                    o
                } else {
                    readout(&mut t, o, &weights)
                };
                (t, x, loss)
            };

            let (tape, x, loss) = run(&input);
            let analytic = tape.backward(loss)[x.0].clone();
            let numeric = numerical_grad(
                &input,
                |vals| {
                    let (t, _, l) = run(vals);
                    t.scalar(l)
                },
                h,
            );
            assert_close(&analytic, &numeric, tol, name);
        }
    }

    #[test]
    fn div_col_norms_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        let x0 = rand_vec(&mut rng, 12); // 4x3
        let v0: Vec<f64> = rand_vec(&mut rng, 12).iter().map(|x| x + 2.5).collect();
        let weights = rand_vec(&mut rng, 12);

        let run = |x: &[f64], v: &[f64]| {
            let mut t = Tape::new();
            let nx = t.leaf(4, 3, x.to_vec());
            let nv = t.leaf(4, 3, v.to_vec());
            let o = t.div_col_norms(nx, nv).unwrap();
            let loss = readout(&mut t, o, &weights);
            (t, nx, nv, loss)
        };
        let (t, nx, nv, loss) = run(&x0, &v0);
        let grads = t.backward(loss);
        let gx = numerical_grad(
            &x0,
            |vals| {
                let (t, _, _, l) = run(vals, &v0);
                t.scalar(l)
            },
            h,
        );
        let gv = numerical_grad(
            &v0,
            |vals| {
                let (t, _, _, l) = run(&x0, vals);
                t.scalar(l)
            },
            h,
        );
        assert_close(&grads[nx.0], &gx, 1e-6, "div_col_norms dX");
        assert_close(&grads[nv.0], &gv, 1e-6, "div_col_norms dV");
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        let a0 = rand_vec(&mut rng, 6); // 2x3
        let b0 = rand_vec(&mut rng, 12); // 3x4 for matmul, 4x3 for trans_b
        let v0 = rand_vec(&mut rng, 3);

        let run_mm = |a: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let na = t.leaf(2, 3, a.to_vec());
            let nb = t.leaf(3, 4, b.to_vec());
            let mm = t.matmul(na, nb);
            let sq = t.gelu(mm);
            let loss = t.sum(sq);
            (t, na, nb, loss)
        };
        let (t, na, nb, loss) = run_mm(&a0, &b0);
        let grads = t.backward(loss);
        let ga = numerical_grad(
            &a0,
            |v| {
                let (t, _, _, l) = run_mm(v, &b0);
                t.scalar(l)
            },
            h,
        );
        let gb = numerical_grad(
            &b0,
            |v| {
                let (t, _, _, l) = run_mm(&a0, v);
                t.scalar(l)
            },
            h,
        );
        assert_close(&grads[na.0], &ga, 1e-6, "matmul dA");
        assert_close(&grads[nb.0], &gb, 1e-6, "matmul dB");

        let run_tb = |a: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let na = t.leaf(2, 3, a.to_vec());
            let nb = t.leaf(4, 3, b.to_vec());
            let mm = t.matmul_trans_b(na, nb);
            let sq = t.gelu(mm);
            let loss = t.sum(sq);
            (t, na, nb, loss)
        };
        let (t, na, nb, loss) = run_tb(&a0, &b0);
        let grads = t.backward(loss);
        let ga = numerical_grad(
            &a0,
            |v| {
                let (t, _, _, l) = run_tb(v, &b0);
                t.scalar(l)
            },
            h,
        );
        let gb = numerical_grad(
            &b0,
            |v| {
                let (t, _, _, l) = run_tb(&a0, v);
                t.scalar(l)
            },
            h,
        );
        assert_close(&grads[na.0], &ga, 1e-6, "matmul_trans_b dA");
        assert_close(&grads[nb.0], &gb, 1e-6, "matmul_trans_b dB");

        let run_rv = |a: &[f64], v: &[f64], mul: bool| {
            let mut t = Tape::new();
            let na = t.leaf(2, 3, a.to_vec());
            let nv = t.leaf(1, 3, v.to_vec());
            let o = if mul {
                t.mul_row_vec(na, nv)
            } else {
                t.add_row_vec(na, nv)
            };
            let o2 = t.gelu(o);
            let loss = t.sum(o2);
            (t, na, nv, loss)
        };
        for mul in [true, false] {
            let (t, na, nv, loss) = run_rv(&a0, &v0, mul);
            let grads = t.backward(loss);
            let ga = numerical_grad(
                &a0,
                |x| {
                    let (t, _, _, l) = run_rv(x, &v0, mul);
                    t.scalar(l)
                },
                h,
            );
            let gv = numerical_grad(
                &v0,
                |x| {
                    let (t, _, _, l) = run_rv(&a0, x, mul);
                    t.scalar(l)
                },
                h,
            );
            assert_close(&grads[na.0], &ga, 1e-6, "row_vec dA");
            assert_close(&grads[nv.0], &gv, 1e-6, "row_vec dV");
        }
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(3, 3, vec![0.3, 99.0, -99.0, 0.1, 0.2, 99.0, 0.5, 0.1, 0.4]);
        let y = tape.causal_softmax(x);
        let v = tape.value(y);
        assert_eq!(v[0], 1.0); // row 0 sees only itself
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0); // row 1 cannot see column 2
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
        assert!((v[6] + v[7] + v[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_applies_mask_in_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let mask = vec![2.0, 0.0, 2.0, 0.0];
        let y = tape.dropout(x, mask);
        assert_eq!(tape.value(y), &[2.0, 0.0, 6.0, 0.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads[x.0], vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let emb = tape.leaf(4, 2, vec![0.0; 8]);
        assert!(tape.gather(emb, &[0, 4]).is_err());
    }
}
