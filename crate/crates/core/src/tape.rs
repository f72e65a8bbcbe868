//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates adjoints. A tape can be differentiated once; a new
//! forward pass needs a new tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scoring;
use crate::tensor::{self, matmul, matmul_nt, matmul_tn, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const RMS_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    Scale(Var, f64),
    Relu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    AvgMaxHeads {
        q: Var,
        k: Var,
        head_dim: usize,
        scale: f64,
        /// per head: (query row, argmax key row) for every valid query row
        picks: Vec<Vec<(usize, usize)>>,
    },
    KlToTarget {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    DotConst {
        x: Var,
        weights: Matrix,
    },
    Sum(Var),
    MulConst {
        x: Var,
        factor: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation of a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    consumed: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
            dropout: None,
        }
    }

    /// Tape whose [`Tape::dropout`] calls zero activations with probability
    /// `rate`, drawing masks from a generator seeded with `seed`.
    pub fn with_dropout(rate: f64, seed: u64) -> Self {
        let mut tape = Self::new();
        if rate > 0.0 {
            tape.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Constant input. Gradients reaching it are still reported by
    /// [`Gradients::var`].
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nt(self.value(a), self.value(b));
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let (r, c) = self.value(terms[0].0).shape();
        let mut value = Matrix::zeros(r, c);
        for &(v, w) in &terms {
            let x = self.value(v);
            assert_eq!(x.shape(), (r, c), "weighted_sum shape mismatch");
            for (o, xv) in value.data_mut().iter_mut().zip(x.data()) {
                *o += w * xv;
            }
        }
        self.push(value, Op::WeightedSum(terms))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(a))
    }

    /// Row-wise RMS normalization with a learned `1×d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        assert_eq!(g.shape(), (1, xv.cols()), "rms_norm gain shape");
        let d = xv.cols();
        let mut value = Matrix::zeros(xv.rows(), d);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gv) in value.row_mut(r).iter_mut().zip(row).zip(g.data()) {
                *o = v * inv * gv;
            }
        }
        self.push(value, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols(a, start))
    }

    /// Row-wise softmax. Entries where `allowed` is false get probability
    /// exactly zero; `allowed` is row-major with the input's shape.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if let Some(m) = allowed {
            assert_eq!(m.len(), rows * cols, "softmax mask shape");
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut buf = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let ok = allowed.is_none_or(|m| m[r * cols + c]);
                buf[c] = if ok { x.get(r, c) } else { f64::NEG_INFINITY };
            }
            value.row_mut(r).copy_from_slice(&tensor::softmax(&buf));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// `Σ_t −log softmax(logits_t)[target_t]` as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per logit row");
        let mut probs = Matrix::zeros(x.rows(), x.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let lse = tensor::log_sum_exp(row);
            loss += lse - row[t];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Avg-max relevance for every head at once, as a `1×H` node.
    ///
    /// `q` and `k` hold all heads side by side (`rows × H·head_dim`); row
    /// masks mark valid (non-pad) positions.
    pub fn avg_max_heads(
        &mut self,
        q: Var,
        k: Var,
        head_dim: usize,
        scale: f64,
        q_mask: &[bool],
        k_mask: &[bool],
    ) -> Result<Var> {
        let qv = self.value(q);
        let kv = self.value(k);
        if qv.cols() != kv.cols() || !qv.cols().is_multiple_of(head_dim) {
            return Err(Error::Shape(format!(
                "avg-max over {:?} and {:?} with head_dim {head_dim}",
                qv.shape(),
                kv.shape()
            )));
        }
        let heads = qv.cols() / head_dim;
        let mut out = Matrix::zeros(1, heads);
        let mut picks = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qv.slice_cols(h * head_dim, head_dim);
            let kh = kv.slice_cols(h * head_dim, head_dim);
            let scores = scoring::scaled_scores(&qh, &kh, scale);
            let (r, pick) = scoring::avg_max_with_argmax(&scores, q_mask, k_mask)?;
            out.set(0, h, r);
            picks.push(pick);
        }
        Ok(self.push(
            out,
            Op::AvgMaxHeads {
                q,
                k,
                head_dim,
                scale,
                picks,
            },
        ))
    }

    /// `KL(target ‖ softmax(logits))` for a `1×n` row of logits; the target
    /// is a constant.
    pub fn kl_to_target(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != 1 || x.cols() != target.len() {
            return Err(Error::Shape(format!(
                "kl over logits {:?} and target of length {}",
                x.shape(),
                target.len()
            )));
        }
        let probs = tensor::softmax(x.data());
        let lse = tensor::log_sum_exp(x.data());
        let mut kl = 0.0;
        for (i, (&t, &z)) in target.iter().zip(x.data()).enumerate() {
            if t > 0.0 {
                if probs[i] == 0.0 {
                    return Err(Error::ZeroSupport { index: i });
                }
                kl += t * (t.ln() - (z - lse));
            }
        }
        Ok(self.push(
            Matrix::scalar(kl),
            Op::KlToTarget {
                logits,
                target: target.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ x ∘ weights` with constant weights. Injects a precomputed adjoint
    /// into the graph: its gradient with respect to `x` is `weights`.
    pub fn dot_const(&mut self, x: Var, weights: Matrix) -> Var {
        assert_eq!(self.value(x).shape(), weights.shape(), "dot_const shape");
        let s = tensor::dot(self.value(x).data(), weights.data());
        self.push(Matrix::scalar(s), Op::DotConst { x, weights })
    }

    /// Inverted dropout; the identity unless the tape was built with
    /// [`Tape::with_dropout`].
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let (r, c) = self.nodes[x.0].value.shape();
        let keep = 1.0 / (1.0 - rate);
        let data = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let factor = Matrix::from_vec(r, c, data);
        let mut value = self.value(x).clone();
        for (v, f) in value.data_mut().iter_mut().zip(factor.data()) {
            *v *= f;
        }
        self.push(value, Op::MulConst { x, factor })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Reverse pass from a scalar node. Fails on a second call.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward from a non-scalar node".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                let da = matmul(g, self.value(*b));
                let db = matmul_tn(g, self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let mut d = g.clone();
                    d.scale_assign(w);
                    accumulate(grads, v, d);
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), d);
                let mut dgain = Matrix::zeros(1, d);
                for r in 0..xv.rows() {
                    let inv = inv_rms[r];
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    // u = x·inv ; y = u ∘ gain
                    let mut proj = 0.0;
                    for c in 0..d {
                        dgain.data_mut()[c] += gr[c] * xr[c] * inv;
                        proj += gr[c] * gv.data()[c] * xr[c];
                    }
                    let coef = proj * inv * inv * inv / d as f64;
                    let dxr = dx.row_mut(r);
                    for c in 0..d {
                        dxr[c] = gr[c] * gv.data()[c] * inv - coef * xr[c];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    accumulate(grads, p, g.slice_rows(offset, rows));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    accumulate(grads, p, g.slice_cols(offset, cols));
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = tensor::dot(yr, gr);
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = g.item();
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= 1.0;
                }
                d.scale_assign(s);
                accumulate(grads, *logits, d);
            }
            Op::AvgMaxHeads {
                q,
                k,
                head_dim,
                scale,
                picks,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                for (h, pick) in picks.iter().enumerate() {
                    if pick.is_empty() {
                        continue;
                    }
                    let coef = g.get(0, h) * scale / pick.len() as f64;
                    let lo = h * head_dim;
                    for &(i, j) in pick {
                        for c in lo..lo + head_dim {
                            dq.data_mut()[i * qv.cols() + c] += coef * kv.get(j, c);
                            dk.data_mut()[j * kv.cols() + c] += coef * qv.get(i, c);
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
            }
            Op::KlToTarget {
                logits,
                target,
                probs,
            } => {
                // d KL / d z = softmax(z) − target
                let s = g.item();
                let d: Vec<f64> = probs
                    .iter()
                    .zip(target)
                    .map(|(p, t)| s * (p - t))
                    .collect();
                accumulate(grads, *logits, Matrix::from_vec(1, d.len(), d));
            }
            Op::DotConst { x, weights } => {
                let mut d = weights.clone();
                d.scale_assign(g.item());
                accumulate(grads, *x, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::MulConst { x, factor } => {
                let mut d = g.clone();
                for (v, f) in d.data_mut().iter_mut().zip(factor.data()) {
                    *v *= f;
                }
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    params: Vec<(usize, Var)>,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node, if it was reached.
    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(param id, gradient)` for every parameter the loss depends on.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Matrix)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.var(v).map(|g| (id, g)))
    }
}
