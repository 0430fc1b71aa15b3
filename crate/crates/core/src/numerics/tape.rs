//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends one node
//! holding its value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products. Parameters enter the tape through
//! [`Tape::param`] and their gradients are reported by [`ParamId`].

use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm, softmax_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Probability clamp used by every log-likelihood term.
pub const PROB_EPS: f64 = 1e-12;
/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f64>,
    },
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Vec<f64>>,
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a parameter; `None` means it was not reachable (zero).
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a parameter, materializing zeros when unreachable.
    pub fn param_or_zero(&self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        self.param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.tensor(id).len()])
    }

    /// Gradient of a differentiable leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

fn mat(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, values).expect("op output shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input tensor; differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let g = tensor.requires_grad();
        self.push(tensor, Op::Leaf, g)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_grad(false), Op::Leaf, false)
    }

    /// Copy of `v`'s value with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Loads a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Loads a parameter as a constant: it takes part in the forward value but
    /// never receives gradient from this tape.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let v = self.constant(store.tensor(id).clone());
        self.frozen.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).values(),
            false,
            self.value(b).values(),
            false,
            &mut out,
            0.0,
        );
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let g = self.ng(x);
        self.push(mat(c, r, out), Op::Transpose(x), g)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(sa)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(mat(r, c, out), op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m x n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let b = self.value(bias).values();
        let out = self
            .value(x)
            .values()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(a, c)| a + c))
            .collect();
        let g = self.ng(x) || self.ng(bias);
        Ok(self.push(mat(m, n, out), Op::AddBias(x, bias), g))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).values().iter().map(|v| v * c).collect();
        let g = self.ng(x);
        self.push(mat(m, n, out), Op::Scale(x, c), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let g = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.values().iter().sum::<f64>() / t.len() as f64;
        let g = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), g)
    }

    /// Sum across columns: `[m x n] -> [m x 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .values()
            .chunks(n.max(1))
            .map(|r| r.iter().sum())
            .collect();
        let g = self.ng(x);
        self.push(mat(m, 1, out), Op::RowSum(x), g)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).values().iter().map(|&v| gelu(v)).collect();
        let g = self.ng(x);
        self.push(mat(m, n, out), Op::Gelu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .values()
            .iter()
            .map(|&v| super::sigmoid(v))
            .collect();
        let g = self.ng(x);
        self.push(mat(m, n, out), Op::Sigmoid(x), g)
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        self.softmax_impl(x, temperature, None)
    }

    /// Row-wise softmax over entries where `keep` is true; the rest are zero.
    /// Every row must keep at least one entry.
    pub fn masked_softmax_rows(
        &mut self,
        x: Var,
        temperature: f64,
        keep: Vec<bool>,
    ) -> Result<Var> {
        self.softmax_impl(x, temperature, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, temperature: f64, keep: Option<Vec<bool>>) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (m, n) = self.shape(x);
        if n == 0 {
            return Err(Error::Contract("softmax over an empty row".into()));
        }
        if let Some(k) = &keep {
            if k.len() != m * n {
                return Err(Error::dim("masked_softmax", &[m, n], &[k.len()]));
            }
            if k.chunks(n).any(|row| !row.iter().any(|&b| b)) {
                return Err(Error::Contract(
                    "softmax row with every entry masked".into(),
                ));
            }
        }
        let xv = self.value(x).values();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let kr = keep.as_ref().map(|k| &k[r * n..(r + 1) * n]);
            softmax_into(
                &xv[r * n..(r + 1) * n],
                temperature,
                kr,
                &mut out[r * n..(r + 1) * n],
            );
        }
        let g = self.ng(x);
        Ok(self.push(mat(m, n, out), Op::Softmax { x, temperature }, g))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim(
                "layer_norm",
                self.value(x).shape(),
                self.value(gamma).shape(),
            ));
        }
        let xv = self.value(x).values();
        let gv = self.value(gamma).values();
        let bv = self.value(beta).values();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = gv[j] * xh + bv[j];
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            mat(m, n, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Row gather: output row `r` is `src[idx[r]]`. Embedding lookup.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {m} rows"
            )));
        }
        let sv = self.value(src).values();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        let g = self.ng(src);
        Ok(self.push(
            mat(idx.len(), n, out),
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            g,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        for &p in parts {
            if self.shape(p).0 != m {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(m, n, out), Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            m += r;
            out.extend_from_slice(self.value(p).values());
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(m, n, out), Op::ConcatRows(parts.to_vec()), g))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let g = self.ng(x);
        Ok(self.push(mat(m, len, out), Op::SliceCols { x, start }, g))
    }

    /// Weighted binary cross-entropy on probabilities:
    /// `-sum_i w_i [t_i ln p_i + (1 - t_i) ln(1 - p_i)]`, with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`. Uniform weights `1/K` give the mean BCE.
    pub fn bce(&mut self, p: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::dim("bce", self.value(p).shape(), &[targets.len()]));
        }
        let loss = self
            .value(p)
            .values()
            .iter()
            .zip(targets.iter().zip(weights))
            .map(|(&pi, (&t, &w))| {
                let q = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -w * (t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let g = self.ng(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            g,
        ))
    }

    /// Multi-head scaled dot-product attention restricted to contiguous row
    /// segments: rows of one segment attend only to rows of the same segment.
    /// `q`, `k`, `v` are `[T x d]`; `d` must divide evenly into `heads`.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (t, d) = self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered > t || segments.iter().any(|&(s, l)| l == 0 || s + l > t) {
            return Err(Error::Contract("attention segments out of range".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).values(),
            self.value(k).values(),
            self.value(v).values(),
        );
        let mut out = vec![0.0; t * d];
        let mut probs =
            Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let qh = head_block(qv, d, start, len, h * dh, dh);
                let kh = head_block(kv, d, start, len, h * dh, dh);
                let vh = head_block(vv, d, start, len, h * dh, dh);
                let mut s = vec![0.0; len * len];
                gemm(len, dh, len, &qh, false, &kh, true, &mut s, 0.0);
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let keep: Option<Vec<bool>> =
                        causal.then(|| (0..len).map(|j| j <= i).collect());
                    softmax_into(
                        &s[i * len..(i + 1) * len],
                        1.0 / scale,
                        keep.as_deref(),
                        &mut p[i * len..(i + 1) * len],
                    );
                }
                let mut oh = vec![0.0; len * dh];
                gemm(len, len, dh, &p, false, &vh, false, &mut oh, 0.0);
                for i in 0..len {
                    out[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh]
                        .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
                probs.extend_from_slice(&p);
            }
        }
        let g = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            mat(t, d, out),
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            g,
        ))
    }

    /// Elementwise product with a fixed factor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let (m, n) = self.shape(x);
        if factor.len() != m * n {
            return Err(Error::dim("mul_const", &[m, n], &[factor.len()]));
        }
        let out = self
            .value(x)
            .values()
            .iter()
            .zip(&factor)
            .map(|(a, b)| a * b)
            .collect();
        let g = self.ng(x);
        Ok(self.push(mat(m, n, out), Op::MulConst { x, factor }, g))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            match node.op {
                Op::Param(id) => {
                    result.params.insert(id, g);
                }
                Op::Leaf => {
                    result.leaves.insert(Var(i), g);
                }
                _ => {}
            }
        }
        Ok(result)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        let (rows, cols) = (node.value.rows(), node.value.cols());

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                acc(*a, &mut |da| {
                    gemm(m, n, k, g, false, val(*b).values(), true, da, 1.0)
                });
                acc(*b, &mut |db| {
                    gemm(k, m, n, val(*a).values(), true, g, false, db, 1.0)
                });
            }
            Op::Transpose(x) => acc(*x, &mut |dx| {
                // node is [cols x rows] of the input's [rows' x cols'] = [cols x rows]
                for i in 0..rows {
                    for j in 0..cols {
                        dx[j * rows + i] += g[i * cols + j];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((x, y), z) in d.iter_mut().zip(g).zip(val(*b).values()) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, y), z) in d.iter_mut().zip(g).zip(val(*a).values()) {
                        *x += y * z;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks(cols.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::RowSum(x) => {
                let n = val(*x).cols();
                acc(*x, &mut |d| {
                    for (r, row) in d.chunks_mut(n.max(1)).enumerate() {
                        row.iter_mut().for_each(|a| *a += g[r]);
                    }
                });
            }
            Op::Gelu(x) => acc(*x, &mut |d| {
                for ((a, b), &xv) in d.iter_mut().zip(g).zip(val(*x).values()) {
                    *a += b * gelu_grad(xv);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((a, b), &y) in d.iter_mut().zip(g).zip(node.value.values()) {
                    *a += b * y * (1.0 - y);
                }
            }),
            Op::Softmax { x, temperature, .. } => acc(*x, &mut |d| {
                let y = node.value.values();
                for r in 0..rows {
                    let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] += ys[j] * (gs[j] - dot) / temperature;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma).values();
                acc(*gamma, &mut |d| {
                    for r in 0..rows {
                        for j in 0..cols {
                            d[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
                acc(*x, &mut |d| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..cols {
                            let dxh = g[r * cols + j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * cols + j];
                        }
                        for j in 0..cols {
                            let dxh = g[r * cols + j] * gam[j];
                            d[r * cols + j] +=
                                inv_std[r] / n * (n * dxh - s1 - xhat[r * cols + j] * s2);
                        }
                    }
                });
            }
            Op::Gather { src, idx } => acc(*src, &mut |d| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(
                        &mut d[i * cols..(i + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * cols + off..r * cols + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * n + start..r * n + start + cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                });
            }
            Op::Bce {
                p,
                targets,
                weights,
            } => acc(*p, &mut |d| {
                for (i, &pi) in val(*p).values().iter().enumerate() {
                    if pi > PROB_EPS && pi < 1.0 - PROB_EPS {
                        let t = targets[i];
                        d[i] += -g[0] * weights[i] * (t / pi - (1.0 - t) / (1.0 - pi));
                    }
                }
            }),
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let d = cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q).values(), val(*k).values(), val(*v).values());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut off = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[off..off + len * len];
                        off += len * len;
                        let qh = head_block(qv, d, start, len, h * dh, dh);
                        let kh = head_block(kv, d, start, len, h * dh, dh);
                        let vh = head_block(vv, d, start, len, h * dh, dh);
                        let go = head_block(g, d, start, len, h * dh, dh);
                        let mut dvh = vec![0.0; len * dh];
                        gemm(len, len, dh, p, true, &go, false, &mut dvh, 0.0);
                        let mut dp = vec![0.0; len * len];
                        gemm(len, dh, len, &go, false, &vh, true, &mut dp, 0.0);
                        let mut ds = vec![0.0; len * len];
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &dp[i * len..(i + 1) * len];
                            let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                ds[i * len + j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        let mut dqh = vec![0.0; len * dh];
                        gemm(len, len, dh, &ds, false, &kh, false, &mut dqh, 0.0);
                        let mut dkh = vec![0.0; len * dh];
                        gemm(len, len, dh, &ds, true, &qh, false, &mut dkh, 0.0);
                        scatter_head(&mut dq, &dqh, d, start, len, h * dh, dh);
                        scatter_head(&mut dk, &dkh, d, start, len, h * dh, dh);
                        scatter_head(&mut dv, &dvh, d, start, len, h * dh, dh);
                    }
                }
                acc(*q, &mut |x| add_into(x, &dq));
                acc(*k, &mut |x| add_into(x, &dk));
                acc(*v, &mut |x| add_into(x, &dv));
            }
            Op::MulConst { x, factor } => acc(*x, &mut |d| {
                for ((a, b), f) in d.iter_mut().zip(g).zip(factor) {
                    *a += b * f;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn head_block(x: &[f64], d: usize, start: usize, len: usize, col: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * dh);
    for i in start..start + len {
        out.extend_from_slice(&x[i * d + col..i * d + col + dh]);
    }
    out
}

fn scatter_head(
    dst: &mut [f64],
    src: &[f64],
    d: usize,
    start: usize,
    len: usize,
    col: usize,
    dh: usize,
) {
    for i in 0..len {
        add_into(
            &mut dst[(start + i) * d + col..(start + i) * d + col + dh],
            &src[i * dh..(i + 1) * dh],
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad(true));
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.3, -0.7])).unwrap();
        let other = store.add("unused", Tensor::vector(vec![1.0])).unwrap();
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let zero = t.scale(w, 0.0);
        let s = t.sum(zero);
        let y = t.sigmoid(s);
        let g = t.backward(y).unwrap();
        assert_eq!(g.param_or_zero(&store, id), vec![0.0, 0.0]);
        assert_eq!(g.param_or_zero(&store, other), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad(true));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.5])).unwrap();
        let mut t = Tape::new();
        let w = t.frozen_param(&store, id);
        let x = t.leaf(Tensor::vector(vec![2.0]).with_grad(true));
        let p = t.mul(w, x).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert!(g.param(id).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[0.5]);
    }

    #[test]
    fn masked_attention_ignores_rows_outside_segment() {
        // Two segments; changing the second must not move the first's output.
        let base: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.3).sin()).collect();
        let run = |vals: &[f64]| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::matrix(5, 4, vals.to_vec()).unwrap());
            let o = t
                .segment_attention(x, x, x, &[(0, 2), (2, 3)], 2, false)
                .unwrap();
            t.value(o).values()[..8].to_vec()
        };
        let mut changed = base.clone();
        changed[12] += 1.0;
        assert_eq!(run(&base), run(&changed));
    }
}
