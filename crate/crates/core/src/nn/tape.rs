//! Reverse-mode tape. Every op records its inputs and whatever cache its
//! backward rule needs; `backward` walks the tape once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::real::{gemm, Real, View, ViewMut};
use super::tensor::Tensor;
use super::NnError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of a fused attention call: query rows
/// `q_start..q_start + q_len` attend over key rows `k_start..k_start + k_len`.
#[derive(Debug, Clone)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Row-major `q_len x k_len` allow-list; `None` allows everything.
    pub mask: Option<Vec<bool>>,
    /// Row-major `q_len x k_len` indices into the bias vector.
    pub bias: Option<Vec<usize>>,
}

impl Segment {
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            mask: None,
            bias: None,
        }
    }

    fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i * self.k_len + j])
    }
}

/// A batch of independent attention problems laid out in one matrix.
#[derive(Debug, Clone, Default)]
pub struct AttnLayout {
    pub segments: Vec<Segment>,
}

impl AttnLayout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    fn validate(&self, nq: usize, nk: usize, nbias: Option<usize>) -> Result<(), NnError> {
        let mut covered = vec![false; nq];
        for (s, seg) in self.segments.iter().enumerate() {
            if seg.q_start + seg.q_len > nq || seg.k_start + seg.k_len > nk {
                return Err(NnError::Shape(format!(
                    "attention segment {s} exceeds {nq} query / {nk} key rows"
                )));
            }
            for c in &mut covered[seg.q_start..seg.q_start + seg.q_len] {
                if *c {
                    return Err(NnError::Shape(format!(
                        "attention segment {s} overlaps an earlier segment"
                    )));
                }
                *c = true;
            }
            let cells = seg.q_len * seg.k_len;
            if let Some(mask) = &seg.mask {
                if mask.len() != cells {
                    return Err(NnError::Shape(format!("attention segment {s} mask size")));
                }
                for i in 0..seg.q_len {
                    if !mask[i * seg.k_len..(i + 1) * seg.k_len].iter().any(|&a| a) {
                        return Err(NnError::EmptyMaskRow { row: seg.q_start + i });
                    }
                }
            } else if seg.k_len == 0 && seg.q_len > 0 {
                return Err(NnError::EmptyMaskRow { row: seg.q_start });
            }
            match (&seg.bias, nbias) {
                (None, _) => {}
                (Some(_), None) => {
                    return Err(NnError::Shape(format!(
                        "attention segment {s} has bias indices but no bias vector"
                    )))
                }
                (Some(b), Some(n)) => {
                    if b.len() != cells || b.iter().any(|&i| i >= n) {
                        return Err(NnError::Shape(format!(
                            "attention segment {s} bias indices invalid for {n} biases"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<Vec<F>>,
    },
    Combine {
        x: Var,
        rows: Arc<Vec<Vec<(usize, F)>>>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        pairs: Vec<(usize, usize)>,
        probs: Vec<Vec<F>>,
    },
    Sum(Var),
    Mean(Var),
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    RowDot(Var, Var),
    HingeSq {
        x: Var,
        threshold: F,
        above: bool,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A recorded computation. Tapes are cheap to create; build one per step.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> NnError {
    NnError::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

// 0.5 * (1 + tanh(u)) == sigmoid(2u), which needs one exp instead of a tanh.
fn gelu_gate<F: Real>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + F::lit(0.044715) * x * x * x);
    let s = F::one() / (F::one() + (F::lit(-2.0) * u).exp());
    let du = c * (F::one() + F::lit(3.0 * 0.044715) * x * x);
    (s, du)
}

fn gelu<F: Real>(x: F) -> F {
    x * gelu_gate(x).0
}

fn gelu_grad<F: Real>(x: F) -> F {
    let (s, du) = gelu_gate(x);
    s + F::lit(2.0) * x * s * (F::one() - s) * du
}

/// In-place numerically stable softmax over the allowed entries of a row.
fn softmax_row<F: Real>(row: &mut [F]) {
    let max = row
        .iter()
        .copied()
        .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = if *v == F::neg_infinity() {
            F::zero()
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that does receive a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The tape variable of a stored parameter; recorded once per tape.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> &HashMap<ParamId, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(F::one(), av.view(), bv.view(), F::zero(), out.view_mut());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(F::one(), av.view(), bv.view().t(), F::zero(), out.view_mut());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        let bias = rv.data();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with `1 x n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let n = xv.cols();
        for p in [gamma, beta] {
            if self.value(p).shape() != (1, n) {
                return Err(shape_err("layer_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let nf = F::lit(n as f64);
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut out = Tensor::zeros(xv.rows(), n);
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + F::lit(LAYER_NORM_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Fused multi-head scaled dot-product attention over every segment of
    /// `layout`. `q`, `k`, `v` are already projected; heads split the columns.
    /// Query rows outside every segment come out as zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        bias: Option<Var>,
    ) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Heads { heads, width: d });
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(shape_err("attention", kv.shape(), vv.shape()));
        }
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = bv {
            if b.rows() != 1 {
                return Err(NnError::Shape("attention bias must be a row".into()));
            }
        }
        layout.validate(qv.rows(), kv.rows(), bv.map(|b| b.cols()))?;
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(layout.segments.len() * heads);
        for seg in &layout.segments {
            let (lq, lk) = (seg.q_len, seg.k_len);
            for h in 0..heads {
                let mut s = vec![F::zero(); lq * lk];
                gemm(
                    scale,
                    View::block(qv.data(), seg.q_start * d + h * dh, lq, dh, d),
                    View::block(kv.data(), seg.k_start * d + h * dh, lk, dh, d).t(),
                    F::zero(),
                    ViewMut::block(&mut s, 0, lq, lk, lk),
                );
                for i in 0..lq {
                    for j in 0..lk {
                        let cell = &mut s[i * lk + j];
                        if !seg.allowed(i, j) {
                            *cell = F::neg_infinity();
                        } else if let (Some(idx), Some(b)) = (&seg.bias, bv) {
                            *cell += b.data()[idx[i * lk + j]];
                        }
                    }
                    softmax_row(&mut s[i * lk..(i + 1) * lk]);
                }
                gemm(
                    F::one(),
                    View::block(&s, 0, lq, lk, lk),
                    View::block(vv.data(), seg.k_start * d + h * dh, lk, dh, d),
                    F::zero(),
                    ViewMut::block(out.data_mut(), seg.q_start * d + h * dh, lq, dh, d),
                );
                probs.push(s);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Row `r` of the output is `sum_i w * x[i]` over `rows[r]`.
    pub fn combine_rows(
        &mut self,
        x: Var,
        rows: Arc<Vec<Vec<(usize, F)>>>,
    ) -> Result<Var, NnError> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows.len(), xv.cols());
        for (r, terms) in rows.iter().enumerate() {
            for &(i, w) in terms {
                if i >= xv.rows() {
                    return Err(NnError::Shape(format!(
                        "row {i} out of range for {} rows",
                        xv.rows()
                    )));
                }
                for (o, &s) in out.row_mut(r).iter_mut().zip(xv.row(i)) {
                    *o += w * s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Combine { x, rows }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NnError> {
        let rows = idx.iter().map(|&i| vec![(i, F::one())]).collect();
        self.combine_rows(x, Arc::new(rows))
    }

    /// Each output row is the mean of the listed input rows; an empty group
    /// yields a zero row.
    pub fn mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var, NnError> {
        let rows = groups
            .iter()
            .map(|g| {
                let w = F::one() / F::lit(g.len().max(1) as f64);
                g.iter().map(|&i| (i, w)).collect()
            })
            .collect();
        self.combine_rows(x, Arc::new(rows))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", (rows, cols), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean negative log-softmax of `target` at each `(row, target)` pair.
    /// No pairs gives 0 with a zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, pairs: &[(usize, usize)]) -> Result<Var, NnError> {
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(pairs.len());
        let mut total = F::zero();
        for &(r, t) in pairs {
            if r >= lv.rows() || t >= lv.cols() {
                return Err(NnError::Shape(format!(
                    "cross-entropy position ({r}, {t}) outside {}x{} logits",
                    lv.rows(),
                    lv.cols()
                )));
            }
            let mut p = lv.row(r).to_vec();
            softmax_row(&mut p);
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            total += lse - row[t];
            probs.push(p);
        }
        let loss = if pairs.is_empty() {
            F::zero()
        } else {
            total / F::lit(pairs.len() as f64)
        };
        let rg = self.rg(logits) && !pairs.is_empty();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                pairs: pairs.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1);
        let out = Tensor::scalar(xv.sum() / F::lit(n as f64));
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv
                .row(r)
                .iter()
                .map(|&v| v * v)
                .sum::<F>()
                .sqrt()
                .max(F::lit(1e-12));
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Row-wise dot products as an `n x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("row_dot", av.shape(), bv.shape()));
        }
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let out = Tensor::from_vec(av.rows(), 1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    /// Elementwise squared hinge: `max(x - t, 0)^2` when `above`, otherwise
    /// `max(t - x, 0)^2`.
    pub fn hinge_sq(&mut self, x: Var, threshold: F, above: bool) -> Var {
        let out = self.value(x).map(|v| {
            let m = if above { v - threshold } else { threshold - v };
            let m = m.max(F::zero());
            m * m
        });
        let rg = self.rg(x);
        self.push(
            out,
            Op::HingeSq {
                x,
                threshold,
                above,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NnError> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(NnError::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> Option<&'g mut Tensor<F>> {
        if !self.rg(v) {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.buf(grads, a) {
                    gemm(F::one(), g.view(), bv.view().t(), F::one(), ga.view_mut());
                }
                if let Some(gb) = self.buf(grads, b) {
                    gemm(F::one(), av.view().t(), g.view(), F::one(), gb.view_mut());
                }
            }
            &Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.buf(grads, a) {
                    gemm(F::one(), g.view(), bv.view(), F::one(), ga.view_mut());
                }
                if let Some(gb) = self.buf(grads, b) {
                    gemm(F::one(), g.view().t(), av.view(), F::one(), gb.view_mut());
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.buf(grads, v) {
                        gv.add_assign(g);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = self.buf(grads, a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = self.buf(grads, row) {
                    for r in 0..g.rows() {
                        for (o, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.buf(grads, a) {
                    for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.buf(grads, a) {
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += x * y;
                    }
                }
            }
            &Op::Gelu(a) => {
                let av = self.value(a);
                if let Some(ga) = self.buf(grads, a) {
                    for ((o, &x), &gy) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        *o += gy * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let n = xhat.cols();
                if let Some(gg) = self.buf(grads, *gamma) {
                    for r in 0..g.rows() {
                        for c in 0..n {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let nf = F::lit(n as f64);
                    let mut dxhat = vec![F::zero(); n];
                    for r in 0..g.rows() {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for c in 0..n {
                            dxhat[c] = g.get(r, c) * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xhat.get(r, c);
                        }
                        let k = rstd[r] / nf;
                        for c in 0..n {
                            let d = k * (nf * dxhat[c] - s1 - xhat.get(r, c) * s2);
                            gx.data_mut()[r * n + c] += d;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                layout,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                *bias,
                *heads,
                layout,
                probs,
                g,
                grads,
            ),
            Op::Combine { x, rows } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let cols = g.cols();
                    for (r, terms) in rows.iter().enumerate() {
                        let gr = g.row(r);
                        for &(src, w) in terms {
                            let dst = &mut gx.data_mut()[src * cols..(src + 1) * cols];
                            for (o, &x) in dst.iter_mut().zip(gr) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.buf(grads, p) {
                        for (o, &x) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len])
                        {
                            *o += x;
                        }
                    }
                    offset += len;
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.buf(grads, x) {
                    for (o, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                pairs,
                probs,
            } => {
                let upstream = g.data()[0] / F::lit(pairs.len().max(1) as f64);
                if let Some(gl) = self.buf(grads, *logits) {
                    let cols = gl.cols();
                    for (&(r, t), p) in pairs.iter().zip(probs) {
                        let dst = &mut gl.data_mut()[r * cols..(r + 1) * cols];
                        for (o, &pv) in dst.iter_mut().zip(p) {
                            *o += upstream * pv;
                        }
                        dst[t] -= upstream;
                    }
                }
            }
            &Op::Sum(x) => {
                let up = g.data()[0];
                if let Some(gx) = self.buf(grads, x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += up);
                }
            }
            &Op::Mean(x) => {
                let up = g.data()[0] / F::lit(self.value(x).len().max(1) as f64);
                if let Some(gx) = self.buf(grads, x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += up);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &self.nodes[i].value;
                if let Some(gx) = self.buf(grads, *x) {
                    let cols = y.cols();
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                }
            }
            &Op::RowDot(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let cols = av.cols();
                if let Some(ga) = self.buf(grads, a) {
                    for r in 0..av.rows() {
                        let up = g.data()[r];
                        for (o, &y) in ga.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(bv.row(r)) {
                            *o += up * y;
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    for r in 0..av.rows() {
                        let up = g.data()[r];
                        for (o, &y) in gb.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(av.row(r)) {
                            *o += up * y;
                        }
                    }
                }
            }
            &Op::HingeSq {
                x,
                threshold,
                above,
            } => {
                let xv = self.value(x);
                if let Some(gx) = self.buf(grads, x) {
                    for ((o, &v), &up) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        let two = F::lit(2.0);
                        let d = if above {
                            two * (v - threshold).max(F::zero())
                        } else {
                            -two * (threshold - v).max(F::zero())
                        };
                        *o += up * d;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        bias: Option<Var>,
        heads: usize,
        layout: &AttnLayout,
        probs: &[Vec<F>],
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        // Local buffers keep this correct even if q, k and v share a node.
        let mut dq = Tensor::zeros(qv.rows(), d);
        let mut dk = Tensor::zeros(kv.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        let mut dbias = bias.map(|b| Tensor::<F>::zeros(1, self.value(b).cols()));
        for (s_idx, seg) in layout.segments.iter().enumerate() {
            let (lq, lk) = (seg.q_len, seg.k_len);
            for h in 0..heads {
                let p = &probs[s_idx * heads + h];
                let q_off = seg.q_start * d + h * dh;
                let k_off = seg.k_start * d + h * dh;
                let g_s = View::block(g.data(), q_off, lq, dh, d);
                let mut dp = vec![F::zero(); lq * lk];
                gemm(
                    F::one(),
                    g_s,
                    View::block(vv.data(), k_off, lk, dh, d).t(),
                    F::zero(),
                    ViewMut::block(&mut dp, 0, lq, lk, lk),
                );
                gemm(
                    F::one(),
                    View::block(p, 0, lq, lk, lk).t(),
                    g_s,
                    F::one(),
                    ViewMut::block(dv.data_mut(), k_off, lk, dh, d),
                );
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut dp[i * lk..(i + 1) * lk];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..lk {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    if let (Some(idx), Some(db)) = (&seg.bias, dbias.as_mut()) {
                        for j in 0..lk {
                            if seg.allowed(i, j) {
                                db.data_mut()[idx[i * lk + j]] += dr[j];
                            }
                        }
                    }
                }
                let ds = View::block(&dp, 0, lq, lk, lk);
                gemm(
                    scale,
                    ds,
                    View::block(kv.data(), k_off, lk, dh, d),
                    F::one(),
                    ViewMut::block(dq.data_mut(), q_off, lq, dh, d),
                );
                gemm(
                    scale,
                    ds.t(),
                    View::block(qv.data(), q_off, lq, dh, d),
                    F::one(),
                    ViewMut::block(dk.data_mut(), k_off, lk, dh, d),
                );
            }
        }
        for (var, t) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.buf(grads, var) {
                buf.add_assign(&t);
            }
        }
        if let (Some(b), Some(db)) = (bias, dbias) {
            if let Some(buf) = self.buf(grads, b) {
                buf.add_assign(&db);
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients of every leaf that requires one.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf; `None` when the leaf is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
