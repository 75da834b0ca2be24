//! Parameterised building blocks: linear maps, layer norm, multi-head
//! self-attention and pre-norm transformer blocks.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::attention::AttentionMask;
use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tape::{AttnLayout, Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Width multiplier of the position-wise MLP.
pub const MLP_RATIO: usize = 4;

pub fn normal_tensor<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| F::lit(dist.sample(rng)))
}

pub fn uniform_tensor<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut R,
) -> Tensor<F> {
    if bound == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_fn(rows, cols, |_, _| F::lit(dist.sample(rng)))
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.insert(format!("{name}.w"), uniform_tensor(fan_in, fan_out, bound, rng))?;
        let b = if bias {
            Some(store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var, NnError> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self, NnError> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(1, d, F::one()))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(1, d))?,
        })
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var, NnError> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Query, key, value and output projections of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Heads { heads, width: d });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
        })
    }

    /// Concatenated per-head outputs, before the output projection.
    pub fn heads_out<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        layout: Arc<AttnLayout>,
        bias: Option<Var>,
    ) -> Result<Var, NnError> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        tape.attention(q, k, v, self.heads, layout, bias)
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        layout: Arc<AttnLayout>,
        bias: Option<Var>,
    ) -> Result<Var, NnError> {
        let h = self.heads_out(tape, store, x, layout, bias)?;
        self.o.forward(tape, store, h)
    }
}

/// Pre-norm block: `h = x + Attn(LN(x))`, `y = h + MLP(LN(h))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, MLP_RATIO * d, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * d, d, true, rng)?,
        })
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        layout: Arc<AttnLayout>,
        bias: Option<Var>,
    ) -> Result<Var, NnError> {
        let n = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, layout, bias)?;
        let h = tape.add(x, a)?;
        let n = self.ln2.forward(tape, store, h)?;
        let m = self.fc1.forward(tape, store, n)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, store, m)?;
        tape.add(h, m)
    }

    /// Single-sequence convenience wrapper.
    pub fn forward_masked<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        mask: &AttentionMask,
    ) -> Result<Var, NnError> {
        let rows = tape.shape(x).0;
        let layout = Arc::new(AttnLayout::new(vec![mask.segment(0, rows)?]));
        self.forward(tape, store, x, layout, None)
    }
}
