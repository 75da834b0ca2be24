use std::collections::BTreeMap;

use super::real::Real;
use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use super::NnError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param<F> {
    name: String,
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    m: Tensor<F>,
    v: Tensor<F>,
}

/// Named trainable tensors with Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params[id.0].grad.as_ref()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adam steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Parameters sorted by name, the order used on disk.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.by_name
            .iter()
            .map(|(n, id)| (n.as_str(), &self.params[id.0].value))
    }

    /// Stores gradients from a backward pass; parameters the loss never
    /// reached get explicit zeros. Existing gradients are accumulated.
    pub fn absorb(&mut self, tape: &Tape<F>, grads: &Gradients<F>) {
        let vars = tape.param_vars();
        for (i, p) in self.params.iter_mut().enumerate() {
            let (r, c) = p.value.shape();
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(r, c));
            if let Some(g) = vars.get(&ParamId(i)).and_then(|&v| grads.wrt(v)) {
                slot.add_assign(g);
            }
        }
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<F>) -> Result<(), NnError> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(NnError::Shape(format!("gradient for `{}`", p.name)));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One bias-corrected Adam update; clears the gradients afterwards.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) -> Result<(), NnError> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(NnError::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let c1 = F::one() - F::lit(cfg.beta1.powi(t));
        let c2 = F::one() - F::lit(cfg.beta2.powi(t));
        let (lr, eps) = (F::lit(lr), F::lit(cfg.eps));
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.m.data_mut().iter_mut())
                .zip(p.v.data_mut().iter_mut())
                .zip(g.data());
            for (((w, m), v), &gi) in it {
                *m = b1 * *m + (F::one() - b1) * gi;
                *v = b2 * *v + (F::one() - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copies values by name from `other`. Every parameter of `other` must
    /// exist here with the same shape; with `require_all`, the reverse must
    /// hold too. Returns the number of tensors copied.
    pub fn load_values<G: Real>(&mut self, other: &ParamStore<G>, require_all: bool) -> Result<usize, NnError> {
        for (name, t) in other.named() {
            let id = self.id(name)?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(NnError::Shape(format!(
                    "`{name}` is {}x{} here but {}x{} in the source",
                    p.value.rows(),
                    p.value.cols(),
                    t.rows(),
                    t.cols()
                )));
            }
            p.value = t.cast();
        }
        if require_all {
            if let Some(missing) = self.by_name.keys().find(|n| other.id(n).is_err()) {
                return Err(NnError::UnknownParameter(missing.clone()));
            }
        }
        Ok(other.len())
    }

    /// Same names and values in another element type; Adam state is reset.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast()).expect("names are unique");
        }
        out.step = self.step;
        out
    }
}
