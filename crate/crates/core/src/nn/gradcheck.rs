//! Central finite-difference check of tape gradients (64-bit only).

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::NnError;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: GRADCHECK_STEP,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss` against central differences for
/// every parameter in `store`.
pub fn gradcheck<L>(
    store: &ParamStore<f64>,
    loss: L,
    opts: GradcheckOptions,
) -> Result<GradcheckReport, NnError>
where
    L: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, NnError>,
{
    let mut work = store.clone();
    work.clear_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &work)?;
    let grads = tape.backward(l)?;
    work.absorb(&tape, &grads);
    let analytic: Vec<_> = work
        .ids()
        .map(|id| work.grad(id).expect("absorbed").clone())
        .collect();
    work.clear_grads();

    let eval = |s: &ParamStore<f64>| -> Result<f64, NnError> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        Ok(t.value(v).data()[0])
    };
    let mut report = GradcheckReport { params: Vec::new() };
    let ids: Vec<_> = work.ids().collect();
    for (id, a) in ids.into_iter().zip(analytic) {
        let n = a.len();
        let stride = opts.max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut check = ParamCheck {
            name: work.name(id).to_string(),
            entries: 0,
            max_rel_err: 0.0,
            max_abs_grad: a.max_abs(),
        };
        for i in (0..n).step_by(stride) {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(a.data()[i], numeric, opts.floor);
            check.max_rel_err = check.max_rel_err.max(err);
            check.entries += 1;
        }
        report.params.push(check);
    }
    Ok(report)
}
