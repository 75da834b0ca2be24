use crate::nn::{NnError, Real, Tape, Var};

pub const DEFAULT_EPS_POS: f64 = 0.9;
pub const DEFAULT_EPS_NEG: f64 = 0.2;

/// `max(eps_pos - sim_pos, 0)^2` plus the mean over negatives of
/// `max(sim_neg - eps_neg, 0)^2`.
pub fn hinge_loss(sim_pos: f64, sims_neg: &[f64], eps_pos: f64, eps_neg: f64) -> f64 {
    let pos = (eps_pos - sim_pos).max(0.0).powi(2);
    if sims_neg.is_empty() {
        return pos;
    }
    let neg: f64 = sims_neg.iter().map(|s| (s - eps_neg).max(0.0).powi(2)).sum();
    pos + neg / sims_neg.len() as f64
}

/// Tape version of [`hinge_loss`] over a `(1 + k) x 1` similarity column
/// whose first row is the positive.
pub fn hinge_loss_tape<F: Real>(
    tape: &mut Tape<F>,
    sims: Var,
    eps_pos: f64,
    eps_neg: f64,
) -> Result<Var, NnError> {
    let n = tape.value(sims).rows();
    let pos = tape.gather_rows(sims, &[0])?;
    let pos = tape.hinge_sq(pos, F::lit(eps_pos), false);
    let pos = tape.sum(pos);
    if n == 1 {
        return Ok(pos);
    }
    let idx: Vec<usize> = (1..n).collect();
    let neg = tape.gather_rows(sims, &idx)?;
    let neg = tape.hinge_sq(neg, F::lit(eps_neg), true);
    let neg = tape.mean(neg);
    tape.add(pos, neg)
}
