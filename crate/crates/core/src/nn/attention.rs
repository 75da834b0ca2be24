use std::sync::Arc;

use super::layers::SelfAttention;
use super::params::ParamStore;
use super::real::Real;
use super::tape::{AttnLayout, Segment, Tape, Var};
use super::NnError;

/// Square allow-list: `allowed(i, j)` means position `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self, NnError> {
        if allowed.len() != n * n {
            return Err(NnError::Shape(format!(
                "attention mask of {} cells is not {n}x{n}",
                allowed.len()
            )));
        }
        for row in 0..n {
            if !allowed[row * n..(row + 1) * n].iter().any(|&a| a) {
                return Err(NnError::EmptyMaskRow { row });
            }
        }
        Ok(Self { n, allowed })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self, NnError> {
        let allowed = (0..n * n).map(|c| f(c / n, c % n)).collect();
        Self::new(n, allowed)
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            allowed: (0..n * n).map(|c| c / n == c % n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn cells(&self) -> &[bool] {
        &self.allowed
    }

    /// This mask as a self-attention segment starting at row `start`.
    pub fn segment(&self, start: usize, rows: usize) -> Result<Segment, NnError> {
        if rows != self.n {
            return Err(NnError::Shape(format!(
                "{}x{} mask for {rows} rows",
                self.n, self.n
            )));
        }
        let mut seg = Segment::square(start, self.n);
        if !self.is_full() {
            seg.mask = Some(self.allowed.clone());
        }
        Ok(seg)
    }
}

/// Per head `O_i = softmax(Q_i K_i^T / sqrt(d_h) + mask) V_i`, returned as the
/// concatenation of all heads (no output projection).
pub fn multihead_self_attention<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    h: Var,
    params: &SelfAttention,
    mask: &AttentionMask,
) -> Result<Var, NnError> {
    let (rows, d) = tape.shape(h);
    if params.heads == 0 || d % params.heads != 0 {
        return Err(NnError::Heads {
            heads: params.heads,
            width: d,
        });
    }
    let layout = Arc::new(AttnLayout::new(vec![mask.segment(0, rows)?]));
    params.heads_out(tape, store, h, layout, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::normal_tensor;
    use crate::nn::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamStore<f64>, SelfAttention, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = SelfAttention::new(&mut store, "att", d, heads, &mut rng).unwrap();
        for l in [a.q, a.k, a.v] {
            let b = l.b.unwrap();
            *store.value_mut(b) = normal_tensor(1, d, 0.5, &mut rng);
        }
        (store, a, rng)
    }

    fn run(store: &ParamStore<f64>, a: &SelfAttention, x: &Tensor<f64>, mask: &AttentionMask) -> Tensor<f64> {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let out = multihead_self_attention(&mut tape, store, h, a, mask).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let (store, a, _) = setup(8, 2, 1);
        let row: &[f64] = &[0.3, -1.0, 0.2, 0.5, 0.9, -0.4, 0.0, 1.1];
        let x = Tensor::from_rows(&[row, row]);
        let y = run(&store, &a, &x, &AttentionMask::full(2));
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn identity_mask_returns_values() {
        let (store, a, mut rng) = setup(8, 4, 2);
        let x = normal_tensor(3, 8, 1.0, &mut rng);
        let y = run(&store, &a, &x, &AttentionMask::identity(3));
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let v = a.v.forward(&mut tape, &store, h).unwrap();
        let v = tape.value(v);
        for (p, q) in y.data().iter().zip(v.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_single_head() {
        // d = 2, h = 1, W_q = I, W_k = 2I, W_v = [[1, 2], [0, 1]], zero biases.
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = SelfAttention::new(&mut store, "att", 2, 1, &mut rng).unwrap();
        *store.value_mut(a.q.w) = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        *store.value_mut(a.k.w) = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]);
        *store.value_mut(a.v.w) = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let x = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let y = run(&store, &a, &x, &AttentionMask::full(3));

        let rows = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let values: Vec<[f64; 2]> = rows.iter().map(|r| [r[0], 2.0 * r[0] + r[1]]).collect();
        for (i, qi) in rows.iter().enumerate() {
            let logits: Vec<f64> = rows
                .iter()
                .map(|kj| (qi[0] * 2.0 * kj[0] + qi[1] * 2.0 * kj[1]) / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let want: f64 = logits
                    .iter()
                    .zip(&values)
                    .map(|(l, v)| l.exp() / z * v[c])
                    .sum();
                assert!((y.get(i, c) - want).abs() < 1e-12, "row {i} col {c}");
            }
        }
    }

    #[test]
    fn full_mask_equals_unmasked_exactly() {
        let (store, a, mut rng) = setup(8, 2, 5);
        let x = normal_tensor(4, 8, 1.0, &mut rng);
        let masked = {
            let mut tape = Tape::new();
            let h = tape.constant(x.clone());
            let q = a.q.forward(&mut tape, &store, h).unwrap();
            let k = a.k.forward(&mut tape, &store, h).unwrap();
            let v = a.v.forward(&mut tape, &store, h).unwrap();
            let mut seg = Segment::square(0, 4);
            seg.mask = Some(vec![true; 16]);
            let out = tape
                .attention(q, k, v, 2, Arc::new(AttnLayout::new(vec![seg])), None)
                .unwrap();
            tape.value(out).clone()
        };
        assert_eq!(masked, run(&store, &a, &x, &AttentionMask::full(4)));
    }

    #[test]
    fn empty_row_rejected() {
        let err = AttentionMask::from_fn(3, |i, j| i != 1 && i == j).unwrap_err();
        assert!(matches!(err, NnError::EmptyMaskRow { row: 1 }));
    }

    #[test]
    fn heads_not_dividing_width_rejected() {
        let (store, a, mut rng) = setup(8, 2, 6);
        let mut bad = a;
        bad.heads = 3;
        let mut tape = Tape::new();
        let h = tape.constant(normal_tensor(2, 8, 1.0, &mut rng));
        assert!(matches!(
            multihead_self_attention(&mut tape, &store, h, &bad, &AttentionMask::full(2)),
            Err(NnError::Heads { .. })
        ));
    }
}
