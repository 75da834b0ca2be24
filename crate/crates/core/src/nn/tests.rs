use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn sum_gives_all_ones_gradient() {
    let mut tape = Tape::<f64>::new();
    let theta = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
    let loss = tape.sum(theta);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(theta).unwrap().data(), &[1.0; 4]);
}

#[test]
fn half_sum_of_squares_gives_theta() {
    let mut tape = Tape::<f64>::new();
    let t = Tensor::from_rows(&[&[1.0, -2.0, 0.25]]);
    let theta = tape.leaf(t.clone());
    let sq = tape.mul(theta, theta).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(theta).unwrap(), &t);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(2, 1));
    assert!(matches!(
        tape.backward(x),
        Err(NnError::NonScalarLoss { rows: 2, cols: 1 })
    ));
}

#[test]
fn unreachable_leaf_has_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::scalar(2.0));
    let b = tape.leaf(Tensor::scalar(3.0));
    let loss = tape.scale(a, 4.0);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[4.0]);
    assert!(g.wrt(b).is_none());
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::zeros(3, 4));
    let loss = tape.cross_entropy(l, &[(0, 1), (2, 3)]).unwrap();
    assert_close(tape.value(loss).data()[0], 4f64.ln(), 1e-12);
}

#[test]
fn cross_entropy_confident_correct_is_near_zero() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::from_rows(&[&[0.0, 80.0, 0.0]]));
    let loss = tape.cross_entropy(l, &[(0, 1)]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-30);
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut r = rng(11);
    let logits = normal_tensor::<f64, _>(5, 7, 2.0, &mut r);
    let pairs: Vec<(usize, usize)> = (0..5).map(|i| (i, r.random_range(0..7))).collect();
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, &pairs).unwrap();
    let oracle: f64 = pairs
        .iter()
        .map(|&(i, t)| {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[t]
        })
        .sum::<f64>()
        / 5.0;
    assert_close(tape.value(loss).data()[0], oracle, 1e-12);
}

#[test]
fn cross_entropy_without_positions_is_zero_with_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::full(2, 3, 1.0));
    let ce = tape.cross_entropy(l, &[]).unwrap();
    let other = tape.sum(l);
    let other = tape.scale(other, 0.0);
    let loss = tape.add(ce, other).unwrap();
    assert_eq!(tape.value(ce).data()[0], 0.0);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(l).unwrap().data().iter().all(|&v| v == 0.0));
}

/// `v = I` turns the attention output into the probability matrix itself.
fn attention_probs(
    q: &Tensor<f64>,
    mask: Option<Vec<bool>>,
    bias: Option<(Vec<usize>, Tensor<f64>)>,
) -> Tensor<f64> {
    let n = q.rows();
    // Queries and keys are zero-padded to width n so one head spans the
    // identity values.
    let padded = Tensor::from_fn(n, n, |i, j| if j < q.cols() { q.get(i, j) } else { 0.0 });
    let mut tape = Tape::new();
    let qv = tape.constant(padded.clone());
    let kv = tape.constant(padded);
    let v = tape.constant(Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 }));
    let mut seg = Segment::square(0, n);
    seg.mask = mask;
    let b = bias.map(|(idx, vals)| {
        seg.bias = Some(idx);
        tape.constant(vals)
    });
    let out = tape
        .attention(qv, kv, v, 1, Arc::new(AttnLayout::new(vec![seg])), b)
        .unwrap();
    tape.value(out).clone()
}

#[test]
fn masked_rows_are_distributions_over_allowed_positions() {
    let mut r = rng(3);
    let n = 6;
    for _ in 0..20 {
        let q = normal_tensor::<f64, _>(n, 3, 1.5, &mut r);
        let mut mask: Vec<bool> = (0..n * n).map(|_| r.random_bool(0.4)).collect();
        for i in 0..n {
            mask[i * n + i] = true;
        }
        let p = attention_probs(&q, Some(mask.clone()), None);
        for i in 0..n {
            assert_close(p.row(i).iter().sum(), 1.0, 1e-12);
            for j in 0..n {
                if !mask[i * n + j] {
                    assert_eq!(p.get(i, j), 0.0);
                } else {
                    assert!(p.get(i, j) > 0.0);
                }
            }
        }
    }
}

#[test]
fn softmax_is_shift_invariant_per_row() {
    let mut r = rng(4);
    let n = 5;
    let q = normal_tensor::<f64, _>(n, 3, 1.0, &mut r);
    let idx: Vec<usize> = (0..n * n).map(|c| c / n).collect();
    let base = attention_probs(&q, None, Some((idx.clone(), Tensor::zeros(1, n))));
    let shifts = Tensor::from_fn(1, n, |_, j| 10.0 * j as f64 - 17.0);
    let shifted = attention_probs(&q, None, Some((idx, shifts)));
    for (a, b) in base.data().iter().zip(shifted.data()) {
        assert_close(*a, *b, 1e-12);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut r = rng(9);
        let mut store = ParamStore::<f32>::new();
        let b = TransformerBlock::new(&mut store, "b", 16, 4, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(normal_tensor(7, 16, 1.0, &mut r));
        let y = b
            .forward_masked(&mut tape, &store, x, &AttentionMask::full(7))
            .unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn transformer_block_gradcheck() {
    let mut r = rng(21);
    let mut store = ParamStore::<f64>::new();
    let b = TransformerBlock::new(&mut store, "blk", 8, 2, &mut r).unwrap();
    let input = store.insert("input", normal_tensor(4, 8, 1.0, &mut r)).unwrap();
    let target = normal_tensor::<f64, _>(4, 8, 1.0, &mut r);
    let mask = AttentionMask::from_fn(4, |i, j| j <= i).unwrap();
    let report = gradcheck(
        &store,
        |tape, s| {
            let x = tape.param(s, input);
            let y = b.forward_masked(tape, s, x, &mask)?;
            let t = tape.constant(target.clone());
            let p = tape.mul(y, t)?;
            Ok(tape.sum(p))
        },
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < GRADCHECK_TOL, "{:?}", report.worst());
}

#[test]
fn composite_of_every_op_gradcheck() {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let x = store.insert("x", normal_tensor(6, 4, 1.0, &mut r)).unwrap();
    let w1 = store.insert("w1", normal_tensor(4, 4, 0.7, &mut r)).unwrap();
    let b1 = store.insert("b1", normal_tensor(1, 4, 0.3, &mut r)).unwrap();
    let gamma = store.insert("gamma", normal_tensor(1, 4, 1.0, &mut r)).unwrap();
    let beta = store.insert("beta", normal_tensor(1, 4, 0.2, &mut r)).unwrap();
    let emb = store.insert("emb", normal_tensor(5, 4, 1.0, &mut r)).unwrap();
    let bias = store.insert("bias", normal_tensor(1, 3, 0.5, &mut r)).unwrap();
    let mut seg_a = Segment::square(0, 3);
    seg_a.mask = Some(vec![true, false, true, true, true, false, false, true, true]);
    seg_a.bias = Some(vec![0, 1, 2, 2, 0, 1, 1, 2, 0]);
    let seg_b = Segment {
        q_start: 3,
        q_len: 3,
        k_start: 1,
        k_len: 4,
        mask: None,
        bias: None,
    };
    let layout = Arc::new(AttnLayout::new(vec![seg_a, seg_b]));
    let report = gradcheck(
        &store,
        |t, s| {
            let xv = t.param(s, x);
            let (pw1, pb1) = (t.param(s, w1), t.param(s, b1));
            let (pg, pbeta) = (t.param(s, gamma), t.param(s, beta));
            let h = t.matmul(xv, pw1)?;
            let h = t.add_row(h, pb1)?;
            let h = t.gelu(h);
            let h = t.layer_norm(h, pg, pbeta)?;
            let (pb, pw) = (t.param(s, bias), t.param(s, w1));
            let k = t.matmul(h, pw)?;
            let a = t.attention(h, k, xv, 2, layout.clone(), Some(pb))?;
            let a = t.add(a, h)?;
            let e = t.param(s, emb);
            let logits = t.matmul_nt(a, e)?;
            let ce = t.cross_entropy(logits, &[(0, 1), (2, 4), (5, 0)])?;
            let g = t.gather_rows(a, &[5, 0, 0, 3])?;
            let m = t.mean_rows(a, &[vec![0, 1, 2], vec![3, 4, 5]])?;
            let cat = t.concat_rows(&[g, m])?;
            let flat = t.reshape(cat, 3, 8)?;
            let back = t.reshape(flat, 6, 4)?;
            let n = t.l2_normalize_rows(back);
            let half = t.gather_rows(n, &[0, 1, 2])?;
            let other = t.gather_rows(n, &[3, 4, 5])?;
            let dots = t.row_dot(half, other)?;
            let hp = t.hinge_sq(dots, 0.3, false);
            let hn = t.hinge_sq(dots, -0.3, true);
            let hs = t.add(hp, hn)?;
            let hinge = t.mean(hs);
            let total = t.add(ce, hinge)?;
            Ok(total)
        },
        GradcheckOptions::default(),
    )
    .unwrap();
    for p in &report.params {
        assert!(p.max_abs_grad > 0.0, "{} got no gradient", p.name);
    }
    assert!(report.max_rel_err() < GRADCHECK_TOL, "{:?}", report.params);
}

#[test]
fn tied_matmul_nt_column_follows_embedding_row() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]));
    let e1 = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]));
    let e2 = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 3.0], &[1.0, 1.0]]));
    let l1 = tape.matmul_nt(h, e1).unwrap();
    let l2 = tape.matmul_nt(h, e2).unwrap();
    let (a, b) = (tape.value(l1), tape.value(l2));
    for r in 0..2 {
        assert_eq!(a.get(r, 0), b.get(r, 0));
        assert_ne!(a.get(r, 1), b.get(r, 1));
        assert_eq!(a.get(r, 2), b.get(r, 2));
    }
}

#[test]
fn gelu_matches_tanh_form() {
    let xs: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.125).collect();
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_vec(1, xs.len(), xs.clone()).unwrap());
    let y = t.gelu(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for (i, &v) in xs.iter().enumerate() {
        let expect = 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh());
        assert!((t.value(y).data()[i] - expect).abs() < 1e-12, "x = {v}");
    }
}
