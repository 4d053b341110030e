use std::rc::Rc;

use direcgnn_core::gradcheck::{compare_gradients, grad_check, analytic_gradients, numeric_gradients};
use direcgnn_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Weighted sum so that every output element gets a distinct adjoint.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> direcgnn_core::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn check<F>(f: F, inputs: &[Tensor])
where
    F: Fn(&mut Tape, &[Var]) -> direcgnn_core::Result<Var>,
{
    let report = grad_check(f, inputs, EPS, TOL).unwrap();
    assert!(report.passed, "max rel errors {:?}", report.max_rel_err);
}

#[test]
fn matmul_identity_and_basis() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let b = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let col = tape.constant(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap());
    let z = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(z).data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(3, 4, &mut rng), random(4, 2, &mut rng)];
    check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            t.sum(c)
        },
        &inputs,
    );
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 2, vec![2.0, 2.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

    let x = tape.constant(Tensor::matrix(1, 1, vec![7.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);

    let x = tape.constant(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(tape.softmax_rows(x), Err(Error::NonFinite { .. })));
}

#[test]
fn softmax_is_shift_invariant_for_large_inputs() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 3, vec![1000.0, 1001.0, 1002.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let z = tape.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 2.0]).unwrap());
    let w = tape.softmax_rows(z).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(w).data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let x = tape.constant(Tensor::new(vec![2], vec![0.0, -2.0]).unwrap());
    let s = tape.sigmoid(x).unwrap();
    let d = tape.value(s).data();
    assert_eq!(d[0], 0.5);
    let oracle = 1.0 / (1.0 + 2f64.exp());
    assert!((d[1] - oracle).abs() < 1e-15);
    assert!((d[1] - 0.1192).abs() < 1e-4);

    // log clamps instead of producing -inf
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, -3.0]).unwrap());
    let l = tape.log(x).unwrap();
    assert!(tape.value(l).data().iter().all(|v| v.is_finite()));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // keep relu inputs away from the kink
    let mut x = random(3, 3, &mut rng);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    check(|t, v| { let y = t.relu(v[0])?; weighted_sum(t, y, 9) }, std::slice::from_ref(&x));
    check(|t, v| { let y = t.sigmoid(v[0])?; weighted_sum(t, y, 9) }, std::slice::from_ref(&x));
    check(|t, v| { let y = t.square(v[0])?; weighted_sum(t, y, 9) }, std::slice::from_ref(&x));
    let pos = Tensor::matrix(2, 2, vec![0.3, 1.2, 2.0, 0.7]).unwrap();
    check(|t, v| { let y = t.log(v[0])?; weighted_sum(t, y, 9) }, &[pos]);
}

#[test]
fn concat_examples_and_gradient() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let c = tape.concat(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    let e = tape.constant(Tensor::matrix(1, 0, vec![]).unwrap());
    let c = tape.concat(a, e).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
    let bad = tape.constant(Tensor::zeros(&[2, 1]));
    assert!(tape.concat(a, bad).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(3, 2, &mut rng), random(3, 4, &mut rng)];
    check(|t, v| { let y = t.concat(v[0], v[1])?; weighted_sum(t, y, 4) }, &inputs);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));

    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![1], vec![3.0]).unwrap());
    let xx = tape.mul(x, x).unwrap();
    let s = tape.sum(xx).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));

    let mut other = Tape::new();
    let y = other.variable(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(y), Err(Error::DetachedTape)));
    assert!(matches!(tape.add(x, y), Err(Error::DetachedTape)));
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
    let zero = tape.scale(x, 0.0).unwrap();
    let c = tape.affine(zero, 1.0, 4.0).unwrap();
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn fan_out_accumulates() {
    // f(x) = sum(x) + sum(2x) → grad 3
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let a = tape.sum(x).unwrap();
    let x2 = tape.scale(x, 2.0).unwrap();
    let b = tape.sum(x2).unwrap();
    let s = tape.add(a, b).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0, 3.0]);
}

#[test]
fn sparse_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let idx: Rc<[usize]> = Rc::from(vec![2usize, 0, 2, 1, 3]);
    let seg: Rc<[usize]> = Rc::from(vec![0usize, 1, 0, 1, 1]);
    let w: Rc<[f64]> = Rc::from(vec![0.5, -1.0, 2.0, 1.5, 0.25]);

    let x = random(4, 6, &mut rng);
    let i2 = idx.clone();
    check(move |t, v| { let y = t.gather_rows(v[0], i2.clone())?; weighted_sum(t, y, 1) }, std::slice::from_ref(&x));

    let e = random(5, 6, &mut rng);
    let i3 = idx.clone();
    check(move |t, v| { let y = t.scatter_add_rows(v[0], i3.clone(), 4)?; weighted_sum(t, y, 2) }, std::slice::from_ref(&e));

    let w2 = w.clone();
    check(move |t, v| { let y = t.scale_rows(v[0], w2.clone())?; weighted_sum(t, y, 3) }, std::slice::from_ref(&e));

    let pair = [random(5, 6, &mut rng), random(5, 6, &mut rng)];
    check(|t, v| { let y = t.head_dot(v[0], v[1], 3)?; weighted_sum(t, y, 4) }, &pair);

    let hs = [random(5, 6, &mut rng), random(5, 3, &mut rng)];
    check(|t, v| { let y = t.head_scale(v[0], v[1], 3)?; weighted_sum(t, y, 5) }, &hs);

    let s = random(5, 3, &mut rng);
    let sg = seg.clone();
    check(move |t, v| { let y = t.segment_softmax(v[0], sg.clone(), 2)?; weighted_sum(t, y, 6) }, std::slice::from_ref(&s));

    check(|t, v| { let y = t.softmax_rows(v[0])?; weighted_sum(t, y, 7) }, std::slice::from_ref(&s));
    check(|t, v| { let y = t.transpose(v[0])?; weighted_sum(t, y, 8) }, std::slice::from_ref(&s));

    let rows = [random(2, 3, &mut rng), random(3, 3, &mut rng)];
    check(|t, v| { let y = t.concat_rows(&[v[0], v[1], v[0]])?; weighted_sum(t, y, 9) }, &rows);

    let ab = [random(3, 3, &mut rng), random(3, 3, &mut rng)];
    check(|t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 10) }, &ab);
    check(|t, v| { let y = t.add(v[0], v[1])?; let m = t.affine(y, -0.7, 0.2)?; t.mean(m) }, &ab);
}

#[test]
fn seq_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // two sequences of lengths 3 and 4; the last position of the second is padding
    let segments: Rc<[(usize, usize)]> = Rc::from(vec![(0usize, 3usize), (3, 4)]);
    let mask: Rc<[bool]> = Rc::from(vec![true, true, true, true, true, true, false]);
    let qkv = [random(7, 4, &mut rng), random(7, 4, &mut rng), random(7, 4, &mut rng)];
    for heads in [1, 2] {
        let (s, m) = (segments.clone(), mask.clone());
        check(
            move |t, v| {
                let y = t.seq_attention(v[0], v[1], v[2], s.clone(), m.clone(), heads, 0.7)?;
                weighted_sum(t, y, 13)
            },
            &qkv,
        );
    }
}

#[test]
fn seq_attention_examples() {
    let mut tape = Tape::new();
    // identical rows: uniform attention, output equals the shared value row
    let x = tape.constant(Tensor::matrix(2, 2, vec![0.3, -0.4, 0.3, -0.4]).unwrap());
    let y = tape
        .seq_attention(x, x, x, Rc::from(vec![(0usize, 2usize)]), Rc::from(vec![true, true]), 1, 1.0)
        .unwrap();
    let (probs, offsets) = tape.seq_attention_probs(y).unwrap();
    assert_eq!(offsets, &[0]);
    assert_eq!(probs, &[0.5, 0.5, 0.5, 0.5]);
    assert_eq!(tape.value(y).data(), &[0.3, -0.4, 0.3, -0.4]);

    // a masked key gets no weight; a masked query row is zero
    let y = tape
        .seq_attention(x, x, x, Rc::from(vec![(0usize, 2usize)]), Rc::from(vec![true, false]), 1, 1.0)
        .unwrap();
    let (probs, _) = tape.seq_attention_probs(y).unwrap();
    assert_eq!(probs, &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(&tape.value(y).data()[2..], &[0.0, 0.0]);

    let r = tape.seq_attention(x, x, x, Rc::from(vec![(0usize, 2usize)]), Rc::from(vec![false, false]), 1, 1.0);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
    let r = tape.seq_attention(x, x, x, Rc::from(vec![(0usize, 2usize)]), Rc::from(vec![true, true]), 3, 1.0);
    assert!(matches!(r, Err(Error::Shape { .. })));
    assert!(tape.seq_attention_probs(x).is_none());
}

#[test]
fn corrupted_gradient_fails_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(2, 3, &mut rng), random(3, 2, &mut rng)];
    let f = |t: &mut Tape, v: &[Var]| {
        let c = t.matmul(v[0], v[1])?;
        let s = t.sigmoid(c)?;
        t.sum(s)
    };
    let (_, mut analytic) = analytic_gradients(&f, &inputs).unwrap();
    let numeric = numeric_gradients(&f, &inputs, EPS).unwrap();
    assert!(compare_gradients(&analytic, &numeric, TOL).passed);
    analytic[0].iter_mut().for_each(|g| *g *= 1.1);
    assert!(!compare_gradients(&analytic, &numeric, TOL).passed);
}

#[test]
fn grad_check_rejects_bad_eps() {
    let x = Tensor::scalar(1.0);
    let r = grad_check(|t, v| t.sum(v[0]), &[x], 1e-2, TOL);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let x = Tensor::scalar(1.0);
    let r = grad_check(
        |t, v| {
            calls.set(calls.get() + 1.0);
            let y = t.affine(v[0], 1.0, calls.get())?;
            t.sum(y)
        },
        &[x],
        EPS,
        TOL,
    );
    assert!(matches!(r, Err(Error::NonDeterministic(_))));
}

#[test]
fn linear_layer_and_softmax_bce_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(4, 3, &mut rng), random(3, 2, &mut rng)];
    check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 11)
        },
        &inputs,
    );
    // softmax over two logits, then BCE on the first column against labels
    let labels = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let not_labels = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    check(
        move |t, v| {
            let z = t.matmul(v[0], v[1])?;
            let p = t.softmax_rows(z)?;
            let lp = t.log(p)?;
            let q = t.affine(p, -1.0, 1.0)?;
            let lq = t.log(q)?;
            let y = t.constant(labels.clone());
            let ny = t.constant(not_labels.clone());
            let a = t.mul(lp, y)?;
            let b = t.mul(lq, ny)?;
            let s = t.add(a, b)?;
            let m = t.sum(s)?;
            t.scale(m, -0.25)
        },
        &inputs,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, cols, data).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for r in 0..rows {
            let s: f64 = v.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(v.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn matmul_chain_gradients_match(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(m, k, &mut rng), random(k, n, &mut rng)];
        let report = grad_check(|t, v| {
            let c = t.matmul(v[0], v[1])?;
            let s = t.sigmoid(c)?;
            let q = t.square(s)?;
            t.sum(q)
        }, &inputs, EPS, TOL).unwrap();
        prop_assert!(report.passed, "{:?}", report.max_rel_err);
    }

    #[test]
    fn seq_attention_rows_sum_to_one(len in 1usize..8, heads in 1usize..3, seed in any::<u64>(), pad in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * heads;
        let q = random(len, d, &mut rng);
        let k = random(len, d, &mut rng);
        let real = len - pad.min(len - 1);
        let mask: Vec<bool> = (0..len).map(|i| i < real).collect();
        let mut tape = Tape::new();
        let (q, k) = (tape.constant(q), tape.constant(k));
        let y = tape.seq_attention(q, k, k, Rc::from(vec![(0, len)]), mask.clone().into(), heads, 0.5).unwrap();
        let (probs, _) = tape.seq_attention_probs(y).unwrap();
        for h in 0..heads {
            for i in 0..len {
                let row = &probs[(h * len + i) * len..(h * len + i + 1) * len];
                let s: f64 = row.iter().sum();
                if mask[i] {
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(row[real..].iter().all(|&p| p == 0.0));
                } else {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }
    }

    #[test]
    fn segment_softmax_sums_per_segment(n in 1usize..12, n_seg in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_seg)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(random(n, 2, &mut rng));
        let y = tape.segment_softmax(x, seg.clone().into(), n_seg).unwrap();
        let v = tape.value(y);
        for s in 0..n_seg {
            for h in 0..2 {
                let members: Vec<usize> = (0..n).filter(|&i| seg[i] == s).collect();
                if !members.is_empty() {
                    let total: f64 = members.iter().map(|&i| v.get(i, h)).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
