use super::*;
use crate::error::{Error, Result};
use crate::gradcheck::{max_relative_error, numerical_gradient, DEFAULT_STEP};
use crate::rng::SplitMix64;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SplitMix64::new(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    let oracle = naive_matmul(&a, &b);
    for (x, y) in tape.data(c).iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]));
    let b = tape.leaf(&Tensor::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn elementwise_identities_and_broadcast() {
    let mut rng = SplitMix64::new(2);
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let row = Tensor::randn(&[3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let vx = tape.leaf(&x);
    let zero = tape.leaf(&Tensor::zeros(&[2, 3]));
    let one = tape.leaf(&Tensor::filled(&[2, 3], 1.0));
    let s = tape.add(vx, zero).unwrap();
    assert_eq!(tape.data(s), x.data());
    let m = tape.mul(vx, one).unwrap();
    assert_eq!(tape.data(m), x.data());

    let vr = tape.leaf(&row);
    let bsum = tape.add(vx, vr).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            assert_eq!(tape.data(bsum)[i * 3 + j], x.at(i, j) + row.data()[j]);
        }
    }
    let bad = tape.leaf(&Tensor::zeros(&[2]));
    assert!(matches!(tape.add(vx, bad), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let sa = tape.softmax(a).unwrap();
    assert_eq!(tape.data(sa), &[0.5, 0.5]);

    let b = tape.leaf(&Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
    let sb = tape.softmax(b).unwrap();
    assert!((tape.data(sb)[0] - 1.0).abs() < 1e-15);
    assert!(tape.data(sb)[1] < 1e-300);

    let c = tape.leaf(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let sc = tape.softmax(c).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| (x - 3.0).exp()).sum();
    for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((tape.data(sc)[i] - (x - 3.0).exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = SplitMix64::new(3);
    for _ in 0..100 {
        let rows = 1 + rng.below(6);
        let cols = 1 + rng.below(6);
        let x = Tensor::randn(&[rows, cols], 5.0, &mut rng);
        let y = softmax(&x);
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.row(r).iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}

#[test]
fn causal_softmax_masks_future() {
    let mut rng = SplitMix64::new(4);
    let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.causal_softmax(v).unwrap();
    let y = tape.value(y);
    for i in 0..4 {
        let s: f64 = y.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for j in (i + 1)..4 {
            assert_eq!(y.at(i, j), 0.0);
        }
    }
}

#[test]
fn mse_cases() {
    let mut rng = SplitMix64::new(5);
    let p = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let vp = tape.leaf(&p);
    let same = tape.mse(vp, vp).unwrap();
    assert_eq!(tape.scalar(same), 0.0);

    let shifted: Vec<f64> = p.data().iter().map(|x| x - 1.0).collect();
    let vq = tape.leaf(&Tensor::new(&[2, 3], shifted).unwrap());
    let l = tape.mse(vp, vq).unwrap();
    assert!((tape.scalar(l) - 3.0).abs() < 1e-12);

    let q = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let p2 = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let mut oracle = 0.0;
    for t in 0..4 {
        let mut sq = 0.0;
        for j in 0..3 {
            sq += (p2.at(t, j) - q.at(t, j)).powi(2);
        }
        oracle += sq;
    }
    oracle /= 4.0;
    let (a, b) = (tape.leaf(&p2), tape.leaf(&q));
    let l = tape.mse(a, b).unwrap();
    assert!((tape.scalar(l) - oracle).abs() < 1e-12);

    let wrong = tape.leaf(&Tensor::zeros(&[3, 2]));
    assert!(tape.mse(vp, wrong).is_err());
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let uniform = tape.leaf(&Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(uniform, &[2]).unwrap();
    assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    assert!((tape.scalar(l) - 1.386294).abs() < 1e-6);

    let mut sharp = Tensor::zeros(&[1, 3]);
    sharp.data_mut()[1] = 1000.0;
    let vs = tape.leaf(&sharp);
    let l = tape.cross_entropy(vs, &[1]).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);

    let mut rng = SplitMix64::new(6);
    let logits = Tensor::randn(&[3, 5], 2.0, &mut rng);
    let targets = [4, 0, 2];
    let mut oracle = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let z: f64 = logits.row(r).iter().map(|x| x.exp()).sum();
        oracle -= (logits.at(r, t).exp() / z).ln();
    }
    oracle /= 3.0;
    let vl = tape.leaf(&logits);
    let l = tape.cross_entropy(vl, &targets).unwrap();
    assert!((tape.scalar(l) - oracle).abs() < 1e-10);

    assert!(matches!(tape.cross_entropy(vl, &[0, 5, 1]), Err(Error::Index { index: 5, .. })));
}

#[test]
fn backward_simple_functionals() {
    let mut rng = SplitMix64::new(7);
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng).with_grad(true);
    let mut tape = Tape::new();
    let vx = tape.leaf(&x);
    let s = tape.sum(vx).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(vx).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let vx = tape.leaf(&Tensor::new(&[1], vec![3.0]).unwrap().with_grad(true));
    let sq = tape.mul(vx, vx).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(vx).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.leaf(&Tensor::zeros(&[2]).with_grad(true));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut rng = SplitMix64::new(8);
    let x = Tensor::randn(&[3, 3], 1.0, &mut rng).with_grad(true);
    let f = |tape: &mut Tape, v: Var| -> Var {
        let g = tape.gelu(v).unwrap();
        let m = tape.matmul(g, v).unwrap();
        tape.sum(m).unwrap()
    };
    let mut t1 = Tape::new();
    let v1 = t1.leaf(&x);
    let l1 = f(&mut t1, v1);
    let g1 = t1.backward(l1).unwrap().get(v1).unwrap().to_vec();

    let mut t2 = Tape::new();
    let v2 = t2.leaf(&x);
    let a = f(&mut t2, v2);
    let b = f(&mut t2, v2);
    let l2 = t2.add(a, b).unwrap();
    let g2 = t2.backward(l2).unwrap().get(v2).unwrap().to_vec();
    for (x1, x2) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * x1, *x2);
    }
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut tape = Tape::new();
    let w = tape.leaf(&Tensor::filled(&[2, 2], 0.5));
    let x = tape.leaf(&Tensor::filled(&[2, 2], 1.0).with_grad(true));
    let y = tape.matmul(w, x).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(w).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::new();
    let big = tape.leaf(&Tensor::filled(&[1, 1], 1e200));
    assert!(matches!(tape.matmul(big, big), Err(Error::NonFinite(_))));
}

// Randomised finite-difference check of every differentiable tape op.
// Each case builds `loss = Σ W ⊙ op(inputs)` so that all output entries
// carry distinct upstream gradients.

fn dims(rng: &mut SplitMix64) -> usize {
    1 + rng.below(6)
}

fn check_op(name: &str, shapes: &[Vec<usize>], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>, rng: &mut SplitMix64) {
    let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, rng).with_grad(true)).collect();
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t)).collect();
    let out = build(&mut probe, &vars).unwrap();
    let weights = Tensor::randn(probe.shape(out), 1.0, rng);

    let eval = |tape: &mut Tape, xs: &[Tensor]| -> Result<(Var, Vec<Var>)> {
        let vs: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let y = build(tape, &vs)?;
        let w = tape.constant(&weights);
        let p = tape.mul(y, w)?;
        Ok((tape.sum(p)?, vs))
    };

    let mut tape = Tape::new();
    let (loss, vs) = eval(&mut tape, &inputs).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vs.iter().map(|v| grads.get(*v).map_or_else(|| vec![0.0; tape.data(*v).len()], <[f64]>::to_vec)).collect();
    let numeric = numerical_gradient(
        |xs| {
            let mut t = Tape::new();
            let (l, _) = eval(&mut t, xs)?;
            Ok(t.scalar(l))
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "{name}: max relative error {err} for shapes {shapes:?}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = SplitMix64::new(2024);
    for _ in 0..100 {
        let (m, k, n) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
        check_op("matmul", &[vec![m, k], vec![k, n]], |t, v| t.matmul(v[0], v[1]), &mut rng);
        check_op("add", &[vec![m, n], vec![m, n]], |t, v| t.add(v[0], v[1]), &mut rng);
        check_op("sub_broadcast", &[vec![m, n], vec![n]], |t, v| t.sub(v[0], v[1]), &mut rng);
        check_op("mul_broadcast", &[vec![m, n], vec![n]], |t, v| t.mul(v[0], v[1]), &mut rng);
        check_op("scale", &[vec![m, n]], |t, v| t.scale(v[0], -1.7), &mut rng);
        check_op("transpose", &[vec![m, n]], |t, v| t.transpose(v[0]), &mut rng);
        check_op("reshape", &[vec![m, n]], |t, v| t.reshape(v[0], &[n * m]), &mut rng);
        check_op("softmax", &[vec![m, n]], |t, v| t.softmax(v[0]), &mut rng);
        check_op("causal_softmax", &[vec![m, m]], |t, v| t.causal_softmax(v[0]), &mut rng);
        check_op("gelu", &[vec![m, n]], |t, v| t.gelu(v[0]), &mut rng);
        check_op("mse", &[vec![m, n], vec![m, n]], |t, v| t.mse(v[0], v[1]), &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
        check_op("cross_entropy", &[vec![m, n]], move |t, v| t.cross_entropy(v[0], &targets), &mut rng);
        let ids: Vec<usize> = (0..k).map(|_| rng.below(m)).collect();
        check_op("gather_rows", &[vec![m, n]], move |t, v| t.gather_rows(v[0], &ids), &mut rng);
        let start = rng.below(m);
        check_op("slice_rows", &[vec![m, n]], move |t, v| t.slice_rows(v[0], start, m - start), &mut rng);
        let cstart = rng.below(n);
        check_op("slice_cols", &[vec![m, n]], move |t, v| t.slice_cols(v[0], cstart, n - cstart), &mut rng);
        check_op("concat_rows", &[vec![m, n], vec![k, n]], |t, v| t.concat_rows(&[v[0], v[1]]), &mut rng);
        check_op("concat_cols", &[vec![m, n], vec![m, k]], |t, v| t.concat_cols(&[v[0], v[1]]), &mut rng);
        let state = 1 + rng.below(4);
        check_op(
            "ssm_scan",
            &[vec![state, state], vec![state, n], vec![n, state], vec![n, n], vec![m, n]],
            |t, v| t.ssm_scan(v[0], v[1], v[2], v[3], v[4]),
            &mut rng,
        );
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = SplitMix64::new(77);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng).with_grad(true);
        let w = Tensor::randn(&[5, 3], 1.0, &mut rng).with_grad(true);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.matmul(vx, vw).unwrap();
        let l = tape.cross_entropy(y, &[0, 1, 2, 0]).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.scalar(l), g.get(vx).unwrap().to_vec(), g.get(vw).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut rng = SplitMix64::new(5);
        let mut w = Tensor::randn(&[3, 2], 1.0, &mut rng).with_grad(true);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            let mut tape = Tape::new();
            let (vx, vw) = (tape.constant(&x), tape.leaf(&w));
            let y = tape.matmul(vx, vw).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l = tape.sum(sq).unwrap();
            let g = tape.backward(l).unwrap();
            w.accumulate_grad(g.get(vw).unwrap()).unwrap();
            adam.step(&mut [&mut w]).unwrap();
        }
        w.data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
