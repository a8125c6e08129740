use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdiv_autodiff::{AutodiffError, Graph, Tensor};

#[test]
fn matmul_with_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let p = g.matmul(a, i).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn sigmoid_at_zero_and_constant_mean() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    let c = g.constant(Tensor::full(&[2, 3], 0.3));
    let m = g.mean(c).unwrap();
    let total = g.sum(m).unwrap();
    assert!((g.value(total).item() - 0.3).abs() < 1e-15);
}

#[test]
fn shape_mismatch_and_bad_log_are_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 3]));
    let b = g.constant(Tensor::ones(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    assert!(matches!(g.matmul(a, a), Err(AutodiffError::ShapeMismatch { .. })));
    let bias = g.constant(Tensor::ones(&[2]));
    assert!(g.add_row(a, bias).is_err());
    let z = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(g.log(z), Err(AutodiffError::NonPositiveLog { index: 1, .. })));
}

#[test]
fn polynomial_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
    let sq = g.square(x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(&g, x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn constant_loss_gives_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, -2.0]), true);
    let zero = g.scale(x, 0.0).unwrap();
    let c = g.constant(Tensor::scalar(4.0));
    let s = g.sum(zero).unwrap();
    let loss = g.add(s, c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(&g, x).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]), true);
    assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
}

#[test]
fn inverse_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::eye(3).scale(2.0));
    let inv = g.inverse(a).unwrap();
    assert!(g.value(inv).max_abs_diff(&Tensor::eye(3).scale(0.5)) < 1e-15);

    let b = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    let bv = g.constant(b.clone());
    let binv = g.inverse(bv).unwrap();
    let check = g.value(binv).matmul(&b).unwrap();
    assert!(check.max_abs_diff(&Tensor::eye(2)) < 1e-15);
    let expected =
        Tensor::from_rows(&[vec![2.0 / 3.0, -1.0 / 3.0], vec![-1.0 / 3.0, 2.0 / 3.0]]).unwrap();
    assert!(g.value(binv).max_abs_diff(&expected) < 1e-15);
}

fn trace_inverse(a: &Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(a.clone());
    let inv = g.inverse(v).unwrap();
    let t = g.trace(inv).unwrap();
    g.value(t).item()
}

#[test]
fn gradient_of_trace_inverse_at_identity() {
    // Oracle: central differences, step 1e-5.
    let a0 = Tensor::eye(2);
    let h = 1e-5;
    let mut numeric = vec![0.0; 4];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut p = a0.clone();
        p.data_mut()[i] += h;
        let mut m = a0.clone();
        m.data_mut()[i] -= h;
        *n = (trace_inverse(&p) - trace_inverse(&m)) / (2.0 * h);
    }
    let expected = [-1.0, 0.0, 0.0, -1.0];
    for (n, e) in numeric.iter().zip(expected) {
        assert!((n - e).abs() < 1e-8, "finite-difference oracle drifted: {n}");
    }

    let mut g = Graph::new();
    let a = g.leaf(a0, true);
    let inv = g.inverse(a).unwrap();
    let t = g.trace(inv).unwrap();
    let grads = g.backward(t).unwrap();
    let analytic = grads.wrt(&g, a);
    for (a, n) in analytic.data().iter().zip(&numeric) {
        assert!((a - n).abs() < 1e-8);
    }
}

fn expected_cardinality_loss(l: &Tensor) -> f64 {
    let n = l.shape()[0];
    let mut g = Graph::new();
    let lv = g.constant(l.clone());
    let eye = g.constant(Tensor::eye(n));
    let shifted = g.add(lv, eye).unwrap();
    let inv = g.inverse(shifted).unwrap();
    let tr = g.trace(inv).unwrap();
    let loss = g.add_scalar(tr, -(n as f64)).unwrap();
    g.value(loss).item()
}

#[test]
fn expected_cardinality_gradient_on_random_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = Tensor::from_fn(&[4, 4], |_| rng.random_range(-1.0..1.0));
    let l = b.matmul(&b.transpose2().unwrap()).unwrap();

    let mut g = Graph::new();
    let lv = g.leaf(l.clone(), true);
    let eye = g.constant(Tensor::eye(4));
    let shifted = g.add(lv, eye).unwrap();
    let inv = g.inverse(shifted).unwrap();
    let tr = g.trace(inv).unwrap();
    let loss = g.add_scalar(tr, -4.0).unwrap();
    let analytic = g.backward(loss).unwrap().wrt(&g, lv);

    let h = 1e-5;
    for i in 0..16 {
        let mut p = l.clone();
        p.data_mut()[i] += h;
        let mut m = l.clone();
        m.data_mut()[i] -= h;
        let numeric = (expected_cardinality_loss(&p) - expected_cardinality_loss(&m)) / (2.0 * h);
        let a = analytic.data()[i];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2) < 1e-4);
    }
}

#[test]
fn replayed_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0)), true);
    let w = g.leaf(Tensor::from_fn(&[3, 2], |_| rng.random_range(-1.0..1.0)), true);
    let h = g.matmul(x, w).unwrap();
    let t = g.tanh(h).unwrap();
    let loss = g.mean(t).unwrap();
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    assert_eq!(first.wrt(&g, x), second.wrt(&g, x));
    assert_eq!(first.wrt(&g, w), second.wrt(&g, w));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inverse_times_input_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Diagonally dominant ⇒ well conditioned.
        let mut a = Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0..1.0));
        for i in 0..8 {
            a.data_mut()[i * 8 + i] += 8.0;
        }
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let inv = g.inverse(av).unwrap();
        let prod = g.matmul(inv, av).unwrap();
        prop_assert!(g.value(prod).max_abs_diff(&Tensor::eye(8)) < 1e-10);
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)), true);
        let w = g.leaf(Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0)), true);
        let h = g.matmul(x, w).unwrap();
        let s = g.sigmoid(h).unwrap();
        let out = g.softplus(s).unwrap();
        let seed_g = Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
        let once = g.backward_with_seed(out, seed_g.clone()).unwrap();
        let twice = g.backward_with_seed(out, seed_g.scale(2.0)).unwrap();
        for v in [x, w] {
            let a = once.wrt(&g, v).scale(2.0);
            prop_assert_eq!(a, twice.wrt(&g, v));
        }
    }
}
