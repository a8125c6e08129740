use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdiv_autodiff::{Affine2, Tensor};
use tdiv_core::dpp::{self, oracle, AlphaMode, KernelKind};
use tdiv_core::metrics;
use tdiv_core::scene::{chamfer_transform, Point};

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let b = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0));
    let mut l = b.matmul(&b.transpose2().unwrap()).unwrap();
    for i in 0..n {
        l.data_mut()[i * n + i] += 1e-3;
    }
    l
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, t: usize, spread: f64) -> Tensor {
    Tensor::from_fn(&[n, 2 * t], |_| rng.random_range(-spread..spread))
}

fn random_preds(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Vec<Vec<Point>> {
    (0..n)
        .map(|_| (0..t).map(|_| [rng.random_range(-10.0..30.0), rng.random_range(-10.0..10.0)]).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn subset_probabilities_sum_to_one(seed in any::<u64>(), n in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_psd(&mut rng, n);
        let total: f64 = oracle::all_subset_probabilities(&l).unwrap().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn trace_formula_matches_enumeration(seed in any::<u64>(), n in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_psd(&mut rng, n);
        let closed = dpp::expected_cardinality(&l).unwrap();
        let brute = oracle::expected_cardinality(&l).unwrap();
        prop_assert!((closed - brute).abs() < 1e-10);
    }

    #[test]
    fn pair_inclusion_matches_enumeration(seed in any::<u64>(), n in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_psd(&mut rng, n);
        let k = dpp::marginal_kernel(&l).unwrap();
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let closed = dpp::pair_inclusion(&k, a, b);
        let brute = oracle::inclusion_probability(&l, &[a, b]).unwrap();
        prop_assert!((closed - brute).abs() < 1e-10);
    }

    #[test]
    fn compound_kernel_is_symmetric_unit_diagonal_psd(seed in any::<u64>(), n in 2usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, n, 6, 20.0);
        let alpha = dpp::calibrate_alpha(&set, [0.0, 0.0], KernelKind::Compound, AlphaMode::ReciprocalMean).unwrap();
        let k = dpp::build_kernel(&set, [0.0, 0.0], KernelKind::Compound, alpha).unwrap();
        for i in 0..n {
            prop_assert!((k.entries.at2(i, i) - k.jitter - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert_eq!(k.entries.at2(i, j), k.entries.at2(j, i));
            }
        }
        prop_assert!(dpp::min_eigenvalue(&k.entries).unwrap() > 0.0);
    }

    #[test]
    fn distance_kernel_ignores_uniform_scaling(seed in any::<u64>(), s in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, 8, 6, 10.0);
        let scaled = set.scale(s);
        let kernel = |x: &Tensor| {
            let a = dpp::calibrate_alpha(x, [0.0, 0.0], KernelKind::DistanceOnly, AlphaMode::ReciprocalMean).unwrap();
            dpp::build_kernel(x, [0.0, 0.0], KernelKind::DistanceOnly, a).unwrap().entries
        };
        prop_assert!(kernel(&set).max_abs_diff(&kernel(&scaled)) < 1e-12);
    }

    #[test]
    fn chamfer_is_zero_inside_and_bounded(seed in any::<u64>(), rows in 3usize..24, cols in 3usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.3)).collect();
        mask[rng.random_range(0..rows * cols)] = true;
        let field = chamfer_transform(&mask, rows, cols).unwrap();
        for (v, m) in field.iter().zip(&mask) {
            prop_assert!((0.0..=1.0).contains(v));
            prop_assert_eq!(*m, *v == 0.0);
        }
    }

    #[test]
    fn metrics_ignore_prediction_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = random_preds(&mut rng, 12, 6);
        let truth = random_preds(&mut rng, 1, 6).remove(0);
        let mut shuffled = preds.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let (a, b) = (metrics::made_mfde(&preds, &truth).unwrap(), metrics::made_mfde(&shuffled, &truth).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        let (a, b) = (metrics::asd_fsd(&preds).unwrap(), metrics::asd_fsd(&shuffled).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        let (a, b) = (metrics::rf(&preds, &truth).unwrap().0, metrics::rf(&shuffled, &truth).unwrap().0);
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn metrics_ignore_rigid_motion(seed in any::<u64>(), angle in -3.2f64..3.2, tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = random_preds(&mut rng, 12, 6);
        let truth = random_preds(&mut rng, 1, 6).remove(0);
        let t = Affine2::rigid(angle, [tx, ty]);
        let moved: Vec<Vec<Point>> = preds.iter().map(|p| p.iter().map(|q| t.apply(*q)).collect()).collect();
        let truth_moved: Vec<Point> = truth.iter().map(|q| t.apply(*q)).collect();
        let (a, b) = (metrics::made_mfde(&preds, &truth).unwrap(), metrics::made_mfde(&moved, &truth_moved).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        let (a, b) = (metrics::asd_fsd(&preds).unwrap(), metrics::asd_fsd(&moved).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        let (a, b) = (metrics::avg_fde(&preds, &truth).unwrap(), metrics::avg_fde(&moved, &truth_moved).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn rf_is_at_least_one(seed in any::<u64>(), n in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = random_preds(&mut rng, n, 6);
        let truth = if rng.random_bool(0.2) { preds[0].clone() } else { random_preds(&mut rng, 1, 6).remove(0) };
        let (rf, _) = metrics::rf(&preds, &truth).unwrap();
        prop_assert!(rf >= 1.0);
    }
}
