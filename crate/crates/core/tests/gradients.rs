//! Analytic gradients against central finite differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdiv_autodiff::{BilinearGrid, Graph, Tensor};
use tdiv_core::dpp::{self, AlphaMode, KernelKind};
use tdiv_core::losses;
use tdiv_core::model::{Batch, DsfConfig, Model, ModelConfig};
use tdiv_core::nn::Ctx;
use tdiv_core::scene::{Dataset, DatasetConfig, Split};

const H: f64 = 1e-6;
const INSTANCES: usize = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Checks every coordinate of `x` (or a seeded subset of `probes` of them).
fn check(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64, tol: f64, probes: Option<(usize, u64)>) {
    let idx: Vec<usize> = match probes {
        None => (0..x.numel()).collect(),
        Some((k, seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..k).map(|_| rng.random_range(0..x.numel())).collect()
        }
    };
    for i in idx {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let numeric = (f(&p) - f(&m)) / (2.0 * H);
        let a = analytic.data()[i];
        assert!(rel_err(a, numeric) < tol, "coordinate {i}: analytic {a} vs numeric {numeric}");
    }
}

fn small_data() -> Dataset {
    Dataset::generate(&DatasetConfig {
        n_train: 6,
        n_val: 2,
        grid_size: 32,
        seed: 11,
        ..DatasetConfig::default()
    })
    .unwrap()
}

#[test]
fn expected_cardinality_loss_through_the_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut done = 0;
    while done < INSTANCES {
        let n = rng.random_range(2..=8);
        let set = Tensor::from_fn(&[n, 12], |_| rng.random_range(-15.0..15.0));
        let alpha = dpp::calibrate_alpha(&set, [0.0, 0.0], KernelKind::Compound, AlphaMode::ReciprocalMean).unwrap();
        // The eigenvalue lift is a constant in backward; skip sets that need it.
        if dpp::build_kernel(&set, [0.0, 0.0], KernelKind::Compound, alpha).unwrap().jitter > dpp::KERNEL_JITTER {
            continue;
        }
        let eval = |s: &Tensor, grad: bool| {
            let mut g = Graph::new();
            let v = g.leaf(s.clone(), grad);
            let (l, _) = dpp::kernel_graph(&mut g, v, [0.0, 0.0], KernelKind::Compound, alpha).unwrap();
            let loss = dpp::dpp_loss(&mut g, l).unwrap();
            let value = g.value(loss).item();
            (value, grad.then(|| g.backward(loss).unwrap().wrt(&g, v)))
        };
        let analytic = eval(&set, true).1.unwrap();
        check(&set, &analytic, |s| eval(s, false).0, 1e-4, None);
        done += 1;
    }
}

#[test]
fn layout_loss_through_bilinear_sampling() {
    let data = small_data();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..INSTANCES {
        let rec = &data.records[k % data.records.len()];
        let field: Arc<BilinearGrid> = rec.field().unwrap().agent_grid().clone();
        let set = Tensor::from_fn(&[4, 12], |i| {
            if i % 2 == 0 { rng.random_range(-8.0..38.0) } else { rng.random_range(-23.0..23.0) }
        });
        let eval = |s: &Tensor, grad: bool| {
            let mut g = Graph::new();
            let v = g.leaf(s.clone(), grad);
            let loss = losses::layout_loss(&mut g, v, &field, k % 2 == 0).unwrap();
            let value = g.value(loss).item();
            (value, grad.then(|| g.backward(loss).unwrap().wrt(&g, v)))
        };
        let analytic = eval(&set, true).1.unwrap();
        check(&set, &analytic, |s| eval(s, false).0, 1e-4, None);
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        grid_size: 32,
        d_h: 6,
        d_m: 6,
        d_z: 4,
        conv_channels: vec![2, 3],
        posterior_hidden: 8,
        head_hidden: 6,
        ..ModelConfig::default()
    }
}

#[test]
fn cvae_objective_through_reparameterization() {
    let data = small_data();
    let recs: Vec<_> = data.split(Split::Train).into_iter().take(3).collect();
    let batch = Batch::from_records(&recs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..INSTANCES {
        let model = Model::new(&tiny_model(), k as u64).unwrap();
        let mu0 = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let lv0 = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..0.5));
        let eps = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.5..1.5));
        // Evaluates the objective with μ and log σ² stacked into one input.
        let eval = |x: &Tensor, grad: bool| {
            let mut cx = Ctx::new(&model.store, false);
            let v = cx.g.leaf(x.clone(), grad);
            let mu = cx.g.slice(v, 1, 0, 4).unwrap();
            let lv = cx.g.slice(v, 1, 4, 4).unwrap();
            let h = model.cvae.encode_past(&mut cx, &batch.past).unwrap();
            let m = model.cvae.encode_map(&mut cx, &batch.raster).unwrap();
            let z = model.cvae.reparameterize(&mut cx, mu, lv, &eps).unwrap();
            let pred = model.cvae.decode(&mut cx, z, h, m).unwrap();
            let l = losses::cvae_loss(&mut cx.g, pred, &batch.future, mu, lv, 1.0).unwrap();
            let value = cx.g.value(l.total).item();
            (value, grad.then(|| cx.g.backward(l.total).unwrap().wrt(&cx.g, v)))
        };
        let mut x = Tensor::zeros(&[3, 8]);
        for r in 0..3 {
            for c in 0..4 {
                x.data_mut()[r * 8 + c] = mu0.at2(r, c);
                x.data_mut()[r * 8 + 4 + c] = lv0.at2(r, c);
            }
        }
        let analytic = eval(&x, true).1.unwrap();
        check(&x, &analytic, |s| eval(s, false).0, 1e-4, None);
    }
}

#[test]
fn end_to_end_dsf_objective_wrt_dsf_parameters() {
    let data = small_data();
    let recs: Vec<_> = data.split(Split::Train).into_iter().take(3).collect();
    let batch = Batch::from_records(&recs).unwrap();
    let fields: Vec<_> = recs.iter().map(|r| r.field().unwrap().agent_grid().clone()).collect();
    let dsf_cfg = DsfConfig {
        n_samples: 4,
        width: 8,
        depth: 2,
        ..DsfConfig::default()
    };
    for k in 0..INSTANCES as u64 {
        let mut model = Model::new(&tiny_model(), 100 + k).unwrap();
        model.attach_dsf(&dsf_cfg, KernelKind::DistanceOnly, 200 + k).unwrap();
        model.store.set_frozen("cvae.", true);
        let (h, m) = model.embed(&batch).unwrap();
        let objective = |model: &Model, grad: bool| {
            let dsf = model.dsf.as_ref().unwrap();
            let mut cx = Ctx::new(&model.store, true);
            let hv = cx.g.constant(h.clone());
            let mv = cx.g.constant(m.clone());
            let (y, _) = dsf.sample(&mut cx, &model.cvae, hv, mv).unwrap();
            let mut total = None;
            for (b, field) in fields.iter().enumerate() {
                let set = cx.g.slice(y, 0, b * 4, 4).unwrap();
                // Fixed bandwidth: α is a constant of the objective.
                let (l, _) = dpp::kernel_graph(&mut cx.g, set, [0.0, 0.0], KernelKind::DistanceOnly, 0.05).unwrap();
                let d = dpp::dpp_loss(&mut cx.g, l).unwrap();
                let lay = losses::layout_loss(&mut cx.g, set, field, true).unwrap();
                let d = cx.g.scale(d, 0.5).unwrap();
                let lay = cx.g.scale(lay, 0.5).unwrap();
                let s = cx.g.add(d, lay).unwrap();
                total = Some(match total {
                    None => s,
                    Some(t) => cx.g.add(t, s).unwrap(),
                });
            }
            let total = total.unwrap();
            let value = cx.g.value(total).item();
            (value, grad.then(|| cx.g.backward(total).unwrap().param_grads(&cx.g)))
        };
        let grads = objective(&model, true).1.unwrap();
        assert!(grads.iter().all(|(id, _)| model.store.get(*id).name.starts_with("dsf.")));
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let mut checked = 0;
        while checked < 3 {
            let (id, g) = &grads[rng.random_range(0..grads.len())];
            let i = rng.random_range(0..g.numel());
            let at = |delta: f64| {
                let mut m2 = model.clone();
                m2.store.get_mut(*id).value.data_mut()[i] += delta;
                objective(&m2, false).0
            };
            let (up, mid, down) = (at(H), at(0.0), at(-H));
            let (right, left) = ((up - mid) / H, (mid - down) / H);
            if rel_err(right, left) > 1e-2 {
                // Sits on a leaky-ReLU or bilinear kink: one-sided slopes disagree.
                continue;
            }
            let numeric = (up - down) / (2.0 * H);
            let a = g.data()[i];
            assert!(rel_err(a, numeric) < 1e-3, "{}[{i}]: {a} vs {numeric}", model.store.get(*id).name);
            checked += 1;
        }
    }
}
