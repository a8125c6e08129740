use std::sync::OnceLock;

use tdiv_core::model::CVAE_PREFIX;
use tdiv_core::scene::{Dataset, DatasetConfig, LayoutMix, Point, Split};
use tdiv_core::train::{self, Sampler, TrainConfig, TrainOutcome};

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk_small();
    cfg.dataset.n_train = 48;
    cfg.dataset.n_val = 16;
    cfg.cvae.epochs = 2;
    cfg.cvae.batch_size = 16;
    cfg.dsf.epochs = 2;
    cfg.dsf.batch_size = 16;
    cfg
}

fn tiny_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| Dataset::generate(&tiny_config().dataset).unwrap())
}

/// One reduced-scale stage-1 run shared by the convergence checks.
fn desk_run() -> &'static (TrainConfig, Dataset, TrainOutcome) {
    static RUN: OnceLock<(TrainConfig, Dataset, TrainOutcome)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = TrainConfig::desk_small();
        let data = Dataset::generate(&cfg.dataset).unwrap();
        let out = train::train_cvae(&cfg, &data.split(Split::Train), &data.split(Split::Val)).unwrap();
        (cfg, data, out)
    })
}

#[test]
fn stage_one_is_deterministic() {
    let cfg = tiny_config();
    let data = tiny_data();
    let (tr, va) = (data.split(Split::Train), data.split(Split::Val));
    let a = train::train_cvae(&cfg, &tr, &va).unwrap();
    let b = train::train_cvae(&cfg, &tr, &va).unwrap();
    assert_eq!(train::log_to_csv(&a.log), train::log_to_csv(&b.log));
    assert_eq!(a.model.store.to_bytes(), b.model.store.to_bytes());
    let other = train::train_cvae(&TrainConfig { seed: 1, ..cfg }, &tr, &va).unwrap();
    assert_ne!(train::log_to_csv(&a.log), train::log_to_csv(&other.log));
}

#[test]
fn stage_two_is_deterministic_and_leaves_the_backbone_untouched() {
    let cfg = tiny_config();
    let data = tiny_data();
    let (tr, va) = (data.split(Split::Train), data.split(Split::Val));
    let backbone = train::train_cvae(&cfg, &tr, &va).unwrap().model;
    let a = train::train_dsf(&cfg, &backbone, &tr, &va).unwrap();
    let b = train::train_dsf(&cfg, &backbone, &tr, &va).unwrap();
    assert_eq!(train::log_to_csv(&a.log), train::log_to_csv(&b.log));
    assert_eq!(a.model.store.to_bytes(), b.model.store.to_bytes());
    assert_eq!(
        train::parameter_bytes(&a.model.store, CVAE_PREFIX),
        train::parameter_bytes(&backbone.store, CVAE_PREFIX)
    );
    assert!(a.log.iter().all(|r| r.loss.lambda == Some(cfg.dsf_loss.lambda)));
}

#[test]
fn mismatched_backbone_is_rejected() {
    let cfg = tiny_config();
    let data = tiny_data();
    let (tr, va) = (data.split(Split::Train), data.split(Split::Val));
    let backbone = train::train_cvae(&cfg, &tr, &va).unwrap().model;
    let mut other = cfg.clone();
    other.model.d_h += 2;
    assert!(train::train_dsf(&other, &backbone, &tr, &va).is_err());
}

#[test]
fn divergence_stops_with_the_last_good_parameters() {
    let mut cfg = tiny_config();
    cfg.cvae.lr = 1e150;
    let data = tiny_data();
    let out = train::train_cvae(&cfg, &data.split(Split::Train), &data.split(Split::Val)).unwrap();
    let (step, _) = out.diverged.expect("training should diverge");
    assert!(step >= 1);
    assert!(out.model.store.iter().all(|(_, p)| p.value.all_finite()));
}

#[test]
fn stage_one_loss_keeps_falling_late_in_training() {
    let (_, _, out) = desk_run();
    let totals: Vec<f64> = out.log.iter().map(|r| r.loss.total).collect();
    let ma: Vec<f64> = totals.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let tail = &ma[ma.len() - totals.len() / 5..];
    // Least-squares slope of the moving average over the final fifth of training.
    let n = tail.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = tail.iter().sum::<f64>() / n;
    let slope = tail.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>()
        / tail.iter().enumerate().map(|(i, _)| (i as f64 - xm).powi(2)).sum::<f64>();
    assert!(slope <= 0.0, "moving-average slope {slope}");
    assert!(tail[tail.len() - 1] <= tail[0]);
}

#[test]
fn posterior_does_not_collapse() {
    let (cfg, _, out) = desk_run();
    assert_eq!(cfg.beta, 1.0);
    let last: Vec<f64> = out.log.iter().rev().take(20).map(|r| r.loss.kl).collect();
    let kl = last.iter().sum::<f64>() / last.len() as f64;
    assert!(kl > 0.01, "KL {kl}");
}

fn constant_velocity_made(past: &[Point], truth: &[Point]) -> f64 {
    let n = past.len();
    let v = [past[n - 1][0] - past[n - 2][0], past[n - 1][1] - past[n - 2][1]];
    let mut total = 0.0;
    for (k, t) in truth.iter().enumerate() {
        let s = (k + 1) as f64;
        total += ((past[n - 1][0] + s * v[0] - t[0]).powi(2) + (past[n - 1][1] + s * v[1] - t[1]).powi(2)).sqrt();
    }
    total / truth.len() as f64
}

#[test]
fn straight_roads_are_learned_beyond_constant_velocity() {
    let mut cfg = TrainConfig::desk_small();
    cfg.dataset = DatasetConfig {
        n_train: 200,
        n_val: 50,
        layout_mix: LayoutMix([1.0, 0.0, 0.0, 0.0]),
        seed: 21,
        ..cfg.dataset
    };
    cfg.cvae.epochs = 50;
    let data = Dataset::generate(&cfg.dataset).unwrap();
    let (tr, va) = (data.split(Split::Train), data.split(Split::Val));
    let out = train::train_cvae(&cfg, &tr, &va).unwrap();
    let report = train::evaluate(&out.model, &va, Sampler::Prior, 12, 0).unwrap();
    let cv = va
        .iter()
        .map(|r| constant_velocity_made(&r.past_agent(), &r.future_agent()))
        .sum::<f64>()
        / va.len() as f64;
    assert!(report.mean.made < 1.0, "mADE {}", report.mean.made);
    assert!(report.mean.made < cv, "mADE {} vs constant velocity {cv}", report.mean.made);
}
