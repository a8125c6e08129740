use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use tdiv_autodiff::{Affine2, Graph, Tensor};
use tdiv_core::losses::layout_loss;
use tdiv_core::scene::raster::DRIVABLE;
use tdiv_core::scene::{
    generate_layout, rasterize, simulate_agent, AgentParams, Dataset, DatasetConfig, GeometryParams, LayoutKind,
    Trajectory,
};

#[test]
fn t_intersection_branches_are_equally_likely() {
    let geom = GeometryParams::default();
    let params = AgentParams::default();
    let mut counts = [0usize; 2];
    let trials = 10_000;
    for seed in 0..trials {
        let layout = generate_layout(LayoutKind::TIntersection, seed, &geom).unwrap();
        let run = simulate_agent(&layout, seed, &params).unwrap();
        counts[run.route] += 1;
    }
    for c in counts {
        let f = c as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "branch frequency {f}");
    }
}

#[test]
fn rotating_the_world_leaves_the_raster_unchanged() {
    let geom = GeometryParams::default();
    let params = AgentParams::default();
    for (k, kind) in LayoutKind::ALL.into_iter().enumerate() {
        let layout = generate_layout(kind, 40 + k as u64, &geom).unwrap();
        let run = simulate_agent(&layout, 7, &params).unwrap();
        let a = rasterize(&layout, &run.trajectory, 64).unwrap();
        let t = Affine2::rigid(0.7 + k as f64, [31.0, -12.5]);
        let moved = Trajectory::new(
            run.trajectory.points().iter().map(|p| t.apply(*p)).collect(),
            run.trajectory.rate_hz(),
            run.trajectory.t_past(),
        )
        .unwrap();
        let b = rasterize(&layout.transformed(&t), &moved, 64).unwrap();
        // Every drivable cell of one raster has a drivable cell within one cell in the other.
        for (x, y) in [(&a, &b), (&b, &a)] {
            for r in 0..64 {
                for c in 0..64 {
                    if x.value(r, c, DRIVABLE) > 0.5 {
                        let near = (r.saturating_sub(1)..=(r + 1).min(63))
                            .any(|rr| (c.saturating_sub(1)..=(c + 1).min(63)).any(|cc| y.value(rr, cc, DRIVABLE) > 0.5));
                        assert!(near, "{kind:?}: cell ({r}, {c}) has no counterpart");
                    }
                }
            }
        }
        let diff = a.data().iter().zip(b.data()).filter(|(p, q)| (*p - *q).abs() > 0.5).count();
        assert!(diff * 100 < a.data().len(), "{kind:?}: {diff} cells differ");
    }
}

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        n_train: 60,
        n_val: 20,
        seed,
        ..DatasetConfig::default()
    }
}

#[test]
fn ground_truth_futures_are_admissible() {
    let data = Dataset::generate(&small_config(3)).unwrap();
    for rec in &data.records {
        let field = rec.field().unwrap();
        let future = rec.future_agent();
        let flat: Vec<f64> = future.iter().flat_map(|p| [p[0], p[1]]).collect();
        let mut g = Graph::new();
        let set = g.constant(Tensor::new(vec![1, flat.len()], flat).unwrap());
        let loss = layout_loss(&mut g, set, field.agent_grid(), false).unwrap();
        assert_eq!(g.value(loss).item(), 0.0, "scene {}", rec.id);
        for p in &future {
            let (r, c) = rec.map.cell_of_agent_point(*p).expect("future inside raster");
            assert!(rec.map.value(r, c, DRIVABLE) > 0.5);
        }
    }
}

#[test]
fn field_sampling_is_continuous() {
    let data = Dataset::generate(&small_config(5)).unwrap();
    let field = data.records[0].field().unwrap();
    for i in 0..200 {
        let p = [-9.0 + 0.237 * i as f64, -20.0 + 0.2 * i as f64];
        let (a, _) = field.sample_agent(p);
        let (b, _) = field.sample_agent([p[0] + 1e-6, p[1] - 1e-6]);
        assert!((a - b).abs() < 1e-4);
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            for (k, v) in read_tree(&path) {
                out.insert(format!("{}/{k}", path.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn datasets_regenerate_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    Dataset::generate(&small_config(9)).unwrap().save(&a).unwrap();
    Dataset::generate(&small_config(9)).unwrap().save(&b).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert!(ta.len() > 80);
    assert_eq!(ta, tb);
    let loaded = Dataset::load(&a).unwrap();
    assert_eq!(loaded.records, Dataset::generate(&small_config(9)).unwrap().records);
}

#[test]
fn scene_ids_are_stable_across_corpus_sizes() {
    let small = Dataset::generate(&small_config(4)).unwrap();
    let large = Dataset::generate(&DatasetConfig {
        n_train: 90,
        ..small_config(4)
    })
    .unwrap();
    for rec in small.records.iter().take(60) {
        assert_eq!(large.find(&rec.id).map(|r| (r.kind, r.seed)), Some((rec.kind, rec.seed)));
    }
}
