//! Accuracy, spread and admissibility metrics over predicted trajectory sets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, SceneMap};

/// Value reported for rF when the best prediction hits the ground truth exactly.
pub const RF_CAP: f64 = 1e6;
/// DAO counts occupied drivable cells per this many drivable cells.
pub const DAO_SCALE: f64 = 1e4;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_set(preds: &[Vec<Point>], t: Option<usize>) -> Result<usize> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty prediction set".into()))?;
    let t = t.unwrap_or(first.len());
    if t == 0 || preds.iter().any(|p| p.len() != t) {
        return Err(Error::Shape(format!("every prediction needs {t} points")));
    }
    Ok(t)
}

fn ade(p: &[Point], q: &[Point]) -> f64 {
    p.iter().zip(q).map(|(a, b)| dist(*a, *b)).sum::<f64>() / p.len() as f64
}

fn fde(p: &[Point], q: &[Point]) -> f64 {
    dist(p[p.len() - 1], q[q.len() - 1])
}

/// Minimum over predictions of the average and of the final displacement error.
pub fn made_mfde(preds: &[Vec<Point>], truth: &[Point]) -> Result<(f64, f64)> {
    check_set(preds, Some(truth.len()))?;
    let made = preds.iter().map(|p| ade(p, truth)).fold(f64::INFINITY, f64::min);
    let mfde = preds.iter().map(|p| fde(p, truth)).fold(f64::INFINITY, f64::min);
    Ok((made, mfde))
}

/// Mean final displacement error over predictions.
pub fn avg_fde(preds: &[Vec<Point>], truth: &[Point]) -> Result<f64> {
    check_set(preds, Some(truth.len()))?;
    Ok(preds.iter().map(|p| fde(p, truth)).sum::<f64>() / preds.len() as f64)
}

/// `avgFDE / mFDE`; `(RF_CAP, true)` when mFDE vanishes.
pub fn rf(preds: &[Vec<Point>], truth: &[Point]) -> Result<(f64, bool)> {
    let (_, mfde) = made_mfde(preds, truth)?;
    let avg = avg_fde(preds, truth)?;
    if mfde < 1e-12 {
        return Ok((RF_CAP, true));
    }
    Ok(((avg / mfde).max(1.0), false))
}

/// Mean over predictions of the distance to the nearest other prediction:
/// time-averaged (ASD) and at the final step (FSD).
pub fn asd_fsd(preds: &[Vec<Point>]) -> Result<(f64, f64)> {
    check_set(preds, None)?;
    let n = preds.len();
    if n < 2 {
        return Err(Error::InvalidArgument("self distances need at least two predictions".into()));
    }
    let mut asd = 0.0;
    let mut fsd = 0.0;
    for i in 0..n {
        let others = (0..n).filter(|&j| j != i);
        asd += others.clone().map(|j| ade(&preds[i], &preds[j])).fold(f64::INFINITY, f64::min);
        fsd += others.map(|j| fde(&preds[i], &preds[j])).fold(f64::INFINITY, f64::min);
    }
    Ok((asd / n as f64, fsd / n as f64))
}

fn drivable_cell(map: &SceneMap, mask: &[bool], p: Point) -> Option<usize> {
    map.cell_of_agent_point(p)
        .map(|(r, c)| r * map.size() + c)
        .filter(|&i| mask[i])
}

/// `(N − m) / N` with `m` the predictions having any point off the drivable
/// cells or outside the raster. Points are in the map's agent frame.
pub fn dac(preds: &[Vec<Point>], map: &SceneMap) -> Result<f64> {
    check_set(preds, None)?;
    let mask = map.drivable_mask();
    let exiting = preds
        .iter()
        .filter(|p| p.iter().any(|&q| drivable_cell(map, &mask, q).is_none()))
        .count();
    Ok((preds.len() - exiting) as f64 / preds.len() as f64)
}

/// Distinct drivable cells touched by any point, per `DAO_SCALE` drivable cells.
pub fn dao(preds: &[Vec<Point>], map: &SceneMap) -> Result<f64> {
    check_set(preds, None)?;
    let mask = map.drivable_mask();
    let total = mask.iter().filter(|&&d| d).count();
    if total == 0 {
        return Err(Error::InvalidArgument("map has no drivable cells".into()));
    }
    let mut cells: Vec<usize> = preds
        .iter()
        .flatten()
        .filter_map(|&q| drivable_cell(map, &mask, q))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    Ok(cells.len() as f64 * DAO_SCALE / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub id: String,
    pub made: f64,
    pub mfde: f64,
    pub avg_fde: f64,
    pub rf: f64,
    pub rf_capped: bool,
    pub asd: f64,
    pub fsd: f64,
    pub dac: f64,
    pub dao: f64,
}

impl SceneMetrics {
    /// All metrics for one scene; predictions and truth in the map's agent frame.
    pub fn compute(id: &str, preds: &[Vec<Point>], truth: &[Point], map: &SceneMap) -> Result<Self> {
        let (made, mfde) = made_mfde(preds, truth)?;
        let (rf, rf_capped) = rf(preds, truth)?;
        let (asd, fsd) = asd_fsd(preds)?;
        Ok(Self {
            id: id.to_string(),
            made,
            mfde,
            avg_fde: avg_fde(preds, truth)?,
            rf,
            rf_capped,
            asd,
            fsd,
            dac: dac(preds, map)?,
            dao: dao(preds, map)?,
        })
    }
}

/// Corpus means of the per-scene metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub made: f64,
    pub mfde: f64,
    pub avg_fde: f64,
    pub rf: f64,
    pub asd: f64,
    pub fsd: f64,
    pub dac: f64,
    pub dao: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sampler: String,
    pub n: usize,
    pub scene_count: usize,
    /// Scenes whose rF was capped.
    pub rf_capped: usize,
    pub mean: MetricMeans,
    pub scenes: Vec<SceneMetrics>,
}

impl EvalReport {
    pub fn from_scenes(sampler: &str, n: usize, scenes: Vec<SceneMetrics>) -> Self {
        let k = scenes.len().max(1) as f64;
        let avg = |f: fn(&SceneMetrics) -> f64| scenes.iter().map(f).sum::<f64>() / k;
        let mean = MetricMeans {
            made: avg(|s| s.made),
            mfde: avg(|s| s.mfde),
            avg_fde: avg(|s| s.avg_fde),
            rf: avg(|s| s.rf),
            asd: avg(|s| s.asd),
            fsd: avg(|s| s.fsd),
            dac: avg(|s| s.dac),
            dao: avg(|s| s.dao),
        };
        Self {
            sampler: sampler.to_string(),
            n,
            scene_count: scenes.len(),
            rf_capped: scenes.iter().filter(|s| s.rf_capped).count(),
            mean,
            scenes,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per scene.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,made,mfde,avg_fde,rf,rf_capped,asd,fsd,dac,dao\n");
        for s in &self.scenes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.id, s.made, s.mfde, s.avg_fde, s.rf, s.rf_capped, s.asd, s.fsd, s.dac, s.dao
            );
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Fixed-width comparison table of corpus means.
pub fn summary_table(rows: &[(String, MetricMeans)]) -> String {
    let mut out = format!(
        "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "method", "mADE", "mFDE", "rF", "ASD", "FSD", "DAC", "DAO"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{:<22} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.2}",
            name, m.made, m.mfde, m.rf, m.asd, m.fsd, m.dac, m.dao
        );
    }
    out
}
