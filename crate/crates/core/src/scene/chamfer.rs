//! 3/4 chamfer distance to the drivable set, and its differentiable sampler.

use std::sync::Arc;

use tdiv_autodiff::{Affine2, BilinearGrid};

use super::raster::SceneMap;
use crate::error::{Error, Result};

/// Unnormalized 3/4 chamfer distance in cell units (orthogonal step 1, diagonal 4/3).
pub fn chamfer_distance(mask: &[bool], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if mask.len() != rows * cols {
        return Err(Error::Shape(format!(
            "mask has {} cells, expected {rows}×{cols}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("drivable set is empty".into()));
    }
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let idx = |r: usize, c: usize| r * cols + c;
    for r in 0..rows {
        for c in 0..cols {
            let mut best = d[idx(r, c)];
            if c > 0 {
                best = best.min(d[idx(r, c - 1)] + 3.0);
            }
            if r > 0 {
                best = best.min(d[idx(r - 1, c)] + 3.0);
                if c > 0 {
                    best = best.min(d[idx(r - 1, c - 1)] + 4.0);
                }
                if c + 1 < cols {
                    best = best.min(d[idx(r - 1, c + 1)] + 4.0);
                }
            }
            d[idx(r, c)] = best;
        }
    }
    for r in (0..rows).rev() {
        for c in (0..cols).rev() {
            let mut best = d[idx(r, c)];
            if c + 1 < cols {
                best = best.min(d[idx(r, c + 1)] + 3.0);
            }
            if r + 1 < rows {
                best = best.min(d[idx(r + 1, c)] + 3.0);
                if c + 1 < cols {
                    best = best.min(d[idx(r + 1, c + 1)] + 4.0);
                }
                if c > 0 {
                    best = best.min(d[idx(r + 1, c - 1)] + 4.0);
                }
            }
            d[idx(r, c)] = best;
        }
    }
    Ok(d.into_iter().map(|v| v / 3.0).collect())
}

/// Chamfer distance normalized to `[0, 1]`.
pub fn chamfer_transform(mask: &[bool], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let d = chamfer_distance(mask, rows, cols)?;
    let max = d.iter().copied().fold(0.0, f64::max);
    let max = if max > 0.0 { max } else { 1.0 };
    Ok(d.into_iter().map(|v| v / max).collect())
}

/// Soft off-road penalty field of a scene. Points outside the raster are
/// charged 1 with zero gradient.
#[derive(Debug, Clone)]
pub struct ChamferField {
    world: Arc<BilinearGrid>,
    agent: Arc<BilinearGrid>,
}

impl ChamferField {
    pub fn from_map(map: &SceneMap) -> Result<Self> {
        let n = map.size();
        let values = chamfer_transform(&map.drivable_mask(), n, n)?;
        let agent = BilinearGrid::new(n, n, values, map.agent_to_grid(), 1.0);
        let world = agent.reframed(map.world_to_agent());
        Ok(Self {
            world: Arc::new(world),
            agent: Arc::new(agent),
        })
    }

    /// Grid sampled with world coordinates.
    pub fn world_grid(&self) -> &Arc<BilinearGrid> {
        &self.world
    }

    /// Grid sampled with agent-frame coordinates.
    pub fn agent_grid(&self) -> &Arc<BilinearGrid> {
        &self.agent
    }

    pub fn values(&self) -> &[f64] {
        self.agent.values()
    }

    pub fn sample_world(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        self.world.sample(p)
    }

    pub fn sample_agent(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        self.agent.sample(p)
    }

    /// Same field with a caller-supplied map from sample coordinates to grid coordinates.
    pub fn with_transform(values: Vec<f64>, size: usize, to_grid: Affine2) -> Self {
        let grid = Arc::new(BilinearGrid::new(size, size, values, to_grid, 1.0));
        Self {
            world: grid.clone(),
            agent: grid,
        }
    }
}
