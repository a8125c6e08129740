//! Single-agent driving simulation along a lane centerline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layout::{Layout, Point};
use super::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub rate_hz: f64,
    pub t_past: usize,
    pub t_future: usize,
    /// Nominal speed range in m/s.
    pub speed_range: (f64, f64),
    /// Std-dev of the multiplicative per-step speed noise.
    pub speed_noise: f64,
    pub v_max: f64,
    /// Distance range before the branch point at which the present is placed.
    pub lead_in: (f64, f64),
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            rate_hz: 2.0,
            t_past: 12,
            t_future: 6,
            speed_range: (4.0, 9.0),
            speed_noise: 0.1,
            v_max: 15.0,
            lead_in: (2.0, 12.0),
        }
    }
}

/// A simulated run: the trajectory and the index of the route it followed.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRun {
    pub trajectory: Trajectory,
    pub route: usize,
}

pub fn simulate_agent(layout: &Layout, seed: u64, params: &AgentParams) -> Result<AgentRun> {
    if layout.routes.is_empty() {
        return Err(Error::NoFeasiblePath("layout has no centerline".into()));
    }
    if params.t_past == 0 || params.t_future == 0 || params.rate_hz <= 0.0 {
        return Err(Error::InvalidArgument("empty horizon or non-positive rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let route_idx = rng.random_range(0..layout.routes.len());
    let route = &layout.routes[route_idx];
    let v0 = rng.random_range(params.speed_range.0..=params.speed_range.1);
    let lead = rng.random_range(params.lead_in.0..=params.lead_in.1);
    let noise = Normal::new(0.0, params.speed_noise.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let total = params.t_past + params.t_future;
    let steps: Vec<f64> = (1..total)
        .map(|_| {
            let eps = if params.speed_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v0 * (1.0 + eps)).clamp(0.5, params.v_max) / params.rate_hz
        })
        .collect();
    // steps[k] is the displacement from point k to point k + 1.
    let present = route.branch_at - lead;
    let mut s = vec![0.0; total];
    s[params.t_past - 1] = present;
    for k in (0..params.t_past - 1).rev() {
        s[k] = s[k + 1] - steps[k];
    }
    for k in params.t_past..total {
        s[k] = s[k - 1] + steps[k - 1];
    }
    if s[0] < 0.0 || s[total - 1] > route.length() {
        return Err(Error::NoFeasiblePath(format!(
            "route of length {:.1} m cannot hold arc lengths [{:.1}, {:.1}]",
            route.length(),
            s[0],
            s[total - 1]
        )));
    }
    let points: Vec<Point> = s.iter().map(|&si| route.point_at(si)).collect();
    Ok(AgentRun {
        trajectory: Trajectory::new(points, params.rate_hz, params.t_past)?,
        route: route_idx,
    })
}
