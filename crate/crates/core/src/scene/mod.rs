//! Synthetic road scenes: layouts, simulated agents, rasters and the chamfer field.

pub mod agent;
pub mod chamfer;
pub mod dataset;
pub mod layout;
pub mod raster;

pub use agent::{simulate_agent, AgentParams, AgentRun};
pub use chamfer::{chamfer_distance, chamfer_transform, ChamferField};
pub use dataset::{Dataset, DatasetConfig, LayoutMix, SceneRecord, Split};
pub use layout::{generate_layout, GeometryParams, Layout, LayoutKind, Point, Polygon, Route};
pub use raster::{agent_frame, rasterize, SceneMap};

use crate::error::{Error, Result};

/// Positions sampled at a fixed rate, split into past and future at `t_past`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Vec<Point>,
    rate_hz: f64,
    t_past: usize,
}

impl Trajectory {
    pub fn new(points: Vec<Point>, rate_hz: f64, t_past: usize) -> Result<Self> {
        if t_past == 0 || t_past >= points.len() {
            return Err(Error::InvalidArgument(format!(
                "split index {t_past} invalid for {} points",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite trajectory point".into()));
        }
        Ok(Self {
            points,
            rate_hz,
            t_past,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn t_past(&self) -> usize {
        self.t_past
    }

    pub fn t_future(&self) -> usize {
        self.points.len() - self.t_past
    }

    pub fn past(&self) -> &[Point] {
        &self.points[..self.t_past]
    }

    pub fn future(&self) -> &[Point] {
        &self.points[self.t_past..]
    }

    /// Last past point: the present position.
    pub fn current(&self) -> Point {
        self.points[self.t_past - 1]
    }
}
