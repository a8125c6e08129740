//! Agent-centered, heading-aligned rasterization of a scene.

use tdiv_autodiff::Affine2;

use super::layout::{Layout, Point};
use super::Trajectory;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const DRIVABLE: usize = 0;
pub const LANES: usize = 1;
pub const AGENTS: usize = 2;

/// Meters covered in front of, behind, and to each side of the agent.
pub const AHEAD: f64 = 40.0;
pub const BEHIND: f64 = 10.0;
pub const SIDE: f64 = 25.0;

pub const MIN_GRID_SIZE: usize = 32;

const LANE_HALF_WIDTH: f64 = 0.75;
const AGENT_LENGTH: f64 = 4.5;
const AGENT_WIDTH: f64 = 2.0;
const TRAIL_RADIUS: f64 = 0.75;

/// `size × size × 3` raster stored channels-last, with its placement in the world.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMap {
    size: usize,
    data: Vec<f64>,
    world_to_agent: Affine2,
}

impl SceneMap {
    pub fn from_parts(size: usize, data: Vec<f64>, world_to_agent: Affine2) -> Result<Self> {
        if data.len() != size * size * CHANNELS {
            return Err(Error::Shape(format!(
                "raster of size {size} needs {} values, got {}",
                size * size * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            size,
            data,
            world_to_agent,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cell_size(&self) -> f64 {
        cell_size(self.size)
    }

    /// Row-major `[H, W, C]` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.size + col) * CHANNELS + channel]
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.data.iter().skip(channel).step_by(CHANNELS).copied().collect()
    }

    pub fn drivable_mask(&self) -> Vec<bool> {
        self.data.iter().step_by(CHANNELS).map(|&v| v > 0.5).collect()
    }

    pub fn drivable_count(&self) -> usize {
        self.drivable_mask().iter().filter(|&&d| d).count()
    }

    pub fn world_to_agent(&self) -> &Affine2 {
        &self.world_to_agent
    }

    pub fn agent_to_world(&self) -> Affine2 {
        self.world_to_agent.inverse().expect("rigid transform")
    }

    /// Agent frame to continuous grid coordinates `(u, v)` = (column, row).
    pub fn agent_to_grid(&self) -> Affine2 {
        agent_to_grid(self.size)
    }

    /// World frame to continuous grid coordinates.
    pub fn world_to_grid(&self) -> Affine2 {
        self.agent_to_grid().compose(&self.world_to_agent)
    }

    /// Cell containing a point given in the agent frame, if inside the raster.
    pub fn cell_of_agent_point(&self, p: Point) -> Option<(usize, usize)> {
        cell_of(&self.agent_to_grid(), self.size, p)
    }

    pub fn cell_of_world_point(&self, p: Point) -> Option<(usize, usize)> {
        cell_of(&self.world_to_grid(), self.size, p)
    }

    /// The cell holding the agent's present position.
    pub fn anchor_cell(&self) -> (usize, usize) {
        self.cell_of_agent_point([0.0, 0.0]).expect("anchor inside raster")
    }

    /// Center of a cell in the agent frame.
    pub fn cell_center_agent(&self, row: usize, col: usize) -> Point {
        cell_center_agent(self.size, row, col)
    }
}

fn cell_size(size: usize) -> f64 {
    (AHEAD + BEHIND) / size as f64
}

fn agent_to_grid(size: usize) -> Affine2 {
    let c = cell_size(size);
    Affine2 {
        a: [[1.0 / c, 0.0], [0.0, -1.0 / c]],
        t: [BEHIND / c - 0.5, SIDE / c - 0.5],
    }
}

fn cell_center_agent(size: usize, row: usize, col: usize) -> Point {
    let c = cell_size(size);
    [(col as f64 + 0.5) * c - BEHIND, SIDE - (row as f64 + 0.5) * c]
}

fn cell_of(to_grid: &Affine2, size: usize, p: Point) -> Option<(usize, usize)> {
    let [u, v] = to_grid.apply(p);
    let (col, row) = ((u + 0.5).floor(), (v + 0.5).floor());
    let n = size as f64;
    (col >= 0.0 && col < n && row >= 0.0 && row < n).then_some((row as usize, col as usize))
}

/// Heading of the last non-degenerate past displacement.
pub fn heading(past: &[Point]) -> f64 {
    past.windows(2)
        .rev()
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        .find(|d| d[0].hypot(d[1]) > 1e-9)
        .map_or(0.0, |d| d[1].atan2(d[0]))
}

/// World-to-agent transform: origin at the present position, +x along the heading.
pub fn agent_frame(trajectory: &Trajectory) -> Affine2 {
    let current = trajectory.current();
    let theta = heading(trajectory.past());
    Affine2::rigid(theta, current).inverse().expect("rigid transform")
}

pub fn rasterize(layout: &Layout, trajectory: &Trajectory, size: usize) -> Result<SceneMap> {
    if size < MIN_GRID_SIZE {
        return Err(Error::InvalidArgument(format!(
            "grid size {size} below {MIN_GRID_SIZE}"
        )));
    }
    let world_to_agent = agent_frame(trajectory);
    let agent_to_world = world_to_agent.inverse().expect("rigid transform");
    let past_agent: Vec<Point> = trajectory.past().iter().map(|&p| world_to_agent.apply(p)).collect();
    let t_past = past_agent.len() as f64;
    let mut data = vec![0.0; size * size * CHANNELS];
    for row in 0..size {
        for col in 0..size {
            let pa = cell_center_agent(size, row, col);
            let pw = agent_to_world.apply(pa);
            let cell = &mut data[(row * size + col) * CHANNELS..][..CHANNELS];
            if layout.is_drivable(pw) {
                cell[DRIVABLE] = 1.0;
                cell[LANES] = (1.0 - layout.distance_to_centerline(pw) / LANE_HALF_WIDTH).max(0.0);
            }
            let mut agent = if pa[0].abs() <= AGENT_LENGTH / 2.0 && pa[1].abs() <= AGENT_WIDTH / 2.0 {
                1.0
            } else {
                0.0
            };
            for (k, q) in past_agent.iter().enumerate() {
                if (pa[0] - q[0]).hypot(pa[1] - q[1]) <= TRAIL_RADIUS {
                    agent = f64::max(agent, (k + 1) as f64 / t_past);
                }
            }
            cell[AGENTS] = agent;
        }
    }
    SceneMap::from_parts(size, data, world_to_agent)
}
