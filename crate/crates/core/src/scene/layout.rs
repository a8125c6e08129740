//! Procedural road layouts: drivable polygons plus the lane centerlines an
//! agent can follow.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdiv_autodiff::Affine2;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutKind {
    Straight,
    TIntersection,
    Crossroad,
    Curve,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 4] = [
        LayoutKind::Straight,
        LayoutKind::TIntersection,
        LayoutKind::Crossroad,
        LayoutKind::Curve,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutKind::Straight => "straight",
            LayoutKind::TIntersection => "t-intersection",
            LayoutKind::Crossroad => "crossroad",
            LayoutKind::Curve => "curve",
        }
    }
}

impl std::str::FromStr for LayoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayoutKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layout kind `{s}`")))
    }
}

/// Geometry knobs of a layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    /// Road width in meters, 3–8.
    pub road_width: f64,
    /// Centerline radius of the curve layout, ≥ 8 m.
    pub curve_radius: f64,
    /// Signed turning angle of the curve layout in radians (positive = left).
    pub curve_angle: f64,
    /// Length of each straight arm in meters.
    pub arm_length: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            road_width: 6.0,
            curve_radius: 15.0,
            curve_angle: PI / 2.0,
            arm_length: 120.0,
        }
    }
}

impl GeometryParams {
    pub const MIN_WIDTH: f64 = 3.0;
    pub const MAX_WIDTH: f64 = 8.0;
    pub const MIN_RADIUS: f64 = 8.0;

    /// Random parameters inside the documented ranges.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let angle = rng.random_range(PI / 4.0..2.0 * PI / 3.0);
        Self {
            road_width: rng.random_range(4.0..7.0),
            curve_radius: rng.random_range(10.0..30.0),
            curve_angle: if rng.random_bool(0.5) { angle } else { -angle },
            arm_length: 120.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(Self::MIN_WIDTH..=Self::MAX_WIDTH).contains(&self.road_width) {
            return Err(Error::InvalidGeometry(format!(
                "road width {} outside [3, 8] m",
                self.road_width
            )));
        }
        if self.curve_radius < Self::MIN_RADIUS {
            return Err(Error::InvalidGeometry(format!(
                "curve radius {} below 8 m",
                self.curve_radius
            )));
        }
        if self.curve_radius <= self.road_width / 2.0 {
            return Err(Error::InvalidGeometry(
                "curve inner edge folds onto itself".into(),
            ));
        }
        if !(self.curve_angle.abs() > 0.0 && self.curve_angle.abs() <= 2.0 * PI / 3.0) {
            return Err(Error::InvalidGeometry(format!(
                "curve angle {} rad makes the road cross its own approach",
                self.curve_angle
            )));
        }
        if self.arm_length < 60.0 {
            return Err(Error::InvalidGeometry(format!(
                "arm length {} m too short for a full trajectory",
                self.arm_length
            )));
        }
        Ok(())
    }
}

/// Convex polygon, counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon(pub Vec<Point>);

impl Polygon {
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.0;
        let n = v.len();
        (0..n).all(|i| {
            let a = v[i];
            let b = v[(i + 1) % n];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-12
        })
    }

    fn transformed(&self, t: &Affine2) -> Polygon {
        Polygon(self.0.iter().map(|&p| t.apply(p)).collect())
    }
}

/// Lane centerline as a polyline with cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    points: Vec<Point>,
    cumulative: Vec<f64>,
    /// Arc length at which this route leaves the shared approach.
    pub branch_at: f64,
}

impl Route {
    fn new(points: Vec<Point>, branch_at: f64) -> Self {
        let mut cumulative = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                s += dist(*p, points[i - 1]);
            }
            cumulative.push(s);
        }
        Self {
            points,
            cumulative,
            branch_at,
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// Position at arc length `s` (clamped to the route).
    pub fn point_at(&self, s: f64) -> Point {
        let s = s.clamp(0.0, self.length());
        let k = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.points.len() - 1);
        let (s0, s1) = (self.cumulative[k - 1], self.cumulative[k]);
        let f = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        let (a, b) = (self.points[k - 1], self.points[k]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// Distance from `p` to the polyline.
    pub fn distance_to(&self, p: Point) -> f64 {
        self.points
            .windows(2)
            .map(|w| segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    fn transformed(&self, t: &Affine2) -> Route {
        Route::new(self.points.iter().map(|&p| t.apply(p)).collect(), self.branch_at)
    }
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * d[0], a[1] + t * d[1]])
}

/// A generated road layout in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub kind: LayoutKind,
    pub geometry: GeometryParams,
    pub polygons: Vec<Polygon>,
    pub routes: Vec<Route>,
    /// Layout-local to world transform.
    pub frame: Affine2,
}

impl Layout {
    /// True when `p` lies in the union of the drivable polygons.
    pub fn is_drivable(&self, p: Point) -> bool {
        self.polygons.iter().any(|poly| poly.contains(p))
    }

    pub fn distance_to_centerline(&self, p: Point) -> f64 {
        self.routes
            .iter()
            .map(|r| r.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// The same layout moved by a rigid transform.
    pub fn transformed(&self, t: &Affine2) -> Layout {
        Layout {
            kind: self.kind,
            geometry: self.geometry,
            polygons: self.polygons.iter().map(|p| p.transformed(t)).collect(),
            routes: self.routes.iter().map(|r| r.transformed(t)).collect(),
            frame: t.compose(&self.frame),
        }
    }
}

const ARC_SEGMENTS: usize = 32;

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`, counter-clockwise.
fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Polygon {
    Polygon(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
}

/// Points of an arc around `center` from angle `a0` to `a1` (excluding the start).
fn arc(center: Point, radius: f64, a0: f64, a1: f64) -> Vec<Point> {
    (1..=ARC_SEGMENTS)
        .map(|k| {
            let a = a0 + (a1 - a0) * k as f64 / ARC_SEGMENTS as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Builds a layout in its local frame (approach along +x ending at the
/// origin) and places it in the world with a seed-derived rigid transform.
pub fn generate_layout(kind: LayoutKind, seed: u64, geometry: &GeometryParams) -> Result<Layout> {
    geometry.validate()?;
    let w = geometry.road_width;
    let hw = w / 2.0;
    let len = geometry.arm_length;
    let approach = |end_x: f64| vec![[-len, 0.0], [end_x, 0.0]];
    let (polygons, routes) = match kind {
        LayoutKind::Straight => (
            vec![rect(-len, len, -hw, hw)],
            vec![Route::new(vec![[-len, 0.0], [len, 0.0]], len)],
        ),
        LayoutKind::TIntersection | LayoutKind::Crossroad => {
            // Turns pivot around the inner corners of the junction square,
            // which keeps a half-width margin to the road edges everywhere.
            let mut polys = vec![rect(-hw, hw, -len, len)];
            let branch_at = len - hw;
            let mut left = approach(-hw);
            left.extend(arc([-hw, hw], hw, -PI / 2.0, 0.0));
            left.push([0.0, len]);
            let mut right = approach(-hw);
            right.extend(arc([-hw, -hw], hw, PI / 2.0, 0.0));
            right.push([0.0, -len]);
            let mut routes = vec![Route::new(left, branch_at), Route::new(right, branch_at)];
            if kind == LayoutKind::TIntersection {
                polys.push(rect(-len, hw, -hw, hw));
            } else {
                polys.push(rect(-len, len, -hw, hw));
                routes.insert(1, Route::new(vec![[-len, 0.0], [len, 0.0]], branch_at));
            }
            (polys, routes)
        }
        LayoutKind::Curve => {
            let r = geometry.curve_radius;
            let beta = geometry.curve_angle;
            let side = beta.signum();
            // Arc center to the left (positive side) or right of the approach.
            let center = [0.0, side * r];
            let a0 = -side * PI / 2.0;
            let a1 = a0 + beta;
            let mut polys = vec![rect(-len, 0.0, -hw, hw)];
            let at = |radius: f64, a: f64| [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
            for k in 0..ARC_SEGMENTS {
                let (t0, t1) = (
                    a0 + beta * k as f64 / ARC_SEGMENTS as f64,
                    a0 + beta * (k + 1) as f64 / ARC_SEGMENTS as f64,
                );
                let mut quad = vec![at(r - hw, t0), at(r + hw, t0), at(r + hw, t1), at(r - hw, t1)];
                if signed_area(&quad) < 0.0 {
                    quad.reverse();
                }
                polys.push(Polygon(quad));
            }
            let end = at(r, a1);
            let heading = beta;
            let dir = [heading.cos(), heading.sin()];
            let normal = [-dir[1], dir[0]];
            let far = [end[0] + len * dir[0], end[1] + len * dir[1]];
            let mut exit = vec![
                [end[0] - hw * normal[0], end[1] - hw * normal[1]],
                [far[0] - hw * normal[0], far[1] - hw * normal[1]],
                [far[0] + hw * normal[0], far[1] + hw * normal[1]],
                [end[0] + hw * normal[0], end[1] + hw * normal[1]],
            ];
            if signed_area(&exit) < 0.0 {
                exit.reverse();
            }
            polys.push(Polygon(exit));
            let mut pts = approach(0.0);
            pts.extend(arc(center, r, a0, a1));
            pts.push(far);
            (polys, vec![Route::new(pts, len)])
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_796f_7574);
    let frame = Affine2::rigid(
        rng.random_range(0.0..2.0 * PI),
        [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)],
    );
    let local = Layout {
        kind,
        geometry: *geometry,
        polygons,
        routes,
        frame: Affine2::IDENTITY,
    };
    Ok(local.transformed(&frame))
}

fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local(kind: LayoutKind, g: &GeometryParams) -> Layout {
        let l = generate_layout(kind, 1, g).unwrap();
        let back = l.frame.inverse().unwrap();
        l.transformed(&back)
    }

    #[test]
    fn straight_is_one_strip() {
        let g = GeometryParams {
            road_width: 6.0,
            ..Default::default()
        };
        let l = local(LayoutKind::Straight, &g);
        assert_eq!(l.polygons.len(), 1);
        assert!(l.is_drivable([50.0, 2.9]));
        assert!(!l.is_drivable([50.0, 3.1]));
    }

    #[test]
    fn crossroad_is_union_of_two_orthogonal_strips() {
        let g = GeometryParams::default();
        let l = local(LayoutKind::Crossroad, &g);
        assert_eq!(l.polygons.len(), 2);
        for p in [[-80.0, 0.0], [80.0, 2.0], [1.0, 70.0], [-2.0, -90.0]] {
            assert!(l.is_drivable(p), "{p:?}");
        }
        assert!(!l.is_drivable([10.0, 10.0]));
        assert_eq!(l.routes.len(), 3);
    }

    #[test]
    fn same_seed_same_polygons() {
        let g = GeometryParams::default();
        for kind in LayoutKind::ALL {
            assert_eq!(
                generate_layout(kind, 42, &g).unwrap(),
                generate_layout(kind, 42, &g).unwrap()
            );
        }
    }

    #[test]
    fn invalid_geometry_rejected() {
        let narrow = GeometryParams {
            road_width: 2.0,
            ..Default::default()
        };
        assert!(generate_layout(LayoutKind::Straight, 0, &narrow).is_err());
        let tight = GeometryParams {
            curve_radius: 5.0,
            ..Default::default()
        };
        assert!(generate_layout(LayoutKind::Curve, 0, &tight).is_err());
        let wrapped = GeometryParams {
            curve_angle: 3.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_layout(LayoutKind::Curve, 0, &wrapped),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn routes_stay_inside_with_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = GeometryParams::sample(&mut rng);
            for kind in LayoutKind::ALL {
                let l = generate_layout(kind, rng.random(), &g).unwrap();
                for r in &l.routes {
                    let mut s = 0.0;
                    while s < r.length() {
                        let p = r.point_at(s);
                        assert!(l.is_drivable(p), "{kind:?} route leaves road at s={s}");
                        s += 0.5;
                    }
                }
            }
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in LayoutKind::ALL {
            assert_eq!(k.as_str().parse::<LayoutKind>().unwrap(), k);
        }
    }
}
