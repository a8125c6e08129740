//! Bilinear sampling of a scalar grid at continuous coordinates.

/// 2D affine map `p ↦ A·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// Rotation by `angle` followed by translation.
    pub fn rigid(angle: f64, translation: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            a: [[c, -s], [s, c]],
            t: translation,
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Affine2) -> Affine2 {
        let mut a = [[0.0; 2]; 2];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.a[i][0] * inner.a[0][j] + self.a[i][1] * inner.a[1][j];
            }
        }
        let t = self.apply(inner.t);
        Affine2 { a, t }
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
        if det.abs() < 1e-300 {
            return None;
        }
        let a = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        let t = [
            -(a[0][0] * self.t[0] + a[0][1] * self.t[1]),
            -(a[1][0] * self.t[0] + a[1][1] * self.t[1]),
        ];
        Some(Affine2 { a, t })
    }
}

/// Scalar field on a `rows × cols` grid together with the affine map from
/// caller coordinates to continuous grid coordinates `(u, v)` = (column, row).
///
/// Cell `(r, c)` has its center at `(u, v) = (c, r)`. Points outside
/// `[-0.5, cols - 0.5] × [-0.5, rows - 0.5]` evaluate to `outside` with zero
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    to_grid: Affine2,
    outside: f64,
}

impl BilinearGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, to_grid: Affine2, outside: f64) -> Self {
        assert_eq!(values.len(), rows * cols, "grid values length");
        assert!(rows > 0 && cols > 0, "empty grid");
        Self {
            rows,
            cols,
            values,
            to_grid,
            outside,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_grid(&self) -> &Affine2 {
        &self.to_grid
    }

    pub fn outside_value(&self) -> f64 {
        self.outside
    }

    /// Same values, but sampled in a frame related to the current one by
    /// `frame_to_current`.
    pub fn reframed(&self, frame_to_current: &Affine2) -> BilinearGrid {
        BilinearGrid {
            to_grid: self.to_grid.compose(frame_to_current),
            ..self.clone()
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Value and gradient with respect to the input point.
    pub fn sample(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let [u, v] = self.to_grid.apply(p);
        let (umax, vmax) = ((self.cols - 1) as f64, (self.rows - 1) as f64);
        if !(u >= -0.5 && u <= umax + 0.5 && v >= -0.5 && v <= vmax + 0.5) {
            return (self.outside, [0.0, 0.0]);
        }
        let (uc, u_active) = clamp_axis(u, umax);
        let (vc, v_active) = clamp_axis(v, vmax);
        let c0 = (uc.floor() as usize).min(self.cols.saturating_sub(2));
        let r0 = (vc.floor() as usize).min(self.rows.saturating_sub(2));
        let c1 = (c0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let fu = uc - c0 as f64;
        let fv = vc - r0 as f64;
        let (q00, q01, q10, q11) = (self.at(r0, c0), self.at(r0, c1), self.at(r1, c0), self.at(r1, c1));
        let top = q00 + fu * (q01 - q00);
        let bottom = q10 + fu * (q11 - q10);
        let value = top + fv * (bottom - top);
        let du = if u_active {
            (1.0 - fv) * (q01 - q00) + fv * (q11 - q10)
        } else {
            0.0
        };
        let dv = if v_active { bottom - top } else { 0.0 };
        let a = &self.to_grid.a;
        let grad = [a[0][0] * du + a[1][0] * dv, a[0][1] * du + a[1][1] * dv];
        (value, grad)
    }
}

fn clamp_axis(x: f64, max: f64) -> (f64, bool) {
    if x < 0.0 {
        (0.0, false)
    } else if x > max {
        (max, false)
    } else {
        (x, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> BilinearGrid {
        // 2×2 grid: column 0 is 0, column 1 is 1.
        BilinearGrid::new(2, 2, vec![0.0, 1.0, 0.0, 1.0], Affine2::IDENTITY, 1.0)
    }

    #[test]
    fn cell_center_and_midpoint() {
        let g = ramp();
        assert_eq!(g.sample([0.0, 0.0]).0, 0.0);
        assert_eq!(g.sample([0.5, 0.0]).0, 0.5);
        assert_eq!(g.sample([0.5, 0.7]).1, [1.0, 0.0]);
    }

    #[test]
    fn outside_is_constant() {
        let g = ramp();
        assert_eq!(g.sample([5.0, 0.0]), (1.0, [0.0, 0.0]));
        assert_eq!(g.sample([-0.6, 0.0]), (1.0, [0.0, 0.0]));
    }

    #[test]
    fn affine_inverse_round_trip() {
        let t = Affine2::rigid(0.7, [3.0, -2.0]);
        let back = t.inverse().unwrap().compose(&t);
        let p = back.apply([1.5, -4.0]);
        assert!((p[0] - 1.5).abs() < 1e-12 && (p[1] + 4.0).abs() < 1e-12);
    }
}
