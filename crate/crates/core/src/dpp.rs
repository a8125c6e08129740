//! L-ensemble kernels over trajectory sets and the expected-cardinality loss.
//!
//! A trajectory set is a `[N, 2·T]` matrix whose rows are flattened
//! trajectories `(x₀, y₀, x₁, y₁, …)`; the last two columns are the endpoints.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use tdiv_autodiff::linalg::{determinant, inverse, principal_submatrix, DEFAULT_CONDITION_BOUND};
use tdiv_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Base diagonal jitter added to every kernel.
pub const KERNEL_JITTER: f64 = 1e-8;
/// Segments shorter than this have no direction.
pub const ANGLE_EPS: f64 = 1e-8;
/// Floor on the mean inner value during α calibration.
pub const ALPHA_EPS: f64 = 1e-6;
/// Largest set handled by the enumeration oracles.
pub const MAX_ORACLE_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// Angle between endpoint directions plus squared trajectory distance.
    Compound,
    DistanceOnly,
    AngleOnly,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compound" => Ok(KernelKind::Compound),
            "distance-only" => Ok(KernelKind::DistanceOnly),
            "angle-only" => Ok(KernelKind::AngleOnly),
            _ => Err(Error::InvalidArgument(format!("unknown kernel kind `{s}`"))),
        }
    }
}

/// How the bandwidth α relates to the mean inner value `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// α = 1 / max(m, ε).
    ReciprocalMean,
    /// α = max(m, ε).
    LiteralMean,
}

/// A kernel matrix with the diagonal jitter that was added to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DppKernelMatrix {
    pub entries: Tensor,
    pub jitter: f64,
    pub kind: KernelKind,
    pub alpha: f64,
}

/// Un-oriented angle between `origin → a` and `origin → b`, and whether either
/// segment was degenerate (in which case the angle is 0).
pub fn angular_deviation(origin: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, bool) {
    let u = [a[0] - origin[0], a[1] - origin[1]];
    let v = [b[0] - origin[0], b[1] - origin[1]];
    if u[0].hypot(u[1]) <= ANGLE_EPS || v[0].hypot(v[1]) <= ANGLE_EPS {
        return (0.0, true);
    }
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    (cross.atan2(dot).abs(), false)
}

fn check_set(set: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = set.dims2()?;
    if n < 2 || d < 2 || d % 2 != 0 {
        return Err(Error::Shape(format!(
            "trajectory set must be [N ≥ 2, 2·T], got {:?}",
            set.shape()
        )));
    }
    Ok((n, d))
}

/// Inner values `θᵢⱼ + ‖Sᵢ − Sⱼ‖²_F` (or the single term selected by `kind`).
pub fn inner_values(g: &mut Graph, set: Var, origin: [f64; 2], kind: KernelKind) -> Result<Var> {
    let (_, d) = check_set(g.value(set))?;
    let dist = kind != KernelKind::AngleOnly;
    let angle = kind != KernelKind::DistanceOnly;
    let sq = if dist { Some(g.pairwise_sq_dist(set)?) } else { None };
    let th = if angle {
        let ends = g.slice(set, 1, d - 2, 2)?;
        Some(g.pairwise_angle(ends, origin, ANGLE_EPS)?)
    } else {
        None
    };
    Ok(match (sq, th) {
        (Some(a), Some(b)) => g.add(b, a)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!(),
    })
}

/// Bandwidth calibrated on the mean inner value of the set; a constant with
/// respect to the trajectories.
pub fn calibrate_alpha(set: &Tensor, origin: [f64; 2], kind: KernelKind, mode: AlphaMode) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(set.clone());
    let inner = inner_values(&mut g, s, origin, kind)?;
    let m = g.value(inner).data().iter().sum::<f64>() / g.value(inner).numel() as f64;
    Ok(match mode {
        AlphaMode::ReciprocalMean => 1.0 / m.max(ALPHA_EPS),
        AlphaMode::LiteralMean => m.max(ALPHA_EPS),
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Tensor) -> Result<f64> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::Shape(format!("expected square matrix, got {:?}", a.shape())));
    }
    let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (a.at2(i, j) + a.at2(j, i)));
    Ok(SymmetricEigen::new(mat).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Records the kernel `exp(−α·inner) + jitter·I` on the graph. The jitter is
/// `1e-8` plus whatever is needed to lift the smallest eigenvalue to zero.
pub fn kernel_graph(
    g: &mut Graph,
    set: Var,
    origin: [f64; 2],
    kind: KernelKind,
    alpha: f64,
) -> Result<(Var, f64)> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("kernel bandwidth must be positive, got {alpha}")));
    }
    let n = g.value(set).shape()[0];
    let inner = inner_values(g, set, origin, kind)?;
    let scaled = g.scale(inner, -alpha)?;
    let raw = g.exp(scaled)?;
    let jitter = KERNEL_JITTER + (-min_eigenvalue(g.value(raw))?).max(0.0);
    let eye = g.constant(Tensor::eye(n).scale(jitter));
    Ok((g.add(raw, eye)?, jitter))
}

/// Kernel values for a set, with α supplied or calibrated.
pub fn build_kernel(set: &Tensor, origin: [f64; 2], kind: KernelKind, alpha: f64) -> Result<DppKernelMatrix> {
    let mut g = Graph::new();
    let s = g.constant(set.clone());
    let (l, jitter) = kernel_graph(&mut g, s, origin, kind, alpha)?;
    Ok(DppKernelMatrix {
        entries: g.value(l).clone(),
        jitter,
        kind,
        alpha,
    })
}

/// `trace((L + I)⁻¹) − N`: the negated expected cardinality.
pub fn dpp_loss(g: &mut Graph, l: Var) -> Result<Var> {
    let n = g.value(l).shape()[0];
    let eye = g.constant(Tensor::eye(n));
    let shifted = g.add(l, eye)?;
    let inv = g.inverse(shifted)?;
    let tr = g.trace(inv)?;
    Ok(g.add_scalar(tr, -(n as f64))?)
}

/// `trace(I − (L + I)⁻¹)`.
pub fn expected_cardinality(l: &Tensor) -> Result<f64> {
    let n = l.dims2()?.0;
    let inv = inverse(&shifted(l)?, DEFAULT_CONDITION_BOUND)?;
    Ok((0..n).map(|i| 1.0 - inv.at2(i, i)).sum())
}

fn shifted(l: &Tensor) -> Result<Tensor> {
    let (n, m) = l.dims2()?;
    if n != m {
        return Err(Error::Shape(format!("kernel must be square, got {:?}", l.shape())));
    }
    let mut s = l.clone();
    for i in 0..n {
        s.data_mut()[i * n + i] += 1.0;
    }
    Ok(s)
}

/// Marginal kernel `K = (L + I)⁻¹ L`.
pub fn marginal_kernel(l: &Tensor) -> Result<Tensor> {
    let inv = inverse(&shifted(l)?, DEFAULT_CONDITION_BOUND)?;
    Ok(inv.matmul(l)?)
}

/// `P[A ⊇ {a, b}] = K_aa K_bb − K_ab²`.
pub fn pair_inclusion(k: &Tensor, a: usize, b: usize) -> f64 {
    k.at2(a, a) * k.at2(b, b) - k.at2(a, b) * k.at2(b, a)
}

/// Brute-force references over all subsets of the ground set.
pub mod oracle {
    use super::*;

    fn check(l: &Tensor) -> Result<usize> {
        let n = l.dims2()?.0;
        if n > MAX_ORACLE_N {
            return Err(Error::InvalidArgument(format!(
                "enumeration limited to N ≤ {MAX_ORACLE_N}, got {n}"
            )));
        }
        Ok(n)
    }

    fn members(mask: usize, n: usize) -> Vec<usize> {
        (0..n).filter(|i| mask >> i & 1 == 1).collect()
    }

    /// `det(L_B) / det(L + I)`.
    pub fn subset_probability(l: &Tensor, subset: &[usize]) -> Result<f64> {
        check(l)?;
        let num = determinant(&principal_submatrix(l, subset)?)?;
        Ok(num / determinant(&shifted(l)?)?)
    }

    /// Probabilities of all `2^N` subsets, indexed by bitmask.
    pub fn all_subset_probabilities(l: &Tensor) -> Result<Vec<f64>> {
        let n = check(l)?;
        let z = determinant(&shifted(l)?)?;
        (0..1usize << n)
            .map(|mask| Ok(determinant(&principal_submatrix(l, &members(mask, n))?)? / z))
            .collect()
    }

    /// `Σ_B |B| · P[A = B]`.
    pub fn expected_cardinality(l: &Tensor) -> Result<f64> {
        Ok(all_subset_probabilities(l)?
            .iter()
            .enumerate()
            .map(|(mask, p)| mask.count_ones() as f64 * p)
            .sum())
    }

    /// `Σ_{B ⊇ required} P[A = B]`.
    pub fn inclusion_probability(l: &Tensor, required: &[usize]) -> Result<f64> {
        let want = required.iter().fold(0usize, |m, &i| m | 1 << i);
        Ok(all_subset_probabilities(l)?
            .iter()
            .enumerate()
            .filter(|(mask, _)| mask & want == want)
            .map(|(_, p)| p)
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn angles() {
        let o = [0.0, 0.0];
        assert_eq!(angular_deviation(o, [1.0, 0.0], [1.0, 0.0]), (0.0, false));
        assert!((angular_deviation(o, [1.0, 0.0], [0.0, 1.0]).0 - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((angular_deviation(o, [1.0, 0.0], [-1.0, 0.0]).0 - std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(angular_deviation(o, [0.0, 0.0], [1.0, 0.0]), (0.0, true));
    }

    #[test]
    fn hand_evaluated_entry() {
        // Endpoints (1,0) and (0,1): θ = π/2, squared distance 2.
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let k = build_kernel(&s, [0.0, 0.0], KernelKind::Compound, 0.5).unwrap();
        let expected = (-0.5f64 * (std::f64::consts::FRAC_PI_2 + 2.0)).exp();
        assert!((k.entries.at2(0, 1) - expected).abs() < 1e-15);
        assert!((k.entries.at2(0, 0) - 1.0 - k.jitter).abs() < 1e-15);
    }

    #[test]
    fn identical_trajectories_give_ones() {
        let s = set(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]]);
        let k = build_kernel(&s, [0.0, 0.0], KernelKind::Compound, 3.0).unwrap();
        assert_eq!(k.entries.at2(0, 1), 1.0);
        assert_eq!(calibrate_alpha(&s, [0.0, 0.0], KernelKind::Compound, AlphaMode::ReciprocalMean).unwrap(), 1.0 / ALPHA_EPS);
    }

    #[test]
    fn nonpositive_alpha_rejected() {
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(build_kernel(&s, [0.0, 0.0], KernelKind::Compound, 0.0).is_err());
        assert!(build_kernel(&s, [0.0, 0.0], KernelKind::Compound, -1.0).is_err());
    }

    #[test]
    fn loss_examples() {
        let eval = |l: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(l);
            let loss = dpp_loss(&mut g, v).unwrap();
            g.value(loss).item()
        };
        assert!((eval(Tensor::eye(2)) + 1.0).abs() < 1e-15);
        assert!((eval(Tensor::ones(&[2, 2])) + 2.0 / 3.0).abs() < 1e-15);
        for n in [3, 5, 8] {
            let card = -eval(Tensor::ones(&[n, n]));
            assert!((card - n as f64 / (n as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_examples() {
        let eye = Tensor::eye(2);
        let probs = oracle::all_subset_probabilities(&eye).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((oracle::expected_cardinality(&eye).unwrap() - 1.0).abs() < 1e-15);
        assert!((expected_cardinality(&eye).unwrap() - 1.0).abs() < 1e-15);
        let ones = Tensor::ones(&[2, 2]);
        assert_eq!(oracle::subset_probability(&ones, &[0, 1]).unwrap(), 0.0);
        let diag = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!((expected_cardinality(&diag).unwrap() - 0.75).abs() < 1e-15);
        assert!(oracle::subset_probability(&eye, &[2]).is_err());
        let k = marginal_kernel(&eye).unwrap();
        assert!(k.max_abs_diff(&Tensor::eye(2).scale(0.5)) < 1e-15);
    }
}
