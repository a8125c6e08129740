//! Training objectives: the cVAE bound, the layout penalty and the
//! λ-weighted DSF objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tdiv_autodiff::{BilinearGrid, Graph, Tensor, Var};

use crate::dpp::{self, AlphaMode, KernelKind};
use crate::error::{Error, Result};

/// Scalar loss components of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub dpp: f64,
    pub layout: f64,
    pub lambda: Option<f64>,
}

impl LossBreakdown {
    /// `reconstruction + β·kl`.
    pub fn cvae(reconstruction: f64, kl: f64, beta: f64) -> Self {
        Self {
            total: reconstruction + beta * kl,
            reconstruction,
            kl,
            ..Default::default()
        }
    }

    /// `λ·dpp + (1 − λ)·layout`.
    pub fn dsf(dpp: f64, layout: f64, lambda: f64) -> Self {
        Self {
            total: lambda * dpp + (1.0 - lambda) * layout,
            dpp,
            layout,
            lambda: Some(lambda),
            ..Default::default()
        }
    }
}

/// Graph handles for a cVAE loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CvaeLossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

/// Mean squared error over every coordinate.
pub fn reconstruction(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    if g.value(pred).shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            g.value(pred).shape(),
            truth.shape()
        )));
    }
    let t = g.constant(truth.clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// `½·Σ(μ² + σ² − log σ² − 1)` per row, averaged over rows.
pub fn kl_standard_normal(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let rows = g.value(mu).shape()[0] as f64;
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0)?;
    let s = g.sum(c)?;
    Ok(g.scale(s, 0.5 / rows)?)
}

/// Closed-form KL of a diagonal Gaussian against N(0, I), for one row.
pub fn kl_value(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

pub fn cvae_loss(g: &mut Graph, pred: Var, truth: &Tensor, mu: Var, logvar: Var, beta: f64) -> Result<CvaeLossVars> {
    let reconstruction = reconstruction(g, pred, truth)?;
    let kl = kl_standard_normal(g, mu, logvar)?;
    let weighted = g.scale(kl, beta)?;
    let total = g.add(reconstruction, weighted)?;
    Ok(CvaeLossVars {
        total,
        reconstruction,
        kl,
    })
}

/// Sum of field values over every point of a `[N, T·2]` set, divided by
/// `N·T` when `normalize` is set.
pub fn layout_loss(g: &mut Graph, set: Var, field: &Arc<BilinearGrid>, normalize: bool) -> Result<Var> {
    let (n, cols) = g.value(set).dims2()?;
    let points = g.reshape(set, &[n * cols / 2, 2])?;
    let values = g.bilinear_sample(points, field)?;
    let s = g.sum(values)?;
    if normalize {
        Ok(g.scale(s, 2.0 / (n * cols) as f64)?)
    } else {
        Ok(s)
    }
}

/// Settings of the DSF objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsfLossConfig {
    pub lambda: f64,
    pub kernel: KernelKind,
    pub alpha_mode: AlphaMode,
    pub normalize_layout: bool,
}

impl Default for DsfLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            kernel: KernelKind::Compound,
            alpha_mode: AlphaMode::ReciprocalMean,
            normalize_layout: true,
        }
    }
}

impl DsfLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("λ = {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DsfLossVars {
    pub total: Var,
    pub dpp: Var,
    pub layout: Var,
}

/// `λ·L_dpp + (1 − λ)·L_layout` for one scene's `[N, T·2]` set.
pub fn dsf_loss(
    g: &mut Graph,
    set: Var,
    origin: [f64; 2],
    field: &Arc<BilinearGrid>,
    cfg: &DsfLossConfig,
) -> Result<DsfLossVars> {
    cfg.validate()?;
    let alpha = dpp::calibrate_alpha(g.value(set), origin, cfg.kernel, cfg.alpha_mode)?;
    let (l, _) = dpp::kernel_graph(g, set, origin, cfg.kernel, alpha)?;
    let dpp = dpp::dpp_loss(g, l)?;
    let layout = layout_loss(g, set, field, cfg.normalize_layout)?;
    let a = g.scale(dpp, cfg.lambda)?;
    let b = g.scale(layout, 1.0 - cfg.lambda)?;
    let total = g.add(a, b)?;
    Ok(DsfLossVars { total, dpp, layout })
}
