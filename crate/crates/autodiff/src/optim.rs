//! Adam with bias correction.

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<AdamMoments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&AdamMoments> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    /// Applies one update. Any non-finite gradient aborts the step before a
    /// single parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    name: store.get(*id).name.clone(),
                });
            }
        }
        let mut factor = 1.0;
        if let Some(max_norm) = self.config.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                factor = max_norm / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let param = store.get_mut(*id);
            if !param.is_trainable() {
                continue;
            }
            if self.moments.len() <= id.index() {
                self.moments.resize(id.index() + 1, None);
            }
            let n = param.value.numel();
            let st = self.moments[id.index()].get_or_insert_with(|| AdamMoments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (((p, &gi), m), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                let gi = gi * factor;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![value]), ParamKind::Trainable);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = single(0.7);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            opt.step(&mut s, &[(id, Tensor::vector(vec![0.0]))]).unwrap();
        }
        assert_eq!(s.get(id).value.item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the first update is -lr·g/(|g| + eps).
        let (mut s, id) = single(0.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(&mut s, &[(id, Tensor::vector(vec![1.0]))]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get(id).value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        for _ in 0..100 {
            opt.step(&mut s, &[(id, Tensor::vector(vec![-2.5]))]).unwrap();
        }
        assert!(s.get(id).value.item() > 1.5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut s, &[(id, Tensor::vector(vec![f64::NAN]))]).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(id).value.item(), 1.0);
    }
}
