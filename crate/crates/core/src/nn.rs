//! Layers recorded on a [`Graph`], with parameters held in a [`ParamStore`].

use rand::Rng;
use tdiv_autodiff::{BatchStats, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

/// One forward pass: the tape, read access to the parameters, the mode, and
/// batch-norm statistics collected in training mode.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    pub bn_updates: Vec<BnUpdate>,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
    pub rows: usize,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Applies collected batch-norm updates with momentum [`BN_MOMENTUM`]; the
/// running variance uses the unbiased batch variance.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let n = u.rows as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in store.get_mut(u.mean).value.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.get_mut(u.var).value.data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if bound > 0.0 {
            rng.random_range(-bound..bound)
        } else {
            0.0
        }
    })
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Uniform init in `±1/√in` for weights and bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[input, output], bound), ParamKind::Trainable);
        let b = bias.then(|| store.add(format!("{name}.b"), uniform(rng, &[output], bound), ParamKind::Trainable));
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.param(b);
                Ok(cx.g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over the rows of `[rows, features]` with a learned
/// affine part.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features]), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features]), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[features]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[features]), ParamKind::Buffer),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        if cx.train {
            let rows = cx.g.value(x).shape()[0];
            let (xn, stats) = cx.g.batch_norm_train(x, BN_EPS)?;
            cx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
                rows,
            });
            let gamma = cx.param(self.gamma);
            let beta = cx.param(self.beta);
            let y = cx.g.mul_row(xn, gamma)?;
            Ok(cx.g.add_row(y, beta)?)
        } else {
            // Eval mode folds everything into a fixed per-feature affine map.
            let s = cx.store;
            let (gamma, beta) = (&s.get(self.gamma).value, &s.get(self.beta).value);
            let (mean, var) = (&s.get(self.running_mean).value, &s.get(self.running_var).value);
            let scale: Vec<f64> = gamma.data().iter().zip(var.data()).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
            let shift: Vec<f64> = beta
                .data()
                .iter()
                .zip(mean.data())
                .zip(&scale)
                .map(|((b, m), sc)| b - m * sc)
                .collect();
            let scale = cx.g.constant(Tensor::vector(scale));
            let shift = cx.g.constant(Tensor::vector(shift));
            let y = cx.g.mul_row(x, scale)?;
            Ok(cx.g.add_row(y, shift)?)
        }
    }
}

/// Single-layer GRU cell with PyTorch gate layout `(r, z, n)`.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, &[input, 3 * hidden], bound), ParamKind::Trainable),
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, &[hidden, 3 * hidden], bound), ParamKind::Trainable),
            b_ih: store.add(format!("{name}.b_ih"), uniform(rng, &[3 * hidden], bound), ParamKind::Trainable),
            b_hh: store.add(format!("{name}.b_hh"), uniform(rng, &[3 * hidden], bound), ParamKind::Trainable),
            input,
            hidden,
        }
    }

    /// One step. `x` is `[B, input]`, or `None` for a zero input.
    pub fn step(&self, cx: &mut Ctx, x: Option<Var>, h: Var) -> Result<Var> {
        let hn = self.hidden;
        let b_ih = cx.param(self.b_ih);
        let gi = match x {
            Some(x) => {
                let w = cx.param(self.w_ih);
                let xw = cx.g.matmul(x, w)?;
                cx.g.add_row(xw, b_ih)?
            }
            None => {
                let rows = cx.g.value(h).shape()[0];
                let zero = cx.g.constant(Tensor::zeros(&[rows, 3 * hn]));
                cx.g.add_row(zero, b_ih)?
            }
        };
        let w_hh = cx.param(self.w_hh);
        let b_hh = cx.param(self.b_hh);
        let hw = cx.g.matmul(h, w_hh)?;
        let gh = cx.g.add_row(hw, b_hh)?;
        let g = &mut cx.g;
        let gi_rz = g.slice(gi, 1, 0, 2 * hn)?;
        let gh_rz = g.slice(gh, 1, 0, 2 * hn)?;
        let rz_pre = g.add(gi_rz, gh_rz)?;
        let rz = g.sigmoid(rz_pre)?;
        let r = g.slice(rz, 1, 0, hn)?;
        let z = g.slice(rz, 1, hn, hn)?;
        let gi_n = g.slice(gi, 1, 2 * hn, hn)?;
        let gh_n = g.slice(gh, 1, 2 * hn, hn)?;
        let rg = g.mul(r, gh_n)?;
        let n_pre = g.add(gi_n, rg)?;
        let n = g.tanh(n_pre)?;
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        Ok(g.add(n, zd)?)
    }
}

/// Strided convolution + batch norm + leaky ReLU over `[B, H, W, C]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: BatchNorm,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let (kernel, stride, padding) = (3, 2, 1);
        let fan_in = kernel * kernel * in_channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.w"), uniform(rng, &[fan_in, out_channels], bound), ParamKind::Trainable),
            bias: store.add(format!("{name}.b"), uniform(rng, &[out_channels], bound), ParamKind::Trainable),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            kernel,
            stride,
            padding,
            out_channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = cx.g.value(x).shape().to_vec();
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let cols = cx.g.im2col(x, self.kernel, self.stride, self.padding)?;
        let wt = cx.param(self.weight);
        let bias = cx.param(self.bias);
        let y = cx.g.matmul(cols, wt)?;
        let y = cx.g.add_row(y, bias)?;
        let y = self.bn.forward(cx, y)?;
        let y = cx.g.leaky_relu(y, LEAKY_SLOPE)?;
        Ok(cx.g.reshape(y, &[b, ho, wo, self.out_channels])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_batch_norm_is_a_fixed_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        store.get_mut(bn.running_mean).value = Tensor::vector(vec![1.0, -1.0, 0.5]);
        store.get_mut(bn.running_var).value = Tensor::vector(vec![4.0, 1.0, 0.25]);
        let x = Tensor::from_fn(&[5, 3], |_| rng.random_range(-2.0..2.0));
        let run = |store: &ParamStore| {
            let mut cx = Ctx::new(store, false);
            let xv = cx.g.constant(x.clone());
            let y = bn.forward(&mut cx, xv).unwrap();
            cx.g.value(y).clone()
        };
        let (a, b) = (run(&store), run(&store));
        assert_eq!(a, b);
        let expected = (x.at2(0, 0) - 1.0) / (4.0 + BN_EPS).sqrt();
        assert!((a.at2(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut cx = Ctx::new(&store, true);
        let x = cx.g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
        bn.forward(&mut cx, x).unwrap();
        let updates = std::mem::take(&mut cx.bn_updates);
        drop(cx);
        apply_bn_updates(&mut store, &updates);
        assert!((store.get(bn.running_mean).value.data()[0] - 0.2).abs() < 1e-15);
        // Unbiased batch variance 2.0.
        assert!((store.get(bn.running_var).value.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = Gru::new(&mut store, "gru", 2, 4, &mut rng);
        for id in [gru.w_ih, gru.w_hh, gru.b_ih, gru.b_hh] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut cx = Ctx::new(&store, false);
        let mut h = cx.g.constant(Tensor::zeros(&[3, 4]));
        for _ in 0..5 {
            let x = cx.g.constant(Tensor::ones(&[3, 2]));
            h = gru.step(&mut cx, Some(x), h).unwrap();
        }
        assert!(cx.g.value(h).data().iter().all(|&v| v == 0.0));
    }
}
