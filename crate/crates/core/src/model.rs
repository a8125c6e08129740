//! The forecasting networks: a conditional VAE backbone and the diversity
//! sampling function (DSF) that emits all N latent codes jointly.
//!
//! Every trajectory handled here is in the agent frame: present position at
//! the origin, heading along +x.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tdiv_autodiff::{ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvBlock, Ctx, Gru, Linear, LEAKY_SLOPE};
use crate::scene::{Point, SceneRecord};

pub const CVAE_PREFIX: &str = "cvae.";
pub const DSF_PREFIX: &str = "dsf.";

const POSITION_SCALE: f64 = 0.1;
const STEP_SCALE: f64 = 0.25;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_past: usize,
    pub t_future: usize,
    pub grid_size: usize,
    pub d_h: usize,
    pub d_m: usize,
    pub d_z: usize,
    pub conv_channels: Vec<usize>,
    pub posterior_hidden: usize,
    pub head_hidden: usize,
    /// Meters per unit of decoder output.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_past: 12,
            t_future: 6,
            grid_size: 64,
            d_h: 128,
            d_m: 128,
            d_z: 16,
            conv_channels: vec![8, 16, 32, 64],
            posterior_hidden: 128,
            head_hidden: 64,
            output_scale: 4.0,
        }
    }
}

impl ModelConfig {
    /// Decoder state size: latent code, past embedding and map embedding.
    pub fn decoder_hidden(&self) -> usize {
        self.d_z + self.d_h + self.d_m
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_past < 2 || self.t_future == 0 || self.d_h == 0 || self.d_m == 0 || self.d_z == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive (t_past ≥ 2)".into()));
        }
        if self.conv_channels.is_empty() || self.grid_size >> self.conv_channels.len() == 0 {
            return Err(Error::InvalidArgument("too many stride-2 blocks for the grid size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Concat,
    Sum,
    Product,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "sum" => Ok(FusionMode::Sum),
            "product" => Ok(FusionMode::Product),
            _ => Err(Error::InvalidArgument(format!("unknown fusion mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    /// Diversity branch on h and map branch on m, fused.
    TwoBranch,
    /// A single branch fed the past embedding.
    OneBranchDiversity,
    /// A single branch fed the map embedding.
    OneBranchLayout,
}

impl std::str::FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-branch" => Ok(BranchMode::TwoBranch),
            "one-branch-diversity" => Ok(BranchMode::OneBranchDiversity),
            "one-branch-layout" => Ok(BranchMode::OneBranchLayout),
            _ => Err(Error::InvalidArgument(format!("unknown branch mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsfConfig {
    pub n_samples: usize,
    pub width: usize,
    pub depth: usize,
    pub fusion: FusionMode,
    pub branches: BranchMode,
}

impl Default for DsfConfig {
    fn default() -> Self {
        Self {
            n_samples: 12,
            width: 128,
            depth: 4,
            fusion: FusionMode::Product,
            branches: BranchMode::TwoBranch,
        }
    }
}

/// Agent-frame inputs for a batch of scenes.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, T_p·2]`
    pub past: Tensor,
    /// `[B, T_f·2]`
    pub future: Tensor,
    /// `[B, H, W, 3]`
    pub raster: Tensor,
}

impl Batch {
    pub fn from_records(records: &[&SceneRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (tp, tf) = (first.trajectory.t_past(), first.trajectory.t_future());
        let size = first.map.size();
        let mut past = Vec::with_capacity(records.len() * tp * 2);
        let mut future = Vec::with_capacity(records.len() * tf * 2);
        let mut raster = Vec::with_capacity(records.len() * first.map.data().len());
        for r in records {
            if r.trajectory.t_past() != tp || r.trajectory.t_future() != tf || r.map.size() != size {
                return Err(Error::Shape("scenes in a batch must share horizons and grid size".into()));
            }
            past.extend(r.past_agent().into_iter().flatten());
            future.extend(r.future_agent().into_iter().flatten());
            raster.extend_from_slice(r.map.data());
        }
        let b = records.len();
        Ok(Self {
            past: Tensor::new(vec![b, tp * 2], past)?,
            future: Tensor::new(vec![b, tf * 2], future)?,
            raster: Tensor::new(vec![b, size, size, 3], raster)?,
        })
    }

    pub fn len(&self) -> usize {
        self.past.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits a `[R, T·2]` tensor into per-row point lists.
pub fn rows_to_points(t: &Tensor) -> Vec<Vec<Point>> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| row.chunks(2).map(|p| [p[0], p[1]]).collect())
        .collect()
}

/// Conditional VAE: past encoder, map encoder, posterior and decoder.
#[derive(Debug, Clone)]
pub struct Cvae {
    pub cfg: ModelConfig,
    past_gru: Gru,
    convs: Vec<ConvBlock>,
    map_fc: Linear,
    post1: Linear,
    post2: Linear,
    dec_gru: Gru,
    head1: Linear,
    head2: Linear,
}

impl Cvae {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let p = |s: &str| format!("{CVAE_PREFIX}{s}");
        let past_gru = Gru::new(store, &p("past_gru"), 4, cfg.d_h, rng);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            convs.push(ConvBlock::new(store, &p(&format!("conv{i}")), c_in, c, rng));
            c_in = c;
        }
        let map_fc = Linear::new(store, &p("map_fc"), c_in, cfg.d_m, true, rng);
        let post_in = cfg.d_h + cfg.d_m + 2 * cfg.t_future;
        let post1 = Linear::new(store, &p("post1"), post_in, cfg.posterior_hidden, true, rng);
        let post2 = Linear::new(store, &p("post2"), cfg.posterior_hidden, 2 * cfg.d_z, true, rng);
        let dec_gru = Gru::new(store, &p("dec_gru"), 0, cfg.decoder_hidden(), rng);
        let head1 = Linear::new(store, &p("head1"), cfg.decoder_hidden(), cfg.head_hidden, true, rng);
        let head2 = Linear::new(store, &p("head2"), cfg.head_hidden, 2, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            past_gru,
            convs,
            map_fc,
            post1,
            post2,
            dec_gru,
            head1,
            head2,
        })
    }

    /// `h = GRU(S_p)` over `[B, T_p·2]` agent-frame pasts.
    pub fn encode_past(&self, cx: &mut Ctx, past: &Tensor) -> Result<Var> {
        let (b, cols) = past.dims2()?;
        if cols != 2 * self.cfg.t_past {
            return Err(Error::Shape(format!(
                "past must have {} points, got {}",
                self.cfg.t_past,
                cols / 2
            )));
        }
        let mut h = cx.g.constant(Tensor::zeros(&[b, self.cfg.d_h]));
        for t in 0..self.cfg.t_past {
            let feats = Tensor::from_fn(&[b, 4], |i| {
                let (row, k) = (i / 4, i % 4);
                let at = |tt: usize, c: usize| past.data()[row * cols + 2 * tt + c];
                match k {
                    0 | 1 => at(t, k) * POSITION_SCALE,
                    _ if t == 0 => 0.0,
                    _ => (at(t, k - 2) - at(t - 1, k - 2)) * STEP_SCALE,
                }
            });
            let x = cx.g.constant(feats);
            h = self.past_gru.step(cx, Some(x), h)?;
        }
        Ok(h)
    }

    /// `m = CNN(M)` over `[B, H, W, 3]` rasters.
    pub fn encode_map(&self, cx: &mut Ctx, raster: &Tensor) -> Result<Var> {
        let s = raster.shape();
        if s.len() != 4 || s[1] != self.cfg.grid_size || s[2] != self.cfg.grid_size || s[3] != 3 {
            return Err(Error::Shape(format!(
                "raster must be [B, {n}, {n}, 3], got {s:?}",
                n = self.cfg.grid_size
            )));
        }
        let mut x = cx.g.constant(raster.clone());
        for conv in &self.convs {
            x = conv.forward(cx, x)?;
        }
        let xs = cx.g.value(x).shape().to_vec();
        let cells = xs[1] * xs[2];
        let flat = cx.g.reshape(x, &[xs[0] * cells, xs[3]])?;
        let pooled = cx.g.segment_mean(flat, cells)?;
        self.map_fc.forward(cx, pooled)
    }

    /// Posterior `q(z | h, m, S_f)`: mean and clamped log-variance.
    pub fn posterior(&self, cx: &mut Ctx, h: Var, m: Var, future: &Tensor) -> Result<(Var, Var)> {
        let f = cx.g.constant(future.scale(POSITION_SCALE));
        let x = cx.g.concat(&[h, m, f], 1)?;
        let x = self.post1.forward(cx, x)?;
        let x = cx.g.leaky_relu(x, LEAKY_SLOPE)?;
        let out = self.post2.forward(cx, x)?;
        let dz = self.cfg.d_z;
        let mu = cx.g.slice(out, 1, 0, dz)?;
        let raw = cx.g.slice(out, 1, dz, dz)?;
        let logvar = cx.g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    /// `z = μ + exp(½·logvar)·ε`.
    pub fn reparameterize(&self, cx: &mut Ctx, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
        let half = cx.g.scale(logvar, 0.5)?;
        let sigma = cx.g.exp(half)?;
        let e = cx.g.constant(eps.clone());
        let noise = cx.g.mul(sigma, e)?;
        Ok(cx.g.add(mu, noise)?)
    }

    /// Decodes `[R, d_z]` codes with matching `[R, d_h]` / `[R, d_m]` context
    /// rows into `[R, T_f·2]` trajectories.
    pub fn decode(&self, cx: &mut Ctx, z: Var, h: Var, m: Var) -> Result<Var> {
        let mut state = cx.g.concat(&[z, h, m], 1)?;
        let hidden = cx.g.value(state).shape()[1];
        if hidden != self.cfg.decoder_hidden() {
            return Err(Error::Shape(format!(
                "decoder state has {hidden} units, expected {}",
                self.cfg.decoder_hidden()
            )));
        }
        let mut pos: Option<Var> = None;
        let mut points = Vec::with_capacity(self.cfg.t_future);
        for _ in 0..self.cfg.t_future {
            state = self.dec_gru.step(cx, None, state)?;
            let a = self.head1.forward(cx, state)?;
            let a = cx.g.leaky_relu(a, LEAKY_SLOPE)?;
            let o = self.head2.forward(cx, a)?;
            let o = cx.g.scale(o, self.cfg.output_scale)?;
            let p = match pos {
                Some(prev) => cx.g.add(prev, o)?,
                None => o,
            };
            pos = Some(p);
            points.push(p);
        }
        Ok(cx.g.concat(&points, 1)?)
    }

    /// Decodes `n` standard-normal codes per scene: `[B·n, T_f·2]`, scene-major.
    pub fn sample_prior(&self, cx: &mut Ctx, h: Var, m: Var, n: usize, rng: &mut impl Rng) -> Result<Var> {
        let b = cx.g.value(h).shape()[0];
        let z = cx.g.constant(Tensor::from_fn(&[b * n, self.cfg.d_z], |_| rng.sample(StandardNormal)));
        let hr = cx.g.repeat_rows(h, n)?;
        let mr = cx.g.repeat_rows(m, n)?;
        self.decode(cx, z, hr, mr)
    }
}

/// One DSF branch: `depth` × (linear, batch norm, leaky ReLU) and an output head.
#[derive(Debug, Clone)]
struct Branch {
    layers: Vec<(Linear, BatchNorm)>,
    head: Linear,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, input: usize, width: usize, depth: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut d = input;
        for i in 0..depth {
            layers.push((
                Linear::new(store, &format!("{name}.fc{i}"), d, width, true, rng),
                BatchNorm::new(store, &format!("{name}.bn{i}"), width),
            ));
            d = width;
        }
        Self {
            layers,
            head: Linear::new(store, &format!("{name}.head"), d, output, true, rng),
        }
    }

    fn forward(&self, cx: &mut Ctx, mut x: Var) -> Result<Var> {
        for (fc, bn) in &self.layers {
            x = fc.forward(cx, x)?;
            x = bn.forward(cx, x)?;
            x = cx.g.leaky_relu(x, LEAKY_SLOPE)?;
        }
        self.head.forward(cx, x)
    }
}

/// Diversity sampling function.
#[derive(Debug, Clone)]
pub struct Dsf {
    pub cfg: DsfConfig,
    d_z: usize,
    diversity: Option<Branch>,
    layout: Option<Branch>,
}

impl Dsf {
    pub fn new(cfg: &DsfConfig, model: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_samples < 2 || cfg.width == 0 {
            return Err(Error::InvalidArgument("DSF needs N ≥ 2 and a positive width".into()));
        }
        let two = cfg.branches == BranchMode::TwoBranch;
        if two && cfg.fusion == FusionMode::Concat && !model.d_z.is_multiple_of(2) {
            return Err(Error::InvalidArgument("concat fusion needs an even d_z".into()));
        }
        let per_code = if two && cfg.fusion == FusionMode::Concat { model.d_z / 2 } else { model.d_z };
        let out = cfg.n_samples * per_code;
        let p = |s: &str| format!("{DSF_PREFIX}{s}");
        let diversity = (cfg.branches != BranchMode::OneBranchLayout)
            .then(|| Branch::new(store, &p("div"), model.d_h, cfg.width, cfg.depth, out, rng));
        let layout = (cfg.branches != BranchMode::OneBranchDiversity)
            .then(|| Branch::new(store, &p("map"), model.d_m, cfg.width, cfg.depth, out, rng));
        Ok(Self {
            cfg: cfg.clone(),
            d_z: model.d_z,
            diversity,
            layout,
        })
    }

    /// Partial codes `z_p` and `z_m`, each `[B·N, ·]`; absent branches yield `None`.
    pub fn partial_codes(&self, cx: &mut Ctx, h: Var, m: Var) -> Result<(Option<Var>, Option<Var>)> {
        let b = cx.g.value(h).shape()[0];
        let n = self.cfg.n_samples;
        let run = |branch: &Option<Branch>, input: Var, cx: &mut Ctx| -> Result<Option<Var>> {
            match branch {
                Some(br) => {
                    let out = br.forward(cx, input)?;
                    let width = cx.g.value(out).shape()[1] / n;
                    Ok(Some(cx.g.reshape(out, &[b * n, width])?))
                }
                None => Ok(None),
            }
        };
        let zp = run(&self.diversity, h, cx)?;
        let zm = run(&self.layout, m, cx)?;
        Ok((zp, zm))
    }

    /// Fused latent codes `[B·N, d_z]`, scene-major.
    pub fn codes(&self, cx: &mut Ctx, h: Var, m: Var) -> Result<Var> {
        let (zp, zm) = self.partial_codes(cx, h, m)?;
        let z = match (zp, zm) {
            (Some(zp), Some(zm)) => fuse(cx, self.cfg.fusion, zp, zm)?,
            (Some(z), None) | (None, Some(z)) => z,
            (None, None) => unreachable!(),
        };
        debug_assert_eq!(cx.g.value(z).shape()[1], self.d_z);
        Ok(z)
    }

    /// `N` trajectories per scene decoded from the DSF codes: `[B·N, T_f·2]`.
    pub fn sample(&self, cx: &mut Ctx, cvae: &Cvae, h: Var, m: Var) -> Result<(Var, Var)> {
        let z = self.codes(cx, h, m)?;
        let n = self.cfg.n_samples;
        let hr = cx.g.repeat_rows(h, n)?;
        let mr = cx.g.repeat_rows(m, n)?;
        Ok((cvae.decode(cx, z, hr, mr)?, z))
    }
}

/// Combines partial codes.
pub fn fuse(cx: &mut Ctx, mode: FusionMode, zp: Var, zm: Var) -> Result<Var> {
    Ok(match mode {
        FusionMode::Product => cx.g.mul(zp, zm)?,
        FusionMode::Sum => cx.g.add(zp, zm)?,
        FusionMode::Concat => cx.g.concat(&[zp, zm], 1)?,
    })
}

/// Architecture description stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub model: ModelConfig,
    pub dsf: Option<DsfConfig>,
    pub kernel: Option<crate::dpp::KernelKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchSidecar {
    arch: ArchConfig,
    backbone_hash: String,
    hash: String,
}

fn sha_hex<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Hash identifying a backbone architecture.
pub fn backbone_hash(model: &ModelConfig) -> Result<String> {
    sha_hex(model)
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

/// Parameters plus the modules that index into them.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub cvae: Cvae,
    pub dsf: Option<Dsf>,
    pub kernel: Option<crate::dpp::KernelKind>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cvae = Cvae::new(cfg, &mut store, &mut rng)?;
        Ok(Self {
            store,
            cvae,
            dsf: None,
            kernel: None,
        })
    }

    /// Adds freshly initialized DSF parameters, replacing any existing DSF.
    pub fn attach_dsf(&mut self, cfg: &DsfConfig, kernel: crate::dpp::KernelKind, seed: u64) -> Result<()> {
        if self.dsf.is_some() {
            let mut fresh = ParamStore::new();
            for (_, p) in self.store.iter().filter(|(_, p)| p.name.starts_with(CVAE_PREFIX)) {
                let id = fresh.add(p.name.clone(), p.value.clone(), p.kind);
                fresh.get_mut(id).frozen = p.frozen;
            }
            self.store = fresh;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.dsf = Some(Dsf::new(cfg, &self.cvae.cfg, &mut self.store, &mut rng)?);
        self.kernel = Some(kernel);
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            model: self.cvae.cfg.clone(),
            dsf: self.dsf.as_ref().map(|d| d.cfg.clone()),
            kernel: self.kernel,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.store.save(path)?;
        let arch = self.arch();
        let sidecar = ArchSidecar {
            backbone_hash: backbone_hash(&arch.model)?,
            hash: sha_hex(&arch)?,
            arch,
        };
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(sidecar_path(path)).map_err(|e| {
            Error::CheckpointMismatch(format!("{}: {e}", sidecar_path(path).display()))
        })?;
        let sidecar: ArchSidecar = serde_json::from_str(&text)?;
        if sha_hex(&sidecar.arch)? != sidecar.hash || backbone_hash(&sidecar.arch.model)? != sidecar.backbone_hash {
            return Err(Error::CheckpointMismatch("architecture hash does not match its config".into()));
        }
        let loaded = ParamStore::load(path)?;
        let mut model = Model::new(&sidecar.arch.model, 0)?;
        if let (Some(dsf), Some(kernel)) = (&sidecar.arch.dsf, sidecar.arch.kernel) {
            model.attach_dsf(dsf, kernel, 0)?;
        }
        if loaded.len() != model.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds {} parameters, architecture expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        model.store.assign_from(&loaded).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(model)
    }

    /// Past and map embeddings in eval mode, as plain tensors.
    pub fn embed(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let mut cx = Ctx::new(&self.store, false);
        let h = self.cvae.encode_past(&mut cx, &batch.past)?;
        let m = self.cvae.encode_map(&mut cx, &batch.raster)?;
        Ok((cx.g.value(h).clone(), cx.g.value(m).clone()))
    }

    /// `N` prior samples per scene, agent frame, `[B·N, T_f·2]`.
    pub fn predict_prior(&self, batch: &Batch, n: usize, seed: u64) -> Result<Tensor> {
        let mut cx = Ctx::new(&self.store, false);
        let h = self.cvae.encode_past(&mut cx, &batch.past)?;
        let m = self.cvae.encode_map(&mut cx, &batch.raster)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = self.cvae.sample_prior(&mut cx, h, m, n, &mut rng)?;
        Ok(cx.g.value(y).clone())
    }

    /// DSF samples per scene in eval mode, agent frame, `[B·N, T_f·2]`.
    pub fn predict_dsf(&self, batch: &Batch) -> Result<Tensor> {
        let dsf = self
            .dsf
            .as_ref()
            .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no DSF".into()))?;
        let mut cx = Ctx::new(&self.store, false);
        let h = self.cvae.encode_past(&mut cx, &batch.past)?;
        let m = self.cvae.encode_map(&mut cx, &batch.raster)?;
        let (y, _) = dsf.sample(&mut cx, &self.cvae, h, m)?;
        Ok(cx.g.value(y).clone())
    }
}
