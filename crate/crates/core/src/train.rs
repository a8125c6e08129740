//! Two-stage training, evaluation, the ablation grid and the λ sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tdiv_autodiff::{Adam, AdamConfig, BilinearGrid, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::losses::{self, DsfLossConfig, LossBreakdown};
use crate::metrics::{EvalReport, MetricMeans, SceneMetrics};
use crate::model::{
    backbone_hash, rows_to_points, Batch, BranchMode, DsfConfig, FusionMode, Model, ModelConfig, CVAE_PREFIX,
};
use crate::nn::{apply_bn_updates, Ctx};
use crate::scene::{DatasetConfig, SceneRecord};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
}

impl StageConfig {
    fn validate(&self, stage: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{stage}: epochs, batch size and learning rate must be positive"
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            clip_norm: self.clip_norm,
            ..AdamConfig::with_lr(self.lr)
        }
    }
}

/// Everything a training, evaluation or ablation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Seeds for ablation cells and the λ sweep; medians are reported.
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub dataset_path: Option<PathBuf>,
    pub cvae_checkpoint: Option<PathBuf>,
    pub dsf_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub cvae: StageConfig,
    /// KL weight.
    pub beta: f64,
    pub dsf: StageConfig,
    pub dsf_arch: DsfConfig,
    pub dsf_loss: DsfLossConfig,
    /// Prior samples per scene at evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            seeds: vec![0, 1, 2],
            dataset: DatasetConfig::default(),
            dataset_path: None,
            cvae_checkpoint: None,
            dsf_checkpoint: None,
            model: ModelConfig::default(),
            cvae: StageConfig {
                epochs: 100,
                batch_size: 32,
                lr: 1e-3,
                clip_norm: None,
            },
            beta: 1.0,
            dsf: StageConfig {
                epochs: 50,
                batch_size: 32,
                lr: 1e-4,
                clip_norm: None,
            },
            dsf_arch: DsfConfig::default(),
            dsf_loss: DsfLossConfig::default(),
            eval_samples: 12,
        }
    }
}

impl TrainConfig {
    /// Reduced dimensions and corpus for runs that finish in minutes on one core.
    pub fn desk_small() -> Self {
        let base = Self::default();
        Self {
            dataset: DatasetConfig {
                n_train: 400,
                n_val: 100,
                ..base.dataset.clone()
            },
            model: ModelConfig {
                d_h: 32,
                d_m: 32,
                d_z: 8,
                conv_channels: vec![8, 16, 32, 32],
                posterior_hidden: 64,
                head_hidden: 32,
                ..base.model.clone()
            },
            cvae: StageConfig {
                epochs: 40,
                ..base.cvae.clone()
            },
            dsf: StageConfig {
                epochs: 20,
                lr: 1e-3,
                ..base.dsf.clone()
            },
            dsf_arch: DsfConfig {
                width: 64,
                ..base.dsf_arch.clone()
            },
            // At this scale the per-point normalized layout term is too weak to hold samples on the road.
            dsf_loss: DsfLossConfig {
                normalize_layout: false,
                ..base.dsf_loss
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.cvae.validate("cvae")?;
        self.dsf.validate("dsf")?;
        self.dsf_loss.validate()?;
        self.model.validate()?;
        check_compatible(&self.model, &self.dataset).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if !(self.beta >= 0.0) || self.eval_samples < 2 || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("β ≥ 0, eval_samples ≥ 2 and one seed are required".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Errors when a model cannot consume scenes generated with `data`.
pub fn check_compatible(model: &ModelConfig, data: &DatasetConfig) -> Result<()> {
    let pairs = [
        ("grid size", model.grid_size, data.grid_size),
        ("past length", model.t_past, data.agent.t_past),
        ("future length", model.t_future, data.agent.t_future),
    ];
    for (what, m, d) in pairs {
        if m != d {
            return Err(Error::CheckpointMismatch(format!("model {what} {m} but dataset {what} {d}")));
        }
    }
    Ok(())
}

/// One optimizer step of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Digest of the training RNG position after the step.
    pub rng_digest: String,
}

pub fn log_to_csv(log: &[LogRecord]) -> String {
    let mut out = String::from("step,epoch,reconstruction,kl,dpp,layout,total,rng_digest\n");
    for r in log {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, l.reconstruction, l.kl, l.dpp, l.layout, l.total, r.rng_digest
        );
    }
    out
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_word_pos().to_le_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best model by the validation criterion (or the last good one on divergence).
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    /// Per-epoch validation scores.
    pub val_scores: Vec<f64>,
    /// Per-epoch validation metric means (DSF stage only).
    pub val_means: Vec<MetricMeans>,
    /// Step and reason when training stopped on a numerical failure.
    pub diverged: Option<(u64, String)>,
}

/// Sub-seed for a named purpose, so stages do not share random streams.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}:{purpose}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn batches(records: &[&SceneRecord], batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    if let Some(rng) = rng {
        idx.shuffle(rng);
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn pick<'a>(records: &[&'a SceneRecord], idx: &[usize]) -> Vec<&'a SceneRecord> {
    idx.iter().map(|&i| records[i]).collect()
}

fn numerical(e: &Error) -> bool {
    e.is_numerical() || matches!(e, Error::Autodiff(tdiv_autodiff::AutodiffError::NonFiniteValue { .. }))
}

fn require_nonempty(records: &[&SceneRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Dataset(format!("{what} split is empty")));
    }
    Ok(())
}

/// Stage 1: fits the conditional VAE; keeps the epoch with the lowest
/// validation reconstruction error.
pub fn train_cvae(cfg: &TrainConfig, train: &[&SceneRecord], val: &[&SceneRecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_nonempty(train, "training")?;
    require_nonempty(val, "validation")?;
    let mut model = Model::new(&cfg.model, derive_seed(cfg.seed, "cvae-init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "cvae-train"));
    let mut adam = Adam::new(cfg.cvae.adam());
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut val_scores = Vec::new();
    let val_means = Vec::new();
    let mut last_good = model.store.clone();
    let val_batches: Vec<Batch> = batches(val, cfg.cvae.batch_size, None)
        .iter()
        .map(|b| Batch::from_records(&pick(val, b)))
        .collect::<Result<_>>()?;
    for epoch in 0..cfg.cvae.epochs {
        for idx in batches(train, cfg.cvae.batch_size, Some(&mut rng)) {
            let batch = Batch::from_records(&pick(train, &idx))?;
            step += 1;
            let eps = Tensor::from_fn(&[batch.len(), cfg.model.d_z], |_| rng.sample(StandardNormal));
            match cvae_step(&mut model, &mut adam, &batch, &eps, cfg.beta) {
                Ok(loss) => log.push(LogRecord {
                    step,
                    epoch,
                    loss,
                    rng_digest: rng_digest(&rng),
                }),
                Err(e) if numerical(&e) => {
                    model.store = last_good;
                    return Ok(TrainOutcome {
                        model,
                        log,
                        best_epoch: best.1,
                        best_score: best.0,
                        val_scores,
                        val_means,
                        diverged: Some((step, e.to_string())),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        last_good = model.store.clone();
        let score = validation_reconstruction(&model, &val_batches)?;
        log::info!("cvae epoch {epoch}: validation reconstruction {score:.4}");
        val_scores.push(score);
        if score < best.0 {
            best = (score, epoch, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
        best_score: best.0,
        val_scores,
        val_means,
        diverged: None,
    })
}

fn cvae_step(model: &mut Model, adam: &mut Adam, batch: &Batch, eps: &Tensor, beta: f64) -> Result<LossBreakdown> {
    let (grads, updates, loss) = {
        let mut cx = Ctx::new(&model.store, true);
        let h = model.cvae.encode_past(&mut cx, &batch.past)?;
        let m = model.cvae.encode_map(&mut cx, &batch.raster)?;
        let (mu, logvar) = model.cvae.posterior(&mut cx, h, m, &batch.future)?;
        let z = model.cvae.reparameterize(&mut cx, mu, logvar, eps)?;
        let pred = model.cvae.decode(&mut cx, z, h, m)?;
        let l = losses::cvae_loss(&mut cx.g, pred, &batch.future, mu, logvar, beta)?;
        let grads = cx.g.backward(l.total)?.param_grads(&cx.g);
        let loss = LossBreakdown::cvae(cx.g.value(l.reconstruction).item(), cx.g.value(l.kl).item(), beta);
        (grads, cx.bn_updates, loss)
    };
    adam.step(&mut model.store, &grads)?;
    apply_bn_updates(&mut model.store, &updates);
    Ok(loss)
}

/// Eval-mode reconstruction error decoding the posterior mean.
pub fn validation_reconstruction(model: &Model, val: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in val {
        let mut cx = Ctx::new(&model.store, false);
        let h = model.cvae.encode_past(&mut cx, &batch.past)?;
        let m = model.cvae.encode_map(&mut cx, &batch.raster)?;
        let (mu, _) = model.cvae.posterior(&mut cx, h, m, &batch.future)?;
        let pred = model.cvae.decode(&mut cx, mu, h, m)?;
        let r = losses::reconstruction(&mut cx.g, pred, &batch.future)?;
        total += cx.g.value(r).item() * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}

/// Frozen-backbone inputs of one scene for DSF training.
struct DsfScene {
    h: Vec<f64>,
    m: Vec<f64>,
    field: Arc<BilinearGrid>,
}

fn precompute(model: &Model, records: &[&SceneRecord], chunk: usize) -> Result<Vec<DsfScene>> {
    let mut out = Vec::with_capacity(records.len());
    for idx in batches(records, chunk, None) {
        let recs = pick(records, &idx);
        let (h, m) = model.embed(&Batch::from_records(&recs)?)?;
        let (dh, dm) = (h.shape()[1], m.shape()[1]);
        for (i, r) in recs.iter().enumerate() {
            out.push(DsfScene {
                h: h.data()[i * dh..(i + 1) * dh].to_vec(),
                m: m.data()[i * dm..(i + 1) * dm].to_vec(),
                field: r.field()?.agent_grid().clone(),
            });
        }
    }
    Ok(out)
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    Ok(Tensor::new(vec![data.len() / width, width], data)?)
}

/// Stage 2: trains the DSF on top of a frozen backbone; keeps the epoch with
/// the highest validation FSD·DAC.
pub fn train_dsf(cfg: &TrainConfig, backbone: &Model, train: &[&SceneRecord], val: &[&SceneRecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_nonempty(train, "training")?;
    require_nonempty(val, "validation")?;
    if backbone_hash(&backbone.cvae.cfg)? != backbone_hash(&cfg.model)? {
        return Err(Error::CheckpointMismatch(
            "backbone architecture hash differs from the configured model".into(),
        ));
    }
    let mut model = backbone.clone();
    model.attach_dsf(&cfg.dsf_arch, cfg.dsf_loss.kernel, derive_seed(cfg.seed, "dsf-init"))?;
    model.store.set_frozen(CVAE_PREFIX, true);
    let scenes = precompute(&model, train, 64)?;
    let (dh, dm) = (cfg.model.d_h, cfg.model.d_m);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dsf-train"));
    let mut adam = Adam::new(cfg.dsf.adam());
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.clone());
    let mut val_scores = Vec::new();
    let mut val_means = Vec::new();
    let mut last_good = model.store.clone();
    for epoch in 0..cfg.dsf.epochs {
        for idx in batches(train, cfg.dsf.batch_size, Some(&mut rng)) {
            if idx.len() < 2 {
                // Batch norm needs at least two rows.
                continue;
            }
            step += 1;
            let h = stack(idx.iter().map(|&i| scenes[i].h.clone()), dh)?;
            let m = stack(idx.iter().map(|&i| scenes[i].m.clone()), dm)?;
            let fields: Vec<_> = idx.iter().map(|&i| scenes[i].field.clone()).collect();
            match dsf_step(&mut model, &mut adam, &h, &m, &fields, &cfg.dsf_loss, step) {
                Ok(loss) => log.push(LogRecord {
                    step,
                    epoch,
                    loss,
                    rng_digest: rng_digest(&rng),
                }),
                Err(e) if numerical(&e) => {
                    model.store = last_good;
                    return Ok(TrainOutcome {
                        model,
                        log,
                        best_epoch: best.1,
                        best_score: best.0,
                        val_scores,
                        val_means,
                        diverged: Some((step, e.to_string())),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        last_good = model.store.clone();
        let report = evaluate(&model, val, Sampler::Dsf, cfg.eval_samples, 0)?;
        let score = report.mean.fsd * report.mean.dac;
        log::info!(
            "dsf epoch {epoch}: FSD {:.3} DAC {:.3}",
            report.mean.fsd,
            report.mean.dac
        );
        val_scores.push(score);
        val_means.push(report.mean);
        if score > best.0 {
            best = (score, epoch, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
        best_score: best.0,
        val_scores,
        val_means,
        diverged: None,
    })
}

fn dsf_step(
    model: &mut Model,
    adam: &mut Adam,
    h: &Tensor,
    m: &Tensor,
    fields: &[Arc<BilinearGrid>],
    loss_cfg: &DsfLossConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let dsf = model.dsf.clone().expect("DSF attached");
    let n = dsf.cfg.n_samples;
    let (grads, updates, loss) = {
        let mut cx = Ctx::new(&model.store, true);
        let hv = cx.g.constant(h.clone());
        let mv = cx.g.constant(m.clone());
        let (y, _) = dsf.sample(&mut cx, &model.cvae, hv, mv)?;
        let mut totals = Vec::with_capacity(fields.len());
        let (mut dpp, mut layout) = (0.0, 0.0);
        for (b, field) in fields.iter().enumerate() {
            let set = cx.g.slice(y, 0, b * n, n)?;
            let l = losses::dsf_loss(&mut cx.g, set, [0.0, 0.0], field, loss_cfg)?;
            dpp += cx.g.value(l.dpp).item();
            layout += cx.g.value(l.layout).item();
            totals.push(l.total);
        }
        let k = fields.len() as f64;
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = cx.g.add(sum, t)?;
        }
        let total = cx.g.scale(sum, 1.0 / k)?;
        let grads = cx.g.backward(total)?.param_grads(&cx.g);
        if let Some((id, _)) = grads.iter().find(|(id, _)| cx.store.get(*id).name.starts_with(CVAE_PREFIX)) {
            return Err(Error::InvalidArgument(format!(
                "step {step}: backbone parameter `{}` received a gradient",
                cx.store.get(*id).name
            )));
        }
        (grads, cx.bn_updates, LossBreakdown::dsf(dpp / k, layout / k, loss_cfg.lambda))
    };
    adam.step(&mut model.store, &grads)?;
    apply_bn_updates(&mut model.store, &updates);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Prior,
    Dsf,
    /// Ground truth replicated N times; a reference point for the metrics.
    Oracle,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Sampler::Prior),
            "dsf" => Ok(Sampler::Dsf),
            "oracle" => Ok(Sampler::Oracle),
            _ => Err(Error::InvalidArgument(format!("unknown sampler `{s}`"))),
        }
    }
}

impl Sampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Prior => "prior",
            Sampler::Dsf => "dsf",
            Sampler::Oracle => "oracle",
        }
    }
}

const EVAL_BATCH: usize = 64;

/// Agent-frame predictions per scene.
pub fn predict(model: &Model, records: &[&SceneRecord], sampler: Sampler, n: usize, seed: u64) -> Result<Vec<Vec<Vec<[f64; 2]>>>> {
    if sampler == Sampler::Oracle {
        return Ok(predict_oracle(records, n));
    }
    let mut out = Vec::with_capacity(records.len());
    for (k, idx) in batches(records, EVAL_BATCH, None).into_iter().enumerate() {
        let batch = Batch::from_records(&pick(records, &idx))?;
        let (y, per) = match sampler {
            Sampler::Prior => (model.predict_prior(&batch, n, derive_seed(seed, &format!("prior-{k}")))?, n),
            Sampler::Dsf => {
                let per = model.dsf.as_ref().map_or(n, |d| d.cfg.n_samples);
                (model.predict_dsf(&batch)?, per)
            }
            Sampler::Oracle => unreachable!("handled above"),
        };
        let rows = rows_to_points(&y);
        out.extend(rows.chunks(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

pub fn predict_oracle(records: &[&SceneRecord], n: usize) -> Vec<Vec<Vec<[f64; 2]>>> {
    records.iter().map(|r| vec![r.future_agent(); n]).collect()
}

pub fn evaluate(model: &Model, records: &[&SceneRecord], sampler: Sampler, n: usize, seed: u64) -> Result<EvalReport> {
    report(records, &predict(model, records, sampler, n, seed)?, sampler, n)
}

pub fn evaluate_oracle(records: &[&SceneRecord], n: usize) -> Result<EvalReport> {
    report(records, &predict_oracle(records, n), Sampler::Oracle, n)
}

fn report(records: &[&SceneRecord], preds: &[Vec<Vec<[f64; 2]>>], sampler: Sampler, n: usize) -> Result<EvalReport> {
    let scenes = records
        .iter()
        .zip(preds)
        .map(|(r, p)| SceneMetrics::compute(&r.id, p, &r.future_agent(), &r.map))
        .collect::<Result<Vec<_>>>()?;
    let n_out = preds.first().map_or(n, |p| p.len());
    Ok(EvalReport::from_scenes(sampler.as_str(), n_out, scenes))
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub sampler: Sampler,
    pub branches: BranchMode,
    pub fusion: FusionMode,
    pub lambda: f64,
}

impl AblationCell {
    pub fn dsf(name: &str, branches: BranchMode, fusion: FusionMode, lambda: f64) -> Self {
        Self {
            name: name.to_string(),
            sampler: Sampler::Dsf,
            branches,
            fusion,
            lambda,
        }
    }

    pub fn prior() -> Self {
        Self {
            name: "cvae-prior".into(),
            sampler: Sampler::Prior,
            branches: BranchMode::TwoBranch,
            fusion: FusionMode::Product,
            lambda: 0.0,
        }
    }

    fn key(&self) -> String {
        match self.sampler {
            Sampler::Prior | Sampler::Oracle => self.sampler.as_str().into(),
            Sampler::Dsf => format!("{:?}/{:?}/{}", self.branches, self.fusion, self.lambda),
        }
    }
}

/// The component and fusion ablations at the configured λ.
pub fn default_cells(lambda: f64) -> Vec<AblationCell> {
    use BranchMode::*;
    use FusionMode::*;
    vec![
        AblationCell::prior(),
        AblationCell::dsf("dsf-1b-d", OneBranchDiversity, Product, lambda),
        AblationCell::dsf("dsf-1b-l", OneBranchLayout, Product, lambda),
        AblationCell::dsf("dsf-2b-d", TwoBranch, Product, 1.0),
        AblationCell::dsf("dsf-2b-d+l", TwoBranch, Product, lambda),
        AblationCell::dsf("fusion-concat", TwoBranch, Concat, lambda),
        AblationCell::dsf("fusion-sum", TwoBranch, Sum, lambda),
        AblationCell::dsf("fusion-product", TwoBranch, Product, lambda),
    ]
}

pub fn lambda_cells(lambdas: &[f64]) -> Vec<AblationCell> {
    lambdas
        .iter()
        .map(|&l| AblationCell::dsf(&format!("lambda-{l}"), BranchMode::TwoBranch, FusionMode::Product, l))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub per_seed: Vec<MetricMeans>,
    pub median: MetricMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.name == name)
    }

    pub fn table(&self) -> String {
        let rows: Vec<_> = self.cells.iter().map(|c| (c.cell.name.clone(), c.median)).collect();
        crate::metrics::summary_table(&rows)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_means(runs: &[MetricMeans]) -> MetricMeans {
    let med = |f: fn(&MetricMeans) -> f64| median(&mut runs.iter().map(f).collect::<Vec<_>>());
    MetricMeans {
        made: med(|m| m.made),
        mfde: med(|m| m.mfde),
        avg_fde: med(|m| m.avg_fde),
        rf: med(|m| m.rf),
        asd: med(|m| m.asd),
        fsd: med(|m| m.fsd),
        dac: med(|m| m.dac),
        dao: med(|m| m.dao),
    }
}

/// Trains one backbone per seed, then one DSF per distinct cell and seed, and
/// evaluates every cell on the validation split. Identical cells share runs.
pub fn run_grid(cfg: &TrainConfig, train: &[&SceneRecord], val: &[&SceneRecord], cells: &[AblationCell]) -> Result<AblationReport> {
    cfg.validate()?;
    let mut per_cell: Vec<Vec<MetricMeans>> = vec![Vec::new(); cells.len()];
    for &seed in &cfg.seeds {
        let seed_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let backbone = train_cvae(&seed_cfg, train, val)?;
        if let Some((step, reason)) = backbone.diverged {
            return Err(Error::Diverged { step, reason });
        }
        let mut cache: BTreeMap<String, MetricMeans> = BTreeMap::new();
        for (i, cell) in cells.iter().enumerate() {
            let key = cell.key();
            if let Some(m) = cache.get(&key) {
                per_cell[i].push(*m);
                continue;
            }
            let means = match cell.sampler {
                Sampler::Prior | Sampler::Oracle => evaluate(&backbone.model, val, cell.sampler, cfg.eval_samples, seed)?.mean,
                Sampler::Dsf => {
                    let mut c = seed_cfg.clone();
                    c.dsf_arch.branches = cell.branches;
                    c.dsf_arch.fusion = cell.fusion;
                    c.dsf_loss.lambda = cell.lambda;
                    let out = train_dsf(&c, &backbone.model, train, val)?;
                    if let Some((step, reason)) = out.diverged {
                        return Err(Error::Diverged { step, reason });
                    }
                    evaluate(&out.model, val, Sampler::Dsf, cfg.eval_samples, seed)?.mean
                }
            };
            log::info!("seed {seed} cell {}: FSD {:.3} DAC {:.3}", cell.name, means.fsd, means.dac);
            cache.insert(key, means);
            per_cell[i].push(means);
        }
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        cells: cells
            .iter()
            .zip(per_cell)
            .map(|(cell, runs)| CellResult {
                cell: cell.clone(),
                median: median_means(&runs),
                per_seed: runs,
            })
            .collect(),
    })
}

/// `(λ, FSD, DAC)` rows of a sweep report, in cell order.
pub fn sweep_rows(report: &AblationReport) -> Vec<(f64, f64, f64)> {
    report
        .cells
        .iter()
        .map(|c| (c.cell.lambda, c.median.fsd, c.median.dac))
        .collect()
}

pub fn sweep_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("lambda,fsd,dac\n");
    for (l, f, d) in rows {
        let _ = writeln!(out, "{l},{f},{d}");
    }
    out
}

/// Keeps only the trainable-parameter bytes under `prefix`, for equality checks.
pub fn parameter_bytes(store: &ParamStore, prefix: &str) -> Vec<u8> {
    store.to_bytes_filtered(|p| p.name.starts_with(prefix))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig::desk_small();
        let back = TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.clone();
        bad.dsf_loss.lambda = -0.1;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.schema_version = 9;
        assert!(bad.validate().is_err());
        let text = cfg.to_json().unwrap().replacen("\"seed\"", "\"sede\"", 1);
        assert!(TrainConfig::from_json(&text).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }
}
