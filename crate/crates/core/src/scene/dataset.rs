//! Seeded scene corpora and their on-disk format.
//!
//! A dataset directory holds `index.json` plus one raster blob per scene under
//! `rasters/<id>.bin`. Blobs start with the magic `TDRASTER`, a little-endian
//! `u32` version, then `u32` height, width and channel count, followed by the
//! row-major `f64` values.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tdiv_autodiff::Affine2;

use super::agent::{simulate_agent, AgentParams};
use super::chamfer::ChamferField;
use super::layout::{generate_layout, GeometryParams, LayoutKind, Point};
use super::raster::{rasterize, SceneMap, CHANNELS};
use super::Trajectory;
use crate::error::{Error, Result};

pub const INDEX_VERSION: u32 = 1;
pub const RASTER_MAGIC: &[u8; 8] = b"TDRASTER";
pub const RASTER_VERSION: u32 = 1;

const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Relative frequencies of straight, T-intersection, crossroad and curve scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutMix(pub [f64; 4]);

impl Default for LayoutMix {
    fn default() -> Self {
        LayoutMix([0.4, 0.3, 0.2, 0.1])
    }
}

impl LayoutMix {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || self.0.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layout mix {:?} needs non-negative weights with a positive sum",
                self.0
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> LayoutKind {
        let total: f64 = self.0.iter().sum();
        let mut x = rng.random::<f64>() * total;
        for (kind, w) in LayoutKind::ALL.into_iter().zip(self.0) {
            if x < w {
                return kind;
            }
            x -= w;
        }
        LayoutKind::ALL
            .into_iter()
            .zip(self.0)
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(k, _)| k)
            .unwrap_or(LayoutKind::Straight)
    }
}

impl std::str::FromStr for LayoutMix {
    type Err = Error;

    /// Four comma-separated weights, e.g. `0.4,0.3,0.2,0.1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("layout mix `{s}`: {e}")))?;
        let arr: [f64; 4] = parts
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("layout mix `{s}` needs four weights")))?;
        let mix = LayoutMix(arr);
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub grid_size: usize,
    pub layout_mix: LayoutMix,
    pub seed: u64,
    pub agent: AgentParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 400,
            grid_size: 64,
            layout_mix: LayoutMix::default(),
            seed: 0,
            agent: AgentParams::default(),
        }
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub kind: LayoutKind,
    pub seed: u64,
    pub split: Split,
    pub route: usize,
    pub trajectory: Trajectory,
    pub map: SceneMap,
}

impl SceneRecord {
    /// Past positions in the agent frame (present at the origin, heading +x).
    pub fn past_agent(&self) -> Vec<Point> {
        let t = self.map.world_to_agent();
        self.trajectory.past().iter().map(|&p| t.apply(p)).collect()
    }

    pub fn future_agent(&self) -> Vec<Point> {
        let t = self.map.world_to_agent();
        self.trajectory.future().iter().map(|&p| t.apply(p)).collect()
    }

    pub fn field(&self) -> Result<ChamferField> {
        ChamferField::from_map(&self.map)
    }
}

/// Stable identifier of a scene: hash of its layout kind and seed.
pub fn scene_id(kind: LayoutKind, seed: u64) -> String {
    let digest = Sha256::digest(format!("{}:{seed}", kind.as_str()).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the scene for `(kind, seed)`. Returns `None` when the ground-truth
/// future leaves the raster or touches a non-zero field value.
pub fn build_scene(kind: LayoutKind, seed: u64, grid_size: usize, agent: &AgentParams) -> Result<Option<(u64, SceneMap, Trajectory, usize)>> {
    let geometry = GeometryParams::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let layout = generate_layout(kind, seed, &geometry)?;
    let run = match simulate_agent(&layout, seed, agent) {
        Ok(run) => run,
        Err(Error::NoFeasiblePath(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let map = rasterize(&layout, &run.trajectory, grid_size)?;
    let field = ChamferField::from_map(&map)?;
    let admissible = run
        .trajectory
        .future()
        .iter()
        .all(|&p| map.cell_of_world_point(p).is_some() && field.sample_world(p).0 == 0.0);
    Ok(admissible.then_some((seed, map, run.trajectory, run.route)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.layout_mix.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let total = config.n_train + config.n_val;
        let mut records = Vec::with_capacity(total);
        for i in 0..total {
            let kind = config.layout_mix.draw(&mut rng);
            let split = if i < config.n_train { Split::Train } else { Split::Val };
            let mut built = None;
            for _ in 0..MAX_REJECTIONS {
                let seed: u64 = rng.random();
                if let Some(scene) = build_scene(kind, seed, config.grid_size, &config.agent)? {
                    built = Some(scene);
                    break;
                }
            }
            let (seed, map, trajectory, route) = built.ok_or_else(|| {
                Error::NoFeasiblePath(format!("no admissible {} scene found", kind.as_str()))
            })?;
            records.push(SceneRecord {
                id: scene_id(kind, seed),
                kind,
                seed,
                split,
                route,
                trajectory,
                map,
            });
        }
        Ok(Self {
            config: config.clone(),
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&SceneRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<&SceneRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("rasters"))?;
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let raster = format!("rasters/{}.bin", r.id);
            fs::write(dir.join(&raster), raster_to_bytes(&r.map))?;
            let t = r.map.world_to_agent();
            entries.push(IndexRecord {
                id: r.id.clone(),
                kind: r.kind,
                seed: r.seed,
                split: r.split,
                route: r.route,
                rate_hz: r.trajectory.rate_hz(),
                t_past: r.trajectory.t_past(),
                points: r.trajectory.points().to_vec(),
                world_to_agent: [t.a[0][0], t.a[0][1], t.a[1][0], t.a[1][1], t.t[0], t.t[1]],
                raster,
            });
        }
        let index = Index {
            version: INDEX_VERSION,
            config: self.config.clone(),
            records: entries,
        };
        let mut json = serde_json::to_string_pretty(&index)?;
        json.push('\n');
        fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("index.json"))
            .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join("index.json").display())))?;
        let index: Index = serde_json::from_str(&text)?;
        if index.version != INDEX_VERSION {
            return Err(Error::Dataset(format!(
                "index version {} unsupported (expected {INDEX_VERSION})",
                index.version
            )));
        }
        let mut records = Vec::with_capacity(index.records.len());
        for e in index.records {
            let bytes = fs::read(dir.join(&e.raster))?;
            let [a00, a01, a10, a11, t0, t1] = e.world_to_agent;
            let transform = Affine2 {
                a: [[a00, a01], [a10, a11]],
                t: [t0, t1],
            };
            let map = raster_from_bytes(&bytes, transform)
                .map_err(|err| Error::Dataset(format!("{}: {err}", e.raster)))?;
            records.push(SceneRecord {
                id: e.id,
                kind: e.kind,
                seed: e.seed,
                split: e.split,
                route: e.route,
                trajectory: Trajectory::new(e.points, e.rate_hz, e.t_past)?,
                map,
            });
        }
        Ok(Self {
            config: index.config,
            records,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Index {
    version: u32,
    config: DatasetConfig,
    records: Vec<IndexRecord>,
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    kind: LayoutKind,
    seed: u64,
    split: Split,
    route: usize,
    rate_hz: f64,
    t_past: usize,
    points: Vec<Point>,
    world_to_agent: [f64; 6],
    raster: String,
}

pub fn raster_to_bytes(map: &SceneMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + map.data().len() * 8);
    out.extend_from_slice(RASTER_MAGIC);
    for v in [RASTER_VERSION, map.size() as u32, map.size() as u32, CHANNELS as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn raster_from_bytes(bytes: &[u8], world_to_agent: Affine2) -> Result<SceneMap> {
    let bad = |why: &str| Error::Dataset(format!("raster blob: {why}"));
    if bytes.len() < 24 || &bytes[..8] != RASTER_MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != RASTER_VERSION {
        return Err(bad("unsupported version"));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if h != w || c != CHANNELS {
        return Err(bad("expected a square three-channel raster"));
    }
    let body = &bytes[24..];
    if body.len() != h * w * c * 8 {
        return Err(bad("length does not match header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    SceneMap::from_parts(h, data, world_to_agent)
}
