//! `tdiv`: dataset generation, two-stage training, evaluation, ablations and plots.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tdiv_autodiff::Tensor;
use tdiv_core::dpp::{self, KernelKind};
use tdiv_core::metrics::EvalReport;
use tdiv_core::model::{BranchMode, FusionMode, Model};
use tdiv_core::plot;
use tdiv_core::scene::{Dataset, LayoutMix, Point, SceneRecord, Split};
use tdiv_core::train::{self, Sampler, TrainConfig};
use tdiv_core::Error;

#[derive(Parser, Debug)]
#[command(name = "tdiv", version, about = "Diverse, admissible trajectory forecasting on synthetic road scenes")]
struct Cli {
    /// JSON run configuration; the built-in preset is used when absent
    #[arg(long, global = true, env = "TDIV_CONFIG")]
    config: Option<PathBuf>,
    /// Built-in configuration used when no config file is given
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Master seed; overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size model and corpus
    Default,
    /// Reduced model and corpus for single-core runs
    DeskSmall,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene corpus
    GenScenes {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Raster side length in cells [default: from config]
        #[arg(long)]
        grid_size: Option<usize>,
        /// Number of training scenes [default: from config]
        #[arg(long)]
        n_scenes: Option<usize>,
        /// Number of validation scenes [default: from config]
        #[arg(long)]
        n_val: Option<usize>,
        /// Straight,T,crossroad,curve proportions [default: from config]
        #[arg(long)]
        layout_mix: Option<LayoutMix>,
    },
    /// Train the conditional VAE backbone
    TrainCvae {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV [default: <out>.log.csv]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Epochs [default: from config]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the diversity sampling function on a frozen backbone
    TrainDsf {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Backbone checkpoint
        #[arg(long)]
        backbone: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV [default: <out>.log.csv]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Epochs [default: from config]
        #[arg(long)]
        epochs: Option<usize>,
        /// Diversity weight λ in [0, 1] [default: from config]
        #[arg(long)]
        lambda: Option<f64>,
        /// Fusion of the two branches: product, sum or concat [default: from config]
        #[arg(long)]
        fusion: Option<FusionMode>,
        /// two-branch, one-branch-diversity or one-branch-layout [default: from config]
        #[arg(long)]
        branches: Option<BranchMode>,
        /// compound, distance-only or angle-only [default: from config]
        #[arg(long)]
        kernel: Option<KernelKind>,
    },
    /// Evaluate a sampler and write JSON and CSV reports
    Eval {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint (not needed for the oracle)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// prior, dsf or oracle
        #[arg(long, default_value = "dsf")]
        sampler: Sampler,
        /// Split to evaluate
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Predictions per scene for prior and oracle [default: from config]
        #[arg(long)]
        n: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the component and fusion ablation grid
    Ablate {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one DSF per λ and chart FSD and DAC
    SweepLambda {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// λ values
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        lambdas: Vec<f64>,
    },
    /// Render one scene with predictions as SVG
    PlotScene {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint (not needed for the oracle)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene id
        #[arg(long)]
        scene: String,
        /// prior, dsf or oracle
        #[arg(long, default_value = "dsf")]
        sampler: Sampler,
        /// Predictions for prior and oracle [default: from config]
        #[arg(long)]
        n: Option<usize>,
        /// SVG file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the DPP kernel of one scene's predictions as JSON
    DumpKernel {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint (not needed for the oracle)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene id
        #[arg(long)]
        scene: String,
        /// prior, dsf or oracle
        #[arg(long, default_value = "dsf")]
        sampler: Sampler,
        /// Predictions for prior and oracle [default: from config]
        #[arg(long)]
        n: Option<usize>,
        /// Kernel kind [default: from config]
        #[arg(long)]
        kernel: Option<KernelKind>,
        /// JSON file to write [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::from_json(&text)?
        }
        None => match cli.preset {
            Preset::Default => TrainConfig::default(),
            Preset::DeskSmall => TrainConfig::desk_small(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.dataset.seed = seed;
        cfg.seeds = (0..cfg.seeds.len() as u64).map(|k| seed + k).collect();
    }
    Ok(cfg)
}

fn load_dataset(cfg: &mut TrainConfig, dir: &Path) -> CliResult<Dataset> {
    let data = Dataset::load(dir)?;
    train::check_compatible(&cfg.model, &data.config)?;
    cfg.dataset = data.config.clone();
    Ok(data)
}

fn load_model(path: Option<&Path>, sampler: Sampler, data: &Dataset) -> CliResult<Option<Model>> {
    if sampler == Sampler::Oracle {
        return Ok(None);
    }
    let path = path.ok_or_else(|| CliError::Usage(format!("--checkpoint is required for the {} sampler", sampler.as_str())))?;
    let model = Model::load(path)?;
    train::check_compatible(&model.cvae.cfg, &data.config)?;
    if sampler == Sampler::Dsf && model.dsf.is_none() {
        return Err(CliError::Usage(format!("{} has no DSF; train one with train-dsf", path.display())));
    }
    Ok(Some(model))
}

fn find_scene<'a>(data: &'a Dataset, id: &str) -> CliResult<&'a SceneRecord> {
    data.find(id).ok_or_else(|| Error::Dataset(format!("no scene with id `{id}`")).into())
}

fn scene_predictions(model: Option<&Model>, record: &SceneRecord, sampler: Sampler, n: usize, seed: u64) -> CliResult<Vec<Vec<Point>>> {
    let recs = [record];
    let preds = match model {
        Some(m) => train::predict(m, &recs, sampler, n, seed)?,
        None => train::predict_oracle(&recs, n),
    };
    Ok(preds.into_iter().next().unwrap_or_default())
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    })
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn finish_training(outcome: &train::TrainOutcome, out: &Path, log: &Path) -> CliResult<()> {
    outcome.model.save(out)?;
    write(log, &train::log_to_csv(&outcome.log))?;
    if let Some((step, reason)) = &outcome.diverged {
        return Err(Error::Diverged {
            step: *step,
            reason: reason.clone(),
        }
        .into());
    }
    log::info!(
        "best epoch {} (validation score {:.4}); wrote {}",
        outcome.best_epoch,
        outcome.best_score,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenScenes {
            out,
            grid_size,
            n_scenes,
            n_val,
            layout_mix,
        } => {
            let d = &mut cfg.dataset;
            if let Some(g) = grid_size {
                d.grid_size = g;
            }
            if let Some(n) = n_scenes {
                d.n_train = n;
            }
            if let Some(n) = n_val {
                d.n_val = n;
            }
            if let Some(m) = layout_mix {
                d.layout_mix = m;
            }
            let data = Dataset::generate(d)?;
            data.save(&out)?;
            log::info!("wrote {} scenes to {}", data.records.len(), out.display());
        }
        Command::TrainCvae { data, out, log, epochs } => {
            let dataset = load_dataset(&mut cfg, &data)?;
            if let Some(e) = epochs {
                cfg.cvae.epochs = e;
            }
            let outcome = train::train_cvae(&cfg, &dataset.split(Split::Train), &dataset.split(Split::Val))?;
            finish_training(&outcome, &out, &log_path(&out, log))?;
        }
        Command::TrainDsf {
            data,
            backbone,
            out,
            log,
            epochs,
            lambda,
            fusion,
            branches,
            kernel,
        } => {
            let dataset = load_dataset(&mut cfg, &data)?;
            if let Some(e) = epochs {
                cfg.dsf.epochs = e;
            }
            if let Some(l) = lambda {
                cfg.dsf_loss.lambda = l;
            }
            if let Some(f) = fusion {
                cfg.dsf_arch.fusion = f;
            }
            if let Some(b) = branches {
                cfg.dsf_arch.branches = b;
            }
            if let Some(k) = kernel {
                cfg.dsf_loss.kernel = k;
            }
            let backbone = Model::load(&backbone)?;
            let outcome = train::train_dsf(&cfg, &backbone, &dataset.split(Split::Train), &dataset.split(Split::Val))?;
            finish_training(&outcome, &out, &log_path(&out, log))?;
        }
        Command::Eval {
            data,
            checkpoint,
            sampler,
            split,
            n,
            out,
        } => {
            let dataset = load_dataset(&mut cfg, &data)?;
            let model = load_model(checkpoint.as_deref(), sampler, &dataset)?;
            let records = dataset.split(match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            });
            let n = n.unwrap_or(cfg.eval_samples);
            let report = match &model {
                Some(m) => train::evaluate(m, &records, sampler, n, cfg.seed)?,
                None => train::evaluate_oracle(&records, n)?,
            };
            let stem = format!("eval-{}", sampler.as_str());
            report.write(&out, &stem)?;
            print_report(&report);
        }
        Command::Ablate { data, out } => {
            let dataset = load_dataset(&mut cfg, &data)?;
            let cells = train::default_cells(cfg.dsf_loss.lambda);
            let report = train::run_grid(&cfg, &dataset.split(Split::Train), &dataset.split(Split::Val), &cells)?;
            write(&out.join("ablation.json"), &report.to_json()?)?;
            let table = report.table();
            write(&out.join("ablation.md"), &table)?;
            print!("{table}");
        }
        Command::SweepLambda { data, out, lambdas } => {
            if lambdas.is_empty() || lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return Err(CliError::Usage("λ values must lie in [0, 1]".into()));
            }
            let dataset = load_dataset(&mut cfg, &data)?;
            let cells = train::lambda_cells(&lambdas);
            let report = train::run_grid(&cfg, &dataset.split(Split::Train), &dataset.split(Split::Val), &cells)?;
            let rows = train::sweep_rows(&report);
            write(&out.join("lambda_sweep.json"), &report.to_json()?)?;
            write(&out.join("lambda_sweep.csv"), &train::sweep_csv(&rows))?;
            write(&out.join("lambda_sweep.svg"), &plot::lambda_sweep_svg(&rows))?;
            print!("{}", train::sweep_csv(&rows));
        }
        Command::PlotScene {
            data,
            checkpoint,
            scene,
            sampler,
            n,
            out,
        } => {
            let dataset = load_dataset(&mut cfg, &data)?;
            let record = find_scene(&dataset, &scene)?;
            let model = load_model(checkpoint.as_deref(), sampler, &dataset)?;
            let preds = scene_predictions(model.as_ref(), record, sampler, n.unwrap_or(cfg.eval_samples), cfg.seed)?;
            let svg = plot::scene_svg(&record.map, &record.past_agent(), &record.future_agent(), &preds);
            write(&out, &svg)?;
        }
        Command::DumpKernel {
            data,
            checkpoint,
            scene,
            sampler,
            n,
            kernel,
            out,
        } => {
            let dataset = load_dataset(&mut cfg, &data)?;
            let record = find_scene(&dataset, &scene)?;
            let model = load_model(checkpoint.as_deref(), sampler, &dataset)?;
            let preds = scene_predictions(model.as_ref(), record, sampler, n.unwrap_or(cfg.eval_samples), cfg.seed)?;
            let kind = kernel.unwrap_or(cfg.dsf_loss.kernel);
            let json = kernel_json(&preds, kind, cfg.dsf_loss.alpha_mode)?;
            match out {
                Some(path) => write(&path, &json)?,
                None => print!("{json}"),
            }
        }
    }
    Ok(())
}

fn kernel_json(preds: &[Vec<Point>], kind: KernelKind, mode: dpp::AlphaMode) -> CliResult<String> {
    let width = preds.first().map_or(0, |p| 2 * p.len());
    let flat: Vec<f64> = preds.iter().flatten().flat_map(|p| [p[0], p[1]]).collect();
    let set = Tensor::new(vec![preds.len(), width], flat).map_err(Error::from)?;
    let origin = [0.0, 0.0];
    let alpha = dpp::calibrate_alpha(&set, origin, kind, mode)?;
    let k = dpp::build_kernel(&set, origin, kind, alpha)?;
    let n = preds.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| k.entries.at2(i, j)).collect()).collect();
    let value = serde_json::json!({
        "kind": kind,
        "alpha": alpha,
        "jitter": k.jitter,
        "expected_cardinality": dpp::expected_cardinality(&k.entries)?,
        "min_eigenvalue": dpp::min_eigenvalue(&k.entries)?,
        "entries": rows,
    });
    let mut s = serde_json::to_string_pretty(&value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn print_report(report: &EvalReport) {
    print!(
        "{}",
        tdiv_core::metrics::summary_table(&[(report.sampler.clone(), report.mean)])
    );
    if report.rf_capped > 0 {
        println!("rF capped in {} of {} scenes", report.rf_capped, report.scene_count);
    }
}
