//! The `banet` command line: run configuration and one function per
//! subcommand. The binary only parses arguments and maps errors to exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::check::{check_all_blocks, TOLERANCE};
use crate::diffcore::{ParamStore, Real};
use crate::ensemble::{fuse, load_manifest};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{Banet, ModelConfig, Sample};
use crate::net_decoder::{forecast, PredictionFile, Stage};
use crate::optim::{load_checkpoint, log_line, save_checkpoint, train, write_log, LrSchedule, Precision, TrainConfig};
use crate::scene::{generate_synthetic, load_scene_file, save_scene_file, Scene, SceneGenConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USER: u8 = 1;
pub const EXIT_VERIFY: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

/// Exit code for an error that reached the top level.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Check(_) => EXIT_VERIFY,
        Error::Shape { .. } | Error::Axis { .. } => EXIT_INTERNAL,
        _ => EXIT_USER,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSet {
    pub count: usize,
    pub generator: SceneGenConfig,
}

impl Default for SceneSet {
    fn default() -> Self {
        Self {
            count: 8,
            generator: SceneGenConfig::desk(),
        }
    }
}

/// Output locations, relative to the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
            predictions: "run/predictions.json".into(),
            report: "run/report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives scene generation, initialization and shuffling.
    pub seed: u64,
    #[serde(default)]
    pub scenes: SceneSet,
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    /// Desk-size run over eight scenes.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            scenes: SceneSet::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(Error::from_json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes.count == 0 {
            return Err(Error::Config("scenes.count must be >= 1".into()));
        }
        self.scenes.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.scenes.generator;
        if (g.history, g.future) != (self.model.history, self.model.future) {
            return Err(Error::Config(format!(
                "generator horizons (history {}, future {}) differ from the model's (history {}, future {})",
                g.history, g.future, self.model.history, self.model.future
            )));
        }
        if self.train.seed != 0 {
            return Err(Error::Config("train.seed is not read; set the top-level seed".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Stage the trained network predicts with.
    pub fn final_stage(&self) -> Stage {
        if self.train.total_epochs > self.train.stage2_start_epoch {
            Stage::S2
        } else {
            Stage::S1
        }
    }
}

/// A loaded configuration with its paths resolved.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, base: &Path) -> Result<Self> {
        config.validate()?;
        let p = &config.paths;
        Ok(Self {
            hash: config.hash(),
            data_dir: base.join(&p.data_dir),
            run_dir: base.join(&p.run_dir),
            predictions: base.join(&p.predictions),
            report: base.join(&p.report),
            config,
        })
    }

    /// Reads `path`, applies a seed override and resolves paths against the
    /// config file's directory.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::parse(&text)?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Self::new(config, base)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoint")
    }

    pub fn log_path(&self) -> PathBuf {
        self.run_dir.join("train_log.jsonl")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data_dir.join("dataset.json")
    }
}

/// Index of the generated scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub config_hash: String,
    pub scenes: Vec<String>,
}

/// Written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOutput {
    pub config_hash: Option<String>,
    pub metrics: MetricReport,
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn say(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Generates `scenes.count` scenes, each from its own draw of the run seed.
pub fn gen_data(run: &Run, out: &mut dyn Write) -> Result<Dataset> {
    fs::create_dir_all(&run.data_dir).map_err(|e| Error::io(&run.data_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed);
    let mut names = Vec::with_capacity(run.config.scenes.count);
    for i in 0..run.config.scenes.count {
        let mut scene = generate_synthetic(&run.config.scenes.generator, rng.random())?;
        scene.id = format!("scene_{i:04}");
        let name = format!("{}.json", scene.id);
        save_scene_file(&scene, &run.data_dir.join(&name))?;
        names.push(name);
    }
    let dataset = Dataset {
        config_hash: run.hash.clone(),
        scenes: names,
    };
    write_file(
        &run.dataset_path(),
        &serde_json::to_string_pretty(&dataset).expect("dataset serializes"),
    )?;
    say(
        out,
        &format!("wrote {} scenes to {}", dataset.scenes.len(), run.data_dir.display()),
    )?;
    Ok(dataset)
}

pub fn load_scenes(run: &Run) -> Result<Vec<Scene>> {
    let path = run.dataset_path();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let dataset: Dataset = serde_path_to_error::deserialize(de).map_err(Error::from_json)?;
    dataset
        .scenes
        .iter()
        .map(|name| load_scene_file(&run.data_dir.join(name)))
        .collect()
}

fn train_as<T: Real>(run: &Run, samples: &[Sample], out: &mut dyn Write) -> Result<()> {
    let (model, params): (Banet, ParamStore<T>) = Banet::init(&run.config.model, run.config.seed)?;
    let trained = train(&model, params, samples, &run.config.train_config(), |r| {
        say(out, &log_line(r))
    })?;
    save_checkpoint(
        &run.checkpoint_dir(),
        &trained.params,
        &trained.optimizer,
        Some(&run.hash),
    )?;
    write_log(&run.log_path(), &trained.log)
}

pub fn train_command(run: &Run, out: &mut dyn Write) -> Result<()> {
    let mut samples = Vec::new();
    for scene in load_scenes(run)? {
        samples.extend(Sample::focal_samples(&scene, &run.config.model)?);
    }
    fs::create_dir_all(&run.run_dir).map_err(|e| Error::io(&run.run_dir, e))?;
    match run.config.train.precision {
        Precision::F32 => train_as::<f32>(run, &samples, out)?,
        Precision::F64 => train_as::<f64>(run, &samples, out)?,
    }
    say(
        out,
        &format!(
            "wrote {} and {}",
            run.checkpoint_dir().display(),
            run.log_path().display()
        ),
    )
}

fn predict_as<T: Real>(run: &Run, scenes: &[Scene]) -> Result<PredictionFile> {
    let model = Banet::layout(&run.config.model)?;
    let (params, _) = load_checkpoint::<T>(&run.checkpoint_dir())?;
    model.check_params(&params)?;
    let stage = run.config.final_stage();
    let mut predictions = Vec::new();
    for scene in scenes {
        predictions.extend(forecast(&model, &params, scene, stage)?);
    }
    Ok(PredictionFile {
        config_hash: Some(run.hash.clone()),
        predictions,
    })
}

pub fn predict_command(run: &Run, out: &mut dyn Write) -> Result<PredictionFile> {
    let scenes = load_scenes(run)?;
    let file = match run.config.train.precision {
        Precision::F32 => predict_as::<f32>(run, &scenes)?,
        Precision::F64 => predict_as::<f64>(run, &scenes)?,
    };
    write_file(&run.predictions, &file.to_json())?;
    say(
        out,
        &format!(
            "wrote {} forecasts to {}",
            file.predictions.len(),
            run.predictions.display()
        ),
    )?;
    Ok(file)
}

/// Evaluates `predictions` (the configured file by default) against the
/// generated scenes, prints the table and writes the report.
pub fn eval_command(
    run: &Run,
    predictions: Option<&Path>,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> Result<EvalOutput> {
    let file = PredictionFile::load(predictions.unwrap_or(&run.predictions))?;
    let metrics = evaluate(&file.predictions, &load_scenes(run)?)?;
    metrics.check_invariants()?;
    say(out, metrics.table().trim_end())?;
    let result = EvalOutput {
        config_hash: Some(run.hash.clone()),
        metrics,
    };
    let path = report.unwrap_or(&run.report);
    write_file(path, &serde_json::to_string_pretty(&result).expect("report serializes"))?;
    Ok(result)
}

/// Fuses the sub-model predictions listed in `manifest` into `dest`.
pub fn ensemble_command(manifest: &Path, dest: &Path, seed: u64, out: &mut dyn Write) -> Result<PredictionFile> {
    let models = load_manifest(manifest)?;
    let fused = fuse(&models, seed)?;
    let text = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut h = Sha256::new();
    h.update(&text);
    h.update(seed.to_le_bytes());
    let file = PredictionFile {
        config_hash: Some(hex::encode(h.finalize())),
        predictions: fused.into_iter().map(|a| a.forecast).collect(),
    };
    write_file(dest, &file.to_json())?;
    say(
        out,
        &format!(
            "fused {} sub-models over {} actors into {}",
            models.len(),
            file.predictions.len(),
            dest.display()
        ),
    )?;
    Ok(file)
}

/// Prints one row per (objective, block); a [`Error::Check`] if any row
/// exceeds the tolerance.
pub fn grad_check_command(seed: u64, per_param: usize, out: &mut dyn Write) -> Result<()> {
    let rows = check_all_blocks(seed, per_param)?;
    say(
        out,
        &format!(
            "{:<18} {:<24} {:>12} {:>7}",
            "objective", "block", "max_rel_err", "coords"
        ),
    )?;
    for r in &rows {
        let mark = if r.passed() { "" } else { "  FAIL" };
        say(
            out,
            &format!(
                "{:<18} {:<24} {:>12.3e} {:>7}{mark}",
                r.objective, r.block, r.max_rel_error, r.coords
            ),
        )?;
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{}", r.objective, r.block))
        .collect();
    if failed.is_empty() {
        say(out, &format!("all {} rows within {TOLERANCE:e}", rows.len()))
    } else {
        Err(Error::Check(format!("over {TOLERANCE:e}: {}", failed.join(", "))))
    }
}

/// `epoch lr` for every epoch of the schedule.
pub fn lr_table(schedule: &LrSchedule, out: &mut dyn Write) -> Result<()> {
    schedule.validate()?;
    say(out, "epoch lr")?;
    for e in 0..schedule.total_epochs {
        say(out, &format!("{e} {:.6e}", schedule.lr_at(e as f64)?))?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "banet", version, about = "Boundary-aware multimodal motion forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes.
    GenData(RunArgs),
    /// Train on the generated scenes and write a checkpoint and log.
    Train(RunArgs),
    /// Forecast every focal actor with the trained checkpoint.
    Predict(RunArgs),
    /// Score a prediction file against the generated scenes.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Prediction file to score instead of the configured one.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Where to write the report instead of the configured path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fuse sub-model predictions listed in a manifest.
    Ensemble {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check analytic gradients of every block against central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampled coordinates per parameter tensor.
        #[arg(long, default_value_t = 4)]
        per_param: usize,
    },
    /// Print the learning rate of every epoch.
    LrTable {
        /// Take the schedule from this run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&Run::load(&a.config, a.seed)?, out).map(drop),
        Command::Train(a) => train_command(&Run::load(&a.config, a.seed)?, out),
        Command::Predict(a) => predict_command(&Run::load(&a.config, a.seed)?, out).map(drop),
        Command::Eval {
            run,
            predictions,
            report,
        } => eval_command(
            &Run::load(&run.config, run.seed)?,
            predictions.as_deref(),
            report.as_deref(),
            out,
        )
        .map(drop),
        Command::Ensemble {
            manifest,
            out: dest,
            seed,
        } => ensemble_command(&manifest, &dest, seed, out).map(drop),
        Command::GradCheck { seed, per_param } => grad_check_command(seed, per_param, out),
        Command::LrTable { config } => {
            let schedule = match config {
                Some(path) => Run::load(&path, None)?.config.train.schedule(),
                None => LrSchedule::default(),
            };
            lr_table(&schedule, out)
        }
    }
}
