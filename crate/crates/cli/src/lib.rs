//! Batch driver for `hsp-core`.
//!
//! Every command writes under its `--out` directory and returns one
//! `key=value` summary line. Exit codes: 0 success, 2 invalid input or
//! configuration, 3 I/O or malformed files, 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use hsp_core::data::{generate_synthetic, load_image, pgm, DatasetManifest, Split, SyntheticSpec, Task};
use hsp_core::model::ModelConfig;
use hsp_core::self_prompt::{export_heatmaps, write_heatmaps};
use hsp_core::trainer::{
    ablation_csv, evaluate, history_jsonl, render_sweep_plot, run_ablation, run_prompt_sweep, sweep_csv,
    train_with_progress, Checkpoint, RunOptions, TrainConfig,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.hspc";
pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_PLOT: &str = "sweep.pgm";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hsp_core::Error),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use hsp_core::Error as E;
        match self {
            CliError::Invalid(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) | E::Shape { .. } | E::CheckInvalid(_) => 2,
                E::Dataset { .. } | E::Format(_) | E::Io { .. } => 3,
                E::Divergence { .. } | E::NonFinite { .. } => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hsp", version, about = "Prompt-free hierarchical segmentation at toy scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (source and target appearance).
    GenData(GenDataArgs),
    /// Train from a run config and evaluate on the source test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Train all six architecture variants, evaluate on the target set.
    Ablate(TrainArgs),
    /// Train once per prompt count.
    Sweep(SweepArgs),
    /// Export Q and A attention maps for one image.
    Heatmaps(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: Task,
    /// Total images across train and test.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Test images; defaults to 30% of `count`.
    #[arg(long)]
    pub test_count: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or its manifest.json.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub counts: Vec<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grayscale PGM; resized to the model's input size.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Dataset locations; relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: PathBuf,
    /// Appearance-shifted set, needed by `ablate` and `sweep`.
    #[serde(default)]
    pub target: Option<PathBuf>,
}

/// The JSON run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
}

/// A validated config with its datasets loaded.
pub struct LoadedRun {
    pub config: RunConfigFile,
    pub source: DatasetManifest,
    pub target: Option<DatasetManifest>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> CliResult<LoadedRun> {
        let text = fs::read_to_string(path).map_err(|e| hsp_core::Error::Io { path: path.into(), source: e })?;
        let config: RunConfigFile =
            serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        config.model.validate()?;
        config.train.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let source = DatasetManifest::load(&base.join(&config.data.source))?;
        let target = config.data.target.as_ref().map(|t| DatasetManifest::load(&base.join(t))).transpose()?;
        for m in std::iter::once(&source).chain(&target) {
            if m.image_size != config.model.encoder.image_size || m.num_classes != config.model.decoder.num_classes {
                return Err(CliError::Invalid(format!(
                    "dataset {} has {}px images and {} classes; model expects {}px and {}",
                    m.name, m.image_size, m.num_classes, config.model.encoder.image_size, config.model.decoder.num_classes
                )));
            }
        }
        Ok(LoadedRun { config, source, target })
    }
}

impl LoadedRun {
    fn target(&self) -> CliResult<&DatasetManifest> {
        self.target
            .as_ref()
            .ok_or_else(|| CliError::Invalid("this command needs data.target in the config".into()))
    }
}

/// Creates `--out`; an existing directory is an error without `--force`.
pub fn prepare_out(out: &OutArgs) -> CliResult<PathBuf> {
    if out.out.exists() && !out.force {
        return Err(CliError::Invalid(format!(
            "output directory {} exists; pass --force to write into it",
            out.out.display()
        )));
    }
    fs::create_dir_all(&out.out).map_err(|e| hsp_core::Error::Io { path: out.out.clone(), source: e })?;
    Ok(out.out.clone())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| hsp_core::Error::Io { path: path.into(), source: e }.into())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Heatmaps(a) => cmd_heatmaps(&a),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<String> {
    let spec = SyntheticSpec { task: a.task, count: a.count, seed: a.seed, image_size: a.size, test_count: a.test_count };
    let (train, test) = spec.split_sizes()?;
    let out = prepare_out(&a.out)?;
    generate_synthetic(&out, &spec)?;
    Ok(format!(
        "task={} count={} train={train} test={test} size={} seed={} out={}",
        a.task.as_str(),
        a.count,
        a.size,
        a.seed,
        out.display()
    ))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let run = RunConfigFile::load(&a.config)?;
    let options = RunOptions::from_env()?;
    let out = prepare_out(&a.out)?;
    let (model, train) = (&run.config.model, &run.config.train);
    let ckpt = train_with_progress(model, train, &run.source, options, |r| {
        eprintln!("epoch={} train_loss={:.6}", r.epoch, r.train_loss);
    })?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    ckpt.save(&ckpt_path)?;
    write(&out.join(HISTORY_FILE), history_jsonl(&ckpt.history))?;
    let report = evaluate(&ckpt.model, &run.source, Split::Test, options)?;
    write(&out.join(REPORT_FILE), to_json(&report))?;
    let last = ckpt.history.last().map_or(f64::NAN, |r| r.train_loss);
    Ok(format!(
        "epochs={} train_loss={last:.6} {} params={} checkpoint={}",
        ckpt.epoch,
        report.aggregate.summary_line(),
        ckpt.model.trainable_count(),
        ckpt_path.display()
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let options = RunOptions::from_env()?;
    let out = prepare_out(&a.out)?;
    let report = evaluate(&ckpt.model, &manifest, a.split, options)?;
    write(&out.join(REPORT_FILE), to_json(&report))?;
    Ok(report.aggregate.summary_line())
}

pub fn cmd_ablate(a: &TrainArgs) -> CliResult<String> {
    let run = RunConfigFile::load(&a.config)?;
    let target = run.target()?;
    let options = RunOptions::from_env()?;
    let out = prepare_out(&a.out)?;
    let rows = run_ablation(&run.config.model, &run.config.train, &run.source, target, options)?;
    write(&out.join(ABLATION_CSV), ablation_csv(&rows))?;
    write(&out.join("ablation.json"), to_json(&rows))?;
    let best = rows.iter().max_by(|x, y| x.dice.total_cmp(&y.dice)).expect("six rows");
    Ok(format!(
        "variants={} best={} best_dice={:.4} csv={}",
        rows.len(),
        best.variant,
        best.dice,
        out.join(ABLATION_CSV).display()
    ))
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<String> {
    if a.counts.is_empty() || a.counts.contains(&0) {
        return Err(CliError::Invalid("--counts needs positive integers".into()));
    }
    let run = RunConfigFile::load(&a.config)?;
    let target = run.target()?;
    let options = RunOptions::from_env()?;
    let out = prepare_out(&a.out)?;
    let rows = run_prompt_sweep(&run.config.model, &run.config.train, &run.source, target, &a.counts, options)?;
    write(&out.join(SWEEP_CSV), sweep_csv(&rows))?;
    write(&out.join("sweep.json"), to_json(&rows))?;
    let (w, h) = (320, 200);
    pgm::write_gray(&out.join(SWEEP_PLOT), w, h, &render_sweep_plot(&rows, w, h))?;
    let spread = |f: fn(&hsp_core::trainer::SweepRow) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).collect();
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
    };
    Ok(format!(
        "counts={} source_spread={:.4} target_spread={:.4} csv={}",
        rows.len(),
        spread(|r| r.source_dice),
        spread(|r| r.target_dice),
        out.join(SWEEP_CSV).display()
    ))
}

pub fn cmd_heatmaps(a: &HeatmapArgs) -> CliResult<String> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let config = ckpt.model.config();
    if !config.architecture.qa_pairs {
        return Err(CliError::Invalid("checkpoint has no Q&A prompt pairs to visualize".into()));
    }
    if config.encoder.in_channels != 1 {
        return Err(CliError::Invalid("heatmaps need a single-channel model".into()));
    }
    let size = config.encoder.image_size;
    let image = load_image::<f32>(&a.image, size)?;
    let out = prepare_out(&a.out)?;
    let (_, records) = ckpt.model.predict(&image)?;
    let maps = export_heatmaps(&records, size)?;
    let files = write_heatmaps(&out, &maps)?;
    Ok(format!(
        "files={} layers={} prompts={} out={}",
        files.len(),
        config.decoder_taps().len(),
        config.prompt_count(),
        out.display()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        use hsp_core::Error as E;
        let io = || std::io::Error::new(std::io::ErrorKind::NotFound, "x");
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(E::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(E::Io { path: "p".into(), source: io() }).exit_code(), 3);
        assert_eq!(CliError::from(E::Format("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(E::Divergence { step: 3, loss: f64::NAN }).exit_code(), 4);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = r#"{"data": {"source": "s"}}"#;
        assert!(serde_json::from_str::<RunConfigFile>(ok).is_ok());
        for bad in [
            r#"{"data": {"source": "s"}, "extra": 1}"#,
            r#"{"data": {"source": "s", "val": "v"}}"#,
            r#"{"data": {"source": "s"}, "model": {"encoder": {"depthh": 3}}}"#,
            r#"{"data": {"source": "s"}, "train": {"lr": 0.1}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfigFile>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn defaults_fill_omitted_sections() {
        let c: RunConfigFile = serde_json::from_str(r#"{"data": {"source": "s"}}"#).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.data.target, None);
    }

    #[test]
    fn prepare_out_refuses_existing_dir() {
        let dir = tempfile::tempdir().unwrap();
        let args = OutArgs { out: dir.path().to_path_buf(), force: false };
        assert_eq!(prepare_out(&args).unwrap_err().exit_code(), 2);
        let forced = OutArgs { force: true, ..args };
        assert!(prepare_out(&forced).is_ok());
    }

    #[test]
    fn cli_parses_sweep_counts() {
        let cli = Cli::try_parse_from(["hsp", "sweep", "--config", "c.json", "--out", "o", "--counts", "1,4"]).unwrap();
        match cli.command {
            Command::Sweep(a) => assert_eq!(a.counts, [1, 4]),
            other => panic!("{other:?}"),
        }
    }
}
