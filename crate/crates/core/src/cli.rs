//! `anodet` command-line interface.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, OUT_ENV};
use crate::data::{self, load_dataset, CategorySpec, Image, Label, Raster, TrainingSet};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics;
use crate::scorer;
use crate::trainer::{self, TrainSink, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "anodet", version, about = "Consistency-regularized BiGAN anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (flat TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `alpha` (consistency weight).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Overrides `lambda` (anomaly score weight).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output directory; defaults to `out_dir`, then $ANODET_OUT/<category>, then runs/<category>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the category's normal training images.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `total_steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score image files or directories.
    Score {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to use; defaults to <out>/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score the test split and report auROC and balanced accuracy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write input, reconstruction and difference map of one image.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate the synthetic texture corpus in the dataset layout.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, steps, resume } => cmd_train(&common, steps, resume.as_deref()),
        Command::Score { common, checkpoint, inputs } => cmd_score(&common, checkpoint.as_deref(), &inputs),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(&common, checkpoint.as_deref()),
        Command::Reconstruct { common, checkpoint, input } => cmd_reconstruct(&common, checkpoint.as_deref(), &input),
        Command::Synth { common } => cmd_synth(&common),
    }
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(common: &Common, steps: Option<u64>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = common.alpha {
        cfg.alpha = a;
    }
    if let Some(l) = common.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    let env_root = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let out = cfg.resolve_out(env_root.as_deref());
    Ok((cfg, out))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Evaluation(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: u64,
    #[serde(flatten)]
    losses: &'a LossBreakdown,
}

/// Appends loss records to the training log and writes checkpoints.
struct FileSink {
    config: ExperimentConfig,
    out: PathBuf,
    log: BufWriter<File>,
    last_checkpoint: Option<PathBuf>,
}

impl TrainSink<f32> for FileSink {
    fn log(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        serde_json::to_writer(&mut self.log, &LogRecord { step, losses: b }).map_err(|e| Error::Evaluation(e.to_string()))?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        eprintln!("step {step}: l_eg {:.4} gp {:.4} l_r {:.2} l_r' {:.3} l*_eg {:.4}", b.l_eg, b.gp, b.l_r, b.l_r_prime, b.l_star_eg);
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState<f32>) -> Result<()> {
        let ck = Checkpoint { config: self.config.clone(), state: state.clone() };
        let path = if state.step == self.config.total_steps {
            self.out.join(FINAL_CHECKPOINT)
        } else {
            self.out.join("checkpoints").join(format!("step-{:08}.ckpt", state.step))
        };
        ck.save(&path)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }
}

fn training_set(cfg: &ExperimentConfig) -> Result<TrainingSet> {
    let spec = cfg.category_spec();
    let ds = load_dataset(&cfg.dataset_root, &spec)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    TrainingSet::new(&ds.train, &spec)
}

fn cmd_train(common: &Common, steps: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let (cfg, out) = resolve_config(common, steps)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.render())?;
    let set = training_set(&cfg)?;
    let state = match resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.config.network() != cfg.network() {
                return Err(Error::config("resume", "checkpoint network does not match the configuration"));
            }
            ck.state
        }
        None => TrainState::new(&cfg.network(), &cfg.train())?,
    };
    let log = File::options().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(out.join(TRAIN_LOG))?;
    let mut sink = FileSink { config: ExperimentConfig { out_dir: None, ..cfg.clone() }, out: out.clone(), log: BufWriter::new(log), last_checkpoint: resume.map(Path::to_path_buf) };
    match trainer::resume(state, &set, &cfg.train(), &mut sink) {
        Ok(s) => {
            println!("trained {} steps; checkpoint {}", s.step, out.join(FINAL_CHECKPOINT).display());
            Ok(())
        }
        Err(e) => {
            let kept = sink.last_checkpoint.map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
            Err(Error::Numeric(format!("training aborted: {e}; last good checkpoint: {kept}")))
        }
    }
}

fn load_checkpoint(explicit: Option<&Path>, out: &Path) -> Result<Checkpoint<f32>> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| out.join(FINAL_CHECKPOINT));
    Checkpoint::load(&path)
}

/// Category spec of the run: the checkpoint fixes the network, the current
/// config supplies everything else.
fn scoring_spec(cfg: &ExperimentConfig, ck: &Checkpoint<f32>) -> Result<CategorySpec> {
    let net = ck.config.network();
    let spec = ExperimentConfig { image_side: net.image_side, channels: net.channels, ..cfg.clone() }.category_spec();
    spec.validate()?;
    Ok(spec)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|f| f.is_file()).collect();
            v.sort();
            files.extend(v);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

#[derive(Serialize)]
struct ErrorRecord {
    sample_id: String,
    error: String,
}

fn cmd_score(common: &Common, checkpoint: Option<&Path>, inputs: &[PathBuf]) -> Result<()> {
    let (cfg, out) = resolve_config(common, None)?;
    let ck = load_checkpoint(checkpoint, &out)?;
    let spec = scoring_spec(&cfg, &ck)?;
    let opts = cfg.score_options();
    let files = expand_inputs(inputs)?;
    fs::create_dir_all(&out)?;
    let mut f = BufWriter::new(File::create(out.join(SCORES))?);
    let mut ok = 0;
    for path in &files {
        let id = path.display().to_string();
        let result = Image::read(path, spec.channels).and_then(|img| scorer::score_image(&ck.state.models, &img, &spec, &opts, &id));
        let line = match result {
            Ok(rec) => {
                ok += 1;
                println!("{id}\t{:.6}", rec.score);
                serde_json::to_string(&rec)
            }
            Err(e) => {
                eprintln!("error: {id}: {e}");
                serde_json::to_string(&ErrorRecord { sample_id: id, error: e.to_string() })
            }
        };
        writeln!(f, "{}", line.map_err(|e| Error::Evaluation(e.to_string()))?)?;
    }
    f.flush()?;
    if ok == 0 {
        return Err(Error::Evaluation(format!("none of the {} inputs could be scored", files.len())));
    }
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let (cfg, out) = resolve_config(common, None)?;
    let ck = load_checkpoint(checkpoint, &out)?;
    let spec = scoring_spec(&cfg, &ck)?;
    let ds = load_dataset(&cfg.dataset_root, &spec)?;
    let records = scorer::score_samples(&ck.state.models, &ds.test, &spec, &cfg.score_options())?;
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<Label> = records.iter().map(|r| r.label.unwrap_or(Label::Normal)).collect();
    let result = metrics::evaluate(&spec.name, &scores, &labels)?;
    let report = metrics::aggregate(&[(result, spec.kind)])?;
    fs::create_dir_all(&out)?;
    write_jsonl(&out.join(SCORES), &records)?;
    fs::write(out.join(REPORT_JSON), serde_json::to_string_pretty(&report).map_err(|e| Error::Evaluation(e.to_string()))?)?;
    let table = metrics::format_table(&report);
    fs::write(out.join(REPORT_TXT), &table)?;
    print!("{table}");
    Ok(())
}

/// Rescaling record written next to a difference map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffSidecar {
    pub input: String,
    /// Display value = round(|x - G(E(x))| * scale), with pixels in [-1, 1].
    pub scale: f64,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
}

/// Per-pixel `|a - b|` stretched so its maximum maps to 255. An all-zero
/// difference keeps scale 1.
pub fn difference_map(a: &Raster, b: &Raster, input: &str) -> Result<(Image, DiffSidecar)> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::shape("difference map", &[a.height, a.width, a.channels], &[b.height, b.width, b.channels]));
    }
    let diff: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).collect();
    let max = diff.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 1.0 };
    let img = Image::new(a.width, a.height, a.channels, diff.iter().map(|d| (d * scale).round().min(255.0) as u8).collect())?;
    let mean = diff.iter().sum::<f64>() / diff.len().max(1) as f64;
    Ok((img, DiffSidecar { input: input.to_string(), scale, max_abs_diff: max, mean_abs_diff: mean }))
}

fn cmd_reconstruct(common: &Common, checkpoint: Option<&Path>, input: &Path) -> Result<()> {
    let (cfg, out) = resolve_config(common, None)?;
    let ck = load_checkpoint(checkpoint, &out)?;
    let spec = scoring_spec(&cfg, &ck)?;
    let view = scorer::test_view(&Image::read(input, spec.channels)?, &spec)?;
    let rec = scorer::reconstruct_view(&ck.state.models, &view, &spec, cfg.score_batch)?;
    let (diff, side) = difference_map(&view, &rec, &input.display().to_string())?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
    fs::create_dir_all(&out)?;
    view.to_image().write_png(&out.join(format!("{stem}_input.png")))?;
    rec.to_image().write_png(&out.join(format!("{stem}_reconstruction.png")))?;
    diff.write_png(&out.join(format!("{stem}_diff.png")))?;
    fs::write(out.join(format!("{stem}_diff.json")), serde_json::to_string_pretty(&side).map_err(|e| Error::Evaluation(e.to_string()))?)?;
    println!("wrote {stem}_input.png, {stem}_reconstruction.png, {stem}_diff.png to {}", out.display());
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let (cfg, _) = resolve_config(common, None)?;
    let root = common.out.clone().unwrap_or_else(|| cfg.dataset_root.clone());
    let ds = data::generate_synthetic_corpus(cfg.seed, &cfg.synth())?;
    data::write_dataset(&root, &ds)?;
    let (train, normal, anomalous) = ds.counts();
    println!("wrote {}: {train} train, {normal} normal test, {anomalous} anomalous test", root.join(&cfg.category).display());
    Ok(())
}
