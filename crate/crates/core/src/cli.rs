//! Command-line runs: `ingest`, `train`, `generate`, `evaluate` and
//! `gradcheck`.
//!
//! Settings come from an optional `key = value` file (`--config`); command-line
//! flags override it. Recognized keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `preset` | `desk` (depth 2, hidden 64) or `paper` (depth 2, hidden 350) |
//! | `depth`, `hidden`, `noise_dim`, `tones_per_step` | architecture |
//! | `lr`, `l2`, `batch_size`, `clip_norm`, `freeze_ratio` | optimization |
//! | `pretrain_epochs`, `epochs`, `batches_per_epoch` | schedule (`epochs` counts adversarial epochs) |
//! | `curriculum_base`, `curriculum_period`, `max_length` | sequence length curriculum |
//! | `feature_matching`, `baseline` | `true` / `false` |
//! | `seed`, `sample_length` | seeding, length of the per-epoch sample |
//! | `corpus_dir`, `cache`, `out`, `checkpoint` | paths |
//! | `length`, `count` | generation |
//!
//! Training writes, under `out`:
//!
//! * `epochs.csv`: `epoch,loss_d,loss_g_objective,d_frozen_fraction,g_frozen_fraction,`
//!   followed by the metric columns
//!   `polyphony,scale_consistency,repetitions_3,tone_span,unique_tones,intensity_span`.
//!   In baseline runs `loss_d` is `NaN` and `loss_g_objective` is the next-event error.
//! * `pretrain.csv`: `epoch,loss`.
//! * `checkpoints/*.ckpt` after every epoch and `latest.ckpt`, from which an
//!   interrupted run resumes.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::features::{self, Corpus};
use crate::metrics::{MetricsReport, METRIC_COLUMNS};
use crate::midi;
use crate::models::{decode_checkpoint, ModelConfig};
use crate::nn::RngState;
use crate::training::{
    self, adversarial_epoch, pretrain_epoch, EpochLog, TrainingConfig, TrainingState, GRADCHECK_SEED,
};

/// Maximum relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) | CliError::Input(_) => 2,
        }
    }
}

fn input_err(e: impl Display) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "crnn-gan", version, about = "Recurrent GAN for symbolic music")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a directory of MIDI files and write the corpus cache.
    Ingest {
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long)]
        cache: PathBuf,
    },
    /// Pretrain, then train adversarially (or train the baseline).
    Train {
        #[command(flatten)]
        flags: RunFlags,
        /// Stop after this many epochs in this invocation.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Sample MIDI files from a checkpoint.
    Generate {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the metrics of MIDI files as CSV.
    Evaluate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = GRADCHECK_SEED)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adversarial epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = ["desk", "paper"])]
    pub preset: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub tones_per_step: Option<u8>,
    #[arg(long)]
    pub no_feature_matching: bool,
    #[arg(long)]
    pub baseline: bool,
    /// Generated sequence length in steps.
    #[arg(long)]
    pub length: Option<usize>,
    /// Number of generated files.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k, v));
            }
        };
        put("corpus_dir", self.corpus_dir.as_ref().map(|p| p.display().to_string()));
        put("cache", self.cache.as_ref().map(|p| p.display().to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("preset", self.preset.clone());
        put("tones_per_step", self.tones_per_step.map(|v| v.to_string()));
        put("feature_matching", self.no_feature_matching.then(|| "false".to_string()));
        put("baseline", self.baseline.then(|| "true".to_string()));
        put("length", self.length.map(|v| v.to_string()));
        put("count", self.count.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        kv
    }
}

/// Everything a run needs: training settings plus paths and generation sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub preset: String,
    pub corpus_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub baseline: bool,
    pub length: usize,
    pub count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            preset: "desk".into(),
            corpus_dir: None,
            cache: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            baseline: false,
            length: 64,
            count: 1,
        }
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Usage(format!("invalid value for {key}: {value:?}")))
}

impl RunConfig {
    /// Build from settings, the preset first so explicit keys refine it.
    pub fn from_settings(settings: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(preset) = settings.get("preset") {
            cfg.preset = preset.clone();
            cfg.training.model = match preset.as_str() {
                "desk" => ModelConfig::desk(),
                "paper" => ModelConfig::paper(),
                other => return Err(CliError::Usage(format!("unknown preset {other:?}"))),
            };
        }
        for (key, value) in settings.iter().filter(|(k, _)| k.as_str() != "preset") {
            cfg.set(key, value)?;
        }
        cfg.training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if cfg.length == 0 || cfg.count == 0 {
            return Err(CliError::Usage("length and count must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn from_flags(flags: &RunFlags) -> Result<Self, CliError> {
        let mut settings = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_key_values(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in flags.overrides() {
            settings.insert(k.to_string(), v);
        }
        Self::from_settings(&settings)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.training;
        let c = &mut t.curriculum;
        match key {
            "depth" => t.model.depth = parse_value(key, value)?,
            "hidden" => t.model.hidden = parse_value(key, value)?,
            "noise_dim" => t.model.noise_dim = parse_value(key, value)?,
            "tones_per_step" => t.model.tones_per_step = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "l2" => t.l2 = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "clip_norm" => t.clip_norm = parse_value(key, value)?,
            "freeze_ratio" => t.freeze_ratio = parse_value(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = parse_value(key, value)?,
            "epochs" => t.adversarial_epochs = parse_value(key, value)?,
            "batches_per_epoch" => t.batches_per_epoch = Some(parse_value(key, value)?),
            "curriculum_base" => c.base_length = parse_value(key, value)?,
            "curriculum_period" => c.doubling_period_epochs = parse_value(key, value)?,
            "max_length" => c.max_length = parse_value(key, value)?,
            "feature_matching" => t.feature_matching = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "sample_length" => t.sample_length = parse_value(key, value)?,
            "baseline" => self.baseline = parse_value(key, value)?,
            "length" => self.length = parse_value(key, value)?,
            "count" => self.count = parse_value(key, value)?,
            "corpus_dir" => self.corpus_dir = Some(value.into()),
            "cache" => self.cache = Some(value.into()),
            "out" => self.out = value.into(),
            "checkpoint" => self.checkpoint = Some(value.into()),
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Ingest { corpus_dir, cache } => cmd_ingest(&corpus_dir, &cache).map(|s| println!("{s}")),
        Command::Train { flags, stop_after } => {
            RunConfig::from_flags(&flags).and_then(|cfg| cmd_train(&cfg, stop_after)).map(|s| println!("{s}"))
        }
        Command::Generate { flags, checkpoint } => RunConfig::from_flags(&flags).and_then(|mut cfg| {
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cmd_generate(&cfg).map(|files| println!("wrote {} files to {}", files.len(), cfg.out.display()))
        }),
        Command::Evaluate { paths, out } => cmd_evaluate(&paths, out.as_deref()).map(|report| {
            print!("{}", report.csv);
            if report.warnings > 0 {
                eprintln!("warnings: {}", report.warnings);
            }
        }),
        Command::Gradcheck { seed, corrupt_gradient } => cmd_gradcheck(seed, corrupt_gradient).map(|report| print!("{report}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_ingest(corpus_dir: &Path, cache: &Path) -> Result<String, CliError> {
    if !corpus_dir.is_dir() {
        return Err(CliError::Input(format!("not a directory: {}", corpus_dir.display())));
    }
    let corpus = features::ingest_corpus(corpus_dir).map_err(input_err)?;
    corpus.write_cache(cache).map_err(input_err)?;
    Ok(format!("songs: {}\ntones: {}\nskipped: {}", corpus.stats.songs, corpus.stats.tones, corpus.stats.skipped))
}

/// The cache if it exists, otherwise the corpus directory (writing the cache
/// when a path for it is configured).
fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    if let Some(cache) = cfg.cache.as_deref().filter(|p| p.is_file()) {
        return Corpus::read_cache(cache).map_err(input_err);
    }
    let dir = cfg
        .corpus_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("need --corpus-dir or an existing --cache".into()))?;
    if !dir.is_dir() {
        return Err(CliError::Input(format!("not a directory: {}", dir.display())));
    }
    let corpus = features::ingest_corpus(dir).map_err(input_err)?;
    if let Some(cache) = &cfg.cache {
        corpus.write_cache(cache).map_err(input_err)?;
    }
    Ok(corpus)
}

/// Header plus the first `keep` rows of an existing log, or a fresh log.
fn reopen_csv(path: &Path, header: &str, keep: usize) -> Result<fs::File, CliError> {
    let mut lines = vec![header.to_string()];
    if let Ok(text) = fs::read_to_string(path) {
        lines.extend(text.lines().skip(1).take(keep).map(str::to_string));
    }
    if lines.len() != keep + 1 {
        return Err(CliError::Input(format!("{} is missing rows for the checkpointed epochs", path.display())));
    }
    let mut body = lines.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(input_err)?;
    fs::OpenOptions::new().append(true).open(path).map_err(input_err)
}

fn append_row(file: &mut fs::File, row: &str) -> Result<(), CliError> {
    writeln!(file, "{row}").map_err(input_err)
}

fn save_state(out: &Path, name: &str, state: &TrainingState) -> Result<(), CliError> {
    let bytes = state.to_bytes();
    fs::write(out.join("checkpoints").join(name), &bytes).map_err(input_err)?;
    let tmp = out.join("latest.ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(input_err)?;
    fs::rename(&tmp, out.join("latest.ckpt")).map_err(input_err)
}

pub fn cmd_train(cfg: &RunConfig, stop_after: Option<usize>) -> Result<String, CliError> {
    let t = &cfg.training;
    let corpus = load_corpus(cfg)?;
    fs::create_dir_all(cfg.out.join("checkpoints")).map_err(input_err)?;

    let latest = cfg.out.join("latest.ckpt");
    let mut state = if latest.is_file() {
        let bytes = fs::read(&latest).map_err(input_err)?;
        let state = TrainingState::from_bytes(&bytes, Some(&t.model)).map_err(input_err)?;
        info!("resuming from {} at global epoch {}", latest.display(), state.global_epoch());
        state
    } else {
        TrainingState::new(t)
    };

    let (pretrain_rows, epoch_rows) =
        if cfg.baseline { (0, state.pretrain_epochs_done) } else { (state.pretrain_epochs_done, state.epoch) };
    let mut pretrain_csv = reopen_csv(&cfg.out.join("pretrain.csv"), "epoch,loss", pretrain_rows)?;
    let mut epochs_csv = reopen_csv(&cfg.out.join("epochs.csv"), &EpochLog::csv_header(), epoch_rows)?;

    let budget = stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    if cfg.baseline {
        let total = t.pretrain_epochs + t.adversarial_epochs;
        while state.pretrain_epochs_done < total && ran < budget {
            let loss = pretrain_epoch(&mut state, &corpus, t).map_err(input_err)?;
            let epoch = state.pretrain_epochs_done;
            let log = EpochLog {
                epoch,
                loss_d: f64::NAN,
                loss_g_objective: loss,
                d_frozen_fraction: 0.0,
                g_frozen_fraction: 0.0,
                metrics: training::epoch_sample_report(&state.generator, t, epoch).map_err(input_err)?,
            };
            append_row(&mut epochs_csv, &log.csv_row())?;
            save_state(&cfg.out, &format!("baseline-{epoch:04}.ckpt"), &state)?;
            ran += 1;
        }
    } else {
        while state.pretrain_epochs_done < t.pretrain_epochs && ran < budget {
            let loss = pretrain_epoch(&mut state, &corpus, t).map_err(input_err)?;
            let epoch = state.pretrain_epochs_done;
            append_row(&mut pretrain_csv, &format!("{epoch},{loss}"))?;
            save_state(&cfg.out, &format!("pretrain-{epoch:04}.ckpt"), &state)?;
            ran += 1;
        }
        while state.epoch < t.adversarial_epochs && ran < budget {
            let log = adversarial_epoch(&mut state, &corpus, t).map_err(input_err)?;
            append_row(&mut epochs_csv, &log.csv_row())?;
            save_state(&cfg.out, &format!("epoch-{:04}.ckpt", log.epoch), &state)?;
            ran += 1;
        }
    }
    Ok(format!(
        "pretrain epochs: {}\nadversarial epochs: {}\noutput: {}",
        state.pretrain_epochs_done,
        state.epoch,
        cfg.out.display()
    ))
}

/// Write `count` sampled MIDI files and `metrics.csv` into `out`; returns the
/// file paths.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("latest.ckpt"));
    let bytes = fs::read(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let (generator, _, _) = decode_checkpoint(&bytes, None).map_err(input_err)?;
    fs::create_dir_all(&cfg.out).map_err(input_err)?;

    let mut rng = RngState::new(cfg.training.seed);
    let mut csv = metrics_header();
    let mut files = Vec::with_capacity(cfg.count);
    for i in 1..=cfg.count {
        let events = training::sample_events(&generator, cfg.length, &mut rng).map_err(input_err)?;
        let midi_bytes = midi::events_to_midi(&events).map_err(input_err)?;
        let name = format!("sample-{i:03}.mid");
        let file = cfg.out.join(&name);
        fs::write(&file, midi_bytes).map_err(input_err)?;
        csv.push_str(&metrics_row(&name, &MetricsReport::evaluate(&events)));
        files.push(file);
    }
    fs::write(cfg.out.join("metrics.csv"), csv).map_err(input_err)?;
    Ok(files)
}

fn metrics_header() -> String {
    format!("file,{}\n", METRIC_COLUMNS.join(","))
}

fn metrics_row(label: &str, report: &MetricsReport) -> String {
    format!("{label},{}\n", report.csv_fields().join(","))
}

pub struct EvaluationReport {
    pub csv: String,
    pub reports: Vec<(PathBuf, MetricsReport)>,
    pub warnings: usize,
}

/// Metrics of every readable file (directories are expanded to their MIDI
/// files), one CSV row each plus a `mean` row. Unreadable files are skipped
/// with a warning.
pub fn cmd_evaluate(paths: &[PathBuf], out: Option<&Path>) -> Result<EvaluationReport, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.extend(features::midi_files(p).map_err(input_err)?);
        } else {
            files.push(p.clone());
        }
    }
    let mut reports = Vec::new();
    let mut warnings = 0;
    for file in files {
        let label = file.display().to_string();
        let parsed = fs::read(&file)
            .map_err(|e| e.to_string())
            .and_then(|bytes| midi::parse_midi_named(&bytes, &label).map_err(|e| e.to_string()));
        match parsed {
            Ok(song) => reports.push((file, MetricsReport::evaluate(&features::song_to_events(&song)))),
            Err(e) => {
                warn!("{label}: {e}");
                eprintln!("warning: {label}: {e}");
                warnings += 1;
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::Input("no readable MIDI files".into()));
    }
    let mut csv = metrics_header();
    for (file, report) in &reports {
        csv.push_str(&metrics_row(&file.display().to_string(), report));
    }
    let all: Vec<MetricsReport> = reports.iter().map(|(_, r)| *r).collect();
    let mean = MetricsReport::mean(&all).map(|v| v.to_string());
    csv.push_str(&format!("mean,{}\n", mean.join(",")));
    if let Some(out) = out {
        fs::write(out, &csv).map_err(input_err)?;
    }
    Ok(EvaluationReport { csv, reports, warnings })
}

/// Gradient check of every loss; `Err(Verification)` if any exceeds the tolerance.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<String, CliError> {
    let results = training::check_loss_gradients(seed, corrupt).map_err(input_err)?;
    let mut report = String::new();
    for (name, err) in &results {
        report.push_str(&format!("{name}: {err:e}\n"));
    }
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    report.push_str(&format!("max relative error: {worst:e}\n"));
    if worst <= GRADCHECK_TOLERANCE {
        Ok(report)
    } else {
        print!("{report}");
        Err(CliError::Verification(format!("gradient check failed: {worst:e} > {GRADCHECK_TOLERANCE:e}")))
    }
}
