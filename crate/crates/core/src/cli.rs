//! Command-line front end.
//!
//! Every numeric parameter can come from a flag or from a `key = value`
//! config file passed with `--config`; flags win, and omitted values fall
//! back to the library defaults. Config keys are the long flag names
//! without the leading dashes (`lambda1`, `snapshot-every`, ...).
//!
//! Exit codes: 0 success, 2 usage, 3 I/O or malformed input, 4 non-finite
//! training state, 5 shape mismatch, 6 metric error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{self, Display};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::baseline::{score_linear, train_linear, LinearModel, LinearTrainConfig};
use crate::error::Error;
use crate::eval::{
    expand_scores, false_alarm_rate, load_annotations, roc_auc, score_video, ScoreTimeline,
    TemporalAnnotation,
};
use crate::features::{
    load_features, make_bag, DatasetManifest, FeatureFormat, FeatureMatrix, Label, Split,
    DEFAULT_SEGMENTS,
};
use crate::loss::LossParams;
use crate::net::MlpModel;
use crate::optim::{train_with_observer, TrainConfig, TrainingSet};
use crate::synthetic::{generate, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;
pub const EXIT_METRIC: i32 = 6;

#[derive(Debug, Parser)]
#[command(name = "milrank", version, about = "Multiple-instance ranking for video anomaly detection")]
pub struct Cli {
    /// Optional `key = value` file supplying defaults for numeric flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted anomalous runs.
    Synth(SynthArgs),
    /// Validate a manifest and every file it references.
    IngestCheck(IngestArgs),
    /// Train the ranking network on a training manifest.
    Train(TrainArgs),
    /// Score one feature file with a checkpoint.
    Score(ScoreArgs),
    /// Frame-level ROC/AUC and false-alarm rate on a test manifest.
    Eval(EvalArgs),
    /// Train the supervised linear baseline on video-level features.
    BaselineTrain(BaselineTrainArgs),
    /// Evaluate a linear baseline checkpoint like `eval`.
    BaselineEval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub pos: Option<usize>,
    #[arg(long)]
    pub neg: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `train` or `test`; test datasets reference their annotations.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub segments: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub segments: Option<usize>,
    /// Positive and negative bags per iteration (each).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden1: Option<usize>,
    #[arg(long)]
    pub hidden2: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Write a checkpoint and probe scores every N iterations.
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Video id whose scores are snapshotted.
    #[arg(long)]
    pub probe: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) => error_exit_code(e),
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Data(_) => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Argument(_) => EXIT_SHAPE,
        Error::Metric(_) => EXIT_METRIC,
    }
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parsed `key = value` config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Blank lines and `#` comments are skipped; `_` in keys reads as `-`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().replace('_', "-");
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(usage(format!("config line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn check_keys(&self, command: &str, allowed: &[&str]) -> Result<(), CliError> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(usage(format!("config key `{k}` does not apply to `{command}`"))),
            None => Ok(()),
        }
    }

    /// Flag value, else config value, else `default`.
    fn pick<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(text) => text
                .parse()
                .map_err(|e| usage(format!("config key `{key}`: {e}"))),
            None => Ok(default),
        }
    }

    fn pick_opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key).map(|t| t.parse().map_err(|e| usage(format!("config key `{key}`: {e}")))).transpose(),
        }
    }
}

const SYNTH_KEYS: &[&str] = &["pos", "neg", "dim", "clips", "fraction", "separation", "sigma", "seed", "split"];
const INGEST_KEYS: &[&str] = &["split", "segments"];
const TRAIN_KEYS: &[&str] = &[
    "iters",
    "seed",
    "lambda1",
    "lambda2",
    "weight-decay",
    "lr",
    "epsilon",
    "segments",
    "batch",
    "hidden1",
    "hidden2",
    "dropout",
    "snapshot-every",
    "threads",
    "probe",
];
const SCORE_KEYS: &[&str] = &["segments"];
const EVAL_KEYS: &[&str] = &["segments", "threshold"];
const BASELINE_TRAIN_KEYS: &[&str] = &["c", "epochs", "lr"];

pub fn synth_spec(a: &SynthArgs, cfg: &ConfigFile) -> Result<SynthSpec, CliError> {
    cfg.check_keys("synth", SYNTH_KEYS)?;
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_pos_videos: cfg.pick("pos", a.pos, d.n_pos_videos)?,
        n_neg_videos: cfg.pick("neg", a.neg, d.n_neg_videos)?,
        dim: cfg.pick("dim", a.dim, d.dim)?,
        clips_per_video: cfg.pick("clips", a.clips, d.clips_per_video)?,
        anomaly_fraction: cfg.pick("fraction", a.fraction, d.anomaly_fraction)?,
        separation: cfg.pick("separation", a.separation, d.separation)?,
        noise_sigma: cfg.pick("sigma", a.sigma, d.noise_sigma)?,
        seed: cfg.pick("seed", a.seed, d.seed)?,
        split: cfg.pick("split", a.split, d.split)?,
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

pub fn train_config(a: &TrainArgs, cfg: &ConfigFile) -> Result<TrainConfig, CliError> {
    cfg.check_keys("train", TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let iterations = cfg
        .pick_opt("iters", a.iters)?
        .ok_or_else(|| usage("`--iters` is required (flag or config key `iters`)"))?;
    let batch = cfg.pick("batch", a.batch, d.batch_pos)?;
    let tc = TrainConfig {
        batch_pos: batch,
        batch_neg: batch,
        iterations,
        seed: cfg.pick("seed", a.seed, d.seed)?,
        loss: LossParams {
            lambda1: cfg.pick("lambda1", a.lambda1, d.loss.lambda1)?,
            lambda2: cfg.pick("lambda2", a.lambda2, d.loss.lambda2)?,
            weight_decay: cfg.pick("weight-decay", a.weight_decay, d.loss.weight_decay)?,
            margin: d.loss.margin,
        },
        segments_per_bag: cfg.pick("segments", a.segments, d.segments_per_bag)?,
        snapshot_every: cfg.pick("snapshot-every", a.snapshot_every, d.snapshot_every)?,
        learning_rate: cfg.pick("lr", a.lr, d.learning_rate)?,
        epsilon: cfg.pick("epsilon", a.epsilon, d.epsilon)?,
        hidden1: cfg.pick("hidden1", a.hidden1, d.hidden1)?,
        hidden2: cfg.pick("hidden2", a.hidden2, d.hidden2)?,
        dropout_rate: cfg.pick("dropout", a.dropout, d.dropout_rate)?,
        threads: cfg.pick("threads", a.threads, d.threads)?,
        probe_video: cfg.pick_opt("probe", a.probe.clone())?,
    };
    tc.validate().map_err(usage)?;
    if !(tc.learning_rate > 0.0 && tc.epsilon > 0.0) {
        return Err(usage("lr and epsilon must be positive"));
    }
    if !(0.0..1.0).contains(&tc.dropout_rate) {
        return Err(usage("dropout must be in [0, 1)"));
    }
    if tc.hidden1 == 0 || tc.hidden2 == 0 {
        return Err(usage("hidden widths must be positive"));
    }
    Ok(tc)
}

fn segments(cfg: &ConfigFile, flag: Option<usize>) -> Result<usize, CliError> {
    let m = cfg.pick("segments", flag, DEFAULT_SEGMENTS)?;
    if m < 2 {
        return Err(usage("segments must be at least 2"));
    }
    Ok(m)
}

fn write_file(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn cmd_synth(a: &SynthArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let spec = synth_spec(a, cfg)?;
    let out = generate(&spec, &a.out)?;
    println!(
        "wrote {} feature files, {} and {} under {}",
        out.feature_paths.len(),
        out.manifest_path.display(),
        out.annotation_path.display(),
        a.out.display()
    );
    Ok(())
}

fn cmd_ingest_check(a: &IngestArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    cfg.check_keys("ingest-check", INGEST_KEYS)?;
    let split = cfg.pick("split", a.split, Split::Train)?;
    let m = segments(cfg, a.segments)?;
    let manifest = DatasetManifest::load(&a.manifest, split)?;
    manifest.validate()?;
    let bags = manifest.load_bags(m)?;
    let dim = bags.first().map_or(0, |b| b.dim());
    if let Some(b) = bags.iter().find(|b| b.dim() != dim) {
        return Err(Error::arg(format!("video {} has dim {}, expected {dim}", b.video_id, b.dim())).into());
    }
    if split == Split::Test {
        test_annotations(&manifest)?;
    }
    println!(
        "{} videos ({} anomalous, {} normal), dim {dim}, {m} segments per bag",
        bags.len(),
        manifest.count(Label::Anomalous),
        manifest.count(Label::Normal)
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let tc = train_config(a, cfg)?;
    let manifest = DatasetManifest::load(&a.manifest, Split::Train)?;
    manifest.validate()?;
    let set = TrainingSet::from_manifest(&manifest, tc.segments_per_bag)?;
    create_dir(&a.out)?;
    let ckpt = |it: usize| a.out.join(format!("ckpt_{it}.json"));
    let (model, log) = train_with_observer(&set, &tc, |it, m| m.save(&ckpt(it)))?;
    if tc.snapshot_every == 0 || tc.iterations % tc.snapshot_every != 0 {
        model.save(&ckpt(tc.iterations))?;
    }
    write_file(&a.out.join("train_log.csv"), log.loss_csv())?;
    write_file(&a.out.join("probe_scores.csv"), log.probe_csv())?;
    println!(
        "final loss {} after {} iterations; checkpoint {}",
        log.last_loss().unwrap_or(f64::NAN),
        tc.iterations,
        ckpt(tc.iterations).display()
    );
    Ok(())
}

fn cmd_score(a: &ScoreArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    cfg.check_keys("score", SCORE_KEYS)?;
    let m = segments(cfg, a.segments)?;
    let model = MlpModel::load(&a.checkpoint)?;
    let f = load_features(&a.features, FeatureFormat::from_path(&a.features))?;
    let (scores, timeline) = score_video(&model, &f, m)?;
    create_dir(&a.out)?;
    let mut seg = String::from("segment,score\n");
    for (i, s) in scores.iter().enumerate() {
        seg.push_str(&format!("{i},{s}\n"));
    }
    let id = f.video_id();
    write_file(&a.out.join(format!("{id}_segments.csv")), seg)?;
    write_file(&a.out.join(format!("{id}_frames.csv")), timeline.to_csv())?;
    println!("{id}: {} segments, {} frames", scores.len(), timeline.frame_scores.len());
    Ok(())
}

/// Ground truth for every manifest entry, by video id. Normal videos
/// missing from the annotation files count as all-normal.
fn test_annotations(manifest: &DatasetManifest) -> Result<Vec<TemporalAnnotation>, CliError> {
    let mut files: BTreeMap<&Path, Vec<TemporalAnnotation>> = BTreeMap::new();
    for e in &manifest.entries {
        if let Some(p) = &e.annotation_path {
            if !files.contains_key(p.as_path()) {
                files.insert(p, load_annotations(p)?);
            }
        }
    }
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let id = e.video_id();
        let found = e
            .annotation_path
            .as_deref()
            .and_then(|p| files[p].iter().find(|a| a.video_id == id));
        match (found, e.label) {
            (Some(a), _) => out.push(a.clone()),
            (None, Label::Normal) => {
                let n_frames = e.load()?.n_frames();
                out.push(TemporalAnnotation::normal(id, n_frames));
            }
            (None, Label::Anomalous) => {
                return Err(Error::Data(format!("anomalous test video {id} has no annotation")).into())
            }
        }
    }
    Ok(out)
}

fn evaluate<S>(a: &EvalArgs, cfg: &ConfigFile, command: &str, scorer: S) -> Result<(), CliError>
where
    S: Fn(&FeatureMatrix, usize) -> crate::Result<Vec<f64>>,
{
    cfg.check_keys(command, EVAL_KEYS)?;
    let m = segments(cfg, a.segments)?;
    let threshold = cfg.pick("threshold", a.threshold, 0.5)?;
    if !threshold.is_finite() {
        return Err(usage("threshold must be finite"));
    }
    let manifest = DatasetManifest::load(&a.manifest, Split::Test)?;
    manifest.validate()?;
    let annotations = test_annotations(&manifest)?;

    let mut timelines: Vec<ScoreTimeline> = Vec::with_capacity(manifest.entries.len());
    let mut normal: Vec<ScoreTimeline> = Vec::new();
    for e in &manifest.entries {
        let f = e.load()?;
        let bag = make_bag(&f, e.label, m)?;
        let timeline = expand_scores(&bag, &scorer(&f, m)?)?;
        if e.label == Label::Normal {
            normal.push(timeline.clone());
        }
        timelines.push(timeline);
    }
    let roc = roc_auc(&timelines, &annotations)?;
    let far = false_alarm_rate(&normal, threshold)
        .map_err(|_| Error::Metric("no normal videos for the false-alarm rate".into()))?;

    let dir = a.out.join("timelines");
    create_dir(&dir)?;
    for t in &timelines {
        write_file(&dir.join(format!("{}.csv", t.video_id)), t.to_csv())?;
    }
    write_file(&a.out.join("roc.csv"), roc.to_csv())?;
    write_file(
        &a.out.join("summary.csv"),
        format!("metric,value\nauc,{}\nfalse_alarm_rate,{far}\nthreshold,{threshold}\n", roc.auc),
    )?;
    println!("AUC {:.4}", roc.auc);
    println!("false alarm rate {far:.4} at threshold {threshold}");
    Ok(())
}

fn cmd_baseline_train(a: &BaselineTrainArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    cfg.check_keys("baseline-train", BASELINE_TRAIN_KEYS)?;
    let d = LinearTrainConfig::default();
    let lc = LinearTrainConfig {
        c_reg: cfg.pick("c", a.c, d.c_reg)?,
        epochs: cfg.pick("epochs", a.epochs, d.epochs)?,
        learning_rate: cfg.pick("lr", a.lr, d.learning_rate)?,
    };
    if !(lc.c_reg > 0.0 && lc.learning_rate > 0.0) {
        return Err(usage("c and lr must be positive"));
    }
    let manifest = DatasetManifest::load(&a.manifest, Split::Train)?;
    manifest.validate()?;
    let (model, log) = train_linear(&manifest, &lc)?;
    create_dir(&a.out)?;
    let path = a.out.join("baseline.json");
    model.save(&path)?;
    println!(
        "objective {} after {} epochs; checkpoint {}",
        log.objective.last().copied().unwrap_or(f64::NAN),
        lc.epochs,
        path.display()
    );
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::IngestCheck(a) => cmd_ingest_check(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Score(a) => cmd_score(a, &cfg),
        Command::Eval(a) => {
            let model = MlpModel::load(&a.checkpoint)?;
            evaluate(a, &cfg, "eval", |f, m| Ok(score_video(&model, f, m)?.0))
        }
        Command::BaselineTrain(a) => cmd_baseline_train(a, &cfg),
        Command::BaselineEval(a) => {
            let model = LinearModel::load(&a.checkpoint)?;
            evaluate(a, &cfg, "baseline-eval", |f, m| score_linear(&model, f, m))
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
