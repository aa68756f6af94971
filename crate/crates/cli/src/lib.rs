//! Command-line operations and the HTTP service behind `keymorph`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use keymorph_core::detector::DetectorWeights;
use keymorph_core::eval::{
    config_hash, discriminability, lambda_sweep, layer_correlation, repeatability, repeatability_transforms,
    robustness_sweep, sample_pairs, EvalReport,
};
use keymorph_core::io::{encode_png_gray, write_kmt, DType};
use keymorph_core::registration::{register, RegistrationResult};
use keymorph_core::synthdata::{generate_cohort, list_subjects, load_subject, write_dataset, SyntheticSubject};
use keymorph_core::training::{run_training, run_training_from, TrainConfig};
use keymorph_core::transforms::TransformKind;
use keymorph_core::warp::{Image, LabelMap};
use keymorph_core::NdTensor;

pub mod server;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or missing inputs; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] keymorph_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "keymorph", version, about = "Keypoint-based closed-form image registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Self-supervised keypoint pretraining only.
    Pretrain(TrainArgs),
    /// Pretraining (unless starting from --weights) and registration training.
    Train(TrainArgs),
    /// Register a moving image onto a fixed one.
    Register(RegisterArgs),
    /// Register one pair at many λ from a single keypoint detection.
    Sweep(SweepArgs),
    /// Run the evaluation harness and write a JSON report.
    Eval(EvalArgs),
    /// Serve the HTTP API and the static explorer bundle.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformArg {
    Affine,
    Tps,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Extents, comma separated.
    #[arg(long, default_value = "64,64", value_delimiter = ',')]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting weights; pretraining is skipped when given.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Output weights manifest (`.json`); the loss trace goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Moving and fixed label maps (KMT).
    #[arg(long, num_args = 2, value_names = ["MOVING", "FIXED"])]
    pub labels: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, value_enum, default_value_t = TransformArg::Affine)]
    pub transform: TransformArg,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Comma-separated values, or `log:LO:HI:COUNT` for log-spaced values.
    #[arg(long, default_value = "0,0.01,0.1,1,10", allow_hyphen_values = true)]
    pub lambdas: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of the static explorer bundle.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(a) => cmd_train(&a, true),
        Command::Train(a) => cmd_train(&a, false),
        Command::Register(a) => cmd_register(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Serve(a) => server::serve(&a),
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn load_weights(path: &Path) -> CliResult<DetectorWeights> {
    require_file(path, "weights file")?;
    Ok(DetectorWeights::load(path)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    require_file(path, what)?;
    serde_json::from_slice(&fs::read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let subjects = generate_cohort(a.seed, a.count, &a.shape)?;
    write_dataset(&a.out, &subjects)?;
    println!("wrote {} subjects to {}", subjects.len(), a.out.display());
    Ok(())
}

/// Every subject of `root`, in id order.
pub fn load_dataset(root: &Path) -> CliResult<Vec<SyntheticSubject>> {
    if !root.is_dir() {
        return Err(CliError::Usage(format!("dataset not found: {}", root.display())));
    }
    let ids = list_subjects(root)?;
    Ok(ids.iter().map(|id| load_subject(root, id)).collect::<keymorph_core::Result<_>>()?)
}

fn cmd_train(a: &TrainArgs, pretrain_only: bool) -> CliResult<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if pretrain_only {
        cfg.steps = 0;
    }
    let subjects = match &cfg.dataset {
        Some(root) => load_dataset(root)?,
        None => generate_cohort(0, cfg.num_subjects, &cfg.detector.input_shape)?,
    };
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoints");
    let trainer = match &a.weights {
        Some(p) => {
            cfg.pretrain_steps = 0;
            run_training_from(load_weights(p)?, &cfg, &subjects, Some(&ckpt))?
        }
        None => run_training(&cfg, &subjects, Some(&ckpt))?,
    };
    trainer.weights.save(&a.out)?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    fs::write(dir.join(format!("{stem}.trace.json")), serde_json::to_string(&trainer.trace).map_err(keymorph_core::Error::from)?)?;
    if let Some(last) = trainer.trace.last() {
        println!("{} steps, final {} loss {:.6}", trainer.trace.len(), last.phase, last.loss);
    }
    Ok(())
}

struct PairInputs {
    weights: DetectorWeights,
    moving: Image,
    fixed: Image,
    labels: Option<(LabelMap, LabelMap)>,
}

fn load_pair(p: &PairArgs) -> CliResult<PairInputs> {
    let weights = load_weights(&p.weights)?;
    require_file(&p.moving, "moving image")?;
    require_file(&p.fixed, "fixed image")?;
    let labels = match &p.labels {
        Some(l) => {
            require_file(&l[0], "moving labels")?;
            require_file(&l[1], "fixed labels")?;
            Some((LabelMap::load(&l[0])?, LabelMap::load(&l[1])?))
        }
        None => None,
    };
    Ok(PairInputs { weights, moving: Image::load(&p.moving)?, fixed: Image::load(&p.fixed)?, labels })
}

/// Canonical JSON of a transform, shared by the CLI and the service.
pub fn transform_json(r: &RegistrationResult) -> String {
    serde_json::to_string(&r.transform).expect("transforms serialize")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KeypointsFile {
    pub moving: Vec<Vec<f64>>,
    pub fixed: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub lambda: Option<f64>,
    /// Largest `‖T(q) − p‖` over keypoint pairs, normalized units.
    pub control_point_residual: f64,
    pub timing_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<keymorph_core::eval::MetricsBundle>,
}

/// The middle slice along the first axis for 3D tensors.
pub fn display_slice(t: &NdTensor) -> NdTensor {
    if t.ndim() == 2 {
        return t.clone();
    }
    let s = t.shape();
    let per = s[1] * s[2];
    let k = s[0] / 2;
    NdTensor::new(vec![s[1], s[2]], t.data()[k * per..(k + 1) * per].to_vec()).expect("slice shape")
}

fn write_result(dir: &Path, r: &RegistrationResult) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    if let Some(w) = &r.warped {
        let t = w.first_channel();
        write_kmt(dir.join("warped.kmt"), &t, DType::F32)?;
        fs::write(dir.join("warped.png"), encode_png_gray(&display_slice(&t))?)?;
    }
    fs::write(dir.join("transform.json"), transform_json(r))?;
    let kp = KeypointsFile { moving: r.moving_keypoints.to_rows(), fixed: r.fixed_keypoints.to_rows() };
    fs::write(dir.join("keypoints.json"), serde_json::to_string_pretty(&kp).map_err(keymorph_core::Error::from)?)?;
    let m = MetricsFile {
        lambda: r.lambda,
        control_point_residual: r.control_point_residual()?,
        timing_ms: r.timing_ms,
        metrics: r.metrics.clone(),
    };
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&m).map_err(keymorph_core::Error::from)?)?;
    Ok(())
}

pub fn transform_kind(t: TransformArg, lambda: f64) -> CliResult<TransformKind> {
    if !(lambda >= 0.0) {
        return Err(CliError::Usage(format!("lambda must be ≥ 0, got {lambda}")));
    }
    Ok(match t {
        TransformArg::Affine => TransformKind::Affine,
        TransformArg::Tps => TransformKind::Tps { lambda },
    })
}

fn cmd_register(a: &RegisterArgs) -> CliResult<()> {
    let kind = transform_kind(a.transform, a.lambda)?;
    let inputs = load_pair(&a.pair)?;
    let mut r = register(&inputs.weights, &inputs.moving, &inputs.fixed, kind)?;
    if let Some((lm, lf)) = &inputs.labels {
        r.score(lm, lf)?;
    }
    write_result(&a.pair.out, &r)?;
    println!("registered in {:.1} ms -> {}", r.timing_ms, a.pair.out.display());
    Ok(())
}

/// Parses `a,b,c` or `log:LO:HI:COUNT`.
pub fn parse_lambdas(s: &str) -> CliResult<Vec<f64>> {
    let bad = |m: String| CliError::Usage(m);
    let values = if let Some(spec) = s.strip_prefix("log:") {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected log:LO:HI:COUNT, got {s}")));
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad(format!("bad bound {}", parts[0])))?;
        let hi: f64 = parts[1].parse().map_err(|_| bad(format!("bad bound {}", parts[1])))?;
        let n: usize = parts[2].parse().map_err(|_| bad(format!("bad count {}", parts[2])))?;
        if !(lo > 0.0 && hi >= lo) || n == 0 {
            return Err(bad(format!("log range needs 0 < LO ≤ HI and COUNT ≥ 1, got {s}")));
        }
        let (a, b) = (lo.log10(), hi.log10());
        (0..n).map(|i| if n == 1 { lo } else { 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64) }).collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("bad lambda {v:?}"))))
            .collect::<CliResult<Vec<_>>>()?
    };
    if values.is_empty() {
        return Err(bad("empty lambda list".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(bad(format!("lambda must be ≥ 0, got {v}")));
    }
    Ok(values)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepIndexEntry {
    pub lambda: f64,
    pub dir: String,
    pub control_point_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<keymorph_core::eval::DiceScores>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepIndex {
    pub lambdas: Vec<f64>,
    pub entries: Vec<SweepIndexEntry>,
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let lambdas = parse_lambdas(&a.lambdas)?;
    let inputs = load_pair(&a.pair)?;
    let labels = inputs.labels.as_ref().map(|(m, f)| (m, f));
    let sweep = lambda_sweep(&inputs.weights, &inputs.moving, &inputs.fixed, &lambdas, labels)?;
    let mut entries = Vec::with_capacity(sweep.len());
    for (i, mut e) in sweep.into_iter().enumerate() {
        let dir = format!("lambda_{i:03}");
        if let Some((lm, lf)) = &inputs.labels {
            e.result.score(lm, lf)?;
        }
        write_result(&a.pair.out.join(&dir), &e.result)?;
        entries.push(SweepIndexEntry { lambda: e.lambda, dir, control_point_residual: e.result.control_point_residual()?, dice: e.dice });
    }
    let index = SweepIndex { lambdas, entries };
    fs::write(a.pair.out.join("index.json"), serde_json::to_string_pretty(&index).map_err(keymorph_core::Error::from)?)?;
    println!("{} registrations -> {}", index.entries.len(), a.pair.out.display());
    Ok(())
}

/// Settings of the `eval` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Test subjects; synthetic ones are generated when absent.
    pub dataset: Option<PathBuf>,
    pub first_seed: u64,
    pub num_subjects: usize,
    pub shape: Vec<usize>,
    pub num_pairs: usize,
    pub angles: Vec<f64>,
    pub transform: TransformKind,
    pub cross_modality: bool,
    /// Random rigid transforms for the repeatability score.
    pub repeat_transforms: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            first_seed: 1000,
            num_subjects: 21,
            shape: vec![64, 64],
            num_pairs: 20,
            angles: vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0],
            transform: TransformKind::Affine,
            cross_modality: false,
            repeat_transforms: 10,
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => EvalConfig::default(),
    };
    let weights = load_weights(&a.weights)?;
    let subjects = match &cfg.dataset {
        Some(root) => load_dataset(root)?,
        None => generate_cohort(cfg.first_seed, cfg.num_subjects, &cfg.shape)?,
    };
    if subjects.len() < 2 {
        return Err(CliError::Usage("evaluation needs at least two subjects".into()));
    }
    let nm = subjects[0].modalities.len();
    let pairs = sample_pairs(subjects.len(), cfg.num_pairs, nm, cfg.cross_modality, a.seed);
    let mut report = EvalReport { config_hash: config_hash(&cfg)?, seed: a.seed, ..Default::default() };
    let curve = robustness_sweep(&weights, &subjects, &pairs, &cfg.angles, cfg.transform, a.seed)?;
    for (angle, d) in curve.angles.iter().zip(&curve.dice) {
        report.metrics.insert(format!("dice@{angle}"), *d);
    }
    report.curves.insert("robustness".into(), curve);
    if nm > 1 {
        report.matrices.insert("discriminability".into(), discriminability(&weights, &subjects, 0, 1)?);
    }
    let transforms = repeatability_transforms(cfg.repeat_transforms, subjects[0].shape(), a.seed);
    if !transforms.is_empty() {
        report.metrics.insert("repeatability_voxels".into(), repeatability(&weights, subjects[0].modality(0), &transforms)?);
    }
    let renders: Vec<&Image> = subjects[0].modalities.iter().collect();
    for l in layer_correlation(&weights, &renders)? {
        report.metrics.insert(format!("layer_correlation@{}", l.layer), l.mean);
    }
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&report).map_err(keymorph_core::Error::from)?)?;
    println!("report -> {}", a.out.display());
    Ok(())
}
