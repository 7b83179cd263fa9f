//! Experiment configs, seeded training runs, metric files and comparisons.
//!
//! A run directory holds one `seed_<k>.csv` per seed (long format, one row
//! per step and layer), an optional `noise_seed_<k>.csv` with the tracker's
//! raw dual-norm samples, and `summary.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::diagnostics::{
    alpha_ratio_envelope, h_bounds_check, noise_range_estimate, BoundParams, DiagnosticsReport, RunRecord, RunView,
};
use crate::error::{Error, Result};
use crate::norms::GroupId;
use crate::optimizer::{LantonConfig, LayerSpec, LayerStats, NoiseOption, Optimizer, OptimizerKind, StepMode};
use crate::param::{Param, Shape};
use crate::tasks::{
    gen_dataset, preset, stochastic_grad, BatchSampler, Dataset, DatasetSpec, MlpTask, NoiseProfile, NoiseRange,
    NoiseSampler, QuadraticTask,
};

pub const CSV_HEADER: &str = "step,loss,layer,eta_eff,ratio,H,dual_grad_norm";
pub const NOISE_CSV_HEADER: &str = "step,layer,noise_sample";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// 17 significant digits; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// configuration

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadLayerConfig {
    pub name: String,
    pub shape: Shape,
    pub group: GroupId,
    #[serde(default = "one")]
    pub smoothness: f64,
    #[serde(default)]
    pub sigma_lo: f64,
    #[serde(default)]
    pub sigma_hi: f64,
    /// Explicit target; seeded Gaussian scaled by `target_scale` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    /// Explicit starting point; zeros otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<QuadLayerConfig>,
    #[serde(default = "one")]
    pub target_scale: f64,
    /// Multiplies every noise radius.
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub task_seed: u64,
}

fn default_batch() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// `[input, hidden..., output]`
    pub widths: Vec<usize>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub task_seed: u64,
    /// Load the dataset from this cache file, or create it there.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_cache: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Quadratic(QuadraticConfig),
    Mlp(MlpConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub mode: StepMode,
    #[serde(flatten)]
    pub lanton: LantonConfig,
}

fn yes() -> bool {
    true
}

/// Which per-layer columns are logged; disabled columns are written as NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Telemetry {
    #[serde(default = "yes")]
    pub h: bool,
    #[serde(default = "yes")]
    pub ratio: bool,
    #[serde(default = "yes")]
    pub dual_norm: bool,
    /// Also write `noise_seed_<k>.csv`.
    #[serde(default)]
    pub noise: bool,
}

impl Default for Telemetry {
    fn default() -> Self {
        Self {
            h: true,
            ratio: true,
            dual_norm: true,
            noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub telemetry: Telemetry,
    pub output_path: String,
    pub threshold: Option<f64>,
    /// Trailing window for steps-to-threshold; 1 means raw crossing.
    pub smoothing_window: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_steps() -> usize {
    1000
}

fn default_out() -> String {
    "runs/out".into()
}

fn default_window() -> usize {
    20
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: TaskConfig,
    #[serde(default)]
    optimizer: Map<String, Value>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_steps")]
    total_steps: usize,
    #[serde(default)]
    telemetry: Telemetry,
    #[serde(default = "default_out")]
    output_path: String,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default = "default_window")]
    smoothing_window: usize,
}

fn path_error<E: std::fmt::Display>(prefix: &str, err: serde_path_to_error::Error<E>) -> Error {
    let inner = err.path().to_string();
    let path = match (prefix.is_empty(), inner.as_str()) {
        (true, p) => p.to_string(),
        (false, ".") => prefix.to_string(),
        (false, p) => format!("{prefix}.{p}"),
    };
    Error::config(path, err.into_inner().to_string())
}

fn take_enum<T: serde::de::DeserializeOwned + Default>(map: &mut Map<String, Value>, key: &str) -> Result<T> {
    match map.remove(key) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::config(format!("optimizer.{key}"), e.to_string())),
    }
}

/// Parses and validates a config from JSON text, filling defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::config(".", e.to_string()))?;
    parse_config_value(value)
}

pub fn parse_config_value(value: Value) -> Result<ExperimentConfig> {
    let raw: RawConfig = serde_path_to_error::deserialize(value).map_err(|e| path_error("", e))?;
    let mut opt = raw.optimizer;
    let kind: OptimizerKind = take_enum(&mut opt, "kind")?;
    let mode: StepMode = take_enum(&mut opt, "mode")?;
    opt.entry("total_steps").or_insert(Value::from(raw.total_steps));
    let lanton: LantonConfig =
        serde_path_to_error::deserialize(Value::Object(opt)).map_err(|e| path_error("optimizer", e))?;
    lanton.validate().map_err(|e| match e {
        Error::Config { path, message } => Error::config(format!("optimizer.{path}"), message),
        other => other,
    })?;
    let cfg = ExperimentConfig {
        task: raw.task,
        optimizer: OptimizerConfig { kind, mode, lanton },
        seeds: raw.seeds,
        total_steps: raw.total_steps,
        telemetry: raw.telemetry,
        output_path: raw.output_path,
        threshold: raw.threshold,
        smoothing_window: raw.smoothing_window,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        if self.smoothing_window == 0 {
            return Err(Error::config("smoothing_window", "must be >= 1"));
        }
        if self.output_path.is_empty() {
            return Err(Error::config("output_path", "must not be empty"));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::config("threshold", "must be finite"));
            }
        }
        match &self.task {
            TaskConfig::Quadratic(q) => {
                if q.preset.is_some() == !q.layers.is_empty() {
                    return Err(Error::config("task", "give exactly one of `preset` or `layers`"));
                }
                if !(q.target_scale.is_finite() && q.noise_scale.is_finite() && q.noise_scale >= 0.0) {
                    return Err(Error::config(
                        "task.noise_scale",
                        "scales must be finite, noise_scale >= 0",
                    ));
                }
            }
            TaskConfig::Mlp(m) => {
                if m.batch_size == 0 {
                    return Err(Error::config("task.batch_size", "must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON of the task; runs are comparable when these match.
    pub fn task_signature(&self) -> String {
        serde_json::to_string(&self.task).expect("task config serializes")
    }
}

// ---------------------------------------------------------------------------
// tasks and runs

/// A task instantiated from its config, shared by all seeds.
#[derive(Clone, Debug)]
pub enum BuiltTask {
    Quadratic { task: QuadraticTask, init: Vec<Param> },
    Mlp { task: MlpTask, batch: usize },
}

enum Oracle {
    Quadratic(NoiseSampler),
    Mlp(BatchSampler),
}

pub fn build_task(cfg: &ExperimentConfig) -> Result<BuiltTask> {
    match &cfg.task {
        TaskConfig::Quadratic(q) => {
            let (layers, profile, targets, init) = if let Some(name) = &q.preset {
                let (layers, profile) = preset(name)?;
                (layers, profile, None, None)
            } else {
                let mut layers = Vec::new();
                let mut ranges = Vec::new();
                let mut targets = Vec::new();
                let mut init = Vec::new();
                for l in &q.layers {
                    layers.push(LayerSpec::new(l.name.clone(), l.shape, l.group).with_smoothness(l.smoothness));
                    ranges.push(NoiseRange::new(l.sigma_lo, l.sigma_hi)?);
                    targets.push(l.target.clone());
                    init.push(l.init.clone());
                }
                (layers, NoiseProfile { layers: ranges }, Some(targets), Some(init))
            };
            let profile = NoiseProfile {
                layers: profile
                    .layers
                    .iter()
                    .map(|r| NoiseRange::new(r.lo * q.noise_scale, r.hi * q.noise_scale))
                    .collect::<Result<_>>()?,
            };
            let mut task = QuadraticTask::seeded(layers, profile, q.target_scale, q.task_seed)?;
            if let Some(targets) = targets {
                for (i, t) in targets.into_iter().enumerate() {
                    if let Some(t) = t {
                        task.targets[i] = Param::from_flat(task.layers[i].shape, t)?;
                    }
                }
                task = QuadraticTask::new(task.layers, task.targets, task.noise)?;
            }
            let init = match init {
                Some(init) => init
                    .into_iter()
                    .zip(&task.layers)
                    .map(|(v, l)| match v {
                        Some(v) => Param::from_flat(l.shape, v),
                        None => Ok(Param::zeros(l.shape)),
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => task.zeros(),
            };
            Ok(BuiltTask::Quadratic { task, init })
        }
        TaskConfig::Mlp(m) => {
            let data = match &m.dataset_cache {
                Some(p) if Path::new(p).exists() => Dataset::load(Path::new(p), m.dataset.input_dim)?,
                Some(p) => {
                    let d = gen_dataset(&m.dataset, m.task_seed)?;
                    d.save(Path::new(p))?;
                    d
                }
                None => gen_dataset(&m.dataset, m.task_seed)?,
            };
            let task = MlpTask::new(m.widths.clone(), data)?;
            Ok(BuiltTask::Mlp {
                task,
                batch: m.batch_size,
            })
        }
    }
}

impl BuiltTask {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            BuiltTask::Quadratic { task, .. } => task.layers.clone(),
            BuiltTask::Mlp { task, .. } => task.layers(),
        }
    }

    pub fn noise_profile(&self) -> Option<NoiseProfile> {
        match self {
            BuiltTask::Quadratic { task, .. } => Some(task.noise.clone()),
            BuiltTask::Mlp { .. } => None,
        }
    }

    pub fn init(&self, seed: u64) -> Vec<Param> {
        match self {
            BuiltTask::Quadratic { init, .. } => init.clone(),
            BuiltTask::Mlp { task, .. } => task.init_params(seed),
        }
    }

    pub fn loss(&self, params: &[Param]) -> Result<f64> {
        match self {
            BuiltTask::Quadratic { task, .. } => Ok(task.value_grad(params)?.0),
            BuiltTask::Mlp { task, .. } => Ok(task.value_grad(params)?.0),
        }
    }

    fn oracle(&self, seed: u64, cfg: &LantonConfig) -> Oracle {
        match self {
            BuiltTask::Quadratic { task, .. } => {
                Oracle::Quadratic(NoiseSampler::new(seed, task.layers.len(), cfg.embedding_dual))
            }
            BuiltTask::Mlp { task, batch } => Oracle::Mlp(BatchSampler::new(seed, task.data.len(), *batch)),
        }
    }

    fn sample(
        &self,
        oracle: &mut Oracle,
        params: &[Param],
        twin: bool,
    ) -> Result<(f64, Vec<Param>, Option<Vec<Param>>)> {
        match (self, oracle) {
            (BuiltTask::Quadratic { task, .. }, Oracle::Quadratic(s)) => stochastic_grad(task, params, s, twin),
            (BuiltTask::Mlp { task, .. }, Oracle::Mlp(b)) => b.sample(task, params, twin),
            _ => unreachable!("oracle built from this task"),
        }
    }
}

/// Result of one seeded run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    /// Exact loss after the last update; NaN if aborted.
    pub final_loss: f64,
    pub aborted_at: Option<usize>,
}

/// Runs `cfg.total_steps` steps of the configured optimizer for one seed.
pub fn run_seed(cfg: &ExperimentConfig, task: &BuiltTask, seed: u64) -> Result<SeedRun> {
    let layers = task.layers();
    let oc = &cfg.optimizer;
    let mut opt = Optimizer::new(oc.kind, oc.mode, oc.lanton.clone(), layers)?;
    opt.record_grad_norms = cfg.telemetry.dual_norm;
    let twin = oc.kind.needs_twin(&oc.lanton);
    let mut params = task.init(seed);
    let mut oracle = task.oracle(seed, &oc.lanton);
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut aborted_at = None;
    for t in 0..cfg.total_steps {
        let (loss, grads, twins) = task.sample(&mut oracle, &params, twin)?;
        if !loss.is_finite() {
            aborted_at = Some(t);
            break;
        }
        let out = match opt.step_in_place(&mut params, &grads, twins.as_deref()) {
            Err(Error::NanGradient(_)) => {
                aborted_at = Some(t);
                break;
            }
            r => r?,
        };
        let layers = out
            .layers
            .into_iter()
            .map(|l| LayerStats {
                h: if cfg.telemetry.h { l.h } else { f64::NAN },
                ratio: if cfg.telemetry.ratio { l.ratio } else { f64::NAN },
                ..l
            })
            .collect();
        records.push(RunRecord {
            step: t,
            loss,
            layers,
            wall_ns: start.elapsed().as_nanos() as u64,
        });
    }
    let final_loss = match aborted_at {
        Some(_) => f64::NAN,
        None => {
            let l = task.loss(&params)?;
            if l.is_finite() {
                l
            } else {
                aborted_at = Some(cfg.total_steps);
                f64::NAN
            }
        }
    };
    Ok(SeedRun {
        seed,
        records,
        final_loss,
        aborted_at,
    })
}

// ---------------------------------------------------------------------------
// metric files

/// Renders the long-format metrics CSV.
pub fn metrics_csv(records: &[RunRecord], layers: &[LayerSpec]) -> String {
    let mut s = String::with_capacity(64 + records.len() * layers.len() * 110);
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        let loss = fmt_f64(r.loss);
        for (spec, l) in layers.iter().zip(&r.layers) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step,
                loss,
                spec.name,
                fmt_f64(l.eta_eff),
                fmt_f64(l.ratio),
                fmt_f64(l.h),
                fmt_f64(l.dual_grad_norm)
            );
        }
    }
    s
}

pub fn emit_metrics(records: &[RunRecord], layers: &[LayerSpec], path: &Path) -> Result<()> {
    write_atomic(path, metrics_csv(records, layers).as_bytes())
}

pub fn noise_csv(records: &[RunRecord], layers: &[LayerSpec]) -> String {
    let mut s = String::from(NOISE_CSV_HEADER);
    s.push('\n');
    for r in records {
        for (spec, l) in layers.iter().zip(&r.layers) {
            if let Some(v) = l.noise_sample {
                let _ = writeln!(s, "{},{},{}", r.step, spec.name, fmt_f64(v));
            }
        }
    }
    s
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Invalid(format!("{}:{}: cannot parse `{v}`", path.display(), line + 1)))
}

/// Reads a metrics CSV back into records. `wall_ns` is not stored and
/// comes back as 0; noise samples come back as `None`.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<RunRecord>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(Error::Invalid(format!("{}: unexpected header", path.display()))),
    }
    let mut names: Vec<String> = Vec::new();
    let mut records: Vec<RunRecord> = Vec::new();
    for (ln, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Invalid(format!(
                "{}:{}: expected 7 fields",
                path.display(),
                ln + 1
            )));
        }
        let step: usize = parse_field(path, ln, f[0])?;
        let stats = LayerStats {
            eta_eff: parse_field(path, ln, f[3])?,
            ratio: parse_field(path, ln, f[4])?,
            h: parse_field(path, ln, f[5])?,
            dual_grad_norm: parse_field(path, ln, f[6])?,
            noise_sample: None,
        };
        match records.last_mut() {
            Some(r) if r.step == step => r.layers.push(stats),
            _ => records.push(RunRecord {
                step,
                loss: parse_field(path, ln, f[1])?,
                layers: vec![stats],
                wall_ns: 0,
            }),
        }
        if records.len() == 1 {
            names.push(f[2].to_string());
        }
    }
    if records.iter().any(|r| r.layers.len() != names.len()) {
        return Err(Error::Invalid(format!("{}: ragged layer rows", path.display())));
    }
    Ok((names, records))
}

/// Fills `noise_sample` from a noise CSV.
fn merge_noise(path: &Path, names: &[String], records: &mut [RunRecord]) -> Result<()> {
    let text = read_to_string(path)?;
    for (ln, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Invalid(format!(
                "{}:{}: expected 3 fields",
                path.display(),
                ln + 1
            )));
        }
        let step: usize = parse_field(path, ln, f[0])?;
        let layer = names
            .iter()
            .position(|n| n == f[1])
            .ok_or_else(|| Error::Invalid(format!("{}:{}: unknown layer {}", path.display(), ln + 1, f[1])))?;
        if let Ok(i) = records.binary_search_by_key(&step, |r| r.step) {
            records[i].layers[layer].noise_sample = Some(parse_field(path, ln, f[2])?);
        }
    }
    Ok(())
}

/// First step at which the trailing mean of `window` losses (fewer at the
/// start) is at or below `threshold`.
pub fn steps_to_threshold(losses: &[f64], threshold: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    let mut sum = 0.0;
    for (t, &l) in losses.iter().enumerate() {
        sum += l;
        if t >= window {
            sum -= losses[t - window];
        }
        let n = (t + 1).min(window);
        if sum / n as f64 <= threshold {
            return Some(t);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// experiment driver

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub csv: String,
    pub final_loss: f64,
    pub best_loss: f64,
    pub steps_to_threshold: Option<usize>,
    pub aborted_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub optimizer: OptimizerKind,
    pub mode: StepMode,
    pub task_signature: String,
    pub layers: Vec<LayerSpec>,
    pub noise_profile: Option<NoiseProfile>,
    pub noise_option: NoiseOption,
    pub noise_update_interval: usize,
    pub alpha: f64,
    pub beta2: f64,
    pub total_steps: usize,
    pub threshold: Option<f64>,
    pub smoothing_window: usize,
    pub seeds: Vec<SeedSummary>,
    pub config: Value,
}

fn seed_csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

fn noise_csv_name(seed: u64) -> String {
    format!("noise_seed_{seed}.csv")
}

/// Runs every seed (in parallel), writes per-seed CSVs and `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_path);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let task = build_task(cfg)?;
    let layers = task.layers();
    let seeds: Vec<SeedSummary> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedSummary> {
            let run = run_seed(cfg, &task, seed)?;
            let csv = seed_csv_name(seed);
            emit_metrics(&run.records, &layers, &out.join(&csv))?;
            if cfg.telemetry.noise {
                write_atomic(
                    &out.join(noise_csv_name(seed)),
                    noise_csv(&run.records, &layers).as_bytes(),
                )?;
            }
            let losses: Vec<f64> = run.records.iter().map(|r| r.loss).collect();
            let best_loss = losses.iter().copied().chain([run.final_loss]).fold(f64::NAN, f64::min);
            Ok(SeedSummary {
                seed,
                csv,
                final_loss: run.final_loss,
                best_loss,
                steps_to_threshold: cfg
                    .threshold
                    .and_then(|th| steps_to_threshold(&losses, th, cfg.smoothing_window)),
                aborted_at: run.aborted_at,
            })
        })
        .collect::<Result<_>>()?;
    let lc = &cfg.optimizer.lanton;
    let summary = RunSummary {
        optimizer: cfg.optimizer.kind,
        mode: cfg.optimizer.mode,
        task_signature: cfg.task_signature(),
        layers,
        noise_profile: task.noise_profile(),
        noise_option: lc.noise_option,
        noise_update_interval: lc.noise_update_interval,
        alpha: lc.alpha,
        beta2: lc.beta2,
        total_steps: cfg.total_steps,
        threshold: cfg.threshold,
        smoothing_window: cfg.smoothing_window,
        seeds,
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Pretty JSON with a trailing newline. NaN and infinities become `null`.
pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let p = dir.join(SUMMARY_FILE);
    serde_json::from_str(&read_to_string(&p)?).map_err(|e| Error::config(p.display().to_string(), e.to_string()))
}

/// Loads every seed's records, merging noise samples when present.
pub fn load_runs(dir: &Path, summary: &RunSummary) -> Result<Vec<(u64, Vec<RunRecord>)>> {
    summary
        .seeds
        .iter()
        .map(|s| {
            let (names, mut records) = read_metrics(&dir.join(&s.csv))?;
            let noise = dir.join(noise_csv_name(s.seed));
            if noise.exists() {
                merge_noise(&noise, &names, &mut records)?;
            }
            Ok((s.seed, records))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// comparison

/// Median steps-to-threshold; serialized as a number or `"not reached"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Steps {
    Reached(f64),
    NotReached,
}

impl Steps {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Steps::Reached(v) => Some(v),
            Steps::NotReached => None,
        }
    }
}

impl Serialize for Steps {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Steps::Reached(v) => s.serialize_f64(*v),
            Steps::NotReached => s.serialize_str("not reached"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunComparison {
    pub dir: String,
    pub optimizer: String,
    pub median_steps: Steps,
    pub steps: Vec<Option<usize>>,
    /// min, 25%, median, 75%, max over seeds with a finite final loss.
    pub final_loss_quantiles: Option<[f64; 5]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Speedup {
    pub candidate: String,
    pub baseline: String,
    /// `median steps(baseline) / median steps(candidate)`; null if either
    /// run did not reach the threshold.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub threshold: f64,
    pub task_signature: String,
    pub runs: Vec<RunComparison>,
    pub speedups: Vec<Speedup>,
}

/// Median with missing values ordered last (treated as infinite).
pub fn median_steps(steps: &[Option<usize>]) -> Steps {
    if steps.is_empty() {
        return Steps::NotReached;
    }
    let mut v: Vec<f64> = steps.iter().map(|s| s.map_or(f64::INFINITY, |x| x as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    if m.is_finite() {
        Steps::Reached(m)
    } else {
        Steps::NotReached
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn compare_runs(dirs: &[PathBuf], threshold: f64) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::Invalid("compare needs at least two run directories".into()));
    }
    let mut signature: Option<String> = None;
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let summary = load_summary(dir)?;
        match &signature {
            None => signature = Some(summary.task_signature.clone()),
            Some(s) if *s != summary.task_signature => {
                return Err(Error::Invalid(format!(
                    "{}: task signature differs from {}",
                    dir.display(),
                    dirs[0].display()
                )))
            }
            _ => {}
        }
        let mut steps = Vec::with_capacity(summary.seeds.len());
        for s in &summary.seeds {
            let (_, records) = read_metrics(&dir.join(&s.csv))?;
            let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
            steps.push(steps_to_threshold(&losses, threshold, summary.smoothing_window));
        }
        let mut finals: Vec<f64> = summary
            .seeds
            .iter()
            .map(|s| s.final_loss)
            .filter(|v| v.is_finite())
            .collect();
        finals.sort_by(f64::total_cmp);
        let final_loss_quantiles =
            (!finals.is_empty()).then(|| [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&finals, q)));
        runs.push(RunComparison {
            dir: dir.display().to_string(),
            optimizer: summary.optimizer.name().to_string(),
            median_steps: median_steps(&steps),
            steps,
            final_loss_quantiles,
        });
    }
    let mut speedups = Vec::new();
    for (i, a) in runs.iter().enumerate() {
        for (j, b) in runs.iter().enumerate() {
            if i == j {
                continue;
            }
            let speedup = match (a.median_steps.value(), b.median_steps.value()) {
                (Some(ma), Some(mb)) if ma > 0.0 => Some(mb / ma),
                (Some(_), Some(0.0)) => Some(1.0),
                _ => None,
            };
            speedups.push(Speedup {
                candidate: a.dir.clone(),
                baseline: b.dir.clone(),
                speedup,
            });
        }
    }
    Ok(Comparison {
        threshold,
        task_signature: signature.unwrap_or_default(),
        runs,
        speedups,
    })
}

// ---------------------------------------------------------------------------
// diagnostics over a run directory

pub const DEFAULT_DELTA: f64 = 0.05;

/// Builds one report per seed and writes them to `diagnostics.json`.
pub fn diagnose(dir: &Path) -> Result<Vec<DiagnosticsReport>> {
    let summary = load_summary(dir)?;
    let runs = load_runs(dir, &summary)?;
    let lanton = summary.optimizer == OptimizerKind::Lanton;
    let bounds = summary
        .noise_profile
        .clone()
        .map(|p| BoundParams::for_layers(&summary.layers, p, summary.alpha, summary.beta2, DEFAULT_DELTA))
        .transpose()?;
    let c2 = summary
        .layers
        .iter()
        .map(|l| crate::diagnostics::equivalence_c2(l.group, l.shape))
        .fold(1.0, f64::max);
    let reports = runs
        .iter()
        .map(|(seed, records)| -> Result<DiagnosticsReport> {
            let view = RunView {
                layers: &summary.layers,
                records,
                noise_option: summary.noise_option,
                interval: summary.noise_update_interval,
            };
            let has_noise = records
                .iter()
                .any(|r| r.layers.iter().any(|l| l.noise_sample.is_some()));
            let (h_bounds, alpha_ratio) = match (&bounds, lanton) {
                (Some(b), true) => (
                    (summary.noise_option == NoiseOption::II)
                        .then(|| h_bounds_check(&view, b))
                        .transpose()?,
                    Some(alpha_ratio_envelope(&view, b)?),
                ),
                _ => (None, None),
            };
            Ok(DiagnosticsReport {
                seed: *seed,
                c2,
                h_bounds,
                alpha_ratio,
                noise_ranges: has_noise.then(|| noise_range_estimate(&view, None)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(DIAGNOSTICS_FILE), &reports)?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub index: usize,
    pub assignments: BTreeMap<String, Value>,
    pub output_path: String,
}

fn set_dotted(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path, "grid key walks into a non-object"))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Expands a grid of dotted config paths to value lists into the Cartesian
/// product and runs each point into `<output_path>/point_<i>`.
pub fn sweep(base: &Value, grid: &BTreeMap<String, Vec<Value>>) -> Result<Vec<SweepPoint>> {
    if grid.values().any(|v| v.is_empty()) {
        return Err(Error::config("grid", "every grid entry needs at least one value"));
    }
    let base_cfg = parse_config_value(base.clone())?;
    let root = PathBuf::from(&base_cfg.output_path);
    let keys: Vec<&String> = grid.keys().collect();
    let total: usize = grid.values().map(Vec::len).product();
    let mut points = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut assignments = BTreeMap::new();
        let mut value = base.clone();
        for key in keys.iter().rev() {
            let vals = &grid[*key];
            let v = vals[rem % vals.len()].clone();
            rem /= vals.len();
            set_dotted(&mut value, key, v.clone())?;
            assignments.insert((*key).clone(), v);
        }
        let out = root.join(format!("point_{index:03}"));
        set_dotted(&mut value, "output_path", Value::from(out.display().to_string()))?;
        let cfg = parse_config_value(value)?;
        run_experiment(&cfg)?;
        points.push(SweepPoint {
            index,
            assignments,
            output_path: cfg.output_path,
        });
    }
    write_json(&root.join("sweep.json"), &points)?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_1d(steps: usize, out: &Path) -> String {
        format!(
            r#"{{
                "task": {{"kind": "quadratic", "layers": [
                    {{"name": "x", "shape": 1, "group": "vector_norm", "target": [0.0], "init": [1.0]}}
                ]}},
                "optimizer": {{"kind": "sgd", "eta_max": 0.5, "eta_min": 0.5}},
                "total_steps": {steps},
                "output_path": "{}"
            }}"#,
            out.display()
        )
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = parse_config(r#"{"task": {"kind": "quadratic", "preset": "paper_like"}}"#).unwrap();
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Lanton);
        assert_eq!(cfg.optimizer.lanton.beta1, 0.95);
        assert_eq!(cfg.optimizer.lanton.beta2, 0.9);
        assert_eq!(cfg.optimizer.lanton.r1, 300.0);
        assert_eq!(cfg.optimizer.lanton.r2, 1.0);
        assert_eq!(cfg.optimizer.lanton.eta_max, 5e-3);
        assert_eq!(cfg.optimizer.lanton.eta_min, 5e-4);
        assert_eq!(cfg.optimizer.lanton.total_steps, cfg.total_steps);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.smoothing_window, 20);
    }

    fn config_path(text: &str) -> String {
        match parse_config(text) {
            Err(Error::Config { path, message }) => format!("{path}: {message}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let base = r#""task": {"kind": "quadratic", "preset": "paper_like"}"#;
        let e = config_path(&format!(r#"{{{base}, "optimizer": {{"beta2": 1.5}}}}"#));
        assert!(e.starts_with("optimizer.beta2"), "{e}");
        let e = config_path(&format!(r#"{{{base}, "optimizer": {{"beta3": 0.5}}}}"#));
        assert!(e.contains("beta3"), "{e}");
        let e = config_path(&format!(r#"{{{base}, "optimizer": {{"kind": "adam"}}}}"#));
        assert!(e.starts_with("optimizer.kind"), "{e}");
        let e = config_path(&format!(r#"{{{base}, "seeds": []}}"#));
        assert!(e.starts_with("seeds"), "{e}");
        let e = config_path(&format!(r#"{{{base}, "sedes": [1]}}"#));
        assert!(e.contains("sedes"), "{e}");
        let e = config_path(r#"{"task": {"kind": "quadratic", "preset": "paper_like", "extra": 1}}"#);
        assert!(e.contains("extra"), "{e}");
        assert!(matches!(parse_config("{"), Err(Error::Config { .. })));
        let e = config_path(r#"{"task": {"kind": "quadratic"}}"#);
        assert!(e.starts_with("task"), "{e}");
    }

    #[test]
    fn sgd_on_1d_quadratic_matches_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&quad_1d(10, dir.path())).unwrap();
        let task = build_task(&cfg).unwrap();
        let run = run_seed(&cfg, &task, 0).unwrap();
        for r in &run.records {
            let x = 0.5f64.powi(r.step as i32);
            assert_eq!(r.loss, 0.5 * x * x);
        }
        assert_eq!(run.final_loss, 0.5 * 0.5f64.powi(20));
    }

    #[test]
    fn csv_shape_and_round_trip() {
        let layers = vec![
            LayerSpec::new("a", Shape::Vector(1), GroupId::VectorNorm),
            LayerSpec::new("b", Shape::Vector(1), GroupId::VectorNorm),
        ];
        assert_eq!(metrics_csv(&[], &layers), format!("{CSV_HEADER}\n"));
        let st = |v: f64| LayerStats {
            eta_eff: v,
            ratio: 1.0 / 3.0,
            h: 1e-300,
            dual_grad_norm: f64::NAN,
            noise_sample: None,
        };
        let records = vec![RunRecord {
            step: 0,
            loss: std::f64::consts::PI,
            layers: vec![st(0.1), st(2.0f64.sqrt())],
            wall_ns: 5,
        }];
        let csv = metrics_csv(&records, &layers);
        assert_eq!(csv.lines().count(), 3);
        assert!(!csv.contains('\r'));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        emit_metrics(&records, &layers, &p).unwrap();
        let (names, back) = read_metrics(&p).unwrap();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(back[0].loss.to_bits(), records[0].loss.to_bits());
        for (x, y) in back[0].layers.iter().zip(&records[0].layers) {
            assert_eq!(x.eta_eff.to_bits(), y.eta_eff.to_bits());
            assert_eq!(x.ratio.to_bits(), y.ratio.to_bits());
            assert_eq!(x.h.to_bits(), y.h.to_bits());
            assert!(x.dual_grad_norm.is_nan());
        }
    }

    #[test]
    fn threshold_crossing() {
        let losses = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(steps_to_threshold(&losses, 3.0, 1), Some(2));
        // trailing means: 5, 4.5, 4, 3, 2
        assert_eq!(steps_to_threshold(&losses, 3.0, 3), Some(3));
        assert_eq!(steps_to_threshold(&losses, 0.5, 1), None);
    }

    #[test]
    fn median_and_quantiles() {
        assert_eq!(median_steps(&[Some(100), Some(100)]), Steps::Reached(100.0));
        assert_eq!(median_steps(&[Some(1), None, None]), Steps::NotReached);
        assert_eq!(median_steps(&[Some(1), Some(3), None]), Steps::Reached(3.0));
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(serde_json::to_string(&Steps::NotReached).unwrap(), "\"not reached\"");
    }

    #[test]
    fn two_seeds_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(&quad_1d(5, dir.path())).unwrap();
        cfg.seeds = vec![1, 2];
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.seeds.len(), 2);
        let a = std::fs::read_to_string(dir.path().join("seed_1.csv")).unwrap();
        let b = std::fs::read_to_string(dir.path().join("seed_2.csv")).unwrap();
        assert_eq!(a.lines().next(), Some(CSV_HEADER));
        assert_eq!(b.lines().next(), Some(CSV_HEADER));
        assert!(dir.path().join(SUMMARY_FILE).exists());
        assert!(!dir.path().join("seed_1.csv.tmp").exists());
    }

    #[test]
    fn nan_loss_aborts_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let text = quad_1d(50, dir.path()).replace(
            "\"eta_max\": 0.5, \"eta_min\": 0.5",
            "\"eta_max\": 1e200, \"eta_min\": 1e200",
        );
        let cfg = parse_config(&text).unwrap();
        let s = run_experiment(&cfg).unwrap();
        let seed = &s.seeds[0];
        assert!(seed.aborted_at.is_some());
        assert!(seed.final_loss.is_nan());
    }

    #[test]
    fn sweep_expands_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let base: Value = serde_json::from_str(&quad_1d(3, dir.path())).unwrap();
        let mut grid = BTreeMap::new();
        grid.insert(
            "optimizer.eta_min".to_string(),
            vec![Value::from(0.5), Value::from(0.25)],
        );
        grid.insert(
            "seeds".to_string(),
            vec![serde_json::json!([0]), serde_json::json!([1])],
        );
        let points = sweep(&base, &grid).unwrap();
        assert_eq!(points.len(), 4);
        assert!(dir.path().join("point_003").join(SUMMARY_FILE).exists());
        assert!(dir.path().join("sweep.json").exists());
    }
}
