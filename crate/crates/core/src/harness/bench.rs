//! The evaluation matrix: corruptions × severities × settings × methods.
//!
//! Every sample index draws one test image, one corruption of it and one
//! prompt base image from seeds derived from the master seed, and all
//! settings and methods of that index are scored on the same draw.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{self, CheckpointError};
use super::report::{MetricReport, RowKey, CLEAN_KEY};
use crate::canvas::{self, CellPosition};
use crate::corruptions::{self, CorruptionKind, CorruptionSpec, SEVERITY_LEVELS};
use crate::image::Image;
use crate::model::{self, Params};
use crate::parallel::{derive_seed, map_indexed};
use crate::tasks::{self, TaskKind};
use crate::training::{self, write_loss_trace, FewShotConfig};
use crate::vict::{self, Setting, VictConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown method `{0}` (expected frozen or vict)")]
    UnknownMethod(String),
    #[error(transparent)]
    Train(#[from] training::TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pre-trained weights, no test-time update.
    Frozen,
    /// Cycle-consistency tuning from the pre-trained weights, per sample.
    Vict,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Frozen, Method::Vict];

    pub fn name(self) -> &'static str {
        match self {
            Method::Frozen => "frozen",
            Method::Vict => "vict",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frozen" => Ok(Method::Frozen),
            "vict" => Ok(Method::Vict),
            other => Err(BenchError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub task: TaskKind,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub settings: Vec<Setting>,
    pub methods: Vec<Method>,
    pub num_samples: usize,
    /// Its `setting` field is overridden per cell.
    pub vict: VictConfig,
    pub checkpoint: PathBuf,
    pub master_seed: u64,
    pub threads: usize,
    /// Canvases at step 0 and step K go here as PPM files.
    pub dump_dir: Option<PathBuf>,
    /// Per-sample VICT loss traces go here as CSV files.
    pub trace_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Denoise,
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![SEVERITY_LEVELS],
            settings: vec![Setting::ZeroShot, Setting::OneShot],
            methods: Method::ALL.to_vec(),
            num_samples: 50,
            vict: VictConfig::default(),
            checkpoint: PathBuf::from("theta0.ckpt"),
            master_seed: 0,
            threads: crate::parallel::default_threads(),
            dump_dir: None,
            trace_dir: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        if self.corruptions.is_empty() {
            return bad("no corruptions selected");
        }
        if self.severities.is_empty() || self.severities.iter().any(|s| !(1..=SEVERITY_LEVELS).contains(s)) {
            return bad("severities must be a nonempty subset of 1..=5");
        }
        if self.settings.is_empty() {
            return bad("no settings selected");
        }
        if self.methods.is_empty() {
            return bad("no methods selected");
        }
        if self.num_samples == 0 {
            return bad("num_samples must be at least 1");
        }
        Ok(())
    }
}

/// Seed-path tags so the draws of one sample index never collide.
const TAG_TEST: u64 = 1;
const TAG_CORRUPT: u64 = 2;
const TAG_PROMPT: u64 = 3;

/// One test draw: the corruption applied (if any) and the sample index.
#[derive(Clone, Debug)]
struct Job {
    corruption: Option<CorruptionSpec>,
    index: usize,
}

fn test_sample(cfg: &BenchConfig, cell_size: usize, index: usize) -> tasks::TaskSample {
    tasks::generate(cfg.task, derive_seed(cfg.master_seed, &[TAG_TEST, index as u64]), cell_size)
}

fn corruption_spec(cfg: &BenchConfig, kind: CorruptionKind, severity: u8, index: usize) -> CorruptionSpec {
    let kind_id = CorruptionKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64;
    let seed = derive_seed(cfg.master_seed, &[TAG_CORRUPT, kind_id, severity as u64, index as u64]);
    CorruptionSpec::new(kind, severity, seed).expect("severity validated")
}

fn label(job: &Job) -> String {
    match &job.corruption {
        Some(spec) => format!("{}_s{}", spec.kind.name(), spec.severity),
        None => CLEAN_KEY.to_string(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scores of one job: `(setting, method) → metric`, or the failure message.
type Scores = Vec<(Setting, Method, Result<f64, String>)>;

fn run_job(params: &Params<f32>, cfg: &BenchConfig, job: &Job) -> Result<Scores, BenchError> {
    let cell = params.config().cell_size;
    let sample = test_sample(cfg, cell, job.index);
    let x_t = match &job.corruption {
        Some(spec) => match corruptions::apply(&sample.input, spec) {
            Ok(img) => img,
            Err(e) => {
                let msg = e.to_string();
                return Ok(cells(cfg).map(|(s, m)| (s, m, Err(msg.clone()))).collect());
            }
        },
        None => sample.input.clone(),
    };
    let prompt_seed = derive_seed(cfg.master_seed, &[TAG_PROMPT, job.index as u64]);

    let mut out = Vec::new();
    for &setting in &cfg.settings {
        // Clean data has no corruption to share, so both settings get a clean prompt.
        let effective = if job.corruption.is_some() { setting } else { Setting::ZeroShot };
        let prompt = vict::select_prompt(cfg.task, effective, job.corruption.as_ref(), prompt_seed, cell);
        for &method in &cfg.methods {
            let result = prompt
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|prompt| evaluate(params, cfg, job, setting, method, prompt, &x_t, &sample.target));
            out.push((setting, method, result.and_then(|r| r)));
        }
    }
    Ok(out)
}

fn cells(cfg: &BenchConfig) -> impl Iterator<Item = (Setting, Method)> + '_ {
    cfg.settings
        .iter()
        .flat_map(move |&s| cfg.methods.iter().map(move |&m| (s, m)))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    params: &Params<f32>,
    cfg: &BenchConfig,
    job: &Job,
    setting: Setting,
    method: Method,
    prompt: &vict::PromptSet,
    x_t: &Image,
    y_t: &Image,
) -> Result<Result<f64, String>, String> {
    let stem = format!("{}_{}_{}_{:04}", label(job), setting, method, job.index);
    let prediction = match method {
        Method::Frozen => model::predict(params, prompt.input(), prompt.output(), x_t).map_err(|e| e.to_string())?,
        Method::Vict => {
            let vc = VictConfig { setting, ..cfg.vict };
            let res = vict::adapt_and_predict(params, prompt, x_t, &vc).map_err(|e| e.to_string())?;
            if let Some(dir) = &cfg.trace_dir {
                let path = dir.join(format!("{stem}.csv"));
                fs::File::create(&path)
                    .and_then(|f| write_loss_trace(std::io::BufWriter::new(f), &res.loss_trace))
                    .map_err(|e| format!("{}: {e}", path.display()))?;
            }
            if let Some(dir) = &cfg.dump_dir {
                let before = model::predict(params, prompt.input(), prompt.output(), x_t).map_err(|e| e.to_string())?;
                dump(dir, &format!("{stem}_step0"), prompt, x_t, &before)?;
                dump(dir, &format!("{stem}_step{}", vc.steps), prompt, x_t, &res.y_t_hat)?;
            }
            res.y_t_hat
        }
    };
    if method == Method::Frozen {
        if let Some(dir) = &cfg.dump_dir {
            dump(dir, &stem, prompt, x_t, &prediction)?;
        }
    }
    Ok(cfg
        .task
        .evaluate(&prediction, y_t)
        .map(|m| m.value)
        .map_err(|e| e.to_string()))
}

fn dump(dir: &Path, stem: &str, prompt: &vict::PromptSet, x_t: &Image, pred: &Image) -> Result<(), String> {
    let (canvas, _) = canvas::assemble_inference(prompt.input(), prompt.output(), x_t, 1).map_err(|e| e.to_string())?;
    let img = canvas
        .pixels_with(CellPosition::BottomRight, pred)
        .map_err(|e| e.to_string())?;
    let path = dir.join(format!("{stem}.ppm"));
    img.save_ppm(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn prepare_dirs(cfg: &BenchConfig) -> Result<(), BenchError> {
    for dir in [&cfg.dump_dir, &cfg.trace_dir].into_iter().flatten() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

type Cells = Vec<(RowKey, Vec<f64>)>;

/// Runs `jobs` on the pool and folds them into report cells in a fixed order.
fn run_jobs(
    params: &Params<f32>,
    cfg: &BenchConfig,
    groups: &[(String, u8, Vec<Job>)],
) -> Result<(Cells, usize), BenchError> {
    prepare_dirs(cfg)?;
    let flat: Vec<&Job> = groups.iter().flat_map(|(_, _, jobs)| jobs.iter()).collect();
    let results = map_indexed(&flat, cfg.threads, |_, job| run_job(params, cfg, job));

    let mut results = results.into_iter();
    let mut out = Vec::new();
    let mut failures = 0;
    for (corruption, severity, jobs) in groups {
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); cfg.settings.len() * cfg.methods.len()];
        for _ in jobs {
            let scores = results.next().expect("one result per job")?;
            for (slot, (_, _, r)) in scores.into_iter().enumerate() {
                match r {
                    Ok(v) if v.is_finite() => values[slot].push(v),
                    _ => failures += 1,
                }
            }
        }
        for ((setting, method), v) in cells(cfg).zip(values) {
            out.push((
                RowKey {
                    method: method.name().to_string(),
                    setting,
                    corruption: corruption.clone(),
                    severity: *severity,
                },
                v,
            ));
        }
    }
    if failures > 0 {
        eprintln!("warning: {failures} sample evaluations failed and were excluded");
    }
    Ok((out, failures))
}

fn report(cfg: &BenchConfig, (cells, failures): (Cells, usize)) -> MetricReport {
    MetricReport::from_cells(cfg.task, cfg.master_seed, cfg.num_samples, cells, failures)
}

fn corrupted_groups(cfg: &BenchConfig) -> Vec<(String, u8, Vec<Job>)> {
    let mut groups = Vec::new();
    for &kind in &cfg.corruptions {
        for &severity in &cfg.severities {
            let jobs = (0..cfg.num_samples)
                .map(|index| Job {
                    corruption: Some(corruption_spec(cfg, kind, severity, index)),
                    index,
                })
                .collect();
            groups.push((kind.name().to_string(), severity, jobs));
        }
    }
    groups
}

fn load_checkpoint(cfg: &BenchConfig) -> Result<Params<f32>, BenchError> {
    checkpoint::load(&cfg.checkpoint).map_err(|source| BenchError::Checkpoint {
        path: cfg.checkpoint.clone(),
        source,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<MetricReport, BenchError> {
    cfg.validate()?;
    run_bench_with(&load_checkpoint(cfg)?, cfg)
}

/// [`run_bench`] on weights already in memory; `cfg.checkpoint` is ignored.
pub fn run_bench_with(params: &Params<f32>, cfg: &BenchConfig) -> Result<MetricReport, BenchError> {
    cfg.validate()?;
    Ok(report(cfg, run_jobs(params, cfg, &corrupted_groups(cfg))?))
}

pub fn run_clean_eval(cfg: &BenchConfig) -> Result<MetricReport, BenchError> {
    cfg.validate()?;
    run_clean_eval_with(&load_checkpoint(cfg)?, cfg)
}

/// Same matrix on uncorrupted test inputs, under the single key `clean`.
/// Corruption and severity selections are ignored; rows carry severity 0.
pub fn run_clean_eval_with(params: &Params<f32>, cfg: &BenchConfig) -> Result<MetricReport, BenchError> {
    cfg.validate()?;
    let jobs = (0..cfg.num_samples)
        .map(|index| Job { corruption: None, index })
        .collect();
    let mut out = report(cfg, run_jobs(params, cfg, &[(CLEAN_KEY.to_string(), 0, jobs)])?);
    out.compute_clean_gaps();
    Ok(out)
}

/// Few-shot fine-tuning baseline: one `θ_m` per (shots, corruption,
/// severity, seed), each evaluated frozen on the bench's test draws.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSweep {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
}

impl Default for FewShotSweep {
    fn default() -> Self {
        Self {
            shots: training::FEW_SHOT_COUNTS.to_vec(),
            seeds: vec![0, 1, 2],
            steps: 100,
            lr: 1e-3,
            beta: 1.0,
        }
    }
}

/// Rows are keyed by method `fewshot_<m>`; values pool every seed's samples.
pub fn run_fewshot(theta0: &Params<f32>, cfg: &BenchConfig, sweep: &FewShotSweep) -> Result<MetricReport, BenchError> {
    cfg.validate()?;
    if sweep.shots.is_empty() || sweep.seeds.is_empty() {
        return Err(BenchError::InvalidConfig("fewshot needs shots and seeds".into()));
    }
    let frozen = BenchConfig {
        methods: vec![Method::Frozen],
        ..cfg.clone()
    };
    let mut cells_out = Vec::new();
    let mut failures = 0;
    for &shots in &sweep.shots {
        for &kind in &cfg.corruptions {
            for &severity in &cfg.severities {
                let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); cfg.settings.len()];
                for &seed in &sweep.seeds {
                    let ft = FewShotConfig {
                        shots,
                        task: cfg.task,
                        corruption: kind,
                        severity,
                        steps: sweep.steps,
                        lr: sweep.lr,
                        beta: sweep.beta,
                        seed: derive_seed(cfg.master_seed ^ seed, &[shots as u64, severity as u64, kind as u64]),
                    };
                    let theta_m = training::fewshot_finetune(theta0, &ft)?;
                    let one = BenchConfig {
                        corruptions: vec![kind],
                        severities: vec![severity],
                        ..frozen.clone()
                    };
                    let (cells, failed) = run_jobs(&theta_m, &one, &corrupted_groups(&one))?;
                    failures += failed;
                    for (i, (_, values)) in cells.into_iter().enumerate() {
                        pooled[i].extend(values);
                    }
                }
                for (setting, values) in cfg.settings.iter().zip(pooled) {
                    cells_out.push((
                        RowKey {
                            method: format!("fewshot_{shots}"),
                            setting: *setting,
                            corruption: kind.name().to_string(),
                            severity,
                        },
                        values,
                    ));
                }
            }
        }
    }
    Ok(report(cfg, (cells_out, failures)))
}
