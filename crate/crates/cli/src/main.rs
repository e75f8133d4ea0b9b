use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vict::corruptions::{CorruptionKind, MonotonicityReport, SeverityTable, PROBE_SET_SIZE};
use vict::harness::{self, checkpoint, BenchConfig, FewShotSweep, Method, MetricReport};
use vict::model::{ModelConfig, Selector};
use vict::parallel;
use vict::tasks::TaskKind;
use vict::training::{self, PretrainConfig};
use vict::vict::{Setting, VictConfig, SWEEP_STEPS, TOY_LR};

#[derive(Parser)]
#[command(name = "vict", version, about = "Test-time visual in-context tuning on a toy inpainting transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train θ0 on the task mix and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Frozen vs. tuned evaluation over corruptions and severities.
    Bench(BenchArgs),
    /// Frozen vs. tuned evaluation on uncorrupted test inputs.
    CleanEval(BenchArgs),
    /// Few-shot fine-tuning baseline, each θ_m evaluated frozen.
    Fewshot(FewshotArgs),
    /// Finite-difference check of the cycle-loss gradients (tiny model, f64).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print checkpoint metadata.
    Inspect { checkpoint: PathBuf },
    /// Validate a severity table and print its probe-set monotonicity CSV.
    Severity {
        /// Key-value severity table; the built-in one when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Write the built-in table here and exit.
        #[arg(long)]
        export: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSize {
    Default,
    Tiny,
}

#[derive(Args)]
struct PretrainArgs {
    /// Comma-separated tasks to train on.
    #[arg(long, value_delimiter = ',', default_value = "denoise,derain,lowlight,segmentation,depth")]
    task_mix: Vec<TaskKind>,
    #[arg(long)]
    exclude_task: Option<TaskKind>,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "default")]
    model: ModelSize,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    loss_trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Zero,
    One,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Frozen,
    Vict,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum TuneArg {
    Encoder,
    All,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "denoise")]
    task: TaskKind,
    /// Comma-separated corruption kinds, or `all`.
    #[arg(long, default_value = "all")]
    corruption: String,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    severity: Vec<u8>,
    #[arg(long, value_enum, default_value = "both")]
    setting: SettingArg,
    #[arg(long, value_enum, default_value = "both")]
    method: MethodArg,
    /// Test-time steps K.
    #[arg(long, default_value_t = SWEEP_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = TOY_LR)]
    lr: f64,
    #[arg(long, value_enum, default_value = "encoder")]
    tune: TuneArg,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Stop the gradient at the first-pass prediction.
    #[arg(long)]
    detach: bool,
    #[arg(long, default_value_t = 50)]
    num_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to VICT_THREADS or the core count.
    #[arg(long)]
    threads: Option<usize>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for PPM canvases at step 0 and step K.
    #[arg(long)]
    dump_canvases: Option<PathBuf>,
    /// Directory for per-sample loss-trace CSVs.
    #[arg(long, num_args = 0..=1, default_missing_value = "traces")]
    trace_loss: Option<PathBuf>,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    shots: Vec<usize>,
    /// Number of fine-tuning seeds averaged per shot count.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 100)]
    ft_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    ft_lr: f64,
    #[command(flatten)]
    bench: BenchArgs,
}

fn parse_corruptions(text: &str) -> Result<Vec<CorruptionKind>, String> {
    if text == "all" {
        return Ok(CorruptionKind::ALL.to_vec());
    }
    text.split(',')
        .map(|s| s.trim().parse::<CorruptionKind>().map_err(|e| e.to_string()))
        .collect()
}

impl BenchArgs {
    fn config(&self) -> Result<BenchConfig, String> {
        let settings = match self.setting {
            SettingArg::Zero => vec![Setting::ZeroShot],
            SettingArg::One => vec![Setting::OneShot],
            SettingArg::Both => vec![Setting::ZeroShot, Setting::OneShot],
        };
        let methods = match self.method {
            MethodArg::Frozen => vec![Method::Frozen],
            MethodArg::Vict => vec![Method::Vict],
            MethodArg::Both => Method::ALL.to_vec(),
        };
        let cfg = BenchConfig {
            task: self.task,
            corruptions: parse_corruptions(&self.corruption)?,
            severities: self.severity.clone(),
            settings,
            methods,
            num_samples: self.num_samples,
            vict: VictConfig {
                steps: self.steps,
                lr: self.lr,
                selector: match self.tune {
                    TuneArg::Encoder => Selector::Encoder,
                    TuneArg::All => Selector::All,
                },
                beta: self.beta,
                setting: Setting::ZeroShot,
                detach: self.detach,
            },
            checkpoint: self.checkpoint.clone(),
            master_seed: self.seed,
            threads: self.threads.unwrap_or_else(parallel::default_threads),
            dump_dir: self.dump_canvases.clone(),
            trace_dir: self.trace_loss.clone(),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    fn emit(&self, report: &MetricReport) -> Result<(), String> {
        print!("{}", report.to_text_table());
        if let Some(path) = &self.out {
            fs::write(path, report.to_json()).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        if let Some(path) = &self.csv {
            let f = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            report
                .write_csv(BufWriter::new(f))
                .map_err(|e| format!("{}: {e}", path.display()))?;
        }
        Ok(())
    }
}

fn pretrain(args: &PretrainArgs) -> Result<(), String> {
    let model = match args.model {
        ModelSize::Default => ModelConfig::default(),
        ModelSize::Tiny => ModelConfig::tiny(),
    };
    let cfg = PretrainConfig {
        steps: args.steps,
        lr: args.lr,
        batch_size: args.batch_size,
        task_mix: args.task_mix.clone(),
        held_out: args.exclude_task,
        beta: 1.0,
        seed: args.seed,
    };
    let start = Instant::now();
    let outcome = training::pretrain::<f32>(&model, &cfg).map_err(|e| e.to_string())?;
    checkpoint::save(&outcome.params, &args.out).map_err(|e| e.to_string())?;
    if let Some(path) = &args.loss_trace {
        let f = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        training::write_loss_trace(BufWriter::new(f), &outcome.losses).map_err(|e| e.to_string())?;
    }
    let window = outcome.losses.len().min(100);
    let lead = mean(&outcome.losses[..window]);
    let trail = mean(&outcome.losses[outcome.losses.len() - window..]);
    println!(
        "{} steps in {:.1}s, loss {lead:.5} -> {trail:.5}, digest {}",
        outcome.losses.len(),
        start.elapsed().as_secs_f64(),
        outcome.params.digest_hex()
    );
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn gradcheck(seed: u64) -> Result<(), String> {
    let start = Instant::now();
    let report = vict::gradcheck::run(seed).map_err(|e| e.to_string())?;
    println!(
        "checked {} scalars, max relative error {:.3e} in {:.1}s",
        report.checked,
        report.max_rel_error,
        start.elapsed().as_secs_f64()
    );
    if let Some((name, index)) = &report.worst {
        println!("worst entry: {name}[{index}]");
    }
    if report.passed() {
        Ok(())
    } else {
        Err(format!(
            "max relative error {:.3e} is not below {:e}",
            report.max_rel_error,
            vict::gradcheck::TOLERANCE
        ))
    }
}

fn inspect(path: &Path) -> Result<(), String> {
    let info = checkpoint::inspect(path).map_err(|e| e.to_string())?;
    println!("format version {}", info.version);
    print!("{}", info.config_text);
    if !info.config_text.ends_with('\n') {
        println!();
    }
    println!("{} tensors, {} scalars", info.tensors.len(), info.num_scalars());
    for t in &info.tensors {
        println!("  {:<28} {:<8} {:?}", t.name, format!("{:?}", t.group).to_lowercase(), t.shape);
    }
    Ok(())
}

fn severity(table: Option<&Path>, export: Option<&Path>, out: Option<&Path>) -> Result<(), String> {
    if let Some(path) = export {
        return fs::write(path, SeverityTable::default().to_toml()).map_err(|e| format!("{}: {e}", path.display()));
    }
    let table = match table {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            SeverityTable::from_toml(&text).map_err(|e| e.to_string())?
        }
        None => SeverityTable::default(),
    };
    let report = MonotonicityReport::measure(&table, PROBE_SET_SIZE).map_err(|e| e.to_string())?;
    match out {
        Some(path) => {
            let f = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            report.write_csv(BufWriter::new(f)).map_err(|e| e.to_string())?;
        }
        None => report.write_csv(std::io::stdout().lock()).map_err(|e| e.to_string())?,
    }
    let bad = report.violations();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(format!("severity not monotone for {bad:?}"))
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Pretrain(args) => pretrain(&args),
        Command::Bench(args) => {
            let report = harness::run_bench(&args.config()?).map_err(|e| e.to_string())?;
            args.emit(&report)
        }
        Command::CleanEval(args) => {
            let report = harness::run_clean_eval(&args.config()?).map_err(|e| e.to_string())?;
            args.emit(&report)
        }
        Command::Fewshot(args) => {
            let cfg = args.bench.config()?;
            let theta0 = checkpoint::load(&cfg.checkpoint).map_err(|e| e.to_string())?;
            let sweep = FewShotSweep {
                shots: args.shots.clone(),
                seeds: (0..args.seeds).collect(),
                steps: args.ft_steps,
                lr: args.ft_lr,
                beta: 1.0,
            };
            let report = harness::run_fewshot(&theta0, &cfg, &sweep).map_err(|e| e.to_string())?;
            args.bench.emit(&report)
        }
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
        Command::Severity { table, export, out } => severity(table.as_deref(), export.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(reason) => {
            eprintln!("error: {reason}");
            ExitCode::FAILURE
        }
    }
}
