//! `emr`: train table presets, evaluate robustness, dump effective margins
//! and sweep attack budgets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emr_core::attacks::{epsilon_sweep, evaluate_accuracy};
use emr_core::data::{checkpoint_dtype, load_checkpoint};
use emr_core::margin::{margin_report, MarginOptions};
use emr_core::report::{
    execute_run, load_dataset, load_run_config, margin_summary_json, margins_csv, preset, preset_names, sweep_csv,
    write_file,
};
use emr_core::{AttackConfig, AttackKind, DType, DatasetId, DatasetSplit, Error, Network, Precision, Result, RunConfig, Scalar, TrainConfig};

#[derive(Parser)]
#[command(name = "emr", version, about = "Effective margin regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more runs from config files and/or presets.
    Train(TrainArgs),
    /// Clean and robust accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Per-sample effective margins of a checkpoint.
    Margins(MarginArgs),
    /// Robust accuracy over a list of attack budgets.
    Sweep(SweepArgs),
    /// List the shipped presets.
    Presets,
    /// Print the resolved configuration of a preset or config file.
    Config {
        /// Preset name or path to a config file.
        source: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run documents (TOML).
    configs: Vec<PathBuf>,
    /// Shipped presets to run, e.g. `table1-st-emr`.
    #[arg(long = "preset")]
    presets: Vec<String>,
    /// Override the dataset directory of every run.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Override the output directory (single run only).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Independent runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    Fgsm,
    Pgd,
}

#[derive(Args)]
struct DataArgs {
    /// Checkpoint written by `emr train`.
    checkpoint: PathBuf,
    /// Dataset directory; defaults to data/mnist or data/cifar10 depending
    /// on the checkpoint's input shape.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Use only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 500)]
    batch_size: usize,
}

#[derive(Args)]
struct AttackArgs {
    /// Defaults to the dataset's evaluation attack.
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    random_start: bool,
    /// Seed of the random start.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// l∞ budget; defaults to the dataset's evaluation budget.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct MarginArgs {
    #[command(flatten)]
    data: DataArgs,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Include the bias difference in the denominator.
    #[arg(long)]
    bias_augmented: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// Strictly increasing budgets, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    eps: Vec<f64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dataset_of(input_shape: [usize; 3]) -> Result<DatasetId> {
    [DatasetId::Mnist, DatasetId::Cifar10]
        .into_iter()
        .find(|d| d.input_shape() == input_shape)
        .ok_or_else(|| Error::Usage(format!("no dataset has samples of shape {input_shape:?}")))
}

fn default_attack(dataset: DatasetId) -> AttackConfig {
    match dataset {
        DatasetId::Mnist => TrainConfig::mnist_mlp4().eval_attack,
        DatasetId::Cifar10 => TrainConfig::cifar10_cnn4().eval_attack,
    }
}

fn resolve_attack(args: &AttackArgs, eps: Option<f64>, dataset: DatasetId) -> Result<AttackConfig> {
    let mut a = default_attack(dataset);
    if let Some(kind) = args.attack {
        a.kind = match kind {
            AttackArg::Fgsm => AttackKind::Fgsm,
            AttackArg::Pgd => AttackKind::Pgd,
        };
    }
    if let Some(e) = eps {
        a.epsilon = e;
    }
    if let Some(al) = args.alpha {
        a.alpha = al;
    }
    if let Some(s) = args.steps {
        a.steps = s;
    }
    a.random_start = args.random_start;
    if a.kind == AttackKind::Fgsm {
        a = AttackConfig::fgsm(a.epsilon);
    }
    a.validate()?;
    Ok(a)
}

/// Flags reproducing `a`, without `--eps`.
fn attack_flags(a: &AttackConfig, seed: u64) -> String {
    match a.kind {
        AttackKind::Fgsm => "--attack fgsm".to_string(),
        AttackKind::Pgd => format!(
            "--attack pgd --alpha {} --steps {}{} --seed {seed}",
            a.alpha,
            a.steps,
            if a.random_start { " --random-start" } else { "" }
        ),
    }
}

/// A checkpoint together with the split it is evaluated on.
struct Loaded<T> {
    net: Network<T>,
    split: DatasetSplit<T>,
    dataset: DatasetId,
    data_dir: PathBuf,
}

fn load<T: Scalar>(args: &DataArgs) -> Result<Loaded<T>> {
    let net = load_checkpoint::<T>(&args.checkpoint)?;
    let spec = net.spec().ok_or_else(|| Error::UnknownSpec("checkpoint without model spec".into()))?;
    let dataset = dataset_of(spec.input_shape)?;
    let data_dir = args.data_dir.clone().unwrap_or_else(|| {
        PathBuf::from("data").join(match dataset {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
        })
    });
    let (train, test) = load_dataset::<T>(dataset, &data_dir)?;
    let split = if args.split == SplitArg::Train { train } else { test };
    let split = match args.limit {
        Some(n) => split.take(n)?,
        None => split,
    };
    Ok(Loaded {
        net,
        split,
        dataset,
        data_dir,
    })
}

fn data_flags(args: &DataArgs, data_dir: &Path) -> String {
    let mut s = format!(
        "{} --data-dir {} --split {} --batch-size {}",
        args.checkpoint.display(),
        data_dir.display(),
        args.split.name(),
        args.batch_size
    );
    if let Some(n) = args.limit {
        let _ = write!(s, " --limit {n}");
    }
    s
}

fn echo(line: String) {
    eprintln!("resolved: emr {line}");
}

fn checkpoint_precision(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    checkpoint_dtype(&bytes, &path.display().to_string())
}

/// Runs `$body` with `$T` bound to the checkpoint's scalar type.
macro_rules! with_precision {
    ($path:expr, $T:ident => $body:expr) => {
        match checkpoint_precision($path)? {
            DType::F32 => {
                type $T = f32;
                $body
            }
            DType::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    with_precision!(&args.data.checkpoint, T => eval_typed::<T>(args))
}

fn eval_typed<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let l = load::<T>(&args.data)?;
    let attack = resolve_attack(&args.attack, args.eps, l.dataset)?;
    echo(format!(
        "eval {} {} --eps {}",
        data_flags(&args.data, &l.data_dir),
        attack_flags(&attack, args.attack.seed),
        attack.epsilon
    ));
    let (clean, robust) = evaluate_accuracy(&l.net, &l.split, &attack, args.data.batch_size, args.attack.seed)?;
    println!("attack: {}", attack.label());
    println!("samples: {}", l.split.len());
    println!("clean_accuracy: {clean}");
    println!("robust_accuracy: {robust}");
    Ok(())
}

fn cmd_margins(args: &MarginArgs) -> Result<()> {
    with_precision!(&args.data.checkpoint, T => margins_typed::<T>(args))
}

fn margins_typed<T: Scalar>(args: &MarginArgs) -> Result<()> {
    let l = load::<T>(&args.data)?;
    echo(format!(
        "margins {} --out {}{}",
        data_flags(&args.data, &l.data_dir),
        args.out.display(),
        if args.bias_augmented { " --bias-augmented" } else { "" }
    ));
    let opts = MarginOptions {
        sample_cap: None,
        batch_size: args.data.batch_size,
        bias_augmented: args.bias_augmented,
    };
    let report = margin_report(&l.net, &l.split, args.data.split.name(), &opts)?;
    write_file(&args.out, &margins_csv(&report))?;
    println!("{}", margin_summary_json(&report));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    with_precision!(&args.data.checkpoint, T => sweep_typed::<T>(args))
}

fn sweep_typed<T: Scalar>(args: &SweepArgs) -> Result<()> {
    let l = load::<T>(&args.data)?;
    let attack = resolve_attack(&args.attack, args.eps.first().copied(), l.dataset)?;
    let eps: Vec<String> = args.eps.iter().map(f64::to_string).collect();
    echo(format!(
        "sweep {} {} --eps {}{}",
        data_flags(&args.data, &l.data_dir),
        attack_flags(&attack, args.attack.seed),
        eps.join(","),
        args.out.as_ref().map(|p| format!(" --out {}", p.display())).unwrap_or_default()
    ));
    let points = epsilon_sweep(&l.net, &l.split, &attack, &args.eps, args.data.batch_size, args.attack.seed)?;
    let csv = sweep_csv(&points);
    match &args.out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn resolve_source(source: &str) -> Result<RunConfig> {
    match preset(source) {
        Some(cfg) => Ok(cfg),
        None if Path::new(source).exists() => load_run_config(source),
        None => Err(Error::Usage(format!(
            "{source:?} is neither a preset nor an existing file; presets: {}",
            preset_names().join(", ")
        ))),
    }
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let mut runs: Vec<(String, RunConfig)> = Vec::new();
    for path in &args.configs {
        runs.push((path.display().to_string(), load_run_config(path)?));
    }
    for name in &args.presets {
        let cfg = preset(name).ok_or_else(|| {
            Error::Usage(format!("unknown preset {name:?}; available: {}", preset_names().join(", ")))
        })?;
        runs.push((name.clone(), cfg));
    }
    if runs.is_empty() {
        return Err(Error::Usage("nothing to train: pass config files or --preset".into()));
    }
    if args.out.is_some() && runs.len() > 1 {
        return Err(Error::Usage("--out needs exactly one run".into()));
    }
    for (_, cfg) in &mut runs {
        if let Some(d) = &args.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(o) = &args.out {
            cfg.output_dir = o.clone();
        }
        if let Some(p) = args.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        cfg.validate()?;
    }

    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..args.jobs.clamp(1, runs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((name, cfg)) = runs.get(i) else { break };
                eprintln!("[{name}] training, output in {}", cfg.output_dir.display());
                match execute_run(cfg) {
                    Ok(summary) => println!("[{name}] {}", summary.line()),
                    Err(e) => {
                        eprintln!("[{name}] error: {e}");
                        failures.lock().unwrap().push((i, e.code()));
                    }
                }
            });
        }
    });
    let mut failures = failures.into_inner().unwrap();
    failures.sort();
    Ok(failures.first().map_or(0, |&(_, code)| code))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => return cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Margins(a) => cmd_margins(&a)?,
        Command::Sweep(a) => cmd_sweep(&a)?,
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
        }
        Command::Config { source } => print!("{}", resolve_source(&source)?.to_toml()?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
