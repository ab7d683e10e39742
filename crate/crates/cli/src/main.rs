use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use psp_bench::{
    fetch, import_idx, import_npm, load_sources, resolve_data_dir, run_experiment, summary_line, write_report,
    DatasetKind, ExperimentConfig, ScheduleSpec, TaskKind, DATA_DIR_ENV,
};
use psp_core::context::Family;
use psp_core::verify::{
    bias_suite, interference_sweep, reports_csv, unitary_suite, variance_suite, InterferenceTable,
    TrialReport,
};
use psp_core::SeededRng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "psp", version, about = "Parameter superposition checks and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo checks of binding noise; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Continual-learning run writing metrics.csv and metrics.json.
    Bench(BenchArgs),
    /// Dataset management.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Bias,
    Variance,
    Interference,
    Unitary,
}

#[derive(Args)]
struct VerifyArgs {
    /// Families to check (default: binary, complex, rotational).
    #[arg(long, value_parser = parse_family)]
    family: Vec<Family>,
    /// Input dimensions for the variance and interference suites.
    #[arg(long = "M", num_args = 1.., value_delimiter = ',')]
    m: Vec<usize>,
    /// Trials per bias point (the variance suite uses half as many, at least 5000).
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, num_args = 1.., value_delimiter = ',')]
    suite: Vec<Suite>,
    #[arg(long, default_value = "verify-out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[arg(long, value_parser = parse_family)]
    mode: Family,
    #[arg(long, default_value_t = 256)]
    units: usize,
    /// Task count (rotation cycles for the rotating stream).
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    steps_per_task: usize,
    /// per-task, per-block:B, fast or fast-localmix.
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<ScheduleSpec>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// Leave the raw pixels entering the first layer unbound.
    #[arg(long)]
    no_input_binding: bool,
    /// Source dataset for permuting and rotating runs.
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    #[arg(long, env = DATA_DIR_ENV)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Downloads the IDX files, or verifies ones already present, by SHA-256.
    Fetch {
        #[arg(long, value_parser = parse_dataset)]
        dataset: DatasetKind,
        #[arg(long, env = DATA_DIR_ENV)]
        dir: Option<PathBuf>,
    },
    /// Copies raw (uncompressed) IDX files from a local directory.
    ImportIdx {
        #[arg(long, value_parser = parse_dataset)]
        dataset: DatasetKind,
        /// Directory holding the four *-ubyte files.
        #[arg(long)]
        src: PathBuf,
        #[arg(long, env = DATA_DIR_ENV)]
        dir: Option<PathBuf>,
    },
    /// Converts the per-class JSON files of the npm mnist / fashion-mnist packages to IDX.
    ImportNpm {
        #[arg(long, value_parser = parse_dataset)]
        dataset: DatasetKind,
        /// Directory holding 0.json .. 9.json.
        #[arg(long)]
        src: PathBuf,
        #[arg(long, env = DATA_DIR_ENV)]
        dir: Option<PathBuf>,
    },
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: psp_core::PspError| e.to_string())
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: psp_bench::BenchError| e.to_string())
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleSpec, String> {
    s.parse().map_err(|e: psp_bench::BenchError| e.to_string())
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetKind, String> {
    s.parse().map_err(|e: psp_bench::BenchError| e.to_string())
}

#[derive(Serialize)]
struct VerifyOutput {
    seed: u64,
    pass: bool,
    reports: Vec<TrialReport>,
    interference: Vec<InterferenceTable>,
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let families = if args.family.is_empty() {
        vec![Family::Binary, Family::Complex, Family::Rotational]
    } else {
        args.family.clone()
    };
    let suites = if args.suite.is_empty() {
        vec![Suite::Bias, Suite::Variance, Suite::Interference, Suite::Unitary]
    } else {
        args.suite.clone()
    };
    let mc: Vec<Family> = families.iter().copied().filter(|f| *f != Family::OnePower).collect();
    let mut rng = SeededRng::new(args.seed);
    let mut reports = Vec::new();
    let mut tables = Vec::new();
    for suite in suites {
        match suite {
            Suite::Bias => reports.extend(bias_suite(&mc, 256, args.trials, &mut rng)?),
            Suite::Variance => {
                let ms = if args.m.is_empty() { vec![64, 256, 1024] } else { args.m.clone() };
                let trials = (args.trials / 2).max(5000);
                reports.extend(variance_suite(&mc, &ms, trials, &mut rng)?);
            }
            Suite::Interference => {
                let ms = if args.m.is_empty() {
                    vec![64, 128, 256, 512, 1024, 2048, 4096]
                } else {
                    args.m.clone()
                };
                for &family in mc.iter().filter(|f| **f != Family::Rotational) {
                    let t = interference_sweep(family, &[2, 3, 5, 9, 17], &ms, 200, &mut rng)?;
                    reports.extend(t.reports(0.1));
                    tables.push(t);
                }
            }
            Suite::Unitary => reports.extend(unitary_suite(&families, 64, 8, &mut rng)?),
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let out = VerifyOutput {
        seed: args.seed,
        pass,
        reports,
        interference: tables,
    };
    write(&args.out.join("verify.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    write(&args.out.join("verify.csv"), reports_csv(&out.reports))?;
    for r in &out.reports {
        println!(
            "{} {} {} M={} K={} {}={:.6e} (ref {:.6e})",
            if r.pass { "PASS" } else { "FAIL" },
            r.suite,
            r.family,
            r.m,
            r.k,
            r.statistic,
            r.estimate,
            r.reference
        );
    }
    Ok(pass)
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut config = ExperimentConfig::new(args.task, args.mode);
    config.units = args.units;
    config.steps_per_task = args.steps_per_task;
    config.seed = args.seed;
    config.bind_input_layer = !args.no_input_binding;
    if let Some(t) = args.tasks {
        config.tasks = t;
    }
    if let Some(s) = args.schedule {
        config.schedule = s;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(b) = args.batch {
        config.batch = b;
    }
    if let Some(h) = args.hidden_layers {
        config.hidden_layers = h;
    }
    if let Some(d) = args.dataset {
        config.dataset = d;
    }
    let dir = resolve_data_dir(args.data.as_deref());
    let (train, test) = load_sources(&config, &dir)
        .with_context(|| format!("loading data from {} (try `psp data fetch`)", dir.display()))?;
    let (metrics, model) = run_experiment(&config, &train, &test)?;
    write_report(&metrics, &args.out)?;
    write(&args.out.join("model.psp"), model.to_bytes())?;
    println!("{}", summary_line(&metrics));
    Ok(())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(args) => verify(args),
        Command::Bench(args) => bench(args).map(|_| true),
        Command::Data { command } => match command {
            DataCommand::Fetch { dataset, dir } => {
                let dir = resolve_data_dir(dir.as_deref());
                fetch(dataset, &dir).map(|outcomes| {
                    for o in outcomes {
                        println!("{o:?}");
                    }
                    true
                })
                .map_err(Into::into)
            }
            DataCommand::ImportIdx { dataset, src, dir } => {
                let dir = resolve_data_dir(dir.as_deref());
                report_counts(dataset, import_idx(dataset, &src, &dir))
            }
            DataCommand::ImportNpm { dataset, src, dir } => {
                let dir = resolve_data_dir(dir.as_deref());
                report_counts(dataset, import_npm(dataset, &src, &dir))
            }
        },
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn report_counts(dataset: DatasetKind, counts: psp_bench::Result<Vec<(psp_bench::Split, usize)>>) -> Result<bool> {
    let counts = counts?;
    for (split, n) in counts {
        println!("{dataset} {split:?}: {n} images");
    }
    Ok(true)
}
