use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use lanton::harness::{self, compare_runs, diagnose, parse_config, run_experiment, write_json};
use lanton::{Error, Result};

#[derive(Parser)]
#[command(name = "lanton", version, about = "Noise-adaptive LMO optimizer experiments")]
struct Cli {
    /// Replace the config's seed list (comma-separated).
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Output directory for run/sweep, output file for compare.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run { config: PathBuf },
    /// Compare steps-to-threshold across run directories.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        threshold: f64,
    },
    /// Check tracker bounds and ratio envelopes of a finished run.
    Diagnose { dir: PathBuf },
    /// Run the Cartesian product of a grid of config overrides.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn print_json<T: serde::Serialize>(v: &T) {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    // a closed pipe (e.g. `| head`) is not an error
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn apply_overrides(value: &mut Value, cli: &Cli) {
    let obj = value.as_object_mut();
    if let Some(obj) = obj {
        if let Some(seeds) = &cli.seed_override {
            obj.insert("seeds".into(), Value::from(seeds.clone()));
        }
        if let Some(out) = &cli.out {
            obj.insert("output_path".into(), Value::from(out.display().to_string()));
        }
    }
}

fn load_config_value(path: &PathBuf, cli: &Cli) -> Result<Value> {
    let mut v: Value = serde_json::from_str(&read(path)?).map_err(|e| Error::Config {
        path: ".".into(),
        message: e.to_string(),
    })?;
    apply_overrides(&mut v, cli);
    Ok(v)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    match &cli.command {
        Command::Run { config } => {
            let value = load_config_value(config, cli)?;
            let cfg = parse_config(&value.to_string())?;
            let summary = run_experiment(&cfg)?;
            print_json(&summary.seeds);
        }
        Command::Compare { dirs, threshold } => {
            let cmp = compare_runs(dirs, *threshold)?;
            match &cli.out {
                Some(p) => write_json(p, &cmp)?,
                None => print_json(&cmp),
            }
        }
        Command::Diagnose { dir } => print_json(&diagnose(dir)?),
        Command::Sweep { config, grid } => {
            let base = load_config_value(config, cli)?;
            let grid: BTreeMap<String, Vec<Value>> = serde_json::from_str(&read(grid)?).map_err(|e| Error::Config {
                path: "grid".into(),
                message: e.to_string(),
            })?;
            print_json(&harness::sweep(&base, &grid)?);
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    let err = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{err}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
