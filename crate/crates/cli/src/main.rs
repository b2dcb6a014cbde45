use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfl_core::config::{parse_config, ExperimentConfig};
use sfl_core::harness::{preset, run_preset, run_suite, summarize_tree, PRESET_NAMES};
use sfl_core::Error;

/// Thread count for parallel runs; unset means one per core.
const THREADS_ENV: &str = "SFL_THREADS";

#[derive(Parser)]
#[command(
    name = "sfl",
    about = "Semi-asynchronous federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, method) of a config or preset.
    Run {
        /// `key = value` file; applied on top of the preset when one is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Restrict to one method.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Recompute summary.json for a run directory and its variants.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::ConfigLine { .. } => Failure::Config(e.to_string()),
        _ => Failure::Run(e.to_string()),
    }
}

fn overrides(
    config: Option<&Path>,
    seed: Option<u64>,
    method: Option<&str>,
    out_dir: Option<&Path>,
) -> Result<String, Failure> {
    let mut text = match config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    text.push('\n');
    if let Some(s) = seed {
        text.push_str(&format!("seeds = {s}\n"));
    }
    if let Some(m) = method {
        text.push_str(&format!("methods = {m}\n"));
    }
    if let Some(d) = out_dir {
        text.push_str(&format!("out_dir = {}\n", d.display()));
    }
    Ok(text)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Run(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            method,
            preset: preset_name,
        } => {
            let text = overrides(
                config.as_deref(),
                seed,
                method.as_deref(),
                out_dir.as_deref(),
            )?;
            match preset_name {
                Some(name) => {
                    let p = preset(&name).ok_or_else(|| {
                        Failure::Config(format!(
                            "unknown preset {name:?}; expected one of {}",
                            PRESET_NAMES.join(", ")
                        ))
                    })?;
                    let p = p.with_overrides(&text).map_err(classify)?;
                    log::info!("preset {}: {}", p.name, p.summary);
                    let report = run_preset(&p, &p.base.out_dir).map_err(classify)?;
                    print_json(&report)?;
                    Ok(!report.aborted())
                }
                None => {
                    let cfg: ExperimentConfig = parse_config(&text).map_err(classify)?;
                    let summary = run_suite(&cfg, &cfg.out_dir).map_err(classify)?;
                    print_json(&summary)?;
                    Ok(!summary.aborted)
                }
            }
        }
        Command::Summarize { input } => {
            let tree = summarize_tree(&input).map_err(classify)?;
            print_json(&tree)?;
            Ok(!tree.iter().any(|v| v.summary.aborted))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("{THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("at least one run aborted; see summary.json");
            ExitCode::from(2)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(m)) => {
            eprintln!("run failed: {m}");
            ExitCode::from(2)
        }
    }
}
