use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epiraft::checker::check_jsonl;
use epiraft::config::{self, ConfigError, ExperimentConfig, PRESETS};
use epiraft::experiment::{run_experiment, Outcome, RunOptions};
use epiraft::types::Variant;

#[derive(Parser)]
#[command(version, about = "Gossip-based Raft variants on a deterministic network simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment file or preset and write its tables.
    Run {
        /// Experiment file (TOML).
        config: Option<PathBuf>,
        /// Named preset instead of a file.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Output directory [default: out/<name>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured seeds with this one.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads [default: all cores].
        #[arg(long)]
        jobs: Option<usize>,
        /// Only run these variants (repeatable).
        #[arg(long = "variant")]
        variants: Vec<Variant>,
        /// Suppress per-run progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// List the built-in presets.
    Presets,
    /// Print every experiment key with its default.
    Describe {
        /// Print this preset as a TOML file instead.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Safety-check a JSONL trace file.
    Check { trace: PathBuf },
}

fn config_error(e: ConfigError) -> Outcome {
    eprintln!("error: {e}");
    Outcome::ConfigError
}

fn main() -> ExitCode {
    ExitCode::from(execute(Cli::parse().cmd).exit_code() as u8)
}

fn execute(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Presets => {
            for p in PRESETS {
                let cfg = config::preset(p.name).expect("built-in presets are valid");
                let sim_s = cfg.duration_ms / 1e3 * cfg.run_count() as f64;
                println!("{:<18} {:>4} runs {:>7.0} sim-s  {}", p.name, cfg.run_count(), sim_s, cfg.description);
            }
            Outcome::Passed
        }
        Cmd::Describe { preset: None } => {
            print!("{}", config::describe());
            Outcome::Passed
        }
        Cmd::Describe { preset: Some(name) } => match PRESETS.iter().find(|p| p.name == name) {
            Some(p) => {
                print!("{}", p.text);
                Outcome::Passed
            }
            None => config_error(ConfigError::UnknownPreset(name)),
        },
        Cmd::Check { trace } => {
            let file = match std::fs::File::open(&trace) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("error: cannot open {}: {e}", trace.display());
                    return Outcome::RunFailed;
                }
            };
            match check_jsonl(BufReader::new(file)) {
                Ok(v) => {
                    println!("{v}");
                    if v.passed() { Outcome::Passed } else { Outcome::SafetyViolation }
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", trace.display());
                    Outcome::RunFailed
                }
            }
        }
        Cmd::Run {
            config,
            preset,
            out,
            seed,
            jobs,
            variants,
            quiet,
        } => {
            let loaded = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path),
                (None, Some(name)) => config::preset(&name),
                (None, None) => {
                    eprintln!("error: give an experiment file or --preset (see `epiraft presets`)");
                    return Outcome::ConfigError;
                }
            };
            let mut cfg = match loaded {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if !variants.is_empty() {
                cfg.variants.retain(|v| variants.contains(v));
                if let Err(e) = cfg.validate() {
                    return config_error(e);
                }
            }
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                jobs,
                keep_samples: false,
                progress: !quiet,
            };
            match run_experiment(&cfg, &opts) {
                Ok(report) => {
                    print!("{}", report.table());
                    print!("{}", report.verdict_text());
                    println!("tables written to {}", out.display());
                    report.outcome()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Outcome::RunFailed
                }
            }
        }
    }
}
