use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use coevo_core::harness::{
    evaluate_checkpoint, export_metrics, load_config, run_ablation, run_experiment, AblationMode,
    ExperimentConfig, HarnessError, SuiteConfig, OUTPUT_DIR_ENV,
};

#[derive(Parser)]
#[command(name = "coevo", version, about = "Morphology and environment co-evolution experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a config with every field at its default.
    InitConfig {
        /// Destination file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train every seed of a config and evaluate on the held-out suite.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run one ablation mode of a config.
    Ablate {
        #[arg(short, long)]
        mode: String,
        #[arg(short, long)]
        config: PathBuf,
        /// Checkpoint providing the final morphology or environment.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out suite.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config whose `eval_suite` section is used; defaults otherwise.
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Write CSV tables for a run directory.
    Export {
        /// Run directory (`<output_dir>/<mode>`).
        #[arg(long, conflicts_with = "config")]
        run_dir: Option<PathBuf>,
        /// Derive the run directory from a config.
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = load_config(path)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn run(cmd: Cmd) -> Result<String, HarnessError> {
    match cmd {
        Cmd::InitConfig { output } => {
            let text = json(&ExperimentConfig::default());
            match output {
                Some(p) => {
                    std::fs::write(&p, &text).map_err(|e| HarnessError::io(&p, e))?;
                    Ok(json(&serde_json::json!({ "written": p })))
                }
                None => Ok(text),
            }
        }
        Cmd::Train { config } => Ok(json(&run_experiment(&load(&config)?)?)),
        Cmd::Ablate { mode, config, checkpoint } => {
            let m = AblationMode::parse(&mode)
                .ok_or_else(|| HarnessError::Config(format!("unknown mode {mode:?}")))?;
            let mut cfg = load(&config)?;
            if checkpoint.is_some() {
                cfg.final_checkpoint = checkpoint;
            }
            Ok(json(&run_ablation(m, &cfg)?))
        }
        Cmd::Evaluate { checkpoint, config } => {
            let suite = match config {
                Some(c) => load(&c)?.eval_suite,
                None => SuiteConfig::default(),
            };
            Ok(json(&evaluate_checkpoint(&checkpoint, &suite)?))
        }
        Cmd::Export { run_dir, config } => {
            let dir = match (run_dir, config) {
                (Some(d), _) => d,
                (None, Some(c)) => load(&c)?.run_dir(),
                (None, None) => return Err(HarnessError::Config("export needs --run-dir or --config".into())),
            };
            Ok(json(&serde_json::json!({ "written": export_metrics(&dir)? })))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let v = serde_json::json!({ "error": "usage", "message": e.kind().to_string(), "detail": e.to_string() });
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(if matches!(e, HarnessError::Config(_)) { 2 } else { 1 })
        }
    }
}
