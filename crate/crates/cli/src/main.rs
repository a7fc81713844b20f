//! Command-line front end: generate synthetic plant data, train, evaluate,
//! ablate hydraulic channels, and export averaged attention matrices.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 usage or bad
//! input, 2 I/O, 3 numerical failure, 4 integrity (checksum/version).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use stgnn_core::error::CoreError;
use stgnn_core::pipeline::{
    self, run_ablate, run_evaluate, run_export_attention, run_train, RunConfig,
};
use stgnn_core::synth::{generate, PlantSpec};

#[derive(Parser)]
#[command(name = "stgnn", version, about = "Spectral-temporal graph forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic coupled-plant dataset CSV plus its ground-truth
    /// coupling CSV.
    Generate {
        /// Plant spec JSON; omitted means the default 58-channel plant.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the graph model described by a run-config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a data file's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-node NMSE CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train fused and electric-only variants on identical splits/seeds and
    /// write the comparison table plus both averaged attention matrices.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the test-averaged attention matrix of a checkpoint; with
    /// --seed-compare, also report pairwise Pearson correlations.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Additional checkpoints to correlate against.
        #[arg(long, num_args = 1.., value_name = "CHECKPOINT")]
        seed_compare: Vec<PathBuf>,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Io { .. } => 2,
        CoreError::NonFinite(_) => 3,
        CoreError::Integrity(_) => 4,
        _ => 1,
    }
}

fn load_plant_spec(path: &Option<PathBuf>) -> Result<PlantSpec, CoreError> {
    match path {
        None => Ok(PlantSpec::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CoreError::io(p.display().to_string(), e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn run(command: Command) -> Result<(), CoreError> {
    match command {
        Command::Generate { spec, out, seed } => {
            let mut spec = load_plant_spec(&spec)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            std::fs::create_dir_all(&out)
                .map_err(|e| CoreError::io(out.display().to_string(), e))?;
            let (frame, coupling) = generate(&spec)?;
            let data_path = out.join("plant.csv");
            stgnn_core::data::write_csv(&frame, &data_path)?;
            let coupling_path = out.join("coupling.csv");
            coupling.write_csv(&coupling_path)?;
            println!(
                "wrote {} ({} rows x {} channels) and {}",
                data_path.display(),
                frame.len(),
                frame.channel_count(),
                coupling_path.display()
            );
        }
        Command::Train { config, seed, out } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out) = out {
                config.out_dir = out.display().to_string();
            }
            let artifacts = run_train(&config)?;
            println!(
                "best epoch {} (val NMSE {}), test NMSE {}",
                artifacts.report.best_epoch,
                artifacts.report.best_val_nmse,
                artifacts.report.test_nmse
            );
            println!(
                "checkpoint: {}\nreport: {}",
                artifacts.checkpoint_path.display(),
                artifacts.report_path.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => {
            let outcome = run_evaluate(&checkpoint, &data, out.as_deref())?;
            println!("test NMSE: {}", outcome.nmse);
            for (name, v) in outcome.node_names.iter().zip(&outcome.per_node) {
                println!("{name}: {v}");
            }
        }
        Command::Ablate { config, seed, out } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out) = out {
                config.out_dir = out.display().to_string();
            }
            let artifacts = run_ablate(&config)?;
            let s = &artifacts.summary;
            println!(
                "el-only NMSE {} vs el+hyd NMSE {} ({:+.2}% improvement)",
                s.nmse_el,
                s.nmse_elhyd,
                100.0 * s.relative_improvement
            );
            let improved = s
                .per_node
                .iter()
                .filter(|n| n.relative_improvement > 0.0)
                .count();
            println!("{improved} of {} nodes improved", s.per_node.len());
        }
        Command::ExportAttention {
            checkpoint,
            data,
            out,
            seed_compare,
        } => {
            let correlations = run_export_attention(&checkpoint, &data, &out, &seed_compare)?;
            println!("wrote {}", out.display());
            for (a, b, r) in correlations {
                println!("pearson {a} vs {b}: {r}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    pipeline::configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
