use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use metaxl_cli::analyze::analyze;
use metaxl_cli::config::{ExperimentConfig, Overrides, Preset};
use metaxl_cli::datagen;
use metaxl_cli::study::{run_study, CellStatus, StudyOptions};
use metaxl_core::bilevel::{evaluate, Method};
use metaxl_core::checkpoint::Checkpoint;
use metaxl_core::data::{load_sequence_labeled, load_token_labeled, Role, TagSet, TaskKind};

#[derive(Parser)]
#[command(
    name = "metaxl",
    version,
    about = "Representation transformation networks for cross-lingual transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every cell of a study and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        placement: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        /// Output root (defaults to the config, then $METAXL_OUT, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cells trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a labeled file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Entity types of the BIO inventory, comma separated.
        #[arg(long, value_delimiter = ',')]
        entity_types: Vec<String>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Hausdorff, PCA and correlation analysis of a run directory.
    Analyze {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Generate a synthetic corpus pair and write it to disk.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            preset,
            method,
            seed,
            placement,
            beta,
            out,
            jobs,
            quiet,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides {
                preset,
                method,
                seed,
                placement,
                beta,
            });
            let cfg = cfg.resolve()?;
            let run_dir = cfg.output_root(out.as_deref()).join(&cfg.name);
            let report = run_study(&cfg, &run_dir, &StudyOptions { jobs, quiet })?;
            for r in &report.rows {
                match r.status {
                    CellStatus::Ok => println!(
                        "{:<28} test_f1={:.4} hausdorff={:.4}",
                        r.cell,
                        r.test_f1.unwrap_or(f64::NAN),
                        r.hausdorff_after.unwrap_or(f64::NAN)
                    ),
                    CellStatus::Failed => {
                        println!("{:<28} FAILED {}", r.cell, r.error.as_deref().unwrap_or(""))
                    }
                }
            }
            println!("artifacts in {}", report.run_dir.display());
            Ok(report.all_ok())
        }
        Command::Eval {
            checkpoint,
            data,
            entity_types,
            batch,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let cfg = &ckpt.model.config;
            let ds = match cfg.task_kind {
                TaskKind::TokenLabeling => {
                    let tags = if entity_types.is_empty() {
                        TagSet::standard((cfg.n_labels - 1) / 2)
                    } else {
                        TagSet::new(entity_types)
                    };
                    load_token_labeled(&data, &tags, cfg.max_len)?.0
                }
                TaskKind::SequenceClassification => load_sequence_labeled(&data, cfg.max_len)?,
            };
            let report = evaluate(&ckpt.model, &ds.with_role(Role::Target), batch)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Analyze { run_dir } => {
            let s = analyze(&run_dir)?;
            println!("{} cells, {} language pairs", s.hausdorff.len(), s.n_pairs);
            for ((m, b, p), r) in &s.correlations {
                println!("{m} beta={b:?} placement={p:?} pearson={r:?}");
            }
            println!("analysis in {}", s.dir.display());
            Ok(true)
        }
        Command::GenData { spec, out } => {
            let spec = datagen::load_spec(&spec)?;
            for p in datagen::export(&spec, &out)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
