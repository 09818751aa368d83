//! Runs every (method, seed, hyperparameter) cell of a study and writes the
//! artifacts:
//!
//! ```text
//! <run>/config.json                 resolved config and its hash
//! <run>/metrics.csv                 one row per cell
//! <run>/summary.csv                 per-configuration means over seeds
//! <run>/timings.csv                 wall time per cell
//! <run>/cells/<cell>/checkpoint/    best-dev model (and φ)
//! <run>/cells/<cell>/report.json    loss history, dev curve, test scores
//! <run>/cells/<cell>/reps.jsonl     final-layer representation dump
//! ```
//!
//! Wall time lives in its own file so that reruns leave every other file
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use metaxl_core::bilevel::{
    evaluate, representations, train, EvalReport, Method, SourceTransform, TrainConfig, TrainReport,
};
use metaxl_core::checkpoint::Checkpoint;
use metaxl_core::data::{Role, TaskKind};
use metaxl_core::metrics::Level;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::representation_gap;
use crate::artifacts::{write_csv, write_dump, DumpRecord};
use crate::config::{ExperimentConfig, RunData};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CELLS_DIR: &str = "cells";
pub const DUMP_FILE: &str = "reps.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    /// Only for MetaXL.
    pub beta: Option<f64>,
    /// Only for methods with a transformation network.
    pub placement: Option<usize>,
}

impl Cell {
    pub fn id(&self) -> String {
        let mut id = format!("{}-s{}", self.method, self.seed);
        if let Some(p) = self.placement {
            id.push_str(&format!("-p{p}"));
        }
        if let Some(b) = self.beta {
            id.push_str(&format!("-b{b:?}"));
        }
        id
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            method: self.method,
            seed: self.seed,
            beta: self.beta.unwrap_or(base.beta),
            placement: self.placement.unwrap_or(base.placement),
            ..base.clone()
        }
    }
}

/// The study grid in output order: seed, method, placement, β.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for &method in &cfg.methods {
            let placements: Vec<Option<usize>> = if method.uses_rtn() {
                cfg.placements.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            let betas: Vec<Option<f64>> = if method == Method::Metaxl {
                cfg.betas.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for &placement in &placements {
                for &beta in &betas {
                    out.push(Cell {
                        method,
                        seed,
                        beta,
                        placement,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell: String,
    pub method: Method,
    pub seed: u64,
    pub beta: Option<f64>,
    pub placement: Option<usize>,
    pub status: CellStatus,
    pub source_language: String,
    pub target_language: String,
    pub best_step: Option<usize>,
    pub dev_f1: Option<f64>,
    pub test_precision: Option<f64>,
    pub test_recall: Option<f64>,
    pub test_f1: Option<f64>,
    /// Hausdorff distance of the jt cell with the same seed.
    pub hausdorff_before: Option<f64>,
    pub hausdorff_after: Option<f64>,
    pub hausdorff_modified_after: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub cell: String,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub beta: Option<f64>,
    pub placement: Option<usize>,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub dev_f1_mean: Option<f64>,
    pub test_f1_mean: Option<f64>,
    pub test_f1_std: Option<f64>,
    pub hausdorff_mean: Option<f64>,
    /// Seeds where this configuration beats jt on test F1.
    pub test_f1_wins_vs_jt: Option<usize>,
    /// Seeds where this configuration's Hausdorff distance is at most jt's.
    pub hausdorff_le_jt: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellReport {
    pub config_hash: String,
    pub cell: String,
    pub train: TrainReport,
    pub test: EvalReport,
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
    pub timings: Vec<TimingRow>,
}

impl StudyReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status == CellStatus::Ok)
    }
}

#[derive(Clone, Debug)]
pub struct StudyOptions {
    pub jobs: usize,
    pub quiet: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            jobs: 1,
            quiet: true,
        }
    }
}

pub fn cell_dir(run_dir: &Path, cell: &str) -> PathBuf {
    run_dir.join(CELLS_DIR).join(cell)
}

struct CellResult {
    test: EvalReport,
    best_step: usize,
    dev_f1: f64,
    hausdorff: f64,
    hausdorff_modified: f64,
}

fn run_cell(
    cfg: &ExperimentConfig,
    hash: &str,
    cell: &Cell,
    data: &RunData,
    dir: &Path,
) -> Result<CellResult> {
    let tc = cell.train_config(&cfg.train);
    let out = train(
        &tc,
        &cfg.encoder,
        &data.source,
        &data.target_train,
        &data.target_dev,
    )?;
    let test = evaluate(&out.best_theta, &data.target_test, tc.eval_batch)?;
    fs::create_dir_all(dir)?;
    Checkpoint {
        config_hash: hash.to_string(),
        step: out.report.best_step,
        metric: Some(out.report.best_dev.f1),
        model: out.best_theta.clone(),
        phi: cell.method.uses_rtn().then(|| out.best_phi.clone()),
    }
    .save(&dir.join(CHECKPOINT_DIR))?;

    let transform =
        (cfg.transform_source_dumps && cell.method.uses_rtn()).then_some(SourceTransform {
            phi: &out.best_phi,
            placement: tc.placement,
            residual: tc.rtn_residual,
        });
    let source = data.source.clone().with_role(Role::Source);
    let src = representations(
        &out.best_theta,
        &source,
        cfg.dump_examples,
        tc.eval_batch,
        transform,
    )?;
    let tgt = representations(
        &out.best_theta,
        &data.target_test,
        cfg.dump_examples,
        tc.eval_batch,
        None,
    )?;
    let level = match cfg.encoder.task_kind {
        TaskKind::TokenLabeling => Level::Token,
        TaskKind::SequenceClassification => Level::Sequence,
    };
    let gap = representation_gap(
        &data.source_language,
        &src,
        &data.target_language,
        &tgt,
        level,
    )?;
    let records: Vec<DumpRecord> = src
        .into_iter()
        .map(|v| (&data.source_language, v))
        .chain(tgt.into_iter().map(|v| (&data.target_language, v)))
        .map(|(lang, vector)| DumpRecord {
            language: lang.clone(),
            level,
            vector,
        })
        .collect();
    write_dump(&dir.join(DUMP_FILE), hash, &records)?;

    let report = CellReport {
        config_hash: hash.to_string(),
        cell: cell.id(),
        train: out.report.clone(),
        test,
    };
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
    Ok(CellResult {
        test,
        best_step: out.report.best_step,
        dev_f1: out.report.best_dev.f1,
        hausdorff: gap.hausdorff,
        hausdorff_modified: gap.hausdorff_modified,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Trains every cell of a resolved config into `run_dir`. A failing cell is
/// recorded in its row; the other cells still run.
pub fn run_study(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    opts: &StudyOptions,
) -> Result<StudyReport> {
    let hash = cfg.hash();
    fs::create_dir_all(run_dir)
        .with_context(|| format!("creating run directory {}", run_dir.display()))?;
    let manifest = RunManifest {
        config_hash: hash.clone(),
        config: cfg.clone(),
    };
    fs::write(
        run_dir.join(CONFIG_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )
    .with_context(|| format!("run directory {} is not writable", run_dir.display()))?;

    let mut data: BTreeMap<u64, RunData> = BTreeMap::new();
    for &seed in &cfg.seeds {
        data.insert(seed, cfg.data.load(seed, cfg.encoder.max_len)?);
    }

    let grid = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()?;
    let total = grid.len();
    let results: Vec<(Result<CellResult>, f64)> = pool.install(|| {
        grid.par_iter()
            .map(|cell| {
                let id = cell.id();
                let started = Instant::now();
                let d = &data[&cell.seed];
                let res = catch_unwind(AssertUnwindSafe(|| {
                    run_cell(cfg, &hash, cell, d, &cell_dir(run_dir, &id))
                }))
                .unwrap_or_else(|p| Err(anyhow!("panicked: {}", panic_message(p))));
                let secs = started.elapsed().as_secs_f64();
                if !opts.quiet {
                    match &res {
                        Ok(r) => eprintln!(
                            "{id}: test_f1={:.4} hausdorff={:.4} ({secs:.1} s)",
                            r.test.f1, r.hausdorff
                        ),
                        Err(e) => eprintln!("{id}: FAILED: {e:#}"),
                    }
                }
                (res, secs)
            })
            .collect()
    });
    if !opts.quiet {
        eprintln!("{total} cells done");
    }

    let mut rows = Vec::with_capacity(total);
    let mut timings = Vec::with_capacity(total);
    for (cell, (res, secs)) in grid.iter().zip(results) {
        let d = &data[&cell.seed];
        let mut row = MetricsRow {
            cell: cell.id(),
            method: cell.method,
            seed: cell.seed,
            beta: cell.beta,
            placement: cell.placement,
            status: CellStatus::Ok,
            source_language: d.source_language.clone(),
            target_language: d.target_language.clone(),
            best_step: None,
            dev_f1: None,
            test_precision: None,
            test_recall: None,
            test_f1: None,
            hausdorff_before: None,
            hausdorff_after: None,
            hausdorff_modified_after: None,
            error: None,
        };
        match res {
            Ok(r) => {
                row.best_step = Some(r.best_step);
                row.dev_f1 = Some(r.dev_f1);
                row.test_precision = Some(r.test.precision);
                row.test_recall = Some(r.test.recall);
                row.test_f1 = Some(r.test.f1);
                row.hausdorff_after = Some(r.hausdorff);
                row.hausdorff_modified_after = Some(r.hausdorff_modified);
            }
            Err(e) => {
                row.status = CellStatus::Failed;
                row.error = Some(format!("{e:#}"));
            }
        }
        rows.push(row);
        timings.push(TimingRow {
            cell: cell.id(),
            wall_seconds: secs,
        });
    }
    let jt: BTreeMap<u64, f64> = rows
        .iter()
        .filter(|r| r.method == Method::Jt)
        .filter_map(|r| Some((r.seed, r.hausdorff_after?)))
        .collect();
    for row in &mut rows {
        if row.status == CellStatus::Ok {
            row.hausdorff_before = jt.get(&row.seed).copied();
        }
    }
    let summary = summarize(&rows);
    write_csv(&run_dir.join(METRICS_FILE), &hash, &rows)?;
    write_csv(&run_dir.join(SUMMARY_FILE), &hash, &summary)?;
    write_csv(&run_dir.join(TIMINGS_FILE), &hash, &timings)?;
    Ok(StudyReport {
        run_dir: run_dir.to_path_buf(),
        config_hash: hash,
        rows,
        summary,
        timings,
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Per-configuration aggregates over seeds, computed from metrics rows only.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, Option<f64>, Option<usize>)> = Vec::new();
    for r in rows {
        let k = (r.method, r.beta, r.placement);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let jt: BTreeMap<u64, &MetricsRow> = rows
        .iter()
        .filter(|r| r.method == Method::Jt && r.status == CellStatus::Ok)
        .map(|r| (r.seed, r))
        .collect();
    keys.into_iter()
        .map(|(method, beta, placement)| {
            let group: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.method == method && r.beta == beta && r.placement == placement)
                .collect();
            let ok: Vec<&MetricsRow> = group.iter().copied().filter(|r| r.status == CellStatus::Ok).collect();
            let col = |f: fn(&MetricsRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let test = col(|r| r.test_f1);
            let paired: Vec<(&MetricsRow, &MetricsRow)> =
                ok.iter().filter_map(|r| Some((*r, *jt.get(&r.seed)?))).collect();
            let compare = method != Method::Jt && !paired.is_empty();
            SummaryRow {
                method,
                beta,
                placement,
                seeds_ok: ok.len(),
                seeds_failed: group.len() - ok.len(),
                dev_f1_mean: mean(&col(|r| r.dev_f1)),
                test_f1_mean: mean(&test),
                test_f1_std: std_dev(&test),
                hausdorff_mean: mean(&col(|r| r.hausdorff_after)),
                test_f1_wins_vs_jt: compare.then(|| paired.iter().filter(|(r, j)| r.test_f1 > j.test_f1).count()),
                hausdorff_le_jt: compare.then(|| {
                    paired
                        .iter()
                        .filter(|(r, j)| matches!((r.hausdorff_after, j.hausdorff_after), (Some(a), Some(b)) if a <= b))
                        .count()
                }),
            }
        })
        .collect()
}
