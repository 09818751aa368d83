//! Representation-gap analysis of a finished run directory.
//!
//! Writes into `<run>/analysis/`:
//! - `hausdorff.csv`: one row per cell and language pair.
//! - `pca/<cell>.csv`: 2-D PCA points of both languages.
//! - `pairs.csv`: per language pair, F1 improvement and Hausdorff reduction of
//!   each configuration over jt.
//! - `correlation.csv`: per configuration, the number of pairs and, once at
//!   least three pairs exist, the Pearson correlation between the two.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metaxl_core::bilevel::Method;
use metaxl_core::metrics::{
    hausdorff, hausdorff_modified, pca2, pearson, Level, RepresentationSet,
};
use serde::Serialize;

use crate::artifacts::{read_csv, read_dump, write_csv, write_csv_records};
use crate::study::{
    cell_dir, CellStatus, MetricsRow, RunManifest, CONFIG_FILE, DUMP_FILE, METRICS_FILE,
};

pub const ANALYSIS_DIR: &str = "analysis";
pub const MIN_CORRELATION_PAIRS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Gap {
    pub source: RepresentationSet,
    pub target: RepresentationSet,
    pub dropped: usize,
    pub hausdorff: f64,
    pub hausdorff_modified: f64,
}

/// Hausdorff distances between two languages' vectors. Zero vectors are
/// dropped and counted.
pub fn representation_gap(
    source_language: &str,
    source: &[Vec<f64>],
    target_language: &str,
    target: &[Vec<f64>],
    level: Level,
) -> Result<Gap> {
    let (s, ds) = RepresentationSet::new(source_language, level, source.to_vec())?;
    let (t, dt) = RepresentationSet::new(target_language, level, target.to_vec())?;
    Ok(Gap {
        hausdorff: hausdorff(&s, &t)?,
        hausdorff_modified: hausdorff_modified(&s, &t)?,
        source: s,
        target: t,
        dropped: ds + dt,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HausdorffRow {
    pub cell: String,
    pub method: Method,
    pub seed: u64,
    pub beta: Option<f64>,
    pub placement: Option<usize>,
    pub pair: String,
    pub n_source: usize,
    pub n_target: usize,
    pub hausdorff: f64,
    pub hausdorff_modified: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaRow {
    pub x: f64,
    pub y: f64,
    pub language: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRow {
    pub pair: String,
    pub method: Method,
    pub beta: Option<f64>,
    pub placement: Option<usize>,
    pub seeds: usize,
    pub f1_improvement: f64,
    pub hausdorff_reduction: f64,
}

/// Method, beta and placement of a non-baseline configuration.
pub type Cohort = (Method, Option<f64>, Option<usize>);

/// F1 gain and Hausdorff drop against jt, one entry per seed.
type PairDeltas = (Cohort, Vec<(f64, f64)>);

#[derive(Clone, Debug)]
pub struct AnalysisSummary {
    pub dir: PathBuf,
    pub hausdorff: Vec<HausdorffRow>,
    pub pairs: Vec<PairRow>,
    pub n_pairs: usize,
    /// Pearson coefficient per cohort; empty below three pairs.
    pub correlations: Vec<(Cohort, Option<f64>)>,
}

fn pair_name(r: &MetricsRow) -> String {
    format!("{}:{}", r.source_language, r.target_language)
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn analyze(run_dir: &Path) -> Result<AnalysisSummary> {
    let manifest_path = run_dir.join(CONFIG_FILE);
    let manifest: RunManifest =
        serde_json::from_slice(&fs::read(&manifest_path).with_context(|| {
            format!(
                "{} is not a run directory: {} is missing",
                run_dir.display(),
                manifest_path.display()
            )
        })?)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let hash = manifest.config_hash;
    let (metrics_hash, rows) = read_csv::<MetricsRow>(&run_dir.join(METRICS_FILE))?;
    if metrics_hash != hash {
        bail!("{METRICS_FILE} was written by config {metrics_hash} but the run directory holds config {hash}; refusing to mix artifacts");
    }
    let ok: Vec<&MetricsRow> = rows.iter().filter(|r| r.status == CellStatus::Ok).collect();
    let missing: Vec<String> = ok
        .iter()
        .map(|r| cell_dir(run_dir, &r.cell).join(DUMP_FILE))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!(
            "missing representation dumps (rerun `metaxl train` for this config to produce them):\n  {}",
            missing.join("\n  ")
        );
    }

    let out = run_dir.join(ANALYSIS_DIR);
    fs::create_dir_all(out.join("pca"))?;
    let mut h_rows = Vec::new();
    for r in &ok {
        let path = cell_dir(run_dir, &r.cell).join(DUMP_FILE);
        let (dump_hash, records) = read_dump(&path)?;
        if dump_hash != hash {
            bail!(
                "{} was written by config {dump_hash}, not {hash}; refusing to mix artifacts",
                path.display()
            );
        }
        let languages: Vec<&str> = {
            let mut l: Vec<&str> = records.iter().map(|x| x.language.as_str()).collect();
            l.dedup();
            l
        };
        if !languages.contains(&r.source_language.as_str())
            || !languages.contains(&r.target_language.as_str())
        {
            bail!(
                "{} must hold vectors for both '{}' and '{}'",
                path.display(),
                r.source_language,
                r.target_language
            );
        }
        let level = records[0].level;
        let pick = |lang: &str| -> Vec<Vec<f64>> {
            records
                .iter()
                .filter(|x| x.language == lang)
                .map(|x| x.vector.clone())
                .collect()
        };
        let gap = representation_gap(
            &r.source_language,
            &pick(&r.source_language),
            &r.target_language,
            &pick(&r.target_language),
            level,
        )?;
        let all: Vec<Vec<f64>> = gap
            .source
            .vectors
            .iter()
            .chain(&gap.target.vectors)
            .cloned()
            .collect();
        let pca = pca2(&all)?;
        let labels = std::iter::repeat_n(&r.source_language, gap.source.len())
            .chain(std::iter::repeat_n(&r.target_language, gap.target.len()));
        let points: Vec<PcaRow> = pca
            .points
            .iter()
            .zip(labels)
            .map(|(p, l)| PcaRow {
                x: p[0],
                y: p[1],
                language: l.clone(),
            })
            .collect();
        write_csv(
            &out.join("pca").join(format!("{}.csv", r.cell)),
            &hash,
            &points,
        )?;
        h_rows.push(HausdorffRow {
            cell: r.cell.clone(),
            method: r.method,
            seed: r.seed,
            beta: r.beta,
            placement: r.placement,
            pair: pair_name(r),
            n_source: gap.source.len(),
            n_target: gap.target.len(),
            hausdorff: gap.hausdorff,
            hausdorff_modified: gap.hausdorff_modified,
        });
    }
    write_csv(&out.join("hausdorff.csv"), &hash, &h_rows)?;

    // Per pair and configuration, averaged over the seeds where both the
    // configuration and jt succeeded.
    let h_of: BTreeMap<&str, f64> = h_rows
        .iter()
        .map(|h| (h.cell.as_str(), h.hausdorff))
        .collect();
    let jt: BTreeMap<(String, u64), &MetricsRow> = ok
        .iter()
        .filter(|r| r.method == Method::Jt)
        .map(|r| ((pair_name(r), r.seed), *r))
        .collect();
    let mut acc: BTreeMap<(String, usize), PairDeltas> = BTreeMap::new();
    let mut configs: Vec<Cohort> = Vec::new();
    for r in ok.iter().filter(|r| r.method != Method::Jt) {
        let Some(j) = jt.get(&(pair_name(r), r.seed)) else {
            continue;
        };
        let (Some(f), Some(jf)) = (r.test_f1, j.test_f1) else {
            continue;
        };
        let key = (r.method, r.beta, r.placement);
        let ci = configs.iter().position(|c| *c == key).unwrap_or_else(|| {
            configs.push(key);
            configs.len() - 1
        });
        let entry = acc.entry((pair_name(r), ci)).or_insert((key, Vec::new()));
        entry
            .1
            .push((f - jf, h_of[j.cell.as_str()] - h_of[r.cell.as_str()]));
    }
    let pairs: Vec<PairRow> = acc
        .into_iter()
        .map(|((pair, _), ((method, beta, placement), d))| {
            let n = d.len() as f64;
            PairRow {
                pair,
                method,
                beta,
                placement,
                seeds: d.len(),
                f1_improvement: d.iter().map(|x| x.0).sum::<f64>() / n,
                hausdorff_reduction: d.iter().map(|x| x.1).sum::<f64>() / n,
            }
        })
        .collect();
    write_csv(&out.join("pairs.csv"), &hash, &pairs)?;

    let n_pairs = {
        let mut p: Vec<String> = ok.iter().map(|r| pair_name(r)).collect();
        p.sort_unstable();
        p.dedup();
        p.len()
    };
    let with_corr = n_pairs >= MIN_CORRELATION_PAIRS;
    let mut header = vec!["method", "beta", "placement", "n_pairs"];
    if with_corr {
        header.push("pearson");
    }
    let mut records = Vec::new();
    let mut correlations = Vec::new();
    for &(method, beta, placement) in &configs {
        let mine: Vec<&PairRow> = pairs
            .iter()
            .filter(|p| p.method == method && p.beta == beta && p.placement == placement)
            .collect();
        let mut rec = vec![
            method.to_string(),
            fmt_opt(beta),
            fmt_opt(placement),
            mine.len().to_string(),
        ];
        if with_corr {
            let xs: Vec<f64> = mine.iter().map(|p| p.f1_improvement).collect();
            let ys: Vec<f64> = mine.iter().map(|p| p.hausdorff_reduction).collect();
            let r = (mine.len() >= MIN_CORRELATION_PAIRS)
                .then(|| pearson(&xs, &ys).ok())
                .flatten();
            rec.push(fmt_opt(r));
            correlations.push(((method, beta, placement), r));
        }
        records.push(rec);
    }
    write_csv_records(&out.join("correlation.csv"), &hash, &header, &records)?;
    Ok(AnalysisSummary {
        dir: out,
        hausdorff: h_rows,
        pairs,
        n_pairs,
        correlations,
    })
}
