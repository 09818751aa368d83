//! On-disk formats shared by `train` and `analyze`. Every file carries the
//! config hash: CSVs as a leading `# config_hash: <hex>` comment line,
//! JSON-lines dumps as a first `{"config_hash": ...}` record.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use metaxl_core::metrics::Level;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const HASH_PREFIX: &str = "# config_hash: ";

pub fn write_csv<T: Serialize>(path: &Path, hash: &str, rows: &[T]) -> Result<()> {
    let mut buf = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

/// Like [`write_csv`] for rows whose columns are only known at run time.
pub fn write_csv_records(
    path: &Path,
    hash: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut buf = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

/// Reads a CSV written by [`write_csv`], returning its hash and rows.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<(String, Vec<T>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let Some((first, body)) = text.split_once('\n') else {
        bail!("{} is empty", path.display());
    };
    let Some(hash) = first.strip_prefix(HASH_PREFIX) else {
        bail!("{} has no config hash header", path.display());
    };
    let rows = csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok((hash.trim().to_string(), rows))
}

/// One representation vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub language: String,
    pub level: Level,
    pub vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    config_hash: String,
}

pub fn write_dump(path: &Path, hash: &str, records: &[DumpRecord]) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &DumpHeader {
            config_hash: hash.to_string(),
        },
    )?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<(String, Vec<DumpRecord>)> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    let header: DumpHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)
            .with_context(|| format!("{}: bad header record", path.display()))?,
        None => bail!("{} is empty", path.display()),
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .with_context(|| format!("{}: bad record on line {}", path.display(), i + 2))?;
        records.push(rec);
    }
    Ok((header.config_hash, records))
}
