//! Export of generated corpora in the loader formats plus the mapping table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use metaxl_core::data::{
    generate_pair, write_sequence_labeled, write_token_labeled, Dataset, SyntheticTaskSpec, TagSet,
    TaskKind,
};

/// Writes `source`, `target_train`, `target_dev` and `target_test` (`.conll`
/// for token labeling, `.tsv` otherwise), `mapping.json` and `spec.json`.
pub fn export(spec: &SyntheticTaskSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let pair = generate_pair(spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ext = match spec.task_kind {
        TaskKind::TokenLabeling => "conll",
        TaskKind::SequenceClassification => "tsv",
    };
    let tags = TagSet::standard((spec.n_labels - 1) / 2);
    let encode = |ds: &Dataset| -> Result<Vec<u8>> {
        Ok(match spec.task_kind {
            TaskKind::TokenLabeling => write_token_labeled(ds, &tags)?,
            TaskKind::SequenceClassification => write_sequence_labeled(ds)?,
        })
    };
    let mut written = Vec::new();
    for (name, ds) in [
        ("source", &pair.source),
        ("target_train", &pair.target_train),
        ("target_dev", &pair.target_dev),
        ("target_test", &pair.target_test),
    ] {
        let path = out.join(format!("{name}.{ext}"));
        fs::write(&path, encode(ds)?).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    for (name, bytes) in [
        ("mapping.json", serde_json::to_vec_pretty(&pair.mapping)?),
        ("spec.json", serde_json::to_vec_pretty(spec)?),
    ] {
        let path = out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a spec from TOML, or JSON when the extension says so.
pub fn load_spec(path: &Path) -> Result<SyntheticTaskSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text)?,
        _ => toml::from_str(&text)?,
    };
    Ok(spec)
}
