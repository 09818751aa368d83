//! Experiment configuration: the study grid, the model, the data and where
//! artifacts go.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use metaxl_core::bilevel::{Method, TrainConfig};
use metaxl_core::data::{
    generate_pair, load_sequence_labeled, load_token_labeled, Dataset, Role, SyntheticTaskSpec,
    TagSet, TaskKind,
};
use metaxl_core::encoder::EncoderConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "METAXL_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// target_only, jt and metaxl.
    Table2Shape,
    /// jt as reference plus metaxl at the embedding, middle and last layer.
    Table5Shape,
    /// jt, jt_rtn and metaxl.
    Table6Shape,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Table2Shape => "table2-shape",
            Preset::Table5Shape => "table5-shape",
            Preset::Table6Shape => "table6-shape",
        }
    }

    pub fn methods(self) -> Vec<Method> {
        match self {
            Preset::Table2Shape => vec![Method::TargetOnly, Method::Jt, Method::Metaxl],
            Preset::Table5Shape => vec![Method::Jt, Method::Metaxl],
            Preset::Table6Shape => vec![Method::Jt, Method::JtRtn, Method::Metaxl],
        }
    }

    pub fn placements(self, n_layers: usize) -> Vec<usize> {
        match self {
            Preset::Table5Shape => {
                let mut p = vec![0, n_layers / 2, n_layers];
                p.dedup();
                p
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2-shape" => Ok(Preset::Table2Shape),
            "table5-shape" => Ok(Preset::Table5Shape),
            "table6-shape" => Ok(Preset::Table6Shape),
            _ => {
                bail!("unknown preset '{s}' (expected table2-shape, table5-shape or table6-shape)")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub task_kind: TaskKind,
    /// Entity types of the BIO inventory; ignored for sequence classification.
    #[serde(default = "default_types")]
    pub entity_types: Vec<String>,
    pub source: PathBuf,
    pub target_train: PathBuf,
    pub target_dev: PathBuf,
    pub target_test: PathBuf,
    #[serde(default = "default_source_language")]
    pub source_language: String,
    #[serde(default = "default_target_language")]
    pub target_language: String,
}

fn default_types() -> Vec<String> {
    TagSet::standard(2).types
}

fn default_source_language() -> String {
    "source".into()
}

fn default_target_language() -> String {
    "target".into()
}

/// Exactly one of `synthetic` and `files` must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<FileData>,
}

/// Loaded data for one run seed.
#[derive(Clone, Debug)]
pub struct RunData {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_dev: Dataset,
    pub target_test: Dataset,
    pub source_language: String,
    pub target_language: String,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.files) {
            (Some(spec), None) => spec.validate().context("invalid synthetic data spec"),
            (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => {
                bail!("data: set either [data.synthetic] or [data.files], not both")
            }
            (None, None) => bail!("data: one of [data.synthetic] or [data.files] is required"),
        }
    }

    pub fn task(&self) -> (TaskKind, usize) {
        match (&self.synthetic, &self.files) {
            (Some(spec), _) => (spec.task_kind, spec.n_labels),
            (None, Some(f)) => match f.task_kind {
                TaskKind::TokenLabeling => {
                    (f.task_kind, TagSet::new(f.entity_types.clone()).n_labels())
                }
                TaskKind::SequenceClassification => (f.task_kind, 2),
            },
            (None, None) => unreachable!("validated"),
        }
    }

    /// Synthetic corpora are regenerated per run seed (the spec seed is an
    /// offset), so every seed is its own target language. File corpora are
    /// the same for every seed.
    pub fn load(&self, run_seed: u64, max_len: usize) -> Result<RunData> {
        if let Some(spec) = &self.synthetic {
            let data_seed = spec.seed.wrapping_add(run_seed);
            let pair = generate_pair(&SyntheticTaskSpec {
                seed: data_seed,
                ..spec.clone()
            })?;
            return Ok(RunData {
                source: pair.source,
                target_train: pair.target_train,
                target_dev: pair.target_dev,
                target_test: pair.target_test,
                source_language: "source".into(),
                target_language: format!("target-{data_seed}"),
            });
        }
        let f = self.files.as_ref().expect("validated");
        let load = |path: &Path, role: Role| -> Result<Dataset> {
            let ds = match f.task_kind {
                TaskKind::TokenLabeling => {
                    let tags = TagSet::new(f.entity_types.clone());
                    load_token_labeled(path, &tags, max_len).map(|(ds, _)| ds)
                }
                TaskKind::SequenceClassification => load_sequence_labeled(path, max_len),
            };
            Ok(ds
                .with_context(|| format!("loading {}", path.display()))?
                .with_role(role))
        };
        Ok(RunData {
            source: load(&f.source, Role::Source)?,
            target_train: load(&f.target_train, Role::Target)?,
            target_dev: load(&f.target_dev, Role::Target)?,
            target_test: load(&f.target_test, Role::Target)?,
            source_language: f.source_language.clone(),
            target_language: f.target_language.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: Option<Preset>,
    /// Empty lists fall back to the preset, then to the matching `train` field.
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Outer learning rates swept for MetaXL.
    pub betas: Vec<f64>,
    /// Transformation placements swept for methods that use one.
    pub placements: Vec<usize>,
    pub train: TrainConfig,
    /// `task_kind` and `n_labels` are taken from the data.
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    /// Examples per language in each representation dump.
    pub dump_examples: usize,
    /// Pass source examples through the trained transformation when dumping
    /// representations. Off by default: the deployed model is θ alone.
    pub transform_source_dumps: bool,
    /// Output root; not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "study".into(),
            preset: None,
            methods: Vec::new(),
            seeds: Vec::new(),
            betas: Vec::new(),
            placements: Vec::new(),
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            data: DataConfig {
                synthetic: Some(SyntheticTaskSpec::default()),
                files: None,
            },
            dump_examples: 200,
            transform_source_dumps: false,
            output_dir: None,
        }
    }
}

/// Command-line overrides; each one narrows its axis to a single value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub placement: Option<usize>,
    pub beta: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.preset.is_some() {
            self.preset = o.preset;
        }
        if let Some(m) = o.method {
            self.methods = vec![m];
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(p) = o.placement {
            self.placements = vec![p];
        }
        if let Some(b) = o.beta {
            self.betas = vec![b];
        }
    }

    /// Fills every empty axis and the data-dependent encoder fields, then
    /// validates. The result is what gets hashed.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.validate()?;
        let (task, n_labels) = self.data.task();
        self.encoder.task_kind = task;
        self.encoder.n_labels = n_labels;
        self.encoder.validate()?;
        if let Some(p) = self.preset {
            if self.methods.is_empty() {
                self.methods = p.methods();
            }
            if self.placements.is_empty() {
                self.placements = p.placements(self.encoder.n_layers);
            }
        }
        if self.methods.is_empty() {
            self.methods = vec![self.train.method];
        }
        if self.seeds.is_empty() {
            self.seeds = vec![self.train.seed];
        }
        if self.betas.is_empty() {
            self.betas = vec![self.train.beta];
        }
        if self.placements.is_empty() {
            self.placements = vec![self.train.placement];
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            bail!("name '{}' must be a plain directory name", self.name);
        }
        if self.dump_examples == 0 {
            bail!("dump_examples must be positive");
        }
        for &placement in &self.placements {
            for &beta in &self.betas {
                let cfg = TrainConfig {
                    method: Method::Metaxl,
                    placement,
                    beta,
                    ..self.train.clone()
                };
                cfg.validate(&self.encoder)?;
            }
        }
        self.train.validate(&self.encoder)?;
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), excluding
    /// the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let value = serde_json::to_value(&c).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Root directory: explicit flag, then config, then `$METAXL_OUT`, then `runs`.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}
