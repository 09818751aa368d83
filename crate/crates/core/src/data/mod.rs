//! Labeled corpora: the in-memory dataset types, a synthetic paired-language
//! generator and loaders for CoNLL-style and two-column TSV files.

mod io;
mod synth;

pub use io::{
    load_sequence_labeled, load_token_labeled, parse_sequence_labeled, parse_token_labeled,
    write_sequence_labeled, write_token_labeled, LoadReport, TagSet,
};
pub use synth::{generate_pair, ByteMapping, GeneratedPair, SyntheticTaskSpec};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TokenLabeling,
    SequenceClassification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExampleLabels {
    /// One entry per token id; `None` positions are ignored by the loss.
    Token(Vec<Option<usize>>),
    Sequence(usize),
}

/// One tokenized example: `[CLS] bytes.. [SEP]` plus its labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: ExampleLabels,
    /// Byte length of each word, for examples that came from word-level
    /// annotation. Empty for sequence examples.
    #[serde(default)]
    pub word_lens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskKind,
    pub role: Role,
    pub n_labels: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(
        task: TaskKind,
        role: Role,
        n_labels: usize,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let ds = Dataset {
            task,
            role,
            n_labels,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            match (&ex.labels, self.task) {
                (ExampleLabels::Token(tags), TaskKind::TokenLabeling) => {
                    if tags.len() != ex.tokens.len() {
                        return contract(format!(
                            "example {i}: {} labels for {} tokens",
                            tags.len(),
                            ex.tokens.len()
                        ));
                    }
                    if let Some(bad) = tags.iter().flatten().find(|&&t| t >= self.n_labels) {
                        return contract(format!("example {i}: label {bad} >= {}", self.n_labels));
                    }
                }
                (ExampleLabels::Sequence(l), TaskKind::SequenceClassification) => {
                    if *l >= self.n_labels {
                        return contract(format!("example {i}: label {l} >= {}", self.n_labels));
                    }
                }
                _ => {
                    return contract(format!(
                        "example {i}: labels do not match task {:?}",
                        self.task
                    ))
                }
            }
        }
        Ok(())
    }

    /// Subset by example index, keeping the metadata.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            role: self.role,
            n_labels: self.n_labels,
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Label inventory for BIO token labeling with `n_types` entity types:
/// 0 = O, 2k+1 = B-type_k, 2k+2 = I-type_k.
pub fn bio_label_count(n_types: usize) -> usize {
    1 + 2 * n_types
}
