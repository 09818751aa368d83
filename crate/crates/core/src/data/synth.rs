//! Paired source/target corpora that share labels but differ in surface form.
//!
//! A latent sentence is a sequence of lexicon word indices with labels that
//! depend only on those indices. The source language writes each word with
//! its lexicon bytes; the target language writes the same bytes through a
//! permutation of part of the usable byte range.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bio_label_count, Dataset, Example, ExampleLabels, Role, TaskKind};
use crate::encoder::{CLS, SEP};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub task_kind: TaskKind,
    /// First usable byte value (inclusive, at least 33 so whitespace and
    /// control bytes never appear inside a word).
    pub vocab_low: u16,
    /// One past the last usable byte value.
    pub vocab_high: u16,
    pub n_labels: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Byte budget per example, excluding CLS and SEP.
    pub max_bytes: usize,
    pub entity_rate: f64,
    pub sentiment_token_rate: f64,
    /// Fraction of the usable vocabulary the target language permutes.
    pub shift: f64,
    pub source_n: usize,
    pub target_train_n: usize,
    pub target_dev_n: usize,
    pub target_test_n: usize,
    pub lexicon_size: usize,
    pub max_word_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            task_kind: TaskKind::TokenLabeling,
            vocab_low: 33,
            vocab_high: 127,
            n_labels: bio_label_count(2),
            min_words: 4,
            max_words: 10,
            max_bytes: 30,
            entity_rate: 0.3,
            sentiment_token_rate: 0.3,
            shift: 0.5,
            source_n: 5000,
            target_train_n: 100,
            target_dev_n: 100,
            target_test_n: 500,
            lexicon_size: 64,
            max_word_len: 2,
            seed: 0,
        }
    }
}

/// Byte-level surface map of the target language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteMapping {
    pub vocab_low: u16,
    pub vocab_high: u16,
    /// `(source_byte, target_byte)` for every remapped byte, sorted by source.
    pub remapped: Vec<(u8, u8)>,
}

impl ByteMapping {
    pub fn identity(vocab_low: u16, vocab_high: u16) -> Self {
        ByteMapping {
            vocab_low,
            vocab_high,
            remapped: vec![],
        }
    }

    pub fn apply(&self, byte: u8) -> u8 {
        match self.remapped.binary_search_by_key(&byte, |p| p.0) {
            Ok(i) => self.remapped[i].1,
            Err(_) => byte,
        }
    }

    pub fn usable(&self) -> usize {
        (self.vocab_high - self.vocab_low) as usize
    }

    /// Share of usable bytes written identically in both languages.
    pub fn overlap(&self) -> f64 {
        let fixed = self.remapped.iter().filter(|(s, t)| s == t).count();
        (self.usable() - self.remapped.len() + fixed) as f64 / self.usable() as f64
    }
}

/// Lexicon word roles. Entity words and triggers are per type.
#[derive(Clone, Debug)]
struct Lexicon {
    words: Vec<Vec<u8>>,
    entity: Vec<Vec<usize>>,
    trigger: Vec<usize>,
    ambiguous: Vec<usize>,
    outside: Vec<usize>,
    positive: Vec<usize>,
    negative: Vec<usize>,
}

/// A sentence before surface realization: word indices and their labels.
#[derive(Clone, Debug, PartialEq)]
struct Latent {
    words: Vec<usize>,
    labels: LatentLabels,
}

#[derive(Clone, Debug, PartialEq)]
enum LatentLabels {
    Words(Vec<usize>),
    Sequence(usize),
}

#[derive(Clone, Debug)]
pub struct GeneratedPair {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_dev: Dataset,
    pub target_test: Dataset,
    pub mapping: ByteMapping,
}

const STREAM_LEXICON: u64 = 0;
const STREAM_MAPPING: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_TARGET_TRAIN: u64 = 3;
const STREAM_TARGET_DEV: u64 = 4;
const STREAM_TARGET_TEST: u64 = 5;

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift) {
            return contract(format!("shift {} outside [0, 1]", self.shift));
        }
        if self.vocab_low < 33 || self.vocab_high > 256 || self.vocab_low >= self.vocab_high {
            return contract(format!(
                "usable byte range [{}, {}) must lie within [33, 256)",
                self.vocab_low, self.vocab_high
            ));
        }
        let sizes = [
            self.source_n,
            self.target_train_n,
            self.target_dev_n,
            self.target_test_n,
        ];
        if sizes.contains(&0) {
            return contract("all dataset sizes must be positive");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return contract("need 0 < min_words <= max_words");
        }
        if self.max_word_len == 0 || self.max_bytes < self.max_word_len * 2 {
            return contract("max_bytes too small for the word length");
        }
        for (name, r) in [
            ("entity_rate", self.entity_rate),
            ("sentiment_token_rate", self.sentiment_token_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return contract(format!("{name} {r} outside [0, 1]"));
            }
        }
        match self.task_kind {
            TaskKind::TokenLabeling => {
                if self.n_labels < 3 || self.n_labels.is_multiple_of(2) {
                    return contract(format!(
                        "token labeling needs n_labels = 1 + 2 * types, got {}",
                        self.n_labels
                    ));
                }
            }
            TaskKind::SequenceClassification => {
                if self.n_labels != 2 {
                    return contract("sequence classification is binary (n_labels = 2)");
                }
            }
        }
        let needed = self.lexicon_needed();
        if self.lexicon_size < needed {
            return contract(format!(
                "lexicon_size {} too small for {} labels (need {needed})",
                self.lexicon_size, self.n_labels
            ));
        }
        let v = self.usable();
        let distinct: usize = (1..=self.max_word_len)
            .map(|l| v.saturating_pow(l as u32))
            .fold(0usize, |a, b| a.saturating_add(b));
        if v < self.n_labels * 2 || distinct < self.lexicon_size {
            return contract(format!(
                "usable vocabulary of {v} bytes too small for {} label patterns",
                self.n_labels
            ));
        }
        Ok(())
    }

    fn usable(&self) -> usize {
        (self.vocab_high - self.vocab_low) as usize
    }

    fn n_types(&self) -> usize {
        (self.n_labels - 1) / 2
    }

    /// Minimum lexicon size: per type 4 entity words and a trigger, plus 4
    /// ambiguous and 8 outside words; or 6+6 polar and 8 neutral words.
    fn lexicon_needed(&self) -> usize {
        match self.task_kind {
            TaskKind::TokenLabeling => self.n_types() * 5 + 4 + 8,
            TaskKind::SequenceClassification => 20,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn build_lexicon(&self) -> Lexicon {
        let mut rng = self.rng(STREAM_LEXICON);
        let mut words: Vec<Vec<u8>> = Vec::with_capacity(self.lexicon_size);
        while words.len() < self.lexicon_size {
            let len = rng.random_range(1..=self.max_word_len);
            let w: Vec<u8> = (0..len)
                .map(|_| rng.random_range(self.vocab_low..self.vocab_high) as u8)
                .collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let mut ids: Vec<usize> = (0..self.lexicon_size).collect();
        ids.shuffle(&mut rng);
        let mut take = |n: usize| -> Vec<usize> { ids.drain(..n).collect() };
        match self.task_kind {
            TaskKind::TokenLabeling => {
                let types = self.n_types();
                let spare = self.lexicon_size - self.lexicon_needed();
                // spare words go half to entities, half to outside words
                let per_type = 4 + spare / 2 / types;
                let entity = (0..types).map(|_| take(per_type)).collect();
                let trigger = take(types);
                let ambiguous = take(4);
                let outside = ids.clone();
                Lexicon {
                    words,
                    entity,
                    trigger,
                    ambiguous,
                    outside,
                    positive: vec![],
                    negative: vec![],
                }
            }
            TaskKind::SequenceClassification => {
                let polar = 6 + (self.lexicon_size - 20) / 4;
                let positive = take(polar);
                let negative = take(polar);
                let outside = ids.clone();
                Lexicon {
                    words,
                    entity: vec![],
                    trigger: vec![],
                    ambiguous: vec![],
                    outside,
                    positive,
                    negative,
                }
            }
        }
    }

    /// The target-language byte permutation: a derangement of
    /// `ceil(shift * V)` usable bytes.
    pub fn mapping(&self) -> Result<ByteMapping> {
        let v = self.usable();
        let k = (self.shift * v as f64).ceil() as usize;
        if k == 0 {
            return Ok(ByteMapping::identity(self.vocab_low, self.vocab_high));
        }
        if k == 1 {
            return contract("shift remaps a single byte, which cannot be permuted");
        }
        let mut rng = self.rng(STREAM_MAPPING);
        let mut bytes: Vec<u8> = (self.vocab_low..self.vocab_high).map(|b| b as u8).collect();
        bytes.shuffle(&mut rng);
        bytes.truncate(k);
        // cyclic shift of a shuffled list has no fixed points
        let mut remapped: Vec<(u8, u8)> = (0..k).map(|i| (bytes[i], bytes[(i + 1) % k])).collect();
        remapped.sort_unstable();
        Ok(ByteMapping {
            vocab_low: self.vocab_low,
            vocab_high: self.vocab_high,
            remapped,
        })
    }

    fn sample_latent(&self, lex: &Lexicon, rng: &mut ChaCha8Rng) -> Latent {
        let n_words = rng.random_range(self.min_words..=self.max_words);
        let budget = self.max_bytes;
        let mut used = 0;
        let mut words = Vec::new();
        let pick = |set: &[usize], rng: &mut ChaCha8Rng| set[rng.random_range(0..set.len())];
        match self.task_kind {
            TaskKind::TokenLabeling => {
                let mut labels = Vec::new();
                let fits = |used: usize, w: &[usize]| -> bool {
                    used + w.iter().map(|&i| lex.words[i].len()).sum::<usize>() <= budget
                };
                while words.len() < n_words {
                    let mut chunk: Vec<usize> = Vec::new();
                    let mut chunk_labels: Vec<usize> = Vec::new();
                    if rng.random_bool(self.entity_rate) {
                        let ty = rng.random_range(0..self.n_types());
                        let triggered = rng.random_bool(0.5);
                        if triggered {
                            chunk.push(lex.trigger[ty]);
                            chunk_labels.push(0);
                        }
                        let len = rng.random_range(1..=2);
                        for j in 0..len {
                            let w = if triggered && rng.random_bool(0.5) {
                                pick(&lex.ambiguous, rng)
                            } else {
                                pick(&lex.entity[ty], rng)
                            };
                            chunk.push(w);
                            chunk_labels.push(if j == 0 { 2 * ty + 1 } else { 2 * ty + 2 });
                        }
                    } else if rng.random_bool(0.2) {
                        // without a trigger, ambiguous words are outside any entity
                        chunk.push(pick(&lex.ambiguous, rng));
                        chunk_labels.push(0);
                    } else {
                        chunk.push(pick(&lex.outside, rng));
                        chunk_labels.push(0);
                    }
                    if !fits(used, &chunk) {
                        break;
                    }
                    used += chunk.iter().map(|&i| lex.words[i].len()).sum::<usize>();
                    words.extend(chunk);
                    labels.extend(chunk_labels);
                }
                Latent {
                    words,
                    labels: LatentLabels::Words(labels),
                }
            }
            TaskKind::SequenceClassification => {
                // one separator byte between words
                let cost = |w: usize, first: bool| lex.words[w].len() + usize::from(!first);
                let mut polarity: Vec<Option<bool>> = Vec::new();
                while words.len() < n_words {
                    let (w, p) = if rng.random_bool(self.sentiment_token_rate) {
                        let pos = rng.random_bool(0.5);
                        (
                            pick(if pos { &lex.positive } else { &lex.negative }, rng),
                            Some(pos),
                        )
                    } else {
                        (pick(&lex.outside, rng), None)
                    };
                    if used + cost(w, words.is_empty()) > budget {
                        break;
                    }
                    used += cost(w, words.is_empty());
                    words.push(w);
                    polarity.push(p);
                }
                let score: i64 = polarity
                    .iter()
                    .flatten()
                    .map(|&p| if p { 1 } else { -1 })
                    .sum();
                if score == 0 {
                    // break the tie by rewriting one word as a polar word
                    let pos = rng.random_bool(0.5);
                    let w = pick(if pos { &lex.positive } else { &lex.negative }, rng);
                    let slot = polarity.iter().rposition(Option::is_none).filter(|&i| {
                        let delta = lex.words[w].len() as i64 - lex.words[words[i]].len() as i64;
                        used as i64 + delta <= budget as i64
                    });
                    match slot {
                        Some(i) => {
                            words[i] = w;
                            polarity[i] = Some(pos);
                        }
                        None => {
                            // every word is polar: drop the last one instead
                            words.pop();
                            polarity.pop();
                        }
                    }
                }
                let score: i64 = polarity
                    .iter()
                    .flatten()
                    .map(|&p| if p { 1 } else { -1 })
                    .sum();
                Latent {
                    words,
                    labels: LatentLabels::Sequence(usize::from(score > 0)),
                }
            }
        }
    }

    fn realize(&self, lex: &Lexicon, latent: &Latent, mapping: &ByteMapping) -> Example {
        let surface =
            |w: usize| -> Vec<u8> { lex.words[w].iter().map(|&b| mapping.apply(b)).collect() };
        match &latent.labels {
            LatentLabels::Words(labels) => {
                let mut tokens = vec![CLS];
                let mut tags = vec![None];
                let mut word_lens = Vec::with_capacity(latent.words.len());
                for (&w, &l) in latent.words.iter().zip(labels) {
                    let bytes = surface(w);
                    word_lens.push(bytes.len());
                    for (j, &b) in bytes.iter().enumerate() {
                        tokens.push(b as usize);
                        tags.push((j == 0).then_some(l));
                    }
                }
                tokens.push(SEP);
                tags.push(None);
                Example {
                    tokens,
                    labels: ExampleLabels::Token(tags),
                    word_lens,
                }
            }
            LatentLabels::Sequence(label) => {
                let mut tokens = vec![CLS];
                for (i, &w) in latent.words.iter().enumerate() {
                    if i > 0 {
                        tokens.push(b' ' as usize);
                    }
                    tokens.extend(surface(w).into_iter().map(usize::from));
                }
                tokens.push(SEP);
                Example {
                    tokens,
                    labels: ExampleLabels::Sequence(*label),
                    word_lens: vec![],
                }
            }
        }
    }

    fn sample_dataset(
        &self,
        lex: &Lexicon,
        stream: u64,
        n: usize,
        mapping: &ByteMapping,
        role: Role,
    ) -> Dataset {
        let mut rng = self.rng(stream);
        let examples = (0..n)
            .map(|_| {
                let latent = self.sample_latent(lex, &mut rng);
                self.realize(lex, &latent, mapping)
            })
            .collect();
        Dataset {
            task: self.task_kind,
            role,
            n_labels: self.n_labels,
            examples,
        }
    }
}

/// Samples the source corpus and the three target splits.
pub fn generate_pair(spec: &SyntheticTaskSpec) -> Result<GeneratedPair> {
    spec.validate()?;
    let lex = spec.build_lexicon();
    let mapping = spec.mapping()?;
    let identity = ByteMapping::identity(spec.vocab_low, spec.vocab_high);
    Ok(GeneratedPair {
        source: spec.sample_dataset(&lex, STREAM_SOURCE, spec.source_n, &identity, Role::Source),
        target_train: spec.sample_dataset(
            &lex,
            STREAM_TARGET_TRAIN,
            spec.target_train_n,
            &mapping,
            Role::Target,
        ),
        target_dev: spec.sample_dataset(
            &lex,
            STREAM_TARGET_DEV,
            spec.target_dev_n,
            &mapping,
            Role::Target,
        ),
        target_test: spec.sample_dataset(
            &lex,
            STREAM_TARGET_TEST,
            spec.target_test_n,
            &mapping,
            Role::Target,
        ),
        mapping,
    })
}
