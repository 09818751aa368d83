//! CoNLL-style and two-column TSV corpora.
//!
//! Files are read as raw bytes: tokens are byte-tokenized directly, so any
//! byte other than tab, CR and LF survives a load/write round trip.

use std::path::Path;

use super::{Dataset, Example, ExampleLabels, Role, TaskKind};
use crate::encoder::{tokenize, CLS, SEP};
use crate::error::{contract, Error, Result};

/// BIO tag inventory: `O`, then `B-t`/`I-t` for each type `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    pub types: Vec<String>,
}

const DEFAULT_TYPES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];

impl TagSet {
    pub fn new(types: Vec<String>) -> Self {
        TagSet { types }
    }

    /// The first `n` of PER, LOC, ORG, MISC, then T4, T5, ...
    pub fn standard(n_types: usize) -> Self {
        TagSet {
            types: (0..n_types)
                .map(|i| {
                    DEFAULT_TYPES
                        .get(i)
                        .map_or_else(|| format!("T{i}"), |s| s.to_string())
                })
                .collect(),
        }
    }

    pub fn n_labels(&self) -> usize {
        1 + 2 * self.types.len()
    }

    pub fn tag(&self, label: usize) -> String {
        match label {
            0 => "O".to_string(),
            l if l % 2 == 1 => format!("B-{}", self.types[(l - 1) / 2]),
            l => format!("I-{}", self.types[(l - 2) / 2]),
        }
    }

    pub fn label(&self, tag: &str) -> Option<usize> {
        if tag == "O" {
            return Some(0);
        }
        let (prefix, ty) = tag.split_once('-')?;
        let k = self.types.iter().position(|t| t == ty)?;
        match prefix {
            "B" => Some(2 * k + 1),
            "I" => Some(2 * k + 2),
            _ => None,
        }
    }

    pub fn inventory(&self) -> Vec<String> {
        (0..self.n_labels()).map(|l| self.tag(l)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// `I-X` tags that did not continue an `X` span and were rewritten as `B-X`.
    pub bio_repairs: usize,
    pub truncated_examples: usize,
}

fn lines(bytes: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(move |_| !bytes.is_empty())
}

pub fn load_token_labeled(
    path: &Path,
    tags: &TagSet,
    max_len: usize,
) -> Result<(Dataset, LoadReport)> {
    let bytes = std::fs::read(path)?;
    parse_token_labeled(&bytes, tags, max_len)
}

pub fn parse_token_labeled(
    bytes: &[u8],
    tags: &TagSet,
    max_len: usize,
) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();
    let mut examples = Vec::new();
    let mut words: Vec<(Vec<u8>, usize)> = Vec::new();
    let mut flush = |words: &mut Vec<(Vec<u8>, usize)>, report: &mut LoadReport| {
        if words.is_empty() {
            return;
        }
        let budget = max_len.saturating_sub(2);
        let mut tokens = vec![CLS];
        let mut labels = vec![None];
        let mut word_lens = Vec::new();
        let mut truncated = false;
        for (w, l) in words.iter() {
            let room = budget - (tokens.len() - 1);
            let keep = w.len().min(room);
            if keep == 0 {
                truncated = true;
                break;
            }
            for (j, &b) in w[..keep].iter().enumerate() {
                tokens.push(b as usize);
                labels.push((j == 0).then_some(*l));
            }
            word_lens.push(keep);
            if keep < w.len() {
                truncated = true;
                break;
            }
        }
        report.truncated_examples += usize::from(truncated);
        tokens.push(SEP);
        labels.push(None);
        examples.push(Example {
            tokens,
            labels: ExampleLabels::Token(labels),
            word_lens,
        });
        words.clear();
    };

    for (line_no, line) in lines(bytes) {
        if line.is_empty() {
            flush(&mut words, &mut report);
            continue;
        }
        let Some(tab) = line.iter().position(|&b| b == b'\t') else {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected 'token<TAB>tag'".into(),
            });
        };
        let (word, tag) = (&line[..tab], &line[tab + 1..]);
        if word.is_empty() || tag.is_empty() || tag.contains(&b'\t') {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected exactly one non-empty token and tag".into(),
            });
        }
        let tag = std::str::from_utf8(tag).map_err(|_| Error::Parse {
            line: line_no,
            msg: "tag is not valid UTF-8".into(),
        })?;
        let Some(mut label) = tags.label(tag) else {
            return contract(format!(
                "line {line_no}: unknown tag '{tag}' (known: {})",
                tags.inventory().join(", ")
            ));
        };
        if label > 0 && label % 2 == 0 {
            let prev = words.last().map(|w| w.1);
            let continues = prev.is_some_and(|p| p == label || p == label - 1);
            if !continues {
                label -= 1;
                report.bio_repairs += 1;
            }
        }
        words.push((word.to_vec(), label));
    }
    flush(&mut words, &mut report);
    if examples.is_empty() {
        return contract("empty dataset");
    }
    let ds = Dataset::new(
        TaskKind::TokenLabeling,
        Role::Target,
        tags.n_labels(),
        examples,
    )?;
    Ok((ds, report))
}

/// CoNLL-style bytes for a token-labeled dataset. Word boundaries come from
/// each example's `word_lens`; examples without them write one byte per word.
pub fn write_token_labeled(ds: &Dataset, tags: &TagSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        let ExampleLabels::Token(labels) = &ex.labels else {
            return contract("write_token_labeled needs token labels");
        };
        let body = &ex.tokens[1..ex.tokens.len().saturating_sub(1)];
        let body_labels = &labels[1..labels.len().saturating_sub(1)];
        let lens: Vec<usize> = if ex.word_lens.is_empty() {
            vec![1; body.len()]
        } else {
            ex.word_lens.clone()
        };
        if i > 0 {
            out.push(b'\n');
        }
        let mut at = 0;
        for len in lens {
            for &t in &body[at..at + len] {
                if t > 255 {
                    return contract(format!("example {i}: special token inside text"));
                }
                out.push(t as u8);
            }
            let label = body_labels[at].ok_or_else(|| {
                Error::Contract(format!("example {i}: word at byte {at} has no label"))
            })?;
            out.push(b'\t');
            out.extend_from_slice(tags.tag(label).as_bytes());
            out.push(b'\n');
            at += len;
        }
    }
    Ok(out)
}

pub fn load_sequence_labeled(path: &Path, max_len: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_sequence_labeled(&bytes, max_len)
}

pub fn parse_sequence_labeled(bytes: &[u8], max_len: usize) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (line_no, line) in lines(bytes) {
        if line.is_empty() {
            continue;
        }
        let Some(tab) = line.iter().position(|&b| b == b'\t') else {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected 'label<TAB>text'".into(),
            });
        };
        let label: usize = std::str::from_utf8(&line[..tab])
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!(
                    "label '{}' is not an integer",
                    String::from_utf8_lossy(&line[..tab])
                ),
            })?;
        if label > 1 {
            return contract(format!("line {line_no}: label {label} not in {{0, 1}}"));
        }
        examples.push(Example {
            tokens: tokenize(&line[tab + 1..], max_len),
            labels: ExampleLabels::Sequence(label),
            word_lens: vec![],
        });
    }
    if examples.is_empty() {
        return contract("empty dataset");
    }
    Dataset::new(TaskKind::SequenceClassification, Role::Target, 2, examples)
}

pub fn write_sequence_labeled(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        let ExampleLabels::Sequence(label) = ex.labels else {
            return contract("write_sequence_labeled needs sequence labels");
        };
        out.extend_from_slice(label.to_string().as_bytes());
        out.push(b'\t');
        for &t in &ex.tokens[1..ex.tokens.len().saturating_sub(1)] {
            if t > 255 {
                return contract(format!("example {i}: special token inside text"));
            }
            out.push(t as u8);
        }
        out.push(b'\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags() -> TagSet {
        TagSet::standard(2)
    }

    #[test]
    fn two_sentences() {
        let f = b"John\tB-PER\nlives\tO\n\nin\tO\nParis\tB-LOC\n";
        let (ds, report) = parse_token_labeled(f, &tags(), 64).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(report.bio_repairs, 0);
        let ExampleLabels::Token(l) = &ds.examples[0].labels else {
            panic!()
        };
        // CLS, J(B-PER) o h n, l(O) i v e s, SEP
        assert_eq!(l[1], Some(1));
        assert_eq!(l[2], None);
        assert_eq!(l[5], Some(0));
        assert_eq!(ds.examples[0].word_lens, vec![4, 5]);
    }

    #[test]
    fn bio_repair_cases() {
        type Case<'a> = (&'a [u8], usize, Vec<Option<usize>>);
        let cases: &[Case] = &[
            // dangling I at sentence start
            (b"a\tI-PER\n", 1, vec![Some(1)]),
            // I after O
            (b"a\tO\nb\tI-PER\n", 1, vec![Some(0), Some(1)]),
            // I after a different type
            (b"a\tB-LOC\nb\tI-PER\n", 1, vec![Some(3), Some(1)]),
            // valid continuation, no repair
            (
                b"a\tB-PER\nb\tI-PER\nc\tI-PER\n",
                0,
                vec![Some(1), Some(2), Some(2)],
            ),
            // I after a repaired I continues it
            (b"a\tI-LOC\nb\tI-LOC\n", 1, vec![Some(3), Some(4)]),
        ];
        for (f, repairs, expect) in cases {
            let (ds, report) = parse_token_labeled(f, &tags(), 64).unwrap();
            assert_eq!(
                report.bio_repairs,
                *repairs,
                "{}",
                String::from_utf8_lossy(f)
            );
            let ExampleLabels::Token(l) = &ds.examples[0].labels else {
                panic!()
            };
            let got: Vec<Option<usize>> = l[1..l.len() - 1].to_vec();
            assert_eq!(&got, expect);
        }
    }

    #[test]
    fn token_file_errors() {
        assert!(matches!(
            parse_token_labeled(b"", &tags(), 64),
            Err(Error::Contract(m)) if m == "empty dataset"
        ));
        assert!(matches!(
            parse_token_labeled(b"a\tO\nnotab\n", &tags(), 64),
            Err(Error::Parse { line: 2, .. })
        ));
        match parse_token_labeled(b"a\tB-XYZ\n", &tags(), 64) {
            Err(Error::Contract(m)) => assert!(m.contains("B-LOC") && m.contains("XYZ")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sequence_file_contract() {
        let ds = parse_sequence_labeled(b"1\tgood product\n", 64).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.examples[0].labels, ExampleLabels::Sequence(1));
        assert_eq!(ds.examples[0].tokens, tokenize(b"good product", 64));

        let ds = parse_sequence_labeled(b"0\ta\tb\tc\n", 64).unwrap();
        assert_eq!(ds.examples[0].tokens, tokenize(b"a\tb\tc", 64));

        assert!(matches!(
            parse_sequence_labeled(b"1\tok\nx\tbad\n", 64),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_sequence_labeled(b"", 64).is_err());
    }

    #[test]
    fn crlf_matches_lf() {
        let lf = parse_sequence_labeled(b"1\tgood\n0\tbad\n", 64).unwrap();
        let crlf = parse_sequence_labeled(b"1\tgood\r\n0\tbad\r\n", 64).unwrap();
        assert_eq!(lf, crlf);
        let lf = parse_token_labeled(b"a\tB-PER\nb\tO\n\nc\tO\n", &tags(), 64).unwrap();
        let crlf = parse_token_labeled(b"a\tB-PER\r\nb\tO\r\n\r\nc\tO\r\n", &tags(), 64).unwrap();
        assert_eq!(lf, crlf);
    }

    #[test]
    fn write_after_load_normalizes() {
        let f = b"ab\tI-PER\ncd\tI-PER\r\n\r\n\r\ne\tO\n";
        let (ds, _) = parse_token_labeled(f, &tags(), 64).unwrap();
        let out = write_token_labeled(&ds, &tags()).unwrap();
        assert_eq!(out, b"ab\tB-PER\ncd\tI-PER\n\ne\tO\n");
    }
}
