//! Span-level F1 over BIO label ids (0 = O, 2k+1 = B-k, 2k+2 = I-k) and
//! positive-class F1 for binary classification.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrfScore {
            precision,
            recall,
            f1,
        }
    }
}

/// An entity span: type index and inclusive token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub kind: usize,
    pub start: usize,
    pub end: usize,
}

/// Spans of one BIO sequence. An `I-k` that does not continue a `k` span
/// opens a new one, as conlleval does.
pub fn bio_spans(labels: &[usize]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &l) in labels.iter().enumerate() {
        let (is_begin, kind) = match l {
            0 => {
                spans.extend(open.take());
                continue;
            }
            l if l % 2 == 1 => (true, (l - 1) / 2),
            l => (false, (l - 2) / 2),
        };
        match &mut open {
            Some(s) if !is_begin && s.kind == kind => s.end = i,
            _ => {
                spans.extend(open.take());
                open = Some(Span {
                    kind,
                    start: i,
                    end: i,
                });
            }
        }
    }
    spans.extend(open);
    spans
}

/// Corpus-level span precision, recall and F1; a span counts only if its
/// type, start and end all match.
pub fn span_f1(gold: &[Vec<usize>], predicted: &[Vec<usize>]) -> Result<PrfScore> {
    if gold.len() != predicted.len() {
        return contract(format!(
            "{} gold sequences vs {} predicted",
            gold.len(),
            predicted.len()
        ));
    }
    let (mut correct, mut n_pred, mut n_gold) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return contract(format!(
                "sequence {i}: {} gold tags vs {} predicted",
                g.len(),
                p.len()
            ));
        }
        let gs: BTreeSet<Span> = bio_spans(g).into_iter().collect();
        let ps = bio_spans(p);
        n_gold += gs.len();
        n_pred += ps.len();
        correct += ps.iter().filter(|s| gs.contains(s)).count();
    }
    Ok(PrfScore::from_counts(correct, n_pred, n_gold))
}

/// Precision, recall and F1 of the positive class (label 1).
pub fn binary_prf(gold: &[usize], predicted: &[usize]) -> PrfScore {
    let tp = gold
        .iter()
        .zip(predicted)
        .filter(|(&g, &p)| g == 1 && p == 1)
        .count();
    let n_pred = predicted.iter().filter(|&&p| p == 1).count();
    let n_gold = gold.iter().filter(|&&g| g == 1).count();
    PrfScore::from_counts(tp, n_pred, n_gold)
}

pub fn binary_f1(gold: &[usize], predicted: &[usize]) -> f64 {
    binary_prf(gold, predicted).f1
}
