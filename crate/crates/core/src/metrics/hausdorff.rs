//! Set-to-set distance between language representation clouds, with
//! cosine distance between points.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// One vector per sequence, taken at the CLS position.
    Sequence,
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSet {
    pub language: String,
    pub level: Level,
    pub vectors: Vec<Vec<f64>>,
}

impl RepresentationSet {
    /// Builds a set, dropping zero vectors. Returns the set and the number
    /// of vectors dropped.
    pub fn new(
        language: impl Into<String>,
        level: Level,
        vectors: Vec<Vec<f64>>,
    ) -> Result<(Self, usize)> {
        let before = vectors.len();
        let vectors: Vec<Vec<f64>> = vectors
            .into_iter()
            .filter(|v| v.iter().any(|&x| x != 0.0))
            .collect();
        let dropped = before - vectors.len();
        let Some(dim) = vectors.first().map(Vec::len) else {
            return contract("representation set is empty");
        };
        if vectors.iter().any(|v| v.len() != dim) {
            return contract("representation vectors differ in dimension");
        }
        Ok((
            RepresentationSet {
                language: language.into(),
                level,
                vectors,
            },
            dropped,
        ))
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// `1 - cos(s, t)`.
pub fn cosine_distance(s: &[f64], t: &[f64]) -> Result<f64> {
    if s.len() != t.len() {
        return contract(format!(
            "cosine distance of {}- and {}-vectors",
            s.len(),
            t.len()
        ));
    }
    let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
    let ss: f64 = s.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|b| b * b).sum();
    if ss == 0.0 || tt == 0.0 {
        return contract("cosine distance of a zero vector");
    }
    // sqrt(ss * tt) is exactly ss when s == t, so self-distance is exactly 0.
    let norm = match (ss * tt).sqrt() {
        n if n.is_finite() && n > 0.0 => n,
        _ => ss.sqrt() * tt.sqrt(),
    };
    Ok((1.0 - dot / norm).clamp(0.0, 2.0))
}

/// For each point of `from`, the distance to its nearest point in `to`.
fn nearest(from: &RepresentationSet, to: &RepresentationSet) -> Result<Vec<f64>> {
    from.vectors
        .iter()
        .map(|s| {
            to.vectors
                .iter()
                .map(|t| cosine_distance(s, t))
                .try_fold(f64::INFINITY, |m, d| d.map(|d| m.min(d)))
        })
        .collect()
}

fn check_pair(s: &RepresentationSet, t: &RepresentationSet) -> Result<()> {
    if s.is_empty() || t.is_empty() {
        return contract("hausdorff of an empty set");
    }
    if s.dim() != t.dim() {
        return contract(format!(
            "hausdorff of {}- and {}-dimensional sets",
            s.dim(),
            t.dim()
        ));
    }
    Ok(())
}

/// The larger of the two directed max-min distances.
pub fn hausdorff(s: &RepresentationSet, t: &RepresentationSet) -> Result<f64> {
    check_pair(s, t)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(max(nearest(s, t)?).max(max(nearest(t, s)?)))
}

/// Average-based variant: the mean of the two directed mean-min distances.
pub fn hausdorff_modified(s: &RepresentationSet, t: &RepresentationSet) -> Result<f64> {
    check_pair(s, t)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(nearest(s, t)?) + mean(nearest(t, s)?)))
}
