//! Evaluation metrics and representation-gap analysis.

mod f1;
mod hausdorff;
mod pca;

pub use f1::{binary_f1, binary_prf, bio_spans, span_f1, PrfScore, Span};
pub use hausdorff::{cosine_distance, hausdorff, hausdorff_modified, Level, RepresentationSet};
pub use pca::{pca2, Pca2};

use crate::error::{contract, Result};

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return contract(format!(
            "pearson needs two equal-length series of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return contract("pearson: a series has zero variance");
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
