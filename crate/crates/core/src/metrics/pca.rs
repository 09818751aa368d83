use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{contract, Result};

/// Projection onto the top two principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub points: Vec<[f64; 2]>,
    /// Share of total variance per component, descending.
    pub explained: [f64; 2],
    /// Unit component vectors; the first nonzero coordinate of each is positive.
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

const SIGN_EPS: f64 = 1e-12;

pub fn pca2(vectors: &[Vec<f64>]) -> Result<Pca2> {
    if vectors.len() < 3 {
        return contract(format!(
            "pca2 needs at least 3 vectors, got {}",
            vectors.len()
        ));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return contract("pca2 needs vectors of one common dimension >= 2");
    }
    let n = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let trace = cov.trace();
    if trace <= 0.0 {
        return contract("pca2: all vectors are identical");
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let component = |k: usize| -> Vec<f64> {
        let mut c: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        if let Some(first) = c.iter().find(|x| x.abs() > SIGN_EPS) {
            if *first < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
        }
        c
    };
    let components = [component(0), component(1)];
    let explained = [0, 1].map(|k| (eig.eigenvalues[order[k]] / trace).clamp(0.0, 1.0));
    let points = (0..n)
        .map(|i| {
            [0, 1].map(|k| {
                centered
                    .row(i)
                    .iter()
                    .zip(&components[k])
                    .map(|(a, b)| a * b)
                    .sum()
            })
        })
        .collect();
    Ok(Pca2 {
        points,
        explained,
        components,
        mean,
    })
}
