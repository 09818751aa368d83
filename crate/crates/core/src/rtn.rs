//! The representation transformation network: a bottlenecked two-layer
//! feed-forward map `w2ᵀ relu(w1ᵀ h + b1) + b2`, applied position-wise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fetch, ParamSet, Tensor, Var, VarMap};
use crate::error::{contract, Result};

/// `w1: d×r`, `b1: r`, `w2: r×d`, `b2: d`, with `r < d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl RtnParams {
    /// Uniform `w1` in ±1/√d and `w2` in ±1/√r, zero biases.
    pub fn init(d: usize, r: usize, seed: u64) -> Result<Self> {
        if r == 0 || r >= d {
            return contract(format!("bottleneck width r={r} must satisfy 0 < r < d={d}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::matrix(rows, cols, data).expect("shape and data agree")
        };
        let w1 = draw(d, r, 1.0 / (d as f64).sqrt());
        let w2 = draw(r, d, 1.0 / (r as f64).sqrt());
        Ok(RtnParams {
            w1,
            b1: Tensor::zeros(&[r]),
            w2,
            b2: Tensor::zeros(&[d]),
        })
    }

    pub fn zeros(d: usize, r: usize) -> Self {
        RtnParams {
            w1: Tensor::zeros(&[d, r]),
            b1: Tensor::zeros(&[r]),
            w2: Tensor::zeros(&[r, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn d(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn r(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn to_param_set(&self) -> ParamSet {
        [
            ("b1", &self.b1),
            ("b2", &self.b2),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
    }

    pub fn from_param_set(p: &ParamSet) -> Result<Self> {
        let out = RtnParams {
            w1: p.get("w1")?.clone(),
            b1: p.get("b1")?.clone(),
            w2: p.get("w2")?.clone(),
            b2: p.get("b2")?.clone(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = (self.d(), self.r());
        let ok = self.w1.rank() == 2
            && self.w2.shape() == [r, d]
            && self.b1.shape() == [r]
            && self.b2.shape() == [d];
        if !ok {
            return contract(format!(
                "inconsistent transformation shapes: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            ));
        }
        Ok(())
    }
}

/// Applies the transformation to every position of `h` (`[.., d]`).
///
/// `phi` holds `w1`, `b1`, `w2`, `b2`. With `residual` the output is
/// `h + g(h)`; otherwise it replaces `h`.
pub fn rtn_forward<'g>(phi: &VarMap<'g>, h: Var<'g>, residual: bool) -> Result<Var<'g>> {
    let w1 = fetch(phi, "w1")?;
    let d = w1.shape()[0];
    let hs = h.shape();
    if hs.last() != Some(&d) {
        return Err(crate::Error::Shape {
            op: "rtn_forward",
            lhs: hs,
            rhs: w1.shape(),
        });
    }
    let out = h
        .matmul(w1)?
        .add(fetch(phi, "b1")?)?
        .relu()?
        .matmul(fetch(phi, "w2")?)?
        .add(fetch(phi, "b2")?)?;
    if residual {
        h.add(out)
    } else {
        Ok(out)
    }
}
