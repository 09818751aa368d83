use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{shape_err, Tensor};
use crate::error::{contract, Result};

/// Named tensors keyed by dot-separated path, iterated lexicographically.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// The graph-side view of a [`ParamSet`].
pub type VarMap<'g> = BTreeMap<String, Var<'g>>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(t) => Ok(t),
            None => contract(format!("no parameter named '{name}'")),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Registers every tensor in `graph` as a differentiable leaf.
    pub fn to_vars<'g>(&self, graph: &'g Graph) -> VarMap<'g> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect()
    }

    pub fn to_constants<'g>(&self, graph: &'g Graph) -> VarMap<'g> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect()
    }

    /// Snapshot of the current values of a [`VarMap`].
    pub fn from_vars(vars: &VarMap<'_>) -> ParamSet {
        ParamSet {
            tensors: vars
                .iter()
                .map(|(k, v)| (k.clone(), (*v.value()).clone()))
                .collect(),
        }
    }

    /// `self + scale * other`, matched by name.
    pub fn axpy(&self, scale: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_same_layout(other)?;
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.axpy(scale, &other.tensors[k])?)))
            .collect::<Result<_>>()?;
        Ok(ParamSet { tensors })
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .tensors
            .iter()
            .map(|(k, v)| {
                v.data()
                    .iter()
                    .zip(other.tensors[k].data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sq_norm).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn scaled(&self, c: f64) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x * c)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return contract(format!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for (k, v) in &self.tensors {
            match other.tensors.get(k) {
                None => return contract(format!("parameter '{k}' missing from other set")),
                Some(o) if o.shape() != v.shape() => {
                    return Err(shape_err("param_layout", v.shape(), o.shape()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Gradients of `loss` with respect to every entry of `params`, by name.
pub fn grad<'g>(loss: Var<'g>, params: &VarMap<'g>, create_graph: bool) -> Result<VarMap<'g>> {
    let vars: Vec<Var<'g>> = params.values().copied().collect();
    let grads = loss.graph().grad(loss, &vars, create_graph)?;
    Ok(params.keys().cloned().zip(grads).collect())
}

pub fn fetch<'g>(vars: &VarMap<'g>, name: &str) -> Result<Var<'g>> {
    match vars.get(name) {
        Some(v) => Ok(*v),
        None => contract(format!("no parameter named '{name}'")),
    }
}
