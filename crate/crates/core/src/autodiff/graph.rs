//! Computation record and the differentiable handle [`Var`].
//!
//! Every primitive's backward rule is written in terms of other recorded
//! primitives, so when `create_graph` is set the backward pass is itself
//! recorded and can be differentiated again.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{self, broadcast_kind, shape_err, Broadcast, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Add {
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Sub {
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Relu {
        x: usize,
        mask: Rc<Tensor>,
    },
    Softmax {
        x: usize,
    },
    SumLast {
        x: usize,
    },
    ExpandLast {
        x: usize,
    },
    SumLeading {
        x: usize,
        full: Vec<usize>,
    },
    ExpandLeading {
        x: usize,
        suffix: Vec<usize>,
    },
    Scale {
        x: usize,
        c: f64,
    },
    AddScalar {
        x: usize,
    },
    Rsqrt {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape {
        x: usize,
        from: Vec<usize>,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        full: usize,
    },
    Pad {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Gather {
        table: usize,
        ids: Rc<[usize]>,
        rows: usize,
    },
    Scatter {
        x: usize,
        ids: Rc<[usize]>,
        ids_shape: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        onehot: Rc<Tensor>,
        weights: Rc<Tensor>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Add { a, b, .. } | Sub { a, b, .. } | Mul { a, b, .. } | MatMul { a, b } => {
                vec![*a, *b]
            }
            Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            Relu { x, .. }
            | Softmax { x }
            | SumLast { x }
            | ExpandLast { x }
            | SumLeading { x, .. }
            | ExpandLeading { x, .. }
            | Scale { x, .. }
            | AddScalar { x }
            | Rsqrt { x }
            | Permute { x, .. }
            | Reshape { x, .. }
            | Slice { x, .. }
            | Pad { x, .. }
            | Scatter { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Option<Op>,
}

/// An append-only record of primitive applications for one training step.
///
/// Node ids are assigned in creation order, so the record is always in
/// topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor living in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(Rc::new(t), true)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(Rc::new(t), false)
    }

    fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of a scalar `loss` with respect to each of `wrt`.
    ///
    /// Tensors in `wrt` that `loss` does not depend on get exact zeros. With
    /// `create_graph` the returned gradients are recorded nodes and can be
    /// differentiated again; otherwise they are constants.
    pub fn grad<'g>(
        &'g self,
        loss: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>> {
        if loss.value().numel() != 1 {
            return contract(format!(
                "grad() needs a scalar loss, got shape {:?}",
                loss.shape()
            ));
        }
        let end = loss.id + 1;
        // needed[i]: node i lies on a recorded path to some tensor in `wrt`.
        let mut needed = vec![false; end];
        let mut is_target = vec![false; end];
        for w in wrt {
            if w.id < end {
                is_target[w.id] = true;
            }
        }
        let ops: Vec<Option<Op>> = {
            let nodes = self.nodes.borrow();
            for i in 0..end {
                needed[i] = is_target[i]
                    || nodes[i]
                        .op
                        .as_ref()
                        .is_some_and(|op| op.inputs().iter().any(|&j| needed[j]));
            }
            nodes[..end].iter().map(|n| n.op.clone()).collect()
        };

        let mut grads: Vec<Option<Var<'g>>> = vec![None; end];
        if needed[loss.id] {
            grads[loss.id] = Some(self.constant(Tensor::full(loss.shape().as_slice(), 1.0)));
        }
        for id in (0..end).rev() {
            let Some(op) = &ops[id] else { continue };
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            for (input, gi) in self.backward(id, op, g, create_graph, &needed)? {
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc.add(gi)?,
                    None => gi,
                });
            }
        }
        wrt.iter()
            .map(|w| {
                Ok(match w.id < end {
                    true => grads[w.id],
                    false => None,
                }
                .unwrap_or_else(|| self.constant(Tensor::zeros(&w.shape()))))
            })
            .collect()
    }

    fn backward<'g>(
        &'g self,
        out: usize,
        op: &Op,
        g: Var<'g>,
        create_graph: bool,
        needed: &[bool],
    ) -> Result<Vec<(usize, Var<'g>)>> {
        // Without create_graph, saved tensors enter the backward pass as
        // constants so nothing new is recorded.
        let inp = |id: usize| -> Var<'g> {
            if create_graph {
                self.var(id)
            } else {
                self.constant((*self.value_of(id)).clone())
            }
        };
        let want = |id: usize| needed[id];
        let mut out_grads = Vec::with_capacity(2);
        use Op::*;
        match op {
            Add { a, b, bcast } | Sub { a, b, bcast } => {
                let neg = matches!(op, Sub { .. });
                if want(*a) {
                    out_grads.push((*a, g));
                }
                if want(*b) {
                    let mut gb = match bcast {
                        Broadcast::Same => g,
                        Broadcast::RightSuffix => g.sum_to(self.value_of(*b).shape())?,
                    };
                    if neg {
                        gb = gb.scale(-1.0)?;
                    }
                    out_grads.push((*b, gb));
                }
            }
            Mul { a, b, bcast } => {
                if want(*a) {
                    out_grads.push((*a, g.mul(inp(*b))?));
                }
                if want(*b) {
                    let gb = g.mul(inp(*a))?;
                    let gb = match bcast {
                        Broadcast::Same => gb,
                        Broadcast::RightSuffix => gb.sum_to(self.value_of(*b).shape())?,
                    };
                    out_grads.push((*b, gb));
                }
            }
            MatMul { a, b } => {
                if want(*a) {
                    out_grads.push((*a, g.matmul(inp(*b).transpose()?)?));
                }
                if want(*b) {
                    let bshape = self.value_of(*b).shape().to_vec();
                    let gb = if bshape.len() == 2 {
                        let ash = self.value_of(*a).shape().to_vec();
                        let k = ash[ash.len() - 1];
                        let rows: usize = ash[..ash.len() - 1].iter().product();
                        let a2 = inp(*a).reshape(&[rows, k])?;
                        let g2 = g.reshape(&[rows, bshape[1]])?;
                        a2.transpose()?.matmul(g2)?
                    } else {
                        inp(*a).transpose()?.matmul(g)?
                    };
                    out_grads.push((*b, gb));
                }
            }
            Relu { x, mask } => {
                let m = self.constant((**mask).clone());
                out_grads.push((*x, g.mul(m)?));
            }
            Softmax { x } => {
                let y = inp(out);
                let n = *y.shape().last().unwrap_or(&1);
                let dot = g.mul(y)?.sum_last()?.expand_last(n)?;
                out_grads.push((*x, y.mul(g.sub(dot)?)?));
            }
            SumLast { x } => {
                let n = *self.value_of(*x).shape().last().unwrap_or(&1);
                out_grads.push((*x, g.expand_last(n)?));
            }
            ExpandLast { x } => out_grads.push((*x, g.sum_last()?)),
            SumLeading { x, full } => out_grads.push((*x, g.expand_to(full)?)),
            ExpandLeading { x, suffix } => out_grads.push((*x, g.sum_to(suffix)?)),
            Scale { x, c } => out_grads.push((*x, g.scale(*c)?)),
            AddScalar { x } => out_grads.push((*x, g)),
            Rsqrt { x } => {
                let y = inp(out);
                let dy = y.mul(y)?.mul(y)?.scale(-0.5)?;
                out_grads.push((*x, g.mul(dy)?));
            }
            Permute { x, axes } => {
                out_grads.push((*x, g.permute(&tensor::inverse_permutation(axes))?));
            }
            Reshape { x, from } => out_grads.push((*x, g.reshape(from)?)),
            Concat { parts, axis } => {
                let mut start = 0;
                for &(id, len) in parts {
                    if want(id) {
                        out_grads.push((id, g.slice(*axis, start, len)?));
                    }
                    start += len;
                }
            }
            Slice {
                x,
                axis,
                start,
                full,
            } => out_grads.push((*x, g.pad(*axis, *start, *full)?)),
            Pad {
                x,
                axis,
                start,
                len,
            } => out_grads.push((*x, g.slice(*axis, *start, *len)?)),
            Gather { table, ids, rows } => {
                out_grads.push((*table, g.scatter_rows(ids.clone(), *rows)?));
            }
            Scatter { x, ids, ids_shape } => {
                out_grads.push((*x, g.gather_rows(ids.clone(), ids_shape)?));
            }
            CrossEntropy {
                logits,
                onehot,
                weights,
            } => {
                let p = inp(*logits).softmax()?;
                let diff = p.sub(self.constant((**onehot).clone()))?;
                let weighted = diff.mul(self.constant((**weights).clone()))?;
                out_grads.push((*logits, weighted.mul(g)?));
            }
        }
        Ok(out_grads)
    }
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the record.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf(self.value(), false)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn elementwise(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let bcast = broadcast_kind(name, a.shape(), b.shape())?;
        let v = tensor::zip_broadcast(&a, &b, f);
        self.graph.record(name, v, make(self.id, other.id, bcast))
    }

    fn is_suffix_of(&self, other: &Var<'g>) -> bool {
        let (s, o) = (self.shape(), other.shape());
        s.len() < o.len() && o.ends_with(&s)
    }

    /// Elementwise sum; one operand may be a trailing-suffix (bias) shape.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        if self.is_suffix_of(&other) {
            return other.add(self);
        }
        self.elementwise(
            other,
            "add",
            |x, y| x + y,
            |a, b, bcast| Op::Add { a, b, bcast },
        )
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        if self.is_suffix_of(&other) {
            return other.sub(self)?.scale(-1.0);
        }
        self.elementwise(
            other,
            "sub",
            |x, y| x - y,
            |a, b, bcast| Op::Sub { a, b, bcast },
        )
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        if self.is_suffix_of(&other) {
            return other.mul(self);
        }
        self.elementwise(
            other,
            "mul",
            |x, y| x * y,
            |a, b, bcast| Op::Mul { a, b, bcast },
        )
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = tensor::matmul(&self.value(), &other.value())?;
        self.graph.record(
            "matmul",
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn relu(self) -> Result<Var<'g>> {
        let x = self.value();
        let mask = Rc::new(x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        self.graph
            .record("relu", x.map(|v| v.max(0.0)), Op::Relu { x: self.id, mask })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let v = tensor::softmax_last(&self.value());
        self.graph.record("softmax", v, Op::Softmax { x: self.id })
    }

    /// Sum over the last axis, which is kept with size 1.
    pub fn sum_last(self) -> Result<Var<'g>> {
        let v = tensor::sum_last(&self.value());
        self.graph.record("sum_last", v, Op::SumLast { x: self.id })
    }

    pub fn expand_last(self, n: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().last() != Some(&1) {
            return Err(shape_err("expand_last", x.shape(), &[n]));
        }
        self.graph.record(
            "expand_last",
            tensor::expand_last(&x, n),
            Op::ExpandLast { x: self.id },
        )
    }

    /// Sums leading axes away so the result has shape `suffix`.
    pub fn sum_to(self, suffix: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if !x.shape().ends_with(suffix) {
            return Err(shape_err("sum_to", x.shape(), suffix));
        }
        let v = tensor::sum_leading(&x, suffix);
        let full = x.shape().to_vec();
        self.graph
            .record("sum_to", v, Op::SumLeading { x: self.id, full })
    }

    /// Tiles over new leading axes; `shape` must end with this tensor's shape.
    pub fn expand_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if !shape.ends_with(x.shape()) {
            return Err(shape_err("expand_to", x.shape(), shape));
        }
        let suffix = x.shape().to_vec();
        self.graph.record(
            "expand_to",
            tensor::expand_leading(&x, shape),
            Op::ExpandLeading { x: self.id, suffix },
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'g>> {
        self.sum_to(&[])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().numel().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x * c);
        self.graph.record("scale", v, Op::Scale { x: self.id, c })
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x + c);
        self.graph
            .record("add_scalar", v, Op::AddScalar { x: self.id })
    }

    pub fn rsqrt(self) -> Result<Var<'g>> {
        let v = self.value().map(|x| 1.0 / x.sqrt());
        self.graph.record("rsqrt", v, Op::Rsqrt { x: self.id })
    }

    /// Inner product of two same-shape tensors, as a scalar.
    pub fn dot(self, other: Var<'g>) -> Result<Var<'g>> {
        if self.shape() != other.shape() {
            return Err(shape_err("dot", &self.shape(), &other.shape()));
        }
        self.mul(other)?.sum()
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let v = tensor::permute(&self.value(), axes)?;
        self.graph.record(
            "permute",
            v,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(shape_err("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let v = x.reshaped(shape)?;
        let from = x.shape().to_vec();
        self.graph
            .record("reshape", v, Op::Reshape { x: self.id, from })
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = tensor::concat_axis(&refs, axis)?;
        let meta = parts
            .iter()
            .zip(&values)
            .map(|(p, t)| (p.id, t.shape()[axis]))
            .collect();
        first
            .graph
            .record("concat", v, Op::Concat { parts: meta, axis })
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let v = tensor::slice_axis(&x, axis, start, len)?;
        let full = x.shape()[axis];
        self.graph.record(
            "slice",
            v,
            Op::Slice {
                x: self.id,
                axis,
                start,
                full,
            },
        )
    }

    /// Zero-pads along `axis` to length `full`, placing this tensor at `start`.
    pub fn pad(self, axis: usize, start: usize, full: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() || start + x.shape()[axis] > full {
            return Err(shape_err("pad", x.shape(), &[axis, start, full]));
        }
        let len = x.shape()[axis];
        let v = tensor::pad_axis(&x, axis, start, full);
        self.graph.record(
            "pad",
            v,
            Op::Pad {
                x: self.id,
                axis,
                start,
                len,
            },
        )
    }

    /// Embedding lookup: rows of this `[rows, d]` table at `ids`.
    pub fn embedding(self, ids: &[usize], ids_shape: &[usize]) -> Result<Var<'g>> {
        if ids.len() != ids_shape.iter().product::<usize>() {
            return Err(shape_err("embedding_lookup", &[ids.len()], ids_shape));
        }
        self.gather_rows(Rc::from(ids), ids_shape)
    }

    fn gather_rows(self, ids: Rc<[usize]>, ids_shape: &[usize]) -> Result<Var<'g>> {
        let table = self.value();
        let v = tensor::gather_rows(&table, &ids, ids_shape)?;
        let rows = table.shape()[0];
        self.graph.record(
            "embedding_lookup",
            v,
            Op::Gather {
                table: self.id,
                ids,
                rows,
            },
        )
    }

    fn scatter_rows(self, ids: Rc<[usize]>, rows: usize) -> Result<Var<'g>> {
        let x = self.value();
        let v = tensor::scatter_rows(&x, &ids, rows);
        let ids_shape = x.shape()[..x.rank() - 1].to_vec();
        self.graph.record(
            "scatter_rows",
            v,
            Op::Scatter {
                x: self.id,
                ids,
                ids_shape,
            },
        )
    }

    /// Mean cross-entropy of `[n, classes]` logits against optional targets,
    /// fused with log-softmax. Rows whose target is `None` are ignored.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'g>> {
        let z = self.value();
        if z.rank() != 2 || z.shape()[0] != targets.len() {
            return Err(shape_err("cross_entropy", z.shape(), &[targets.len()]));
        }
        let c = z.shape()[1];
        let labeled = targets.iter().filter(|t| t.is_some()).count();
        if labeled == 0 {
            return contract("cross_entropy: every position is masked");
        }
        let w = 1.0 / labeled as f64;
        let mut onehot = Tensor::zeros(z.shape());
        let mut weights = Tensor::zeros(z.shape());
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return contract(format!("label {t} out of range for {c} classes"));
            }
            let row = &z.data()[i * c..(i + 1) * c];
            total += tensor::log_sum_exp(row) - row[t];
            onehot.data_mut()[i * c + t] = 1.0;
            weights.data_mut()[i * c..(i + 1) * c].fill(w);
        }
        self.graph.record(
            "cross_entropy",
            Tensor::scalar(total * w),
            Op::CrossEntropy {
                logits: self.id,
                onehot: Rc::new(onehot),
                weights: Rc::new(weights),
            },
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g>> {
        let n = *self.shape().last().unwrap_or(&1);
        let inv_n = 1.0 / n as f64;
        let mean = self.sum_last()?.scale(inv_n)?.expand_last(n)?;
        let centered = self.sub(mean)?;
        let var = centered.mul(centered)?.sum_last()?.scale(inv_n)?;
        let inv_std = var.add_scalar(eps)?.rsqrt()?.expand_last(n)?;
        centered.mul(inv_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_and_softmax_values() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(z.softmax().unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let dx = g.grad(y, &[x], false).unwrap();
        assert_eq!(dx[0].item().unwrap(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().mul(x).unwrap();
        let dx = g.grad(y, &[x], true).unwrap()[0];
        assert!(approx(dx.item().unwrap(), 12.0, 1e-12));
        let ddx = g.grad(dx, &[x], false).unwrap()[0];
        assert!(approx(ddx.item().unwrap(), 12.0, 1e-12));
    }

    #[test]
    fn unreachable_param_gets_exact_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::zeros(&[3, 2]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = g.grad(loss, &[x, unused], false).unwrap();
        assert_eq!(grads[1].value().data(), &[0.0; 6]);
        assert_eq!(grads[1].shape(), vec![3, 2]);
    }

    #[test]
    fn grad_rejects_non_scalar_loss() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.grad(x, &[x], false), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(a.add(c).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]));
        assert_eq!(x.rsqrt().unwrap_err(), Error::NonFinite { op: "rsqrt" });
    }

    #[test]
    fn constants_are_not_recorded() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let b = a.scale(2.0).unwrap();
        assert!(!b.requires_grad());
        let p = g.param(Tensor::vector(vec![1.0]));
        assert!(p.add(b).unwrap().requires_grad());
    }

    #[test]
    fn uniform_cross_entropy_is_log_of_classes() {
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let l = z.cross_entropy(&[Some(0), Some(3), None]).unwrap();
        assert!(approx(l.item().unwrap(), 4f64.ln(), 1e-15));
        assert!(z.cross_entropy(&[None, None, None]).is_err());
    }
}
