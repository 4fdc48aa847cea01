//! Dense tensors on an append-only differentiation tape.
//!
//! Every operation executes eagerly and, when any operand requires a
//! gradient, records a node holding the forward value plus a backward
//! kernel. `Tensor` is a copyable handle into its graph; the graph owns
//! all buffers. Backward walks the tape once, in reverse append order,
//! and leaves the gradients of every `requires_grad` leaf populated.
//!
//! A graph (and the tensors it hands out) is confined to one thread;
//! extracted value buffers are plain `Vec`s and move freely.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// View of a parent node handed to a backward kernel.
pub(crate) struct ParentView<'a, T: Scalar> {
    pub value: &'a [T],
    pub needs_grad: bool,
}

/// Backward rule of a recorded operation: given the upstream gradient and
/// the forward values, produce one gradient buffer per parent (or `None`
/// for parents that do not need one).
pub(crate) trait OpKernel<T: Scalar> {
    fn backward(
        &self,
        out_grad: &[T],
        out_value: &[T],
        parents: &[ParentView<'_, T>],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    parents: Vec<usize>,
    kernel: Option<Box<dyn OpKernel<T>>>,
    requires_grad: bool,
}

/// Append-only operation tape. Rebuilt from scratch every iteration; a
/// single backward pass per graph is enforced.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    backward_done: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != len {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {n} elements but buffer holds {len}"
            )));
        }
        Ok(())
    }

    /// Insert a leaf tensor. `requires_grad` leaves receive a gradient
    /// buffer after backward.
    pub fn leaf(&self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_, T>> {
        Self::check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Vec::new(), None, requires_grad))
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Result<Tensor<'_, T>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: T) -> Tensor<'_, T> {
        self.push(vec![1], vec![v], Vec::new(), None, false)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: Vec<usize>,
        kernel: Option<Box<dyn OpKernel<T>>>,
        requires_grad: bool,
    ) -> Tensor<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Constant subgraphs need no backward kernel.
        let kernel = if requires_grad { kernel } else { None };
        nodes.push(Node {
            shape,
            value,
            parents,
            kernel,
            requires_grad,
        });
        Tensor { graph: self, id }
    }

    pub(crate) fn record(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[Tensor<'_, T>],
        kernel: Box<dyn OpKernel<T>>,
    ) -> Tensor<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|t| t.id).collect();
        let requires = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(shape, value, ids, Some(kernel), requires)
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node<T>) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    /// Borrow several node value buffers at once without cloning.
    pub(crate) fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&[T]]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let slices: Vec<&[T]> = ids.iter().map(|&i| nodes[i].value.as_slice()).collect();
        f(&slices)
    }

    /// Reverse pass from `loss`. Visits the tape once in reverse append
    /// order; afterwards every `requires_grad` leaf holds a gradient
    /// (zeros when the leaf does not influence the loss).
    fn backward_from(&self, loss: usize) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild the graph instead of re-running it"
                    .into(),
            ));
        }
        {
            let nodes = self.nodes.borrow();
            let node = &nodes[loss];
            if node.value.len() != 1 {
                return Err(Error::Graph(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    node.shape
                )));
            }
            if !node.requires_grad {
                return Err(Error::Graph(
                    "loss is detached: no differentiable leaf feeds it".into(),
                ));
            }
        }

        let n = self.nodes.borrow().len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss] = Some(vec![T::ONE]);

        let nodes = self.nodes.borrow();
        for id in (0..=loss).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            if let Some(kernel) = &node.kernel {
                let parents: Vec<ParentView<'_, T>> = node
                    .parents
                    .iter()
                    .map(|&p| ParentView {
                        value: &nodes[p].value,
                        needs_grad: nodes[p].requires_grad,
                    })
                    .collect();
                let contribs = kernel.backward(&out_grad, &node.value, &parents);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (&pid, contrib) in node.parents.iter().zip(contribs) {
                    let Some(c) = contrib else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&c) {
                                *a = *a + *b;
                            }
                        }
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[id] = Some(out_grad);
        }

        // Leaves that never reached the loss still get a (zero) gradient.
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.kernel.is_none() && grads[id].is_none() {
                grads[id] = Some(vec![T::ZERO; node.value.len()]);
            }
        }
        drop(nodes);

        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

/// Cheap handle to a node of a graph.
pub struct Tensor<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Clone for Tensor<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Tensor<'_, T> {}

impl<'g, T: Scalar> Tensor<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_node(self.id, |n| n.shape.clone())
    }

    pub fn len(&self) -> usize {
        self.graph.with_node(self.id, |n| n.value.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<T> {
        self.graph.with_node(self.id, |n| n.value.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.with_node(self.id, |n| n.requires_grad)
    }

    /// Scalar extraction; rejects non-singleton tensors.
    pub fn item(&self) -> Result<T> {
        self.graph.with_node(self.id, |n| {
            if n.value.len() == 1 {
                Ok(n.value[0])
            } else {
                Err(Error::InvalidArgument(format!(
                    "expected a scalar tensor, got shape {:?}",
                    n.shape
                )))
            }
        })
    }

    /// Gradient populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.grads.borrow().get(self.id).cloned().flatten()
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward_from(self.id)
    }

    /// Elementwise combination of two equally shaped tensors, computed
    /// off borrowed buffers.
    fn zip_op(
        self,
        rhs: Tensor<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let b = &nodes[rhs.id];
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let value = a
            .value
            .iter()
            .zip(&b.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((a.shape.clone(), value))
    }

    fn map_op(self, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
    }

    pub fn add(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let (shape, value) = self.zip_op(rhs, "add", |x, y| x + y)?;
        Ok(self
            .graph
            .record(shape, value, &[self, rhs], Box::new(AddKernel)))
    }

    pub fn sub(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let (shape, value) = self.zip_op(rhs, "sub", |x, y| x - y)?;
        Ok(self
            .graph
            .record(shape, value, &[self, rhs], Box::new(SubKernel)))
    }

    pub fn mul(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let (shape, value) = self.zip_op(rhs, "mul", |x, y| x * y)?;
        Ok(self
            .graph
            .record(shape, value, &[self, rhs], Box::new(MulKernel)))
    }

    pub fn div(self, rhs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let (shape, value) = self.zip_op(rhs, "div", |x, y| x / y)?;
        Ok(self
            .graph
            .record(shape, value, &[self, rhs], Box::new(DivKernel)))
    }

    pub fn scalar_mul(self, c: T) -> Tensor<'g, T> {
        let (shape, value) = self.map_op(|x| x * c);
        self.graph
            .record(shape, value, &[self], Box::new(ScalarMulKernel(c)))
    }

    pub fn add_scalar(self, c: T) -> Tensor<'g, T> {
        let (shape, value) = self.map_op(|x| x + c);
        self.graph
            .record(shape, value, &[self], Box::new(AddScalarKernel))
    }

    /// `ln(x + eps)`; rejects inputs where the shifted argument is not
    /// strictly positive.
    pub fn log_offset(self, eps: T) -> Result<Tensor<'g, T>> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            let mut value = Vec::with_capacity(n.value.len());
            for &x in &n.value {
                let shifted = x + eps;
                if !(shifted > T::ZERO) {
                    return Err(Error::Numeric(format!(
                        "log_offset: x + eps = {:?} is not positive",
                        shifted.to_f64()
                    )));
                }
                value.push(shifted.ln());
            }
            (n.shape.clone(), value)
        };
        Ok(self
            .graph
            .record(shape, value, &[self], Box::new(LogOffsetKernel(eps))))
    }

    pub fn clamp(self, lo: T, hi: T) -> Result<Tensor<'g, T>> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds out of order: {:?} > {:?}",
                lo.to_f64(),
                hi.to_f64()
            )));
        }
        let (shape, value) = self.map_op(|x| x.maximum(lo).minimum(hi));
        Ok(self
            .graph
            .record(shape, value, &[self], Box::new(ClampKernel { lo, hi })))
    }

    pub fn sigmoid(self) -> Tensor<'g, T> {
        let (shape, value) = self.map_op(stable_sigmoid);
        self.graph
            .record(shape, value, &[self], Box::new(SigmoidKernel))
    }

    pub fn relu(self) -> Tensor<'g, T> {
        let (shape, value) = self.map_op(|x| x.maximum(T::ZERO));
        self.graph.record(shape, value, &[self], Box::new(ReluKernel))
    }

    pub fn tanh(self) -> Tensor<'g, T> {
        let (shape, value) = self.map_op(|x| x.tanh());
        self.graph.record(shape, value, &[self], Box::new(TanhKernel))
    }

    /// Square root with a smoothed backward: d/dx = 1 / (2·sqrt(x + 1e-12)),
    /// which keeps the gradient finite at an exact zero.
    pub fn sqrt_smooth(self) -> Tensor<'g, T> {
        let (shape, value) = self.map_op(|x| x.sqrt());
        self.graph
            .record(shape, value, &[self], Box::new(SqrtSmoothKernel))
    }

    pub fn sum(self) -> Tensor<'g, T> {
        let mut acc = T::ZERO;
        self.graph.with_node(self.id, |n| {
            for &x in &n.value {
                acc = acc + x;
            }
        });
        self.graph
            .record(vec![1], vec![acc], &[self], Box::new(SumKernel))
    }

    pub fn mean(self) -> Tensor<'g, T> {
        let n = self.len();
        let mut acc = T::ZERO;
        self.graph.with_node(self.id, |node| {
            for &x in &node.value {
                acc = acc + x;
            }
        });
        let value = acc / T::from_f64(n as f64);
        self.graph
            .record(vec![1], vec![value], &[self], Box::new(MeanKernel))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'g, T>> {
        let (old_shape, value) = self
            .graph
            .with_node(self.id, |n| (n.shape.clone(), n.value.clone()));
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: old_shape,
                right: shape.to_vec(),
            });
        }
        Ok(self
            .graph
            .record(shape.to_vec(), value, &[self], Box::new(ReshapeKernel)))
    }
}

#[inline]
pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

struct AddKernel;
impl<T: Scalar> OpKernel<T> for AddKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![
            parents[0].needs_grad.then(|| g.to_vec()),
            parents[1].needs_grad.then(|| g.to_vec()),
        ]
    }
}

struct SubKernel;
impl<T: Scalar> OpKernel<T> for SubKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![
            parents[0].needs_grad.then(|| g.to_vec()),
            parents[1]
                .needs_grad
                .then(|| g.iter().map(|&v| -v).collect()),
        ]
    }
}

struct MulKernel;
impl<T: Scalar> OpKernel<T> for MulKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (parents[0].value, parents[1].value);
        vec![
            parents[0]
                .needs_grad
                .then(|| g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect()),
            parents[1]
                .needs_grad
                .then(|| g.iter().zip(a).map(|(&gv, &av)| gv * av).collect()),
        ]
    }
}

struct DivKernel;
impl<T: Scalar> OpKernel<T> for DivKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (parents[0].value, parents[1].value);
        vec![
            parents[0]
                .needs_grad
                .then(|| g.iter().zip(b).map(|(&gv, &bv)| gv / bv).collect()),
            parents[1].needs_grad.then(|| {
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect()
            }),
        ]
    }
}

struct ScalarMulKernel<T>(T);
impl<T: Scalar> OpKernel<T> for ScalarMulKernel<T> {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0]
            .needs_grad
            .then(|| g.iter().map(|&v| v * self.0).collect())]
    }
}

struct AddScalarKernel;
impl<T: Scalar> OpKernel<T> for AddScalarKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| g.to_vec())]
    }
}

struct LogOffsetKernel<T>(T);
impl<T: Scalar> OpKernel<T> for LogOffsetKernel<T> {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| {
            g.iter()
                .zip(parents[0].value)
                .map(|(&gv, &x)| gv / (x + self.0))
                .collect()
        })]
    }
}

struct ClampKernel<T> {
    lo: T,
    hi: T,
}
impl<T: Scalar> OpKernel<T> for ClampKernel<T> {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| {
            g.iter()
                .zip(parents[0].value)
                .map(|(&gv, &x)| {
                    if x >= self.lo && x <= self.hi {
                        gv
                    } else {
                        T::ZERO
                    }
                })
                .collect()
        })]
    }
}

struct SigmoidKernel;
impl<T: Scalar> OpKernel<T> for SigmoidKernel {
    fn backward(&self, g: &[T], out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| {
            g.iter()
                .zip(out)
                .map(|(&gv, &y)| gv * y * (T::ONE - y))
                .collect()
        })]
    }
}

struct ReluKernel;
impl<T: Scalar> OpKernel<T> for ReluKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| {
            g.iter()
                .zip(parents[0].value)
                .map(|(&gv, &x)| if x > T::ZERO { gv } else { T::ZERO })
                .collect()
        })]
    }
}

struct TanhKernel;
impl<T: Scalar> OpKernel<T> for TanhKernel {
    fn backward(&self, g: &[T], out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| {
            g.iter()
                .zip(out)
                .map(|(&gv, &y)| gv * (T::ONE - y * y))
                .collect()
        })]
    }
}

struct SqrtSmoothKernel;
impl<T: Scalar> OpKernel<T> for SqrtSmoothKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let half = T::from_f64(0.5);
        let eps = T::from_f64(1e-12);
        vec![parents[0].needs_grad.then(|| {
            g.iter()
                .zip(parents[0].value)
                .map(|(&gv, &x)| gv * half / (x + eps).sqrt())
                .collect()
        })]
    }
}

struct SumKernel;
impl<T: Scalar> OpKernel<T> for SumKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0]
            .needs_grad
            .then(|| vec![g[0]; parents[0].value.len()])]
    }
}

struct MeanKernel;
impl<T: Scalar> OpKernel<T> for MeanKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let n = parents[0].value.len();
        let scale = g[0] / T::from_f64(n as f64);
        vec![parents[0].needs_grad.then(|| vec![scale; n])]
    }
}

struct ReshapeKernel;
impl<T: Scalar> OpKernel<T> for ReshapeKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| g.to_vec())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf<'g>(g: &'g Graph<f64>, data: &[f64]) -> Tensor<'g, f64> {
        g.leaf(data.to_vec(), &[data.len()], true).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let g = Graph::new();
        let x = leaf(&g, &[0.0]);
        assert_eq!(x.sigmoid().value(), vec![0.5]);
    }

    #[test]
    fn add_elementwise() {
        let g = Graph::new();
        let a = leaf(&g, &[1.0, 2.0]);
        let b = leaf(&g, &[3.0, 4.0]);
        assert_eq!(a.add(b).unwrap().value(), vec![4.0, 6.0]);
    }

    #[test]
    fn log_offset_of_one() {
        let g = Graph::new();
        let x = leaf(&g, &[1.0]);
        let y = x.log_offset(1e-6).unwrap().value()[0];
        assert!((y - 9.999995e-7).abs() < 1e-12, "got {y}");
    }

    #[test]
    fn log_offset_rejects_non_positive() {
        let g = Graph::new();
        let x = leaf(&g, &[-1.0]);
        assert!(matches!(x.log_offset(1e-6), Err(Error::Numeric(_))));
    }

    #[test]
    fn sum_and_mean() {
        let g = Graph::new();
        let x = leaf(&g, &[1.0, 2.0, 3.0]);
        assert_eq!(x.sum().value(), vec![6.0]);
        let g2 = Graph::new();
        let y = leaf(&g2, &[2.0, 4.0]);
        assert_eq!(y.mean().value(), vec![3.0]);
    }

    #[test]
    fn sum_of_zeros_is_zero() {
        let g = Graph::new();
        let x = g.constant(vec![0.0; 16], &[4, 4]).unwrap();
        assert_eq!(x.sum().value(), vec![0.0]);
    }

    #[test]
    fn backward_square_sum() {
        let g = Graph::new();
        let w = leaf(&g, &[3.0]);
        let loss = w.mul(w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_mean_broadcast() {
        let g = Graph::new();
        let w = leaf(&g, &[1.0, 5.0]);
        w.mean().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let g = Graph::new();
        let w = leaf(&g, &[0.0]);
        w.sigmoid().sum().backward().unwrap();
        let grad = w.grad().unwrap()[0];
        assert!((grad - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_rejected() {
        let g = Graph::new();
        let w = leaf(&g, &[2.0]);
        let loss = w.sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_non_scalar_rejected() {
        let g = Graph::new();
        let w = leaf(&g, &[1.0, 2.0]);
        assert!(matches!(w.backward(), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_detached_rejected() {
        let g = Graph::<f64>::new();
        let c = g.constant(vec![1.0], &[1]).unwrap();
        assert!(matches!(c.sum().backward(), Err(Error::Graph(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(vec![0.0; 2], &[2], true).unwrap();
        let b = g.leaf(vec![0.0; 3], &[3], true).unwrap();
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let g = Graph::new();
        let used = leaf(&g, &[2.0]);
        let unused = leaf(&g, &[7.0]);
        used.sum().backward().unwrap();
        assert_eq!(unused.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let g = Graph::new();
            let a = leaf(&g, &[0.3, -0.7, 0.11]);
            let b = leaf(&g, &[1.5, 0.2, -0.4]);
            a.mul(b).unwrap().sigmoid().tanh().sum().value()[0]
        };
        let x = run();
        assert_eq!(x.to_bits(), run().to_bits());
    }

    #[test]
    fn empty_or_zero_dims_rejected() {
        let g = Graph::<f64>::new();
        assert!(g.leaf(vec![], &[0], false).is_err());
        assert!(g.leaf(vec![1.0], &[], false).is_err());
    }
}
