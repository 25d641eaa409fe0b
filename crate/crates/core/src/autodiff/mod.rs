//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its output value, its parent node
//! ids, and a [`GradFn`] that maps the upstream gradient to per-parent
//! gradients. `backward` walks the tape in reverse push order (a topological
//! order by construction) and accumulates; a node consumed by several ops —
//! the shared-weight Siamese branches in particular — receives the sum of all
//! its consumers' contributions.

mod conv;
mod ops;

use std::cell::RefCell;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<usize>,
    grad_fn: Option<Box<dyn GradFn<S>>>,
}

/// Backward rule of one operation.
pub(crate) trait GradFn<S: Scalar> {
    /// One gradient per parent, in parent order. `inputs` are parent values.
    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
    ) -> Vec<Tensor<S>>;
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input (parameter, data, or constant) node.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn value(&self, var: Var) -> Tensor<S> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape_of(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    /// Read a node's value without cloning.
    pub fn with_value<R>(&self, var: Var, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.nodes.borrow()[var.0].value)
    }

    pub(crate) fn push(
        &self,
        value: Tensor<S>,
        parents: Vec<usize>,
        grad_fn: Option<Box<dyn GradFn<S>>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            grad_fn,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn unary(
        &self,
        x: Var,
        f: impl FnOnce(&Tensor<S>) -> Tensor<S>,
        grad_fn: Box<dyn GradFn<S>>,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.0].value)
        };
        self.push(value, vec![x.0], Some(grad_fn))
    }

    pub(crate) fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> Tensor<S>,
        grad_fn: Box<dyn GradFn<S>>,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, vec![a.0, b.0], Some(grad_fn))
    }

    pub(crate) fn nary(
        &self,
        xs: &[Var],
        f: impl FnOnce(&[&Tensor<S>]) -> Tensor<S>,
        grad_fn: Box<dyn GradFn<S>>,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<S>> = xs.iter().map(|v| &nodes[v.0].value).collect();
            f(&vals)
        };
        self.push(value, xs.iter().map(|v| v.0).collect(), Some(grad_fn))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// reached; unreached nodes report `None`.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(nodes[root.0].value.shape(), S::one()));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(gf) = &node.grad_fn {
                let inputs: Vec<&Tensor<S>> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let parent_grads = gf.backward(&grad, &inputs, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep, indexable by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the given shape if it was unreached.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<S> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite differences of `f` at `x0`, step `h`, one entry per
    /// element of `x0`.
    pub fn fd_gradient(
        f: &mut dyn FnMut(&Tensor<f64>) -> f64,
        x0: &Tensor<f64>,
        h: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x0.len());
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out
    }

    /// Assert the analytic gradient of a scalar-valued graph matches central
    /// differences for every input element.
    pub fn assert_grad_matches(
        build: &mut dyn FnMut(&Tape<f64>, Var) -> Var,
        x0: &Tensor<f64>,
        tol: f64,
    ) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(x, x0.shape());

        let mut f = |xt: &Tensor<f64>| {
            let t = Tape::new();
            let v = t.leaf(xt.clone());
            let l = build(&t, v);
            t.value(l).item()
        };
        let fd = fd_gradient(&mut f, x0, 1e-5);
        for i in 0..x0.len() {
            let a = analytic.data()[i];
            let b = fd[i];
            let denom = a.abs().max(b.abs()).max(1.0);
            assert!(
                (a - b).abs() / denom < tol,
                "grad mismatch at {i}: analytic {a} vs fd {b}"
            );
        }
    }
}
