//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation records its output value together with a closure that maps
//! the output gradient to gradients of its parents. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order. A node whose parents all lack `requires_grad` records no closure,
//! which is how [`Graph::detach`] severs a gradient path: the detached copy is
//! a fresh constant leaf sharing the same value.

use std::rc::Rc;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, zeros of the right shape when no path exists.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Rc::new(value), false)
    }

    /// Same value as `v`, no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_rc(v);
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an operation. `backward` receives the output gradient, the
    /// output value and a mask telling which parents need a gradient; it
    /// returns one entry per parent.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every node on a path
    /// to it.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let out = &self.nodes[loss.0].value;
        assert_eq!(out.numel(), 1, "backward from a non-scalar of shape {:?}", out.shape());
        self.backward_with(loss, Tensor::full(out.shape(), T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), self.nodes[output.0].value.shape(), "seed shape mismatch");
        grads[output.0] = Some(seed);
        let mut result: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..=output.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(backward) = &node.backward {
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let parent_grads = backward(&grad, &node.value, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(g) = g else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "grad shape of node {p}");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if node.parents.is_empty() || node.requires_grad {
                result[id] = Some(grad);
            }
        }
        Gradients { grads: result }
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(v, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(v, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let v = av.zip_map(&bv, |x, y| x * y);
        self.push_op(v, &[a, b], move |g, _, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y)),
                need[1].then(|| g.zip_map(&av, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push_op(v, &[a], move |g, _, _| vec![Some(g.map(|x| x * k))])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push_op(v, &[a], |g, _, _| vec![Some(g.clone())])
    }

    /// `k - a`
    pub fn rsub_scalar(&mut self, k: T, a: Var) -> Var {
        let v = self.value(a).map(|x| k - x);
        self.push_op(v, &[a], |g, _, _| vec![Some(g.map(|x| -x))])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let v = av.map(|x| x * x);
        let two = T::lit(2.0);
        self.push_op(v, &[a], move |g, _, _| vec![Some(g.zip_map(&av, |gg, x| gg * two * x))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push_op(v, &[a], |g, out, _| {
            vec![Some(g.zip_map(out, |gg, y| if y > T::zero() { gg } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, &[a], |g, out, _| {
            vec![Some(g.zip_map(out, |gg, y| gg * y * (T::one() - y)))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src_shape = self.value(a).shape().to_vec();
        let v = self.value(a).clone().reshape(shape);
        self.push_op(v, &[a], move |g, _, _| vec![Some(g.clone().reshape(&src_shape))])
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, &[a], move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter().copied();
        let first = iter.next().expect("add_all of nothing");
        iter.fold(first, |acc, t| self.add(acc, t))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
