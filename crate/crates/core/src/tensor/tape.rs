//! Reverse-mode differentiation.
//!
//! Every operation on [`Var`]s goes through a [`Tape`]. An operation is
//! recorded only when at least one of its inputs is tracked; operations on
//! constants simply compute their value, so inference over untracked
//! weights keeps nothing alive on the tape.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::nn_ops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A tensor value, optionally attached to a tape node.
#[derive(Clone, Debug)]
pub struct Var<T: Element = f32> {
    value: Rc<Tensor<T>>,
    id: Option<NodeId>,
}

impl<T: Element> Var<T> {
    /// An untracked value: no gradient flows into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Var {
            value: Rc::new(value),
            id: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// The value, cloned only if other handles still share it.
    pub fn into_value(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }

    /// Same value, detached from the tape.
    pub fn detach(&self) -> Self {
        Var {
            value: Rc::clone(&self.value),
            id: None,
        }
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub(crate) fn node(&self) -> Option<usize> {
        self.id.map(|id| id.0)
    }
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        av: Rc<Tensor<T>>,
        bv: Rc<Tensor<T>>,
    },
    Sigmoid {
        a: usize,
        out: Rc<Tensor<T>>,
    },
    Tanh {
        a: usize,
        out: Rc<Tensor<T>>,
    },
    Abs {
        a: usize,
        av: Rc<Tensor<T>>,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Sum {
        a: usize,
    },
    Conv2d {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Rc<Tensor<T>>,
        wv: Rc<Tensor<T>>,
    },
    ConvTranspose2d {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Rc<Tensor<T>>,
        wv: Rc<Tensor<T>>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
}

struct Node<T: Element> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Ordered record of the tracked operations of one computation.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a backward pass, keyed by leaf.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Accumulated gradient of `var`, `None` if it was not reached.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node().and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros if it was not reached.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a tracked leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.record(Op::Leaf, Rc::new(value))
    }

    pub(crate) fn record(&self, op: Op<T>, value: Rc<Tensor<T>>) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
        });
        Var {
            value,
            id: Some(NodeId(id)),
        }
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.binary(a, b, v, |a, b, _, _| Op::Add(a, b)))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.binary(a, b, v, |a, b, _, _| Op::Sub(a, b)))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value.zip_map(&b.value, |x, y| x * y)?;
        Ok(self.binary(a, b, v, |a, b, av, bv| Op::Mul { a, b, av, bv }))
    }

    fn binary(
        &self,
        a: &Var<T>,
        b: &Var<T>,
        value: Tensor<T>,
        op: impl FnOnce(Option<usize>, Option<usize>, Rc<Tensor<T>>, Rc<Tensor<T>>) -> Op<T>,
    ) -> Var<T> {
        if a.id.is_none() && b.id.is_none() {
            return Var::constant(value);
        }
        self.record(op(a.node(), b.node(), a.rc(), b.rc()), Rc::new(value))
    }

    pub(crate) fn unary(
        &self,
        a: &Var<T>,
        value: Tensor<T>,
        op: impl FnOnce(usize, &Rc<Tensor<T>>) -> Op<T>,
    ) -> Var<T> {
        match a.node() {
            None => Var::constant(value),
            Some(i) => {
                let value = Rc::new(value);
                self.record(op(i, &value), value)
            }
        }
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        let v = a.value.map(sigmoid);
        self.unary(a, v, |a, out| Op::Sigmoid {
            a,
            out: Rc::clone(out),
        })
    }

    pub fn tanh(&self, a: &Var<T>) -> Var<T> {
        let v = a.value.map(|x| x.tanh());
        self.unary(a, v, |a, out| Op::Tanh {
            a,
            out: Rc::clone(out),
        })
    }

    pub fn abs(&self, a: &Var<T>) -> Var<T> {
        let v = a.value.map(|x| x.abs());
        let av = a.rc();
        self.unary(a, v, |a, _| Op::Abs { a, av })
    }

    pub fn scale(&self, a: &Var<T>, factor: T) -> Var<T> {
        let v = a.value.map(|x| x * factor);
        self.unary(a, v, |a, _| Op::Scale { a, factor })
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let v = Tensor::scalar(a.value.sum());
        self.unary(a, v, |a, _| Op::Sum { a })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let v = nn_ops::narrow_forward(&a.value, axis, start, len)?;
        Ok(self.unary(a, v, |x, _| Op::Narrow { x, axis, start }))
    }

    /// Accumulate `d root / d leaf` for every tracked leaf reachable from
    /// `root`, visiting nodes in exact reverse recording order.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        let root_id = match root.node() {
            Some(i) if root.shape() == [1] => i,
            _ => return Err(Error::NonScalarRoot(root.shape().to_vec())),
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root_id] = Some(Tensor::ones(&[1]));

        for i in (0..=root_id).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            debug_assert_eq!(g.shape(), node.shape.as_slice());
            backprop(&node.op, g, &nodes, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop<T: Element>(
    op: &Op<T>,
    g: Tensor<T>,
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => match (a, b) {
            (Some(a), Some(b)) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            (Some(i), None) | (None, Some(i)) => accumulate(grads, *i, g),
            (None, None) => {}
        },
        Op::Sub(a, b) => {
            if let Some(b) = b {
                accumulate(grads, *b, g.map(|v| -v));
            }
            if let Some(a) = a {
                accumulate(grads, *a, g);
            }
        }
        Op::Mul { a, b, av, bv } => {
            if let Some(a) = a {
                accumulate(grads, *a, elementwise(&g, bv, |g, y| g * y));
            }
            if let Some(b) = b {
                accumulate(grads, *b, elementwise(&g, av, |g, x| g * x));
            }
        }
        Op::Sigmoid { a, out } => {
            let d = elementwise(&g, out, |g, s| g * s * (T::one() - s));
            accumulate(grads, *a, d);
        }
        Op::Tanh { a, out } => {
            let d = elementwise(&g, out, |g, t| g * (T::one() - t * t));
            accumulate(grads, *a, d);
        }
        Op::Abs { a, av } => {
            let d = elementwise(&g, av, |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            });
            accumulate(grads, *a, d);
        }
        Op::Scale { a, factor } => accumulate(grads, *a, g.map(|v| v * *factor)),
        Op::Sum { a } => {
            let s = g.data()[0];
            accumulate(grads, *a, Tensor::full(&nodes[*a].shape, s));
        }
        Op::Conv2d { x, w, b, xv, wv } => {
            let (dx, dw, db) = nn_ops::conv2d_backward(xv, wv, &g, x.is_some(), w.is_some());
            if let Some(x) = x {
                accumulate(grads, *x, dx.expect("input grad requested"));
            }
            if let Some(w) = w {
                accumulate(grads, *w, dw.expect("weight grad requested"));
            }
            if let Some(b) = b {
                accumulate(grads, *b, db);
            }
        }
        Op::ConvTranspose2d { x, w, b, xv, wv } => {
            let (dx, dw, db) =
                nn_ops::conv_transpose2d_backward(xv, wv, &g, x.is_some(), w.is_some());
            if let Some(x) = x {
                accumulate(grads, *x, dx.expect("input grad requested"));
            }
            if let Some(w) = w {
                accumulate(grads, *w, dw.expect("weight grad requested"));
            }
            if let Some(b) = b {
                accumulate(grads, *b, db);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = Tensor::zeros(&nodes[*x].shape);
            let d = dx.data_mut();
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                d[src] = d[src] + gv;
            }
            accumulate(grads, *x, dx);
        }
        Op::Upsample2 { x } => {
            accumulate(grads, *x, nn_ops::upsample2_backward(&g, &nodes[*x].shape));
        }
        Op::Narrow { x, axis, start } => {
            let dx = nn_ops::narrow_backward(&g, &nodes[*x].shape, *axis, *start);
            accumulate(grads, *x, dx);
        }
    }
}

fn elementwise<T: Element>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        g.shape().to_vec(),
        g.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
    )
}
