//! Reverse-mode automatic differentiation on a dynamically recorded tape.
//!
//! Values are dense `f64` tensors. Each forward operation appends one node;
//! [`Tape::backward`] sweeps the nodes once in reverse creation order, so
//! gradients are deterministic for a fixed graph (fixed reduction order).
//! Rendering-scale operations are recorded as single [`CustomOp`] nodes with
//! hand-written vector-Jacobian products rather than per-scalar arithmetic.
//!
//! Discrete control flow (cluster labels, depth sort order, face selection)
//! is never recorded: gradients flow only through the continuous expressions
//! given the frozen discrete choices.

mod adam;
pub mod fd;
mod tensor;

pub use adam::{exp_decay_lr, AdamParams, AdamState};
pub use tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// An operation with a hand-written vector-Jacobian product.
pub trait CustomOp: std::fmt::Debug {
    fn inputs(&self) -> &[NodeId];

    /// Accumulate adjoints for this op's inputs.
    ///
    /// `values` is the full tape value store (index with `NodeId.0`),
    /// `grad_out` the adjoint of this node's output; call `acc` once per
    /// input that receives gradient.
    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor));
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Custom(Box<dyn CustomOp>),
}

/// Gradients of one scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient as a flat slice padded with exact zeros for unused inputs.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.grads[id.0].as_ref() {
            Some(t) => {
                debug_assert_eq!(t.len(), len);
                t.data().to_vec()
            }
            None => vec![0.0; len],
        }
    }
}

/// Dynamically recorded computation tape.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Register an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Register a scalar input.
    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Forward value of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.values[id.0].item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.values[a.0].map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.values[a.0].data().iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].len().max(1) as f64;
        let v = Tensor::scalar(self.values[a.0].data().iter().sum::<f64>() / n);
        self.push(v, Op::Mean(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Record a custom operation with the given forward value.
    pub fn custom(&mut self, value: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(value, Op::Custom(op))
    }

    /// Mean squared error between a node and a constant target.
    pub fn mse(&mut self, a: NodeId, target: &Tensor) -> NodeId {
        let diff_t = self.values[a.0].zip(target, |x, y| x - y);
        let target_node = self.leaf(target.clone());
        let diff = self.push(diff_t, Op::Sub(a, target_node));
        let sq = self.square(diff);
        self.mean(sq)
    }

    /// Mean absolute error between a node and a constant target
    /// (subgradient 0 at exact equality).
    pub fn l1(&mut self, a: NodeId, target: &Tensor) -> NodeId {
        let v = self.values[a.0]
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / self.values[a.0].len().max(1) as f64;
        self.custom(
            Tensor::scalar(v),
            Box::new(L1Op {
                inputs: [a],
                target: target.clone(),
            }),
        )
    }

    /// Reverse sweep from a scalar `loss` node.
    ///
    /// Every recorded op is visited exactly once; nodes the loss does not
    /// depend on receive no adjoint.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.values[loss.0].len(),
            1,
            "backward requires a scalar loss"
        );
        let mut adj: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].clone() else { continue };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    Self::accum(&mut adj, *a, g.clone());
                    Self::accum(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    Self::accum(&mut adj, *a, g.clone());
                    Self::accum(&mut adj, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(&self.values[b.0], |x, y| x * y);
                    let gb = g.zip(&self.values[a.0], |x, y| x * y);
                    Self::accum(&mut adj, *a, ga);
                    Self::accum(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => {
                    Self::accum(&mut adj, *a, g.map(|x| x * k));
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    let t = Tensor::full(self.values[a.0].shape(), gs);
                    Self::accum(&mut adj, *a, t);
                }
                Op::Mean(a) => {
                    let n = self.values[a.0].len().max(1) as f64;
                    let t = Tensor::full(self.values[a.0].shape(), g.item() / n);
                    Self::accum(&mut adj, *a, t);
                }
                Op::Square(a) => {
                    let ga = g.zip(&self.values[a.0], |gi, x| gi * 2.0 * x);
                    Self::accum(&mut adj, *a, ga);
                }
                Op::Custom(op) => {
                    op.backward(&self.values, &g, &mut |id, t| Self::accum(&mut adj, id, t));
                }
            }
        }
        Gradients { grads: adj }
    }

    fn accum(adj: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
        match &mut adj[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

#[derive(Debug)]
struct L1Op {
    inputs: [NodeId; 1],
    target: Tensor,
}

impl CustomOp for L1Op {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let a = &values[self.inputs[0].0];
        let n = a.len().max(1) as f64;
        let g = grad_out.item() / n;
        let grad = a.zip(&self.target, |x, y| {
            if x > y {
                g
            } else if x < y {
                -g
            } else {
                0.0
            }
        });
        acc(self.inputs[0], grad);
    }
}
