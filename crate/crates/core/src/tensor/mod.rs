//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation in execution order. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse, visiting
//! each node once and accumulating gradients additively into every input
//! that requires them. Graphs are single-use: one forward, one backward.

mod ops;
pub mod gradcheck;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KwsError, Result};

pub use ops::{BatchStats, RunningStats, BN_EPS, BN_MOMENTUM};

/// Training or inference behaviour for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        } else {
            s.field("data", &format_args!("[{} values]", self.data.len()));
        }
        s.field("requires_grad", &self.requires_grad).finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(KwsError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KwsError::Contract(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Rows of a matrix, convenient for small literals in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KwsError::Contract("ragged rows".into()));
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }

    pub fn normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| dist.sample(rng))
    }

    /// Marks the tensor as a differentiable leaf; a zero gradient buffer is attached.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![0.0; self.data.len()]);
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(KwsError::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product outside any graph.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        match (self.shape(), rhs.shape()) {
            (&[m, k], &[k2, p]) if k == k2 => {
                Ok(Self::from_parts(vec![m, p], ops::matmul_raw(&self.data, &rhs.data, m, k, p)))
            }
            _ => Err(KwsError::dim("matmul", &self.shape, &rhs.shape)),
        }
    }

    /// Transposes a matrix.
    pub fn t(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(KwsError::dim("transpose", &self.shape, &[0, 0]));
        };
        Ok(Self::from_fn([c, r], |i| self.data[(i % r) * c + i / r]))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded differentiable operation.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one gradient per input
/// (`None` where `needs[i]` is false).
pub trait Op {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    op: Option<Box<dyn Op>>,
}

/// Execution tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    mults: BTreeMap<&'static str, u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        if t.requires_grad && t.grad.is_none() {
            t.grad = Some(vec![0.0; t.data.len()]);
        }
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Multiplies executed so far, keyed by the op category that issued them.
    pub fn mults_by_op(&self) -> &BTreeMap<&'static str, u64> {
        &self.mults
    }

    pub fn total_mults(&self) -> u64 {
        self.mults.values().sum()
    }

    /// Bytes held by node values and gradients.
    pub fn live_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                8 * (n.value.data.len() + n.value.grad.as_ref().map_or(0, |g| g.len()))
            })
            .sum()
    }

    pub(crate) fn count(&mut self, category: &'static str, mults: u64) {
        if mults > 0 {
            *self.mults.entry(category).or_insert(0) += mults;
        }
    }

    /// Records an op output. Ops whose inputs need no gradient are stored
    /// without their backward closure.
    pub fn push(&mut self, inputs: &[Var], mut value: Tensor, op: Box<dyn Op>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.requires_grad = rg;
        value.grad = None;
        self.nodes.push(Node {
            value,
            parents: inputs.to_vec(),
            op: rg.then_some(op),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(KwsError::State(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(KwsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        self.backward_done = true;
        if !lv.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|t| t.requires_grad).collect();
                let in_grads = op.backward(&inputs, &node.value, &g, &needs);
                debug_assert_eq!(in_grads.len(), node.parents.len(), "{}", op.name());
                for (p, ig) in node.parents.iter().zip(in_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[p.0].value.requires_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                let n = node.value.data.len();
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a `[rows, k]` buffer.
pub fn softmax_rows(data: &[f64], rows: usize, k: usize) -> Vec<f64> {
    ops::softmax_raw(data, rows, k, 1)
}

pub(crate) fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(KwsError::Numeric(format!("non-finite input to {op}")))
    }
}
