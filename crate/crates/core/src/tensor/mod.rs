//! Dense row-major `f64` tensors with a reverse-mode differentiation record.
//!
//! A [`Tensor`] is immutable once built. Operations that touch a trainable
//! input record their parents so [`backward`] can replay the chain rule;
//! operations on constants produce plain constants. Shapes only broadcast in
//! two ways: exact match, or one side being a single-element tensor.

mod autodiff;
mod contract;
mod gradcheck;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use autodiff::{backward, backward_from, Gradients};
pub use contract::{contract, ContractSpec};
pub use gradcheck::{grad_check, grad_check_against, GradCheckOptions, GradReport, ParamCheck};
pub use ops::{elementwise, ElementwiseOp};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
    node: Option<Node>,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

/// Operation tag plus whatever the backward pass needs beyond the parents.
pub(crate) enum Op {
    Contract(ContractSpec),
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    /// Saved per-row norms; rows below the zero-norm floor map to zero.
    L2Normalize(Vec<f64>),
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Saved per-row inverse standard deviations.
    LayerNorm(Vec<f64>),
    Exp,
    /// Elements that were clamped carry zero gradient.
    ClampMax(f64),
    Sum,
    Reshape,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Contract(_) => "contract",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::L2Normalize(_) => "l2norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Exp => "exp",
            Op::ClampMax(_) => "clamp_max",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, trainable: bool, node: Option<Node>) -> Self {
        Tensor(Arc::new(Inner { id: next_id(), shape, data, trainable, node }))
    }

    /// Constant tensor. Fails on a shape/length mismatch or non-finite data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf; gradients are reported for it by [`backward`].
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.shape().to_vec(), t.0.data.clone(), true, None))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: valid shape and value")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(&[n, n], data).expect("eye: valid shape")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Result of an operation. Records the node only when a parent needs gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Tensor>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let node = if parents.iter().any(Tensor::requires_grad) {
            Some(Node { op, parents })
        } else {
            None
        };
        Ok(Self::build(shape, data, false, node))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape("item", format!("not a scalar: {:?}", self.shape()))),
        }
    }

    pub fn is_parameter(&self) -> bool {
        self.0.trainable
    }

    pub fn requires_grad(&self) -> bool {
        self.0.trainable || self.0.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// Same values, no differentiation record.
    pub fn detach(&self) -> Tensor {
        Self::build(self.shape().to_vec(), self.0.data.clone(), false, None)
    }

    /// Row-major value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i}");
            off = off * ext + ix;
        }
        self.0.data[off]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("data", &head)
            .field("grad", &self.requires_grad())
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality: same shape, bit-identical data.
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl serde::Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Tensor", 2)?;
        st.serialize_field("shape", self.shape())?;
        st.serialize_field("data", self.data())?;
        st.end()
    }
}
