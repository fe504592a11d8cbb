//! Dense tensors with recorded reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to tensors that were registered
//! on it; [`Tape::backward`] then returns gradients for any requested nodes,
//! including intermediate feature maps, which the attack stage perturbs.
//! Values are `f64` throughout and every public operation rejects non-finite
//! outputs, so oracle comparisons stay exact.
//!
//! Tensors share their storage through `Arc`: registering model parameters on
//! a fresh tape each step copies a handle, not the data.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Handle into the computation record of the tape that produced a value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

/// Errors raised by tensor construction and tape primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible; both shapes are reported.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data length does not match the product of the extents.
    DataLength { expected: usize, got: usize },
    /// A shape extent is zero.
    InvalidShape { shape: Vec<usize> },
    /// An operation produced (or was given) NaN/Inf values.
    NonFinite { op: &'static str },
    /// A scalar was required.
    NotScalar { shape: Vec<usize> },
    /// A rank-2 tensor was required.
    NotMatrix { op: &'static str, shape: Vec<usize> },
    /// Row normalization hit a near-zero row.
    DegenerateRow { row: usize, norm: f64 },
    /// Class label outside [0, classes).
    LabelOutOfRange { label: usize, classes: usize },
    /// Elementwise op called with the wrong operand arity or kind.
    BadOperand { op: &'static str, detail: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::InvalidShape { shape } => write!(f, "invalid shape {shape:?}"),
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            TensorError::NotScalar { shape } => write!(f, "expected scalar, got shape {shape:?}"),
            TensorError::NotMatrix { op, shape } => {
                write!(f, "{op}: expected rank-2 tensor, got shape {shape:?}")
            }
            TensorError::DegenerateRow { row, norm } => {
                write!(f, "row {row} has near-zero norm {norm:e}; cannot normalize")
            }
            TensorError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            TensorError::BadOperand { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl core::error::Error for TensorError {}

/// Dense row-major tensor. Carries a node handle while attached to a tape.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Build a tensor, validating extents, length, and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Single row matrix (1×n), the layout used for individual samples.
    pub fn row(data: Vec<f64>) -> Result<Self, TensorError> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeId>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64, TensorError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    /// Copy of this tensor without any tape attachment.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Exact bit-level equality of shape and payload.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Max absolute elementwise difference.
    pub fn linf_distance(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "linf_distance",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| {
                let d = libm::fabs(a - b);
                if d > m {
                    d
                } else {
                    m
                }
            }))
    }

    /// In-place `self -= factor * other`. Used by the SGD update.
    pub fn sub_scaled(&mut self, other: &Tensor, factor: f64) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let dst = Arc::make_mut(&mut self.data);
        for (d, &o) in dst.iter_mut().zip(other.data.iter()) {
            *d -= factor * o;
        }
        self.node = None;
        Ok(())
    }
}

/// Elementwise primitive tags accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemTag {
    Add,
    Sub,
    Hadamard,
    Scale,
    Relu,
    /// `sqrt(max(x, 0))`; zero gradient where the input is non-positive.
    SqrtClamped,
    Square,
    /// Clamp into [-1, 1]; unit gradient inside the interval, zero outside.
    ClampUnit,
}

impl ElemTag {
    pub fn name(self) -> &'static str {
        match self {
            ElemTag::Add => "add",
            ElemTag::Sub => "sub",
            ElemTag::Hadamard => "hadamard",
            ElemTag::Scale => "scale",
            ElemTag::Relu => "relu",
            ElemTag::SqrtClamped => "sqrt-clamped",
            ElemTag::Square => "square",
            ElemTag::ClampUnit => "clamp-unit",
        }
    }
}

/// Second operand of a binary elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum ElemArg<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

#[derive(Clone, Debug)]
enum Rhs {
    None,
    Node(NodeId),
    Scalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Elem {
        tag: ElemTag,
        a: NodeId,
        b: Rhs,
    },
    AddRowBias {
        a: NodeId,
        bias: NodeId,
    },
    NormalizeRows {
        a: NodeId,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        a: NodeId,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    /// True when a trainable leaf is reachable through the inputs.
    trainable: bool,
}

/// Gradients returned by [`Tape::backward`], keyed by node.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}

/// Recorded computation: an append-only list of primitive applications.
///
/// Single-threaded by design; independent tapes may live on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Tensor {
        let id = NodeId(self.nodes.len());
        let value = Arc::new(value);
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&value),
            trainable,
        });
        Tensor::from_arc(shape, value, Some(id))
    }

    fn node_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Register a trainable leaf; gradients may be requested for it.
    pub fn var(&mut self, t: &Tensor) -> Tensor {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            value: Arc::clone(&t.data),
            trainable: true,
        });
        Tensor::from_arc(t.shape.clone(), Arc::clone(&t.data), Some(id))
    }

    /// Register a constant leaf; gradient propagation stops here.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            value: Arc::clone(&t.data),
            trainable: false,
        });
        Tensor::from_arc(t.shape.clone(), Arc::clone(&t.data), Some(id))
    }

    /// Resolve a tensor to a node on this tape, interning constants.
    fn intern(&mut self, t: &Tensor) -> NodeId {
        match t.node {
            Some(id) if id.0 < self.nodes.len() => id,
            _ => self.constant(t).node.expect("constant always has a node"),
        }
    }

    fn value_of(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn require_matrix(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let s = self.shape_of(id);
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(TensorError::NotMatrix {
                op,
                shape: s.to_vec(),
            })
        }
    }

    fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Matrix product `A[b×k] · B[k×s]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.intern(a);
        let ib = self.intern(b);
        let (m, k) = self.require_matrix("matmul", ia)?;
        let (k2, n) = self.require_matrix("matmul", ib)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape_of(ia).to_vec(),
                rhs: self.shape_of(ib).to_vec(),
            });
        }
        let out = matmul_kernel(self.value_of(ia), self.value_of(ib), m, k, n);
        Self::check_finite("matmul", &out)?;
        let trainable = self.node_trainable(ia) || self.node_trainable(ib);
        Ok(self.push(Op::Matmul { a: ia, b: ib }, vec![m, n], out, trainable))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.intern(a);
        let (m, n) = self.require_matrix("transpose", ia)?;
        let src = self.value_of(ia);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let trainable = self.node_trainable(ia);
        Ok(self.push(Op::Transpose { a: ia }, vec![n, m], out, trainable))
    }

    /// Dispatch an elementwise primitive. Unary tags take no second operand;
    /// `Scale` takes a scalar; `Hadamard` takes a tensor; `Add`/`Sub` take
    /// either.
    pub fn elementwise(
        &mut self,
        tag: ElemTag,
        a: &Tensor,
        b: Option<ElemArg<'_>>,
    ) -> Result<Tensor, TensorError> {
        let op = tag.name();
        let ia = self.intern(a);
        let rhs = match (tag, b) {
            (ElemTag::Relu | ElemTag::SqrtClamped | ElemTag::Square | ElemTag::ClampUnit, None) => {
                Rhs::None
            }
            (ElemTag::Relu | ElemTag::SqrtClamped | ElemTag::Square | ElemTag::ClampUnit, Some(_)) => {
                return Err(TensorError::BadOperand {
                    op,
                    detail: "unary op takes no second operand",
                })
            }
            (ElemTag::Scale, Some(ElemArg::Scalar(c))) => Rhs::Scalar(c),
            (ElemTag::Scale, _) => {
                return Err(TensorError::BadOperand {
                    op,
                    detail: "scale requires a scalar operand",
                })
            }
            (ElemTag::Hadamard, Some(ElemArg::Tensor(t))) => Rhs::Node(self.intern(t)),
            (ElemTag::Hadamard, _) => {
                return Err(TensorError::BadOperand {
                    op,
                    detail: "hadamard requires a tensor operand",
                })
            }
            (ElemTag::Add | ElemTag::Sub, Some(ElemArg::Tensor(t))) => Rhs::Node(self.intern(t)),
            (ElemTag::Add | ElemTag::Sub, Some(ElemArg::Scalar(c))) => Rhs::Scalar(c),
            (ElemTag::Add | ElemTag::Sub, None) => {
                return Err(TensorError::BadOperand {
                    op,
                    detail: "binary op requires a second operand",
                })
            }
        };
        if let Rhs::Node(ib) = rhs {
            if self.shape_of(ia) != self.shape_of(ib) {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: self.shape_of(ia).to_vec(),
                    rhs: self.shape_of(ib).to_vec(),
                });
            }
        }
        if !tag_is_scalar_ok(tag, &rhs) {
            return Err(TensorError::BadOperand {
                op,
                detail: "operand kind not accepted for this tag",
            });
        }
        let av = self.value_of(ia);
        let out: Vec<f64> = match (&tag, &rhs) {
            (ElemTag::Add, Rhs::Node(ib)) => {
                let bv = self.value_of(*ib);
                av.iter().zip(bv).map(|(x, y)| x + y).collect()
            }
            (ElemTag::Add, Rhs::Scalar(c)) => av.iter().map(|x| x + c).collect(),
            (ElemTag::Sub, Rhs::Node(ib)) => {
                let bv = self.value_of(*ib);
                av.iter().zip(bv).map(|(x, y)| x - y).collect()
            }
            (ElemTag::Sub, Rhs::Scalar(c)) => av.iter().map(|x| x - c).collect(),
            (ElemTag::Hadamard, Rhs::Node(ib)) => {
                let bv = self.value_of(*ib);
                av.iter().zip(bv).map(|(x, y)| x * y).collect()
            }
            (ElemTag::Scale, Rhs::Scalar(c)) => av.iter().map(|x| x * c).collect(),
            (ElemTag::Relu, Rhs::None) => av.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            (ElemTag::SqrtClamped, Rhs::None) => av
                .iter()
                .map(|&x| if x > 0.0 { libm::sqrt(x) } else { 0.0 })
                .collect(),
            (ElemTag::Square, Rhs::None) => av.iter().map(|x| x * x).collect(),
            (ElemTag::ClampUnit, Rhs::None) => av
                .iter()
                .map(|&x| {
                    if x > 1.0 {
                        1.0
                    } else if x < -1.0 {
                        -1.0
                    } else {
                        x
                    }
                })
                .collect(),
            _ => unreachable!("operand validation covers all arms"),
        };
        Self::check_finite(op, &out)?;
        let trainable = self.node_trainable(ia)
            || matches!(rhs, Rhs::Node(ib) if self.node_trainable(ib));
        let shape = self.shape_of(ia).to_vec();
        Ok(self.push(Op::Elem { tag, a: ia, b: rhs }, shape, out, trainable))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::Add, a, Some(ElemArg::Tensor(b)))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::Add, a, Some(ElemArg::Scalar(c)))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::Sub, a, Some(ElemArg::Tensor(b)))
    }

    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::Hadamard, a, Some(ElemArg::Tensor(b)))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::Scale, a, Some(ElemArg::Scalar(c)))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::Relu, a, None)
    }

    pub fn sqrt_clamped(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::SqrtClamped, a, None)
    }

    pub fn square(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::Square, a, None)
    }

    pub fn clamp_unit(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemTag::ClampUnit, a, None)
    }

    /// Add a bias vector to every row of a matrix.
    pub fn add_row_bias(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.intern(a);
        let ib = self.intern(bias);
        let (m, n) = self.require_matrix("add_row_bias", ia)?;
        let bs = self.shape_of(ib);
        if bs != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape_of(ia).to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let av = self.value_of(ia);
        let bv = self.value_of(ib);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + bv[j];
            }
        }
        Self::check_finite("add_row_bias", &out)?;
        let trainable = self.node_trainable(ia) || self.node_trainable(ib);
        Ok(self.push(Op::AddRowBias { a: ia, bias: ib }, vec![m, n], out, trainable))
    }

    /// Scale every row of a `b×r` matrix to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.intern(a);
        let (m, n) = self.require_matrix("l2_normalize_rows", ia)?;
        let av = self.value_of(ia);
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let norm = libm::sqrt(row.iter().map(|x| x * x).sum());
            if norm <= 1e-12 {
                return Err(TensorError::DegenerateRow { row: i, norm });
            }
            norms[i] = norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        Self::check_finite("l2_normalize_rows", &out)?;
        let trainable = self.node_trainable(ia);
        Ok(self.push(
            Op::NormalizeRows { a: ia, norms },
            vec![m, n],
            out,
            trainable,
        ))
    }

    /// Mean negative log-softmax of the true-class logits, stabilized by
    /// row-max subtraction. Backward is `(softmax - onehot) / b`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor,
        labels: &[usize],
    ) -> Result<Tensor, TensorError> {
        let il = self.intern(logits);
        let (b, s) = self.require_matrix("softmax_cross_entropy", il)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![b, s],
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= s {
                return Err(TensorError::LabelOutOfRange { label: y, classes: s });
            }
        }
        let q = self.value_of(il);
        let mut probs = vec![0.0; b * s];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &q[i * s..(i + 1) * s];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m });
            let mut denom = 0.0;
            for j in 0..s {
                let e = libm::exp(row[j] - max);
                probs[i * s + j] = e;
                denom += e;
            }
            for j in 0..s {
                probs[i * s + j] /= denom;
            }
            loss += libm::log(denom) - (row[labels[i]] - max);
        }
        loss /= b as f64;
        Self::check_finite("softmax_cross_entropy", &[loss])?;
        let trainable = self.node_trainable(il);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            trainable,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.intern(a);
        let total: f64 = self.value_of(ia).iter().sum();
        Self::check_finite("sum", &[total])?;
        let trainable = self.node_trainable(ia);
        Ok(self.push(Op::Sum { a: ia }, vec![1], vec![total], trainable))
    }

    /// Detached copy of a recorded node's value.
    pub fn value(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        Tensor::from_arc(node.shape.clone(), Arc::clone(&node.value), Some(id))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// requested node; nodes the loss does not reach get zero gradients.
    pub fn backward(&self, loss: &Tensor, requested: &[NodeId]) -> Result<GradientMap, TensorError> {
        let loss_id = loss.node.ok_or(TensorError::BadOperand {
            op: "backward",
            detail: "loss tensor is not attached to this tape",
        })?;
        if loss_id.0 >= self.nodes.len() {
            return Err(TensorError::BadOperand {
                op: "backward",
                detail: "loss node does not belong to this tape",
            });
        }
        if self.nodes[loss_id.0].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss_id.0].shape.clone(),
            });
        }

        // A node needs a gradient pushed into it when it, or anything it was
        // computed from, is a trainable leaf or an explicitly requested node.
        let mut need = vec![false; self.nodes.len()];
        for &NodeId(r) in requested {
            if r < self.nodes.len() {
                need[r] = true;
            }
        }
        for id in 0..self.nodes.len() {
            let mut flag = need[id] || matches!(self.nodes[id].op, Op::Leaf if self.nodes[id].trainable);
            if !flag {
                self.for_each_input(id, |NodeId(inp)| flag = flag || need[inp]);
            }
            need[id] = flag;
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id.0] = Some(vec![1.0]);

        for id in (0..=loss_id.0).rev() {
            if !need[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &need, &mut grads);
            grads[id] = Some(g);
        }

        let mut map = BTreeMap::new();
        for &r in requested {
            if r.0 >= self.nodes.len() {
                return Err(TensorError::BadOperand {
                    op: "backward",
                    detail: "requested node does not belong to this tape",
                });
            }
            let shape = self.nodes[r.0].shape.clone();
            let data = match &grads[r.0] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[r.0].value.len()],
            };
            map.insert(r, Tensor::from_arc(shape, Arc::new(data), None));
        }
        Ok(GradientMap { grads: map })
    }

    fn for_each_input(&self, id: usize, mut f: impl FnMut(NodeId)) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                f(*a);
                f(*b);
            }
            Op::Transpose { a } | Op::NormalizeRows { a, .. } | Op::Sum { a } => f(*a),
            Op::Elem { a, b, .. } => {
                f(*a);
                if let Rhs::Node(ib) = b {
                    f(*ib);
                }
            }
            Op::AddRowBias { a, bias } => {
                f(*a);
                f(*bias);
            }
            Op::SoftmaxCrossEntropy { logits, .. } => f(*logits),
        }
    }

    fn backward_op(&self, id: usize, g: &[f64], need: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let accumulate = |grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: Vec<f64>| {
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.shape_of(*a);
                    (s[0], s[1])
                };
                let n = self.shape_of(*b)[1];
                if need[a.0] {
                    // dA = G · Bᵀ
                    let bv = self.value_of(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if need[b.0] {
                    // dB = Aᵀ · G
                    let av = self.value_of(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &ap) in arow.iter().enumerate() {
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += ap * grow[j];
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose { a } => {
                if need[a.0] {
                    let (m, n) = {
                        let s = self.shape_of(*a);
                        (s[0], s[1])
                    };
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Elem { tag, a, b } => {
                let av = self.value_of(*a);
                match tag {
                    ElemTag::Add => {
                        if need[a.0] {
                            accumulate(grads, *a, g.to_vec());
                        }
                        if let Rhs::Node(ib) = b {
                            if need[ib.0] {
                                accumulate(grads, *ib, g.to_vec());
                            }
                        }
                    }
                    ElemTag::Sub => {
                        if need[a.0] {
                            accumulate(grads, *a, g.to_vec());
                        }
                        if let Rhs::Node(ib) = b {
                            if need[ib.0] {
                                accumulate(grads, *ib, g.iter().map(|x| -x).collect());
                            }
                        }
                    }
                    ElemTag::Hadamard => {
                        let Rhs::Node(ib) = b else { unreachable!() };
                        if need[a.0] {
                            let bv = self.value_of(*ib);
                            accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                        }
                        if need[ib.0] {
                            accumulate(grads, *ib, g.iter().zip(av).map(|(x, y)| x * y).collect());
                        }
                    }
                    ElemTag::Scale => {
                        let Rhs::Scalar(c) = b else { unreachable!() };
                        if need[a.0] {
                            accumulate(grads, *a, g.iter().map(|x| x * c).collect());
                        }
                    }
                    ElemTag::Relu => {
                        if need[a.0] {
                            accumulate(
                                grads,
                                *a,
                                g.iter()
                                    .zip(av)
                                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                                    .collect(),
                            );
                        }
                    }
                    ElemTag::SqrtClamped => {
                        if need[a.0] {
                            let yv = &self.nodes[id].value;
                            accumulate(
                                grads,
                                *a,
                                g.iter()
                                    .zip(av.iter().zip(yv.iter()))
                                    .map(|(x, (&v, &y))| if v > 0.0 { x / (2.0 * y) } else { 0.0 })
                                    .collect(),
                            );
                        }
                    }
                    ElemTag::Square => {
                        if need[a.0] {
                            accumulate(grads, *a, g.iter().zip(av).map(|(x, v)| 2.0 * v * x).collect());
                        }
                    }
                    ElemTag::ClampUnit => {
                        if need[a.0] {
                            accumulate(
                                grads,
                                *a,
                                g.iter()
                                    .zip(av)
                                    .map(|(x, &v)| if (-1.0..=1.0).contains(&v) { *x } else { 0.0 })
                                    .collect(),
                            );
                        }
                    }
                }
            }
            Op::AddRowBias { a, bias } => {
                let (m, n) = {
                    let s = self.shape_of(*a);
                    (s[0], s[1])
                };
                if need[a.0] {
                    accumulate(grads, *a, g.to_vec());
                }
                if need[bias.0] {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::NormalizeRows { a, norms } => {
                if need[a.0] {
                    let (m, n) = {
                        let s = self.shape_of(*a);
                        (s[0], s[1])
                    };
                    let yv = &self.nodes[id].value;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &yv[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            da[i * n + j] = (gr[j] - y[j] * dot) / norms[i];
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if need[logits.0] {
                    let (b, s) = {
                        let sh = self.shape_of(*logits);
                        (sh[0], sh[1])
                    };
                    let scale = g[0] / b as f64;
                    let mut dq = vec![0.0; b * s];
                    for i in 0..b {
                        for j in 0..s {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            dq[i * s + j] = (probs[i * s + j] - onehot) * scale;
                        }
                    }
                    accumulate(grads, *logits, dq);
                }
            }
            Op::Sum { a } => {
                if need[a.0] {
                    accumulate(grads, *a, vec![g[0]; self.nodes[a.0].value.len()]);
                }
            }
        }
    }
}

fn tag_is_scalar_ok(tag: ElemTag, rhs: &Rhs) -> bool {
    match tag {
        ElemTag::Add | ElemTag::Sub => matches!(rhs, Rhs::Node(_) | Rhs::Scalar(_)),
        ElemTag::Hadamard => matches!(rhs, Rhs::Node(_)),
        ElemTag::Scale => matches!(rhs, Rhs::Scalar(_)),
        ElemTag::Relu | ElemTag::SqrtClamped | ElemTag::Square | ElemTag::ClampUnit => {
            matches!(rhs, Rhs::None)
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    }
    out
}

/// Elementwise sign in {-1, 0, +1}; `sign(0) = 0`. Detached from any tape.
pub fn sign(t: &Tensor) -> Tensor {
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_arc(t.shape().to_vec(), Arc::new(data), None)
}

/// Clamp `x` into the intersection of the ε-ball around `center` and
/// the pixel range `[lo, hi]`. Detached from any tape.
///
/// `center ± eps` may round a hair outside the ball, so clipped values are
/// pulled back by ulps until `|out − center| ≤ eps` holds exactly in f64;
/// with the center inside `[lo, hi]` both constraints are then exact.
pub fn clip_box(
    x: &Tensor,
    center: &Tensor,
    eps: f64,
    lo: f64,
    hi: f64,
) -> Result<Tensor, TensorError> {
    if x.shape() != center.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "clip_box",
            lhs: x.shape().to_vec(),
            rhs: center.shape().to_vec(),
        });
    }
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(center.data())
        .map(|(&v, &c)| {
            let lower = if c - eps > lo { c - eps } else { lo };
            let upper = if c + eps < hi { c + eps } else { hi };
            let mut out = if v < lower {
                lower
            } else if v > upper {
                upper
            } else {
                v
            };
            while out - c > eps {
                out = out.next_down();
            }
            while c - out > eps {
                out = out.next_up();
            }
            out
        })
        .collect();
    Ok(Tensor::from_arc(x.shape().to_vec(), Arc::new(data), None))
}

/// Debug rendering of a shape, used in error paths of dependent crates.
pub fn shape_string(shape: &[usize]) -> String {
    format!("{shape:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::new();
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = tape.matmul(&eye, &b).unwrap();
        assert!(out.bitwise_eq(&b.detached()) || out.data() == b.data());
    }

    #[test]
    fn matmul_small_arithmetic() {
        let mut tape = Tape::new();
        let a = t(vec![1, 2], vec![1.0, 2.0]);
        let b = t(vec![2, 1], vec![3.0, 4.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 11.0);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        match tape.matmul(&a, &b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sqrt_clamped_pythagorean() {
        let mut tape = Tape::new();
        let x = t(vec![1], vec![1.0 - 0.6 * 0.6]);
        let y = tape.sqrt_clamped(&x).unwrap();
        assert!((y.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sqrt_clamped_zero_on_negative() {
        let mut tape = Tape::new();
        let x = t(vec![2], vec![-0.5, -1e-18]);
        let y = tape.sqrt_clamped(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut tape = Tape::new();
        let a = t(vec![2, 2], vec![1.5, -2.25, 0.0, 3.75]);
        let ones = t(vec![2, 2], vec![1.0; 4]);
        let out = tape.hadamard(&a, &ones).unwrap();
        assert!(out
            .data()
            .iter()
            .zip(a.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn normalize_three_four_five() {
        let mut tape = Tape::new();
        let e = t(vec![1, 2], vec![3.0, 4.0]);
        let out = tape.l2_normalize_rows(&e).unwrap();
        assert_eq!(out.data(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_row_is_idempotent() {
        let mut tape = Tape::new();
        let e = t(vec![1, 2], vec![1.0, 0.0]);
        let out = tape.l2_normalize_rows(&e).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_near_zero_row() {
        let mut tape = Tape::new();
        let e = t(vec![1, 2], vec![1e-14, 0.0]);
        assert!(matches!(
            tape.l2_normalize_rows(&e),
            Err(TensorError::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    fn softmax_singleton_class_is_zero_loss() {
        let mut tape = Tape::new();
        let q = t(vec![3, 1], vec![0.7, -4.0, 100.0]);
        let loss = tape.softmax_cross_entropy(&q, &[0, 0, 0]).unwrap();
        assert_eq!(loss.scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn softmax_uniform_two_class_is_ln_two() {
        let mut tape = Tape::new();
        let q = t(vec![1, 2], vec![0.0, 0.0]);
        let loss = tape.softmax_cross_entropy(&q, &[0]).unwrap();
        assert!((loss.scalar_value().unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_label_out_of_range() {
        let mut tape = Tape::new();
        let q = t(vec![1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            tape.softmax_cross_entropy(&q, &[2]),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.var(&t(vec![2, 3], vec![5.0, -1.0, 0.0, 2.0, 9.0, -4.0]));
        let loss = tape.sum(&x).unwrap();
        let grads = tape.backward(&loss, &[x.node().unwrap()]).unwrap();
        assert_eq!(grads.grad(x.node().unwrap()).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_squared_norm() {
        let mut tape = Tape::new();
        let x = tape.var(&t(vec![2], vec![1.0, -2.0]));
        let sq = tape.square(&x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let grads = tape.backward(&loss, &[x.node().unwrap()]).unwrap();
        assert_eq!(grads.grad(x.node().unwrap()).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.var(&t(vec![2], vec![1.0, 2.0]));
        let y = tape.square(&x).unwrap();
        assert!(matches!(
            tape.backward(&y, &[x.node().unwrap()]),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn unreachable_request_yields_zeros() {
        let mut tape = Tape::new();
        let x = tape.var(&t(vec![2], vec![1.0, 2.0]));
        let orphan = tape.var(&t(vec![3], vec![1.0, 1.0, 1.0]));
        let loss = tape.sum(&x).unwrap();
        let grads = tape.backward(&loss, &[orphan.node().unwrap()]).unwrap();
        assert_eq!(grads.grad(orphan.node().unwrap()).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn constants_block_gradient_flow_but_requests_still_work() {
        let mut tape = Tape::new();
        let x = tape.var(&t(vec![2], vec![3.0, -1.0]));
        let c = tape.constant(&t(vec![2], vec![2.0, 5.0]));
        let prod = tape.hadamard(&x, &c).unwrap();
        let loss = tape.sum(&prod).unwrap();
        let grads = tape
            .backward(&loss, &[x.node().unwrap(), prod.node().unwrap()])
            .unwrap();
        assert_eq!(grads.grad(x.node().unwrap()).unwrap().data(), &[2.0, 5.0]);
        // The intermediate product is requestable even though it is not a leaf.
        assert_eq!(grads.grad(prod.node().unwrap()).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn sign_examples() {
        let s = sign(&t(vec![3], vec![-3.2, 0.0, 7.0]));
        assert_eq!(s.data(), &[-1.0, 0.0, 1.0]);
        let ss = sign(&s);
        assert!(ss.bitwise_eq(&s));
    }

    #[test]
    fn clip_box_inside_is_unchanged() {
        let x = t(vec![3], vec![120.0, 130.0, 125.0]);
        let c = t(vec![3], vec![128.0; 3]);
        let out = clip_box(&x, &c, 10.0, 0.0, 255.0).unwrap();
        assert!(out.bitwise_eq(&x));
    }

    #[test]
    fn clip_box_arithmetic() {
        let x = t(vec![1], vec![200.0]);
        let c = t(vec![1], vec![128.0]);
        let out = clip_box(&x, &c, 10.0, 0.0, 255.0).unwrap();
        assert_eq!(out.data()[0], 138.0);
    }

    #[test]
    fn clip_box_is_exact_at_the_ball_faces() {
        // 118.3 + 10 rounds to a value whose distance from 118.3 is a hair
        // over 10; the projection must still satisfy the bound exactly.
        let c = t(vec![1], vec![118.3]);
        let x = t(vec![1], vec![200.0]);
        let out = clip_box(&x, &c, 10.0, 0.0, 255.0).unwrap();
        assert!(out.data()[0] - c.data()[0] <= 10.0);
        let x2 = t(vec![1], vec![0.0]);
        let out2 = clip_box(&x2, &c, 10.0, 0.0, 255.0).unwrap();
        assert!(c.data()[0] - out2.data()[0] <= 10.0);
    }

    #[test]
    fn clip_box_respects_pixel_range() {
        let x = t(vec![2], vec![-40.0, 300.0]);
        let c = t(vec![2], vec![3.0, 252.0]);
        let out = clip_box(&x, &c, 10.0, 0.0, 255.0).unwrap();
        assert_eq!(out.data(), &[0.0, 255.0]);
    }

    #[test]
    fn square_overflow_is_a_numeric_error() {
        let mut tape = Tape::new();
        let x = t(vec![1], vec![1e200]);
        assert!(matches!(
            tape.square(&x),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.var(&t(vec![2, 3], vec![0.3, -1.7, 2.2, 0.9, -0.4, 1.1]));
            let b = tape.constant(&t(vec![3, 2], vec![1.5, 0.25, -2.0, 0.75, 0.1, -0.6]));
            let m = tape.matmul(&a, &b).unwrap();
            let n = tape.l2_normalize_rows(&m).unwrap();
            let loss = tape.softmax_cross_entropy(&n, &[0, 1]).unwrap();
            let grads = tape.backward(&loss, &[a.node().unwrap()]).unwrap();
            (
                loss.scalar_value().unwrap().to_bits(),
                grads
                    .grad(a.node().unwrap())
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tensor_rejects_bad_construction() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::DataLength { expected: 4, got: 3 })
        ));
        assert!(matches!(
            Tensor::new(vec![0, 2], vec![]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn elementwise_arity_is_validated() {
        let mut tape = Tape::new();
        let a = t(vec![2], vec![1.0, 2.0]);
        assert!(tape.elementwise(ElemTag::Relu, &a, Some(ElemArg::Scalar(1.0))).is_err());
        assert!(tape.elementwise(ElemTag::Scale, &a, None).is_err());
        assert!(tape
            .elementwise(ElemTag::Hadamard, &a, Some(ElemArg::Scalar(2.0)))
            .is_err());
    }
}
