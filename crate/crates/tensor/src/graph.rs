//! The differentiation tape.
//!
//! A [`Graph`] records every operation in execution order. Node ids are
//! handed out as [`Var`]s; `backward` walks the nodes once, newest first,
//! and accumulates vector-Jacobian products into the inputs that require
//! gradients.
//!
//! A graph can also be built in shape-only mode, where operations validate
//! and propagate shapes without touching data. The cost counter uses this to
//! inspect a model at any input size for free.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels::{AxisPlan, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Detach,
    MatMul,
    Linear,
    BatchMatMul,
    Conv2d,
    BilinearSample,
    ResizeBilinear,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Exp,
    Ln,
    Powf,
    Sum,
    Mean,
    SumAxis,
    Reshape,
    Permute,
    Concat,
    SubsampleGrid,
    RepeatLeading,
    MseMean,
}

impl OpKind {
    pub const ALL: [OpKind; 30] = [
        OpKind::Leaf,
        OpKind::Detach,
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::BatchMatMul,
        OpKind::Conv2d,
        OpKind::BilinearSample,
        OpKind::ResizeBilinear,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Powf,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::SubsampleGrid,
        OpKind::RepeatLeading,
        OpKind::MseMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Detach => "detach",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::BatchMatMul => "bmm",
            OpKind::Conv2d => "conv2d",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::ResizeBilinear => "resize_bilinear",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Powf => "powf",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::SubsampleGrid => "subsample_grid",
            OpKind::RepeatLeading => "repeat_leading",
            OpKind::MseMean => "mse_mean",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Detach,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    BilinearSample { x: Var, points: Var },
    ResizeBilinear { x: Var, rows: AxisPlan<T>, cols: AxisPlan<T> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Powf { x: Var, p: T },
    Sum { x: Var },
    Mean { x: Var },
    SumAxis { x: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var> },
    SubsampleGrid { x: Var, step: usize },
    RepeatLeading { x: Var, n: usize },
    MseMean { a: Var, b: Var },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Detach => OpKind::Detach,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BilinearSample { .. } => OpKind::BilinearSample,
            Op::ResizeBilinear { .. } => OpKind::ResizeBilinear,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Exp { .. } => OpKind::Exp,
            Op::Ln { .. } => OpKind::Ln,
            Op::Powf { .. } => OpKind::Powf,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::SubsampleGrid { .. } => OpKind::SubsampleGrid,
            Op::RepeatLeading { .. } => OpKind::RepeatLeading,
            Op::MseMean { .. } => OpKind::MseMean,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Detach => Vec::new(),
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b }
            | Op::MseMean { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BilinearSample { x, points } => vec![*x, *points],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs } => xs.clone(),
            Op::ResizeBilinear { x, .. }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::Gelu { x }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Exp { x }
            | Op::Ln { x }
            | Op::Powf { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumAxis { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::SubsampleGrid { x, .. }
            | Op::RepeatLeading { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub scope: usize,
}

/// Read-only view of one recorded operation, for cost analysis.
#[derive(Debug, Clone)]
pub struct OpRecord<'a> {
    pub kind: OpKind,
    pub scope: &'a str,
    pub inputs: Vec<&'a [usize]>,
    pub output: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Compute,
    ShapeOnly,
}

/// Single-owner differentiation tape.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    mode: Mode,
    scope_stack: Vec<String>,
    scope_names: Vec<String>,
    scope_lookup: HashMap<String, usize>,
    current_scope: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_mode(Mode::Compute)
    }

    /// A graph that tracks shapes and op records but never computes values.
    pub fn shape_only() -> Self {
        Self::with_mode(Mode::ShapeOnly)
    }

    fn with_mode(mode: Mode) -> Self {
        let mut lookup = HashMap::new();
        lookup.insert(String::new(), 0);
        Self {
            nodes: Vec::new(),
            mode,
            scope_stack: Vec::new(),
            scope_names: vec![String::new()],
            scope_lookup: lookup,
            current_scope: 0,
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.mode == Mode::ShapeOnly
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- scopes ----

    pub fn push_scope(&mut self, name: &str) {
        self.scope_stack.push(name.to_string());
        self.refresh_scope();
    }

    pub fn pop_scope(&mut self) {
        self.scope_stack.pop();
        self.refresh_scope();
    }

    /// Runs `f` with `name` pushed on the scope stack; the scope is popped
    /// even when `f` fails.
    pub fn scoped<R, E>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> std::result::Result<R, E>) -> std::result::Result<R, E> {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    pub fn current_scope(&self) -> &str {
        &self.scope_names[self.current_scope]
    }

    fn refresh_scope(&mut self) {
        let path = self.scope_stack.join("/");
        let next = self.scope_names.len();
        let id = *self.scope_lookup.entry(path.clone()).or_insert(next);
        if id == next {
            self.scope_names.push(path);
        }
        self.current_scope = id;
    }

    // ---- leaves ----

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(&Tensor::scalar(v))
    }

    fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let value = match self.mode {
            Mode::Compute => t.data().to_vec(),
            Mode::ShapeOnly => Vec::new(),
        };
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value,
            op: Op::Leaf,
            requires_grad,
            scope: self.current_scope,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf of the given shape without data; allowed in shape-only mode only.
    pub fn placeholder(&mut self, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if self.mode != Mode::ShapeOnly {
            return Err(crate::error::invalid(
                "placeholder",
                "placeholders exist only on shape-only graphs",
            ));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: Vec::new(),
            op: Op::Leaf,
            requires_grad,
            scope: self.current_scope,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Same value as `x`, cut off from differentiation.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let shape = node.shape.clone();
        let value = node.value.clone();
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Detach,
            requires_grad: false,
            scope: self.current_scope,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- access ----

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Values of `v`. Empty on shape-only graphs.
    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node value matches shape")
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn records(&self) -> impl Iterator<Item = OpRecord<'_>> + '_ {
        self.nodes.iter().map(move |n| OpRecord {
            kind: n.op.kind(),
            scope: &self.scope_names[n.scope],
            inputs: n.op.inputs().iter().map(|v| self.nodes[v.0].shape.as_slice()).collect(),
            output: &n.shape,
        })
    }

    /// Earliest recorded node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<OpRecord<'_>> {
        let n = self.nodes.iter().find(|n| n.value.iter().any(|v| !v.is_finite()))?;
        Some(OpRecord {
            kind: n.op.kind(),
            scope: &self.scope_names[n.scope],
            inputs: n.op.inputs().iter().map(|v| self.nodes[v.0].shape.as_slice()).collect(),
            output: &n.shape,
        })
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    // ---- recording ----

    pub(crate) fn computing(&self) -> bool {
        self.mode == Mode::Compute
    }

    pub(crate) fn val(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        let kind = op.kind();
        if self.mode == Mode::Compute {
            debug_assert_eq!(numel(&shape), value.len(), "{kind} output length");
            if value.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: kind.name(),
                    scope: self.current_scope().to_string(),
                });
            }
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            scope: self.current_scope,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- differentiation ----

    /// Reverse pass from a one-element output with seed 1.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let shape = self.shape(out).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarOutput(shape));
        }
        self.backward_seeded(out, &Tensor::full(shape, T::one()))
    }

    /// Reverse pass with an arbitrary output cotangent.
    pub fn backward_seeded(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if !self.computing() {
            return Err(TensorError::ShapeOnly("backward"));
        }
        if seed.shape() != self.shape(out) {
            return Err(crate::error::mismatch("backward", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut visits = 0usize;
        grads[out.0] = Some(seed.data().to_vec());
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            visits += 1;
            crate::ops::backward_node(self, idx, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (i, g)))
            .collect();
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            grads: leaves,
            visits,
        })
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: HashMap<usize, Vec<T>>,
    visits: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; exactly zero when the output does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads.get(&v.0) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient length"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads.remove(&v.0) {
            Some(g) => Tensor::new(shape, g).expect("gradient length"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads.contains_key(&v.0)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

/// Adds `f`'s contribution into the gradient slot of `v` when `v` needs one.
pub(crate) fn accumulate<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &graph.nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); numel(&node.shape)]);
    f(slot);
}
