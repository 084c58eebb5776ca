//! Reverse-mode tape over batched matrices.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s. The tape is
//! append-only, so node order is a topological order and the reverse sweep
//! simply walks the node list backwards.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::spectral::eigen::symmetric_eigen;
use crate::spectral::functions::{ScalarFn, SpectralFn};
use crate::spectral::lanczos::tridiagonal_quadrature;
use crate::tensor::Tensor;

/// Elementwise primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Tanh,
    TanhD1,
    LipSwish,
    LipSwishD1,
    Softplus,
    Sigmoid,
    SigmoidD1,
    Exp,
    Sqrt,
    Recip,
    Square,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LIPSWISH_SCALE: f64 = 1.1;

impl UnaryFn {
    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Tanh => "tanh",
            UnaryFn::TanhD1 => "tanh'",
            UnaryFn::LipSwish => "lipswish",
            UnaryFn::LipSwishD1 => "lipswish'",
            UnaryFn::Softplus => "softplus",
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::SigmoidD1 => "sigmoid'",
            UnaryFn::Exp => "exp",
            UnaryFn::Sqrt => "sqrt",
            UnaryFn::Recip => "recip",
            UnaryFn::Square => "square",
        }
    }

    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::TanhD1 => {
                let t = x.tanh();
                1.0 - t * t
            }
            UnaryFn::LipSwish => x * sigmoid(x) / LIPSWISH_SCALE,
            UnaryFn::LipSwishD1 => {
                let s = sigmoid(x);
                (s + x * s * (1.0 - s)) / LIPSWISH_SCALE
            }
            UnaryFn::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::SigmoidD1 => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            UnaryFn::Exp => x.exp(),
            UnaryFn::Sqrt => x.sqrt(),
            UnaryFn::Recip => 1.0 / x,
            UnaryFn::Square => x * x,
        }
    }

    /// Derivative evaluated numerically; used by the reverse sweep.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            UnaryFn::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            UnaryFn::TanhD1 => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            UnaryFn::LipSwish => UnaryFn::LipSwishD1.value(x),
            UnaryFn::LipSwishD1 => {
                let s = sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s)) / LIPSWISH_SCALE
            }
            UnaryFn::Softplus => sigmoid(x),
            UnaryFn::Sigmoid => UnaryFn::SigmoidD1.value(x),
            UnaryFn::SigmoidD1 => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            UnaryFn::Exp => x.exp(),
            UnaryFn::Sqrt => 0.5 / x.sqrt(),
            UnaryFn::Recip => -1.0 / (x * x),
            UnaryFn::Square => 2.0 * x,
        }
    }

    /// The primitive computing this function's derivative, when one is registered.
    pub fn derivative_fn(self) -> Option<UnaryFn> {
        match self {
            UnaryFn::Tanh => Some(UnaryFn::TanhD1),
            UnaryFn::LipSwish => Some(UnaryFn::LipSwishD1),
            UnaryFn::Softplus => Some(UnaryFn::Sigmoid),
            UnaryFn::Sigmoid => Some(UnaryFn::SigmoidD1),
            UnaryFn::Exp => Some(UnaryFn::Exp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    SumCols(usize),
    SumAll(usize),
    SliceCols(usize, usize),
    Concat(Vec<usize>),
    Gather {
        srcs: Vec<usize>,
        map: Vec<(u32, u32)>,
    },
    Unary(usize, UnaryFn),
    ClampMin(usize, f64),
    Select {
        mask: Vec<bool>,
        a: usize,
        b: usize,
    },
    /// Row-wise custom primitive; `local[s]` holds per-row derivatives with
    /// respect to the same row of source `s`, stored at forward time.
    RowLocal {
        srcs: Vec<usize>,
        kind: RowKind,
        local: Vec<Tensor>,
    },
}

#[derive(Clone, Debug)]
enum RowKind {
    Spectral { n: usize, f: SpectralFn },
    Quadrature { sizes: Vec<usize>, f: ScalarFn },
}

impl RowKind {
    fn name(&self) -> &'static str {
        match self {
            RowKind::Spectral { .. } => "spectral",
            RowKind::Quadrature { .. } => "lanczos_quadrature",
        }
    }

    /// Output column and per-source local derivatives.
    fn eval(&self, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        match self {
            RowKind::Spectral { n, f } => {
                let a = inputs[0];
                let n = *n;
                let mut out = Vec::with_capacity(a.rows());
                let mut local = Tensor::zeros(a.rows(), n * n);
                for r in 0..a.rows() {
                    let eig = symmetric_eigen(a.row_slice(r), n)?;
                    let (g, dg) = f.value_and_grad(&eig.values);
                    out.push(g);
                    local.row_slice_mut(r).copy_from_slice(&eig.reassemble(&dg));
                }
                Ok((Tensor::column(&out), vec![local]))
            }
            RowKind::Quadrature { sizes, f } => {
                let (av, bv) = (inputs[0], inputs[1]);
                let [rows, k] = av.shape();
                let mut out = Vec::with_capacity(rows);
                let mut la = Tensor::zeros(rows, k);
                let mut lb = Tensor::zeros(rows, k.saturating_sub(1));
                for r in 0..rows {
                    let kk = sizes[r].clamp(1, k);
                    let q = tridiagonal_quadrature(
                        &av.row_slice(r)[..kk],
                        &bv.row_slice(r)[..kk - 1],
                        *f,
                    )?;
                    out.push(q.value);
                    la.row_slice_mut(r)[..kk].copy_from_slice(&q.d_alpha);
                    lb.row_slice_mut(r)[..kk - 1].copy_from_slice(&q.d_beta);
                }
                Ok((Tensor::column(&out), vec![la, lb]))
            }
        }
    }
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Mul(..) => "mul".into(),
            Op::Neg(..) => "neg".into(),
            Op::Scale(..) => "scale".into(),
            Op::AddScalar(..) => "add_scalar".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::MatMulT(..) => "matmul_t".into(),
            Op::AddRow(..) => "add_row".into(),
            Op::MulCol(..) => "mul_col".into(),
            Op::SumCols(..) => "sum_cols".into(),
            Op::SumAll(..) => "sum_all".into(),
            Op::SliceCols(..) => "slice_cols".into(),
            Op::Concat(..) => "concat".into(),
            Op::Gather { .. } => "gather".into(),
            Op::Unary(_, f) => f.name().into(),
            Op::ClampMin(..) => "clamp_min".into(),
            Op::Select { .. } => "select".into(),
            Op::RowLocal { kind, .. } => kind.name().into(),
        }
    }
}

/// Evaluates a non-leaf primitive from its input values.
fn forward<'a>(
    op: &Op,
    val: &dyn Fn(usize) -> &'a Tensor,
) -> Result<(Tensor, Option<Vec<Tensor>>)> {
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => val(*a).zip_map(val(*b), |x, y| x + y),
        Op::Sub(a, b) => val(*a).zip_map(val(*b), |x, y| x - y),
        Op::Mul(a, b) => val(*a).zip_map(val(*b), |x, y| x * y),
        Op::Neg(a) => val(*a).scaled(-1.0),
        Op::Scale(a, s) => val(*a).scaled(*s),
        Op::AddScalar(a, s) => val(*a).map(|x| x + s),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::MatMulT(a, b) => val(*a).matmul_t(val(*b))?,
        Op::AddRow(a, b) => {
            let mut out = val(*a).clone();
            let b = val(*b);
            for r in 0..out.rows() {
                for (o, bv) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::MulCol(a, s) => {
            let mut out = val(*a).clone();
            let s = val(*s);
            for r in 0..out.rows() {
                let k = s.data()[r];
                out.row_slice_mut(r).iter_mut().for_each(|o| *o *= k);
            }
            out
        }
        Op::SumCols(a) => {
            let a = val(*a);
            let sums: Vec<f64> = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
            Tensor::column(&sums)
        }
        Op::SumAll(a) => Tensor::scalar(val(*a).sum()),
        Op::SliceCols(..) => unreachable!("slice is evaluated with its length"),
        Op::Concat(parts) => {
            let vals: Vec<&Tensor> = parts.iter().map(|&p| val(p)).collect();
            let rows = vals[0].rows();
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for v in &vals {
                    let c = v.cols();
                    out.row_slice_mut(r)[off..off + c].copy_from_slice(v.row_slice(r));
                    off += c;
                }
            }
            out
        }
        Op::Gather { .. } => unreachable!("gather is evaluated with its shape"),
        Op::Unary(a, f) => val(*a).map(|x| f.value(x)),
        Op::ClampMin(a, lo) => val(*a).map(|x| x.max(*lo)),
        Op::Select { mask, a, b } => {
            let x = val(*a);
            let mut out = val(*b).clone();
            for (i, keep) in mask.iter().enumerate() {
                if *keep {
                    out.data_mut()[i] = x.data()[i];
                }
            }
            out
        }
        Op::RowLocal { srcs, kind, .. } => {
            let refs: Vec<&Tensor> = srcs.iter().map(|&s| val(s)).collect();
            let (v, local) = kind.eval(&refs)?;
            return Ok((v, Some(local)));
        }
    };
    Ok((out, None))
}

fn forward_shaped<'a>(
    op: &Op,
    shape: [usize; 2],
    val: &dyn Fn(usize) -> &'a Tensor,
) -> Result<(Tensor, Option<Vec<Tensor>>)> {
    match op {
        Op::SliceCols(a, start) => {
            let a = val(*a);
            let len = shape[1];
            let mut out = Tensor::zeros(a.rows(), len);
            for r in 0..a.rows() {
                out.row_slice_mut(r)
                    .copy_from_slice(&a.row_slice(r)[*start..start + len]);
            }
            Ok((out, None))
        }
        Op::Gather { srcs, map } => {
            let vals: Vec<&Tensor> = srcs.iter().map(|&s| val(s)).collect();
            let data = map
                .iter()
                .map(|&(s, i)| vals[s as usize].data()[i as usize])
                .collect();
            Ok((Tensor::from_vec(shape[0], shape[1], data)?, None))
        }
        _ => forward(op, val),
    }
}

struct Node {
    value: Tensor,
    op: Op,
    label: Option<&'static str>,
    needs_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    fault: Option<String>,
}

/// An append-only record of primitive applications.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients produced by [`Var::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the output.
    pub fn get(&self, v: &Var) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: &Var) -> Tensor {
        match self.grads[v.id].take() {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulT(a, b) => {
            vec![*a, *b]
        }
        Op::AddRow(a, b) | Op::MulCol(a, b) => vec![*a, *b],
        Op::Select { a, b, .. } => vec![*a, *b],
        Op::Neg(a) | Op::Scale(a, _) | Op::AddScalar(a, _) | Op::SumCols(a) | Op::SumAll(a) => {
            vec![*a]
        }
        Op::SliceCols(a, _) | Op::Unary(a, _) | Op::ClampMin(a, _) => vec![*a],
        Op::Concat(p) => p.clone(),
        Op::Gather { srcs, .. } | Op::RowLocal { srcs, .. } => srcs.clone(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn apply(&self, mut op: Op, shape: Option<[usize; 2]>) -> Result<Var> {
        let (value, local, needs_grad) = {
            let inner = self.inner.borrow();
            let val = |i: usize| &inner.nodes[i].value;
            let (value, local) = match shape {
                Some(s) => forward_shaped(&op, s, &val)?,
                None => forward(&op, &val)?,
            };
            let needs_grad = op_inputs(&op).iter().any(|&i| inner.nodes[i].needs_grad);
            (value, local, needs_grad)
        };
        if let (Op::RowLocal { local: slot, .. }, Some(l)) = (&mut op, local) {
            *slot = l;
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        if inner.fault.is_none() && !value.is_finite() {
            inner.fault = Some(op.name());
        }
        inner.nodes.push(Node {
            value,
            op,
            label: None,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails with the first primitive that produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match &self.inner.borrow().fault {
            Some(name) => Err(Error::Numeric {
                primitive: name.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Re-evaluates every recorded primitive from the stored leaves and
    /// returns the recomputed node values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let inner = self.inner.borrow();
        let mut out: Vec<Tensor> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let val = |i: usize| &out[i];
                    forward_shaped(op, node.value.shape(), &val)?.0
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Stored primal values of every node, in recording order.
    pub fn values(&self) -> Vec<Tensor> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .map(|n| n.value.clone())
            .collect()
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.inner.borrow(), |i| &i.nodes[id].value)
    }
}

fn same_tape(a: &Var, b: &Var) {
    assert!(
        Rc::ptr_eq(&a.tape.inner, &b.tape.inner),
        "vars from different tapes"
    );
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_of(self.id))
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.value_of(self.id).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Attaches a label reported by the reverse sweep when a gradient turns non-finite.
    pub fn labelled(self, label: &'static str) -> Self {
        self.tape.inner.borrow_mut().nodes[self.id].label = Some(label);
        self
    }

    /// Constant tensor on the same tape.
    pub fn constant_like(&self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    fn op(&self, op: Op) -> Var {
        self.tape.apply(op, None).unwrap_or_else(|e| panic!("{e}"))
    }

    fn assert_same_shape(&self, other: &Var, op: &str) {
        same_tape(self, other);
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn scale(&self, s: f64) -> Var {
        self.op(Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.op(Op::AddScalar(self.id, s))
    }

    pub fn unary(&self, f: UnaryFn) -> Var {
        self.op(Op::Unary(self.id, f))
    }

    pub fn tanh(&self) -> Var {
        self.unary(UnaryFn::Tanh)
    }

    pub fn exp(&self) -> Var {
        self.unary(UnaryFn::Exp)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(UnaryFn::Sqrt)
    }

    pub fn recip(&self) -> Var {
        self.unary(UnaryFn::Recip)
    }

    pub fn square(&self) -> Var {
        self.unary(UnaryFn::Square)
    }

    pub fn softplus(&self) -> Var {
        self.unary(UnaryFn::Softplus)
    }

    /// `max(x, lo)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, lo: f64) -> Var {
        self.op(Op::ClampMin(self.id, lo))
    }

    /// Elementwise choice: `a` where `mask` holds, `b` elsewhere.
    pub fn select(mask: Vec<bool>, a: &Var, b: &Var) -> Var {
        a.assert_same_shape(b, "select");
        assert_eq!(mask.len(), a.with_value(Tensor::len), "select: mask length");
        a.op(Op::Select {
            mask,
            a: a.id,
            b: b.id,
        })
    }

    pub fn matmul(&self, other: &Var) -> Var {
        same_tape(self, other);
        self.op(Op::MatMul(self.id, other.id))
    }

    /// `self * other^T`; with `other` an `out x in` weight this is a dense layer.
    pub fn matmul_t(&self, other: &Var) -> Var {
        same_tape(self, other);
        self.op(Op::MatMulT(self.id, other.id))
    }

    /// Adds the `1 x c` row `bias` to every row.
    pub fn add_row(&self, bias: &Var) -> Var {
        same_tape(self, bias);
        let ([_, c], [br, bc]) = (self.shape(), bias.shape());
        assert!(
            br == 1 && bc == c,
            "add_row: bias {br}x{bc} for {c} columns"
        );
        self.op(Op::AddRow(self.id, bias.id))
    }

    /// Scales row `r` by `s[r]` where `s` is `rows x 1`.
    pub fn mul_col(&self, s: &Var) -> Var {
        same_tape(self, s);
        let ([r, _], [sr, sc]) = (self.shape(), s.shape());
        assert!(sr == r && sc == 1, "mul_col: scale {sr}x{sc} for {r} rows");
        self.op(Op::MulCol(self.id, s.id))
    }

    /// Row sums, `rows x 1`.
    pub fn sum_cols(&self) -> Var {
        self.op(Op::SumCols(self.id))
    }

    pub fn sum(&self) -> Var {
        self.op(Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var {
        let n = self.with_value(Tensor::len) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let [r, c] = self.shape();
        assert!(start + len <= c, "slice_cols: {start}+{len} > {c}");
        self.tape
            .apply(Op::SliceCols(self.id, start), Some([r, len]))
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn col(&self, j: usize) -> Var {
        self.slice_cols(j, 1)
    }

    /// Horizontal concatenation.
    pub fn concat(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = parts[0].rows();
        for p in parts {
            same_tape(&parts[0], p);
            assert_eq!(p.rows(), rows, "concat: row mismatch");
        }
        parts[0].op(Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Builds a `rows x cols` tensor whose element `k` (row-major) is element
    /// `map[k].1` (flat index) of source `srcs[map[k].0]`.
    pub fn gather(srcs: &[Var], rows: usize, cols: usize, map: Vec<(u32, u32)>) -> Var {
        assert_eq!(map.len(), rows * cols, "gather: map size");
        for s in srcs {
            same_tape(&srcs[0], s);
        }
        let op = Op::Gather {
            srcs: srcs.iter().map(|p| p.id).collect(),
            map,
        };
        srcs[0]
            .tape
            .apply(op, Some([rows, cols]))
            .unwrap_or_else(|e| panic!("{e}"))
    }

    /// Per-row spectral function of a symmetric matrix stored flat (`rows x n*n`).
    ///
    /// The gradient of a symmetric spectral function `g` with respect to `A`
    /// is `V diag(dg/dlambda) V^T`, which stays well-defined at repeated
    /// eigenvalues.
    pub fn spectral(&self, n: usize, f: SpectralFn) -> Result<Var> {
        let cols = self.cols();
        if cols != n * n {
            return Err(Error::shape(
                "spectral",
                format!("{cols} columns for n={n}"),
            ));
        }
        let op = Op::RowLocal {
            srcs: vec![self.id],
            kind: RowKind::Spectral { n, f },
            local: vec![],
        };
        self.tape.apply(op, None)
    }

    /// Per-row Gauss quadrature `e1^T v(T) e1` for the tridiagonal matrix with
    /// diagonal `alpha` (`rows x k`) and off-diagonal `beta` (`rows x k-1`).
    /// `sizes[r]` truncates row `r` to its leading block after a breakdown.
    pub fn lanczos_quadrature(
        alpha: &Var,
        beta: &Var,
        sizes: &[usize],
        f: ScalarFn,
    ) -> Result<Var> {
        same_tape(alpha, beta);
        let [rows, k] = alpha.shape();
        if beta.shape() != [rows, k.saturating_sub(1)] || sizes.len() != rows {
            return Err(Error::shape(
                "lanczos_quadrature",
                format!("alpha {:?}, beta {:?}", alpha.shape(), beta.shape()),
            ));
        }
        let op = Op::RowLocal {
            srcs: vec![alpha.id, beta.id],
            kind: RowKind::Quadrature {
                sizes: sizes.to_vec(),
                f,
            },
            local: vec![],
        };
        alpha.tape.apply(op, None)
    }

    /// Reverse sweep from this scalar node.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.check()?;
        let inner = self.tape.inner.borrow();
        let root = &inner.nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, found shape {:?}",
                root.value.shape()
            )));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !g.is_finite() {
                let name = node
                    .label
                    .map(str::to_string)
                    .unwrap_or_else(|| node.op.name());
                return Err(Error::Numeric {
                    primitive: format!("{name} (reverse sweep)"),
                });
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, nodes, *b, g.clone());
                    acc(&mut grads, nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, nodes, *b, g.scaled(-1.0));
                    acc(&mut grads, nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(
                            &mut grads,
                            nodes,
                            *a,
                            g.zip_map(&nodes[*b].value, |x, y| x * y),
                        );
                    }
                    if nodes[*b].needs_grad {
                        acc(
                            &mut grads,
                            nodes,
                            *b,
                            g.zip_map(&nodes[*a].value, |x, y| x * y),
                        );
                    }
                }
                Op::Neg(a) => acc(&mut grads, nodes, *a, g.scaled(-1.0)),
                Op::Scale(a, s) => acc(&mut grads, nodes, *a, g.scaled(*s)),
                Op::AddScalar(a, _) => acc(&mut grads, nodes, *a, g),
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, nodes, *a, g.matmul_t(&nodes[*b].value)?);
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, nodes, *b, nodes[*a].value.t_matmul(&g)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, nodes, *a, g.matmul(&nodes[*b].value)?);
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, nodes, *b, g.t_matmul(&nodes[*a].value)?);
                    }
                }
                Op::AddRow(a, b) => {
                    if nodes[*b].needs_grad {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, nodes, *b, gb);
                    }
                    acc(&mut grads, nodes, *a, g);
                }
                Op::MulCol(a, s) => {
                    let sv = &nodes[*s].value;
                    if nodes[*s].needs_grad {
                        let av = &nodes[*a].value;
                        let gs: Vec<f64> = (0..g.rows())
                            .map(|r| crate::tensor::dot(g.row_slice(r), av.row_slice(r)))
                            .collect();
                        acc(&mut grads, nodes, *s, Tensor::column(&gs));
                    }
                    if nodes[*a].needs_grad {
                        let mut ga = g;
                        for r in 0..ga.rows() {
                            let k = sv.data()[r];
                            ga.row_slice_mut(r).iter_mut().for_each(|o| *o *= k);
                        }
                        acc(&mut grads, nodes, *a, ga);
                    }
                }
                Op::SumCols(a) => {
                    let [r, c] = nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gi = g.data()[i];
                        ga.row_slice_mut(i).iter_mut().for_each(|o| *o = gi);
                    }
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::SumAll(a) => {
                    let [r, c] = nodes[*a].value.shape();
                    acc(&mut grads, nodes, *a, Tensor::filled(r, c, g.data()[0]));
                }
                Op::SliceCols(a, start) => {
                    let [r, c] = nodes[*a].value.shape();
                    let len = g.cols();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_slice_mut(i)[*start..start + len].copy_from_slice(g.row_slice(i));
                    }
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let [r, c] = nodes[p].value.shape();
                        if nodes[p].needs_grad {
                            let mut gp = Tensor::zeros(r, c);
                            for i in 0..r {
                                gp.row_slice_mut(i)
                                    .copy_from_slice(&g.row_slice(i)[off..off + c]);
                            }
                            acc(&mut grads, nodes, p, gp);
                        }
                        off += c;
                    }
                }
                Op::Gather { srcs, map } => {
                    let mut parts: Vec<Option<Tensor>> = srcs
                        .iter()
                        .map(|&s| {
                            nodes[s].needs_grad.then(|| {
                                let [r, c] = nodes[s].value.shape();
                                Tensor::zeros(r, c)
                            })
                        })
                        .collect();
                    for (k, &(s, i)) in map.iter().enumerate() {
                        if let Some(p) = &mut parts[s as usize] {
                            p.data_mut()[i as usize] += g.data()[k];
                        }
                    }
                    for (s, p) in srcs.iter().zip(parts) {
                        if let Some(p) = p {
                            acc(&mut grads, nodes, *s, p);
                        }
                    }
                }
                Op::Unary(a, f) => {
                    let ga = g.zip_map(&nodes[*a].value, |gv, x| gv * f.derivative(x));
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let ga = g.zip_map(&nodes[*a].value, |gv, x| if x > *lo { gv } else { 0.0 });
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::Select { mask, a, b } => {
                    let mut ga = g.clone();
                    let mut gb = g;
                    for (i, keep) in mask.iter().enumerate() {
                        if *keep {
                            gb.data_mut()[i] = 0.0;
                        } else {
                            ga.data_mut()[i] = 0.0;
                        }
                    }
                    acc(&mut grads, nodes, *a, ga);
                    acc(&mut grads, nodes, *b, gb);
                }
                Op::RowLocal { srcs, local, .. } => {
                    for (s, l) in srcs.iter().zip(local) {
                        if !nodes[*s].needs_grad {
                            continue;
                        }
                        let mut gs = l.clone();
                        for r in 0..gs.rows() {
                            let k = g.data()[r];
                            gs.row_slice_mut(r).iter_mut().for_each(|o| *o *= k);
                        }
                        acc(&mut grads, nodes, *s, gs);
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'a> Add<&'a Var> for &'a Var {
    type Output = Var;
    fn add(self, rhs: &'a Var) -> Var {
        self.assert_same_shape(rhs, "add");
        self.op(Op::Add(self.id, rhs.id))
    }
}

impl<'a> Sub<&'a Var> for &'a Var {
    type Output = Var;
    fn sub(self, rhs: &'a Var) -> Var {
        self.assert_same_shape(rhs, "sub");
        self.op(Op::Sub(self.id, rhs.id))
    }
}

impl<'a> Mul<&'a Var> for &'a Var {
    type Output = Var;
    fn mul(self, rhs: &'a Var) -> Var {
        self.assert_same_shape(rhs, "mul");
        self.op(Op::Mul(self.id, rhs.id))
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.op(Op::Neg(self.id))
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<Var> for Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                (&self).$m(&rhs)
            }
        }
        impl<'a> $tr<&'a Var> for Var {
            type Output = Var;
            fn $m(self, rhs: &'a Var) -> Var {
                (&self).$m(rhs)
            }
        }
        impl<'a> $tr<Var> for &'a Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                self.$m(&rhs)
            }
        }
    };
}

forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        -&self
    }
}
