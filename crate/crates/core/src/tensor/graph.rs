use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::{self, Real};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Log,
    Sigmoid,
    LogSigmoid,
    Silu,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumAxis,
    LayerNorm,
    Rope,
    Gather,
    Pick,
    Concat,
    SliceCols,
    NormalizeRows,
    Reshape,
}

enum Op<S> {
    Leaf { name: Option<String> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    Rope { x: Var, heads: usize, head_dim: usize, cos: Vec<S>, sin: Vec<S> },
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize, len: usize },
    NormalizeRows(Var),
    Reshape(Var, Vec<usize>),
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LogSigmoid(_) => OpKind::LogSigmoid,
            Op::Silu(_) => OpKind::Silu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Rope { .. } => OpKind::Rope,
            Op::Gather { .. } => OpKind::Gather,
            Op::Pick { .. } => OpKind::Pick,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::NormalizeRows(_) => OpKind::NormalizeRows,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::NormalizeRows(a)
            | Op::Reshape(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Rope { x, .. } | Op::Pick { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Recorded computation.
///
/// Nodes are appended in evaluation order, so every input id precedes its
/// consumer and the tape is acyclic by construction.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Output geometry of a broadcast binary op, in the matrix view.
struct Broadcast {
    shape: Vec<usize>,
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    fn new<S: Real>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<Self> {
        let (ar, ac) = a.dims2();
        let (br, bc) = b.dims2();
        let pick = |x: usize, y: usize| -> Option<usize> {
            if x == y {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else if y == 1 {
                Some(x)
            } else {
                None
            }
        };
        let (Some(rows), Some(cols)) = (pick(ar, br), pick(ac, bc)) else {
            return Err(mismatch(op, a.shape(), b.shape()));
        };
        let shape = if a.shape() == b.shape() {
            a.shape().to_vec()
        } else if a.rank() >= 2 || b.rank() >= 2 {
            vec![rows, cols]
        } else if a.rank() == 1 || b.rank() == 1 {
            vec![cols]
        } else {
            Vec::new()
        };
        Ok(Self {
            shape,
            rows,
            cols,
            a: (ar, ac),
            b: (br, bc),
        })
    }

    #[inline]
    fn index(dims: (usize, usize), i: usize, j: usize) -> usize {
        let r = if dims.0 == 1 { 0 } else { i };
        let c = if dims.1 == 1 { 0 } else { j };
        r * dims.1 + c
    }

    fn apply<S: Real>(&self, a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
        if self.a == self.b {
            return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        }
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(f(a[Self::index(self.a, i, j)], b[Self::index(self.b, i, j)]));
            }
        }
        out
    }

    /// Sums an output-shaped gradient down to an operand's shape.
    fn reduce<S: Real>(&self, dims: (usize, usize), g: &[S], scale: impl Fn(usize) -> S) -> Vec<S> {
        let mut out = vec![S::zero(); dims.0 * dims.1];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let k = i * self.cols + j;
                out[Self::index(dims, i, j)] += g[k] * scale(k);
            }
        }
        out
    }
}

fn eval<S: Real>(op: &Op<S>, nodes: &[Node<S>]) -> Result<Tensor<S>> {
    let v = |x: &Var| &nodes[x.0].value;
    Ok(match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let ((m, k), (k2, n)) = (a.dims2(), b.dims2());
            if a.rank() != 2 || b.rank() != 2 || k != k2 {
                return Err(mismatch("matmul", a.shape(), b.shape()));
            }
            Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))?
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (v(a), v(b));
            let ((m, k), (n, k2)) = (a.dims2(), b.dims2());
            if a.rank() != 2 || b.rank() != 2 || k != k2 {
                return Err(mismatch("matmul_nt", a.shape(), b.shape()));
            }
            Tensor::new(&[m, n], kernels::matmul_nt(a.data(), b.data(), m, k, n))?
        }
        Op::Transpose(a) => {
            let a = v(a);
            let (m, n) = a.dims2();
            Tensor::new(&[n, m], kernels::transpose(a.data(), m, n))?
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let name = match op {
                Op::Add(..) => "add",
                Op::Sub(..) => "sub",
                _ => "mul",
            };
            let bc = Broadcast::new(name, ta, tb)?;
            let data = match op {
                Op::Add(..) => bc.apply(ta.data(), tb.data(), |x, y| x + y),
                Op::Sub(..) => bc.apply(ta.data(), tb.data(), |x, y| x - y),
                _ => bc.apply(ta.data(), tb.data(), |x, y| x * y),
            };
            Tensor::new(&bc.shape, data)?
        }
        Op::Scale(a, c) => v(a).map(|x| x * *c),
        Op::Exp(a) => v(a).map(|x| x.exp()),
        Op::Log(a) => v(a).map(|x| x.ln()),
        Op::Sigmoid(a) => v(a).map(real::sigmoid),
        Op::LogSigmoid(a) => v(a).map(real::log_sigmoid),
        Op::Silu(a) => v(a).map(|x| x * real::sigmoid(x)),
        Op::Softmax(a) => {
            let a = v(a);
            Tensor::new(a.shape(), kernels::softmax_rows(a.data(), a.cols()))?
        }
        Op::LogSoftmax(a) => {
            let a = v(a);
            Tensor::new(a.shape(), kernels::log_softmax_rows(a.data(), a.cols()))?
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => {
            let a = v(a);
            Tensor::scalar(a.sum() / S::of(a.numel() as f64))
        }
        Op::SumAxis(a, axis) => {
            let a = v(a);
            let (m, n) = a.dims2();
            if *axis == 0 {
                let mut out = vec![S::zero(); n];
                for row in a.data().chunks(n.max(1)) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                Tensor::new(&[n], out)?
            } else {
                let out = a.data().chunks(n.max(1)).map(|r| r.iter().copied().sum()).collect();
                Tensor::new(&[m], out)?
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (x, g, b) = (v(x), v(gamma), v(beta));
            let (y, _) = kernels::layer_norm(x.data(), g.data(), b.data(), *eps);
            Tensor::new(x.shape(), y)?
        }
        Op::Rope {
            x,
            heads,
            head_dim,
            cos,
            sin,
        } => {
            let x = v(x);
            let mut data = x.data().to_vec();
            kernels::rope_apply(&mut data, cos, sin, *heads, *head_dim, false);
            Tensor::new(x.shape(), data)?
        }
        Op::Gather { table, ids } => {
            let t = v(table);
            let c = t.cols();
            let mut data = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(&[ids.len(), c], data)?
        }
        Op::Pick { x, cols } => {
            let x = v(x);
            let c = x.cols();
            let data = cols.iter().enumerate().map(|(r, &j)| x.data()[r * c + j]).collect();
            Tensor::new(&[cols.len()], data)?
        }
        Op::Concat { parts, axis } => {
            let first = v(&parts[0]);
            let rows = first.rows();
            if *axis == 0 {
                let cols = first.cols();
                let mut data = Vec::new();
                let mut total = 0;
                for p in parts {
                    let t = v(p);
                    data.extend_from_slice(t.data());
                    total += t.rows();
                }
                Tensor::new(&[total, cols], data)?
            } else {
                let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(v(p).row(r));
                    }
                }
                Tensor::new(&[rows, total], data)?
            }
        }
        Op::SliceCols { x, start, len } => {
            let x = v(x);
            let mut data = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            Tensor::new(&[x.rows(), *len], data)?
        }
        Op::NormalizeRows(a) => {
            let a = v(a);
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(a.cols().max(1)) {
                let n = norm(row);
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
            Tensor::new(a.shape(), data)?
        }
        Op::Reshape(a, shape) => v(a).clone().reshape(shape)?,
    })
}

#[inline]
fn norm<S: Real>(row: &[S]) -> S {
    kernels::dot(row, row).sqrt().max(S::of(1e-12))
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        let requires_grad = match &op {
            Op::Leaf { .. } => false,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op<S>) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    fn record_infallible(&mut self, op: Op<S>) -> Var {
        self.record(op).expect("shape-preserving op")
    }

    /// Leaf with explicit gradient tracking.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let v = self.push(Op::Leaf { name: None }, value);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Named, differentiable input that [`Graph::forward`] can rebind.
    pub fn input(&mut self, name: &str, value: Tensor<S>) -> Var {
        let v = self.push(
            Op::Leaf {
                name: Some(name.to_string()),
            },
            value,
        );
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record_infallible(Op::Scale(a, S::of(c)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.record_infallible(Op::LogSigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Silu(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.record_infallible(Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Mean(a))
    }

    /// Sum of a matrix over rows (`axis = 0`, result `[cols]`) or columns
    /// (`axis = 1`, result `[rows]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::invalid("sum_axis: axis must be 0 or 1"));
        }
        self.record(Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let count = if axis == 0 { m } else { n };
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(mismatch("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        self.record(Op::LayerNorm {
            x,
            gamma,
            beta,
            eps: S::of(eps),
        })
    }

    /// 2-D rotary embedding of `x[tokens × heads·head_dim]`, one grid position per token.
    pub fn rope(&mut self, x: Var, positions: &[(u32, u32)], heads: usize, base: f64) -> Result<Var> {
        let (tokens, width) = self.value(x).dims2();
        if heads == 0 || width % heads != 0 || (width / heads) % 4 != 0 {
            return Err(Error::invalid(alloc::format!(
                "rope: width {width} with {heads} heads needs a head dimension divisible by 4"
            )));
        }
        if tokens != positions.len() {
            return Err(mismatch("rope", self.value(x).shape(), &[positions.len(), 2]));
        }
        let head_dim = width / heads;
        let (cos, sin) = kernels::rope_table(positions, head_dim, base);
        self.record(Op::Rope {
            x,
            heads,
            head_dim,
            cos,
            sin,
        })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows = self.value(table).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(alloc::format!("gather: row {bad} out of range for {rows} rows")));
        }
        self.record(Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    /// `out[r] = x[r, cols[r]]`
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(mismatch("pick", self.value(x).shape(), &[cols.len()]));
        }
        self.record(Op::Pick { x, cols: cols.to_vec() })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat: no inputs"));
        };
        let (r0, c0) = self.value(first).dims2();
        for &p in &parts[1..] {
            let (r, c) = self.value(p).dims2();
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => false,
            };
            if !ok {
                return Err(mismatch("concat", self.value(first).shape(), self.value(p).shape()));
            }
        }
        self.record(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(x).cols() {
            return Err(mismatch("slice_cols", self.value(x).shape(), &[start, len]));
        }
        self.record(Op::SliceCols { x, start, len })
    }

    /// Divides each row by its L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        self.record_infallible(Op::NormalizeRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    /// Replays the tape with new values for named inputs.
    ///
    /// Inputs not mentioned keep their current values. Gradients are cleared.
    pub fn forward(&mut self, bindings: &[(&str, Tensor<S>)]) -> Result<()> {
        for (name, t) in bindings {
            let node = self
                .nodes
                .iter_mut()
                .find(|n| matches!(&n.op, Op::Leaf { name: Some(nm) } if nm == name))
                .ok_or_else(|| Error::UnboundInput((*name).to_string()))?;
            if node.value.shape() != t.shape() {
                return Err(mismatch("forward", node.value.shape(), t.shape()));
            }
            node.value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let value = eval(&self.nodes[i].op, &self.nodes[..i])?;
            self.nodes[i].value = value;
        }
        self.grads.clear();
        Ok(())
    }

    /// Reverse pass from a scalar `loss`; afterwards [`Graph::grad`] returns
    /// `d loss / d node` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        let gd = g.data();
        let mut acc = |v: Var, delta: Vec<S>| {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => {
                    for (a, d) in t.data_mut().iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                None => {
                    let shape = nodes[v.0].value.shape();
                    *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
                }
            }
        };
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                if wants(a) {
                    acc(*a, kernels::matmul_nt(gd, tb.data(), m, n, k));
                }
                if wants(b) {
                    let mut d = vec![S::zero(); k * n];
                    kernels::matmul_tn_acc(&mut d, ta.data(), gd, m, k, n);
                    acc(*b, d);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                let (ta, tb) = (val(a), val(b));
                let ((m, k), (n, _)) = (ta.dims2(), tb.dims2());
                if wants(a) {
                    acc(*a, kernels::matmul(gd, tb.data(), m, n, k));
                }
                if wants(b) {
                    let mut d = vec![S::zero(); n * k];
                    kernels::matmul_tn_acc(&mut d, gd, ta.data(), m, n, k);
                    acc(*b, d);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = out.dims2();
                acc(*a, kernels::transpose(gd, m, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let bc = Broadcast::new("backward", ta, tb).expect("validated in forward");
                let (ad, bd) = (ta.data(), tb.data());
                let cols = bc.cols;
                let (da, db) = (bc.a, bc.b);
                let other_b = |k: usize| bd[Broadcast::index(db, k / cols, k % cols)];
                let other_a = |k: usize| ad[Broadcast::index(da, k / cols, k % cols)];
                match &nodes[i].op {
                    Op::Add(..) => {
                        if wants(a) {
                            acc(*a, bc.reduce(da, gd, |_| S::one()));
                        }
                        if wants(b) {
                            acc(*b, bc.reduce(db, gd, |_| S::one()));
                        }
                    }
                    Op::Sub(..) => {
                        if wants(a) {
                            acc(*a, bc.reduce(da, gd, |_| S::one()));
                        }
                        if wants(b) {
                            acc(*b, bc.reduce(db, gd, |_| -S::one()));
                        }
                    }
                    _ => {
                        if wants(a) {
                            acc(*a, bc.reduce(da, gd, other_b));
                        }
                        if wants(b) {
                            acc(*b, bc.reduce(db, gd, other_a));
                        }
                    }
                }
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|&x| x * *c).collect()),
            Op::Exp(a) => acc(*a, gd.iter().zip(out.data()).map(|(&x, &y)| x * y).collect()),
            Op::Log(a) => acc(*a, gd.iter().zip(val(a).data()).map(|(&x, &y)| x / y).collect()),
            Op::Sigmoid(a) => acc(
                *a,
                gd.iter().zip(out.data()).map(|(&x, &s)| x * s * (S::one() - s)).collect(),
            ),
            Op::LogSigmoid(a) => acc(
                *a,
                gd.iter().zip(val(a).data()).map(|(&x, &z)| x * real::sigmoid(-z)).collect(),
            ),
            Op::Silu(a) => acc(
                *a,
                gd.iter()
                    .zip(val(a).data())
                    .map(|(&x, &z)| {
                        let s = real::sigmoid(z);
                        x * s * (S::one() + z * (S::one() - s))
                    })
                    .collect(),
            ),
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = vec![S::zero(); gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                    let inner = kernels::dot(gr, yr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut d = vec![S::zero(); gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                    let total: S = gr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; val(a).numel()]),
            Op::Mean(a) => {
                let n = val(a).numel();
                acc(*a, vec![gd[0] / S::of(n as f64); n]);
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = val(a).dims2();
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    for c in 0..n {
                        d.push(if *axis == 0 { gd[c] } else { gd[r] });
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (tx, tg) = (val(x), val(gamma));
                let c = tg.numel();
                let n = S::of(c as f64);
                let (_, stats) = kernels::layer_norm(tx.data(), tg.data(), val(beta).data(), *eps);
                let mut dx = vec![S::zero(); tx.numel()];
                let mut dg = vec![S::zero(); c];
                let mut db = vec![S::zero(); c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &tx.data()[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * tg.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dg[j] += gr[j] * xhat;
                        db[j] += gr[j];
                    }
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * tg.data()[j];
                        dx[r * c + j] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                if wants(x) {
                    acc(*x, dx);
                }
                if wants(gamma) {
                    acc(*gamma, dg);
                }
                if wants(beta) {
                    acc(*beta, db);
                }
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                cos,
                sin,
            } => {
                let mut d = gd.to_vec();
                kernels::rope_apply(&mut d, cos, sin, *heads, *head_dim, true);
                acc(*x, d);
            }
            Op::Gather { table, ids } => {
                let t = val(table);
                let c = t.cols();
                let mut d = vec![S::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[id * c + j] += gd[r * c + j];
                    }
                }
                acc(*table, d);
            }
            Op::Pick { x, cols } => {
                let t = val(x);
                let c = t.cols();
                let mut d = vec![S::zero(); t.numel()];
                for (r, &j) in cols.iter().enumerate() {
                    d[r * c + j] = gd[r];
                }
                acc(*x, d);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let n = val(p).numel();
                        if wants(p) {
                            acc(*p, gd[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                } else {
                    let total = out.cols();
                    let mut start = 0;
                    for p in parts {
                        let (m, n) = val(p).dims2();
                        if wants(p) {
                            let mut d = Vec::with_capacity(m * n);
                            for r in 0..m {
                                d.extend_from_slice(&gd[r * total + start..r * total + start + n]);
                            }
                            acc(*p, d);
                        }
                        start += n;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let t = val(x);
                let c = t.cols();
                let mut d = vec![S::zero(); t.numel()];
                for r in 0..t.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*x, d);
            }
            Op::NormalizeRows(a) => {
                let t = val(a);
                let c = t.cols().max(1);
                let mut d = vec![S::zero(); t.numel()];
                for ((dr, xr), (yr, gr)) in d
                    .chunks_mut(c)
                    .zip(t.data().chunks(c))
                    .zip(out.data().chunks(c).zip(gd.chunks(c)))
                {
                    let n = norm(xr);
                    let inner = kernels::dot(yr, gr);
                    for j in 0..c {
                        dr[j] = (gr[j] - yr[j] * inner) / n;
                    }
                }
                acc(*a, d);
            }
            Op::Reshape(a, _) => acc(*a, gd.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]));
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, -2.0, 3.5, 4.0]);
    }

    #[test]
    fn silu_and_softmax_fixed_points() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.silu(z);
        assert_eq!(g.value(s).item(), 0.0);
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let p = g.softmax(x);
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_and_sigmoid_gradients() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.input("x", t(&[1], &[0.0]));
        let s = g.sigmoid(x);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", Tensor::zeros(&[2]));
        assert_eq!(g.backward(a), Err(Error::NonScalarLoss(vec![2])));
    }

    #[test]
    fn forward_replay_is_bit_identical_and_rebinds() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2, 2], &[0.3, -1.2, 2.0, 0.7]));
        let s = g.softmax(x);
        let l = g.log(s);
        let out = g.sum(l);
        let first = g.value(out).item();
        g.forward(&[]).unwrap();
        assert_eq!(g.value(out).item().to_bits(), first.to_bits());
        g.forward(&[("x", t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]))]).unwrap();
        assert!((g.value(out).item() - 4.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(g.forward(&[("y", Tensor::zeros(&[1]))]), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.input("b", t(&[2], &[0.5, -0.5]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn rope_rejects_bad_head_dim() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::zeros(&[2, 6]));
        assert!(g.rope(x, &[(0, 0), (0, 1)], 1, 10_000.0).is_err());
        assert!(g.rope(x, &[(0, 0), (0, 1)], 2, 10_000.0).is_err());
    }
}
