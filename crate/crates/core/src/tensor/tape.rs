//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes only reference
//! earlier nodes, so creation order is a topological order and `backward`
//! simply walks the tape from the loss down to index zero.

use std::sync::Arc;

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{shape_mismatch, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, used as a negative control for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SiluBackward,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: f64 },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Softmax { a: Var },
    Silu { a: Var },
    Gelu { a: Var },
    Rope { a: Var, cos: Arc<[f64]>, sin: Arc<[f64]> },
    Gather { a: Var, index: Arc<[usize]> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    MeanRows { a: Var },
    Sum { a: Var },
    Mse { a: Var, b: Var },
    WeightedSum { a: Var, w: Arc<[f64]> },
    Reshape { a: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | MatMulNt { a, b, .. } | Mse { a, b } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddRow { a, row } | MulRow { a, row } => vec![*a, *row],
            Affine { a, .. }
            | LayerNorm { a, .. }
            | Softmax { a }
            | Silu { a }
            | Gelu { a }
            | Rope { a, .. }
            | Gather { a, .. }
            | SliceCols { a, .. }
            | SliceRows { a, .. }
            | MeanRows { a }
            | Sum { a }
            | WeightedSum { a, .. }
            | Reshape { a } => vec![*a],
            ConcatCols { parts } | ConcatRows { parts } => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            d => self.value.len() / d,
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of leaves that require grad. Intermediate gradients are
/// released as soon as they have been propagated.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("scalar read of shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows(), n.last_dim())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let inputs = op.inputs();
        // Inputs this large may overflow honestly (a diverging run); below
        // the bound a non-finite result means a broken op.
        #[cfg(debug_assertions)]
        if !value.iter().all(|v| v.is_finite()) {
            let tame = inputs
                .iter()
                .all(|i| self.nodes[i.0].value.iter().all(|v| v.abs() < 1e100));
            assert!(!tame, "op {op:?} produced non-finite output from finite inputs");
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf; it is differentiable iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the shape of a linear layer with weight `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(a, b, op)?;
        Ok(self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// `a * scale + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * scale + shift).collect();
        self.push(self.shape(a).to_vec(), out, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    fn row_operand(&self, a: Var, row: Var, op: &'static str) -> Result<usize> {
        let d = self.nodes[a.0].last_dim();
        if self.value(row).len() != d {
            return Err(shape_mismatch(op, self.shape(a), self.shape(row)));
        }
        Ok(d)
    }

    /// Adds a `[d]` vector to every row of `a[...×d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.row_operand(a, row, "add_row")?;
        let r = self.value(row);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % d])
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row }))
    }

    /// Multiplies every row of `a[...×d]` elementwise by a `[d]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.row_operand(a, row, "mul_row")?;
        let r = self.value(row);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * r[i % d])
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulRow { a, row }))
    }

    /// Layer norm over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.rows_cols(a);
        if d == 0 {
            return Err(Error::Dimension("layer_norm over an empty last axis".into()));
        }
        let mut out = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        kernels::layer_norm_rows(self.value(a), d, eps, &mut out, &mut inv_std);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LayerNorm { a, inv_std }))
    }

    /// Softmax over the last axis. A row whose every entry carries the mask
    /// sentinel is an error rather than a silent uniform distribution.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.rows_cols(a);
        let mut out = vec![0.0; rows * n];
        if n > 0 {
            if let Some(row) = kernels::softmax_rows(self.value(a), n, &mut out) {
                return Err(Error::FullyMaskedRow { row });
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax { a }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * kernels::sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Silu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a })
    }

    /// Rotates adjacent channel pairs `(2j, 2j+1)` of every row by the
    /// angle whose cosine/sine are given per `(row, j)`.
    pub fn rope(&mut self, a: Var, cos: Arc<[f64]>, sin: Arc<[f64]>) -> Result<Var> {
        let (rows, d) = self.rows_cols(a);
        if d % 2 != 0 || cos.len() != rows * d / 2 || sin.len() != cos.len() {
            return Err(Error::Dimension(format!(
                "rope tables of {} entries for input shape {:?}",
                cos.len(),
                self.shape(a)
            )));
        }
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for (p, (o, xi)) in out.chunks_exact_mut(2).zip(x.chunks_exact(2)).enumerate() {
            let (c, s) = (cos[p], sin[p]);
            o[0] = xi[0] * c - xi[1] * s;
            o[1] = xi[0] * s + xi[1] * c;
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Rope { a, cos, sin }))
    }

    /// `out[i] = a[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(a).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Dimension(format!(
                "gather of {} indices into shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!("gather index {bad} out of {n}")));
        }
        let src = self.value(a);
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(shape, out, Op::Gather { a, index }))
    }

    /// Columns `[start, start+len)` of `a` viewed as `[rows × last]`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.rows_cols(a);
        if start + len > d {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of width {d}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in self.value(a).chunks_exact(d.max(1)).take(rows) {
            out.extend_from_slice(&r[start..start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.rows_cols(p).0)
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(shape_mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            width += c;
        }
        let mut out = vec![0.0; rows * width];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.rows_cols(p);
            for (r, src) in self.value(p).chunks_exact(c.max(1)).take(rows).enumerate() {
                out[r * width + off..r * width + off + c].copy_from_slice(src);
            }
            off += c;
        }
        Ok(self.push(vec![rows, width], out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Rows `[start, start+len)` of `a` viewed as `[rows × last]`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.rows_cols(a);
        if start + len > rows {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} of {rows} rows",
                start + len
            )));
        }
        let out = self.value(a)[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], out, Op::SliceRows { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts
            .first()
            .map(|&p| self.rows_cols(p).1)
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != d {
                return Err(shape_mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Mean over rows: `[rows × d] -> [1 × d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.rows_cols(a);
        if rows == 0 {
            return Err(Error::Dimension("mean_rows of zero rows".into()));
        }
        let mut out = vec![0.0; d];
        for r in self.value(a).chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(vec![1, d], out, Op::MeanRows { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Dimension("mse of empty tensors".into()));
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(vec![], vec![s / n as f64], Op::Mse { a, b }))
    }

    /// `Σ a ⊙ w` with a constant weight vector; handy for projecting a
    /// tensor output onto a scalar in tests and gradient checks.
    pub fn weighted_sum(&mut self, a: Var, w: Arc<[f64]>) -> Result<Var> {
        if w.len() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "weighted_sum of {} weights over shape {:?}",
                w.len(),
                self.shape(a)
            )));
        }
        let s = self.value(a).iter().zip(w.iter()).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![], vec![s], Op::WeightedSum { a, w }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_mismatch("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape { a }))
    }

    /// Whether `output` is computed (transitively) from `input`.
    pub fn depends_on(&self, output: Var, input: Var) -> bool {
        if input.0 > output.0 {
            return false;
        }
        let mut seen = vec![false; output.0 + 1];
        let mut stack = vec![output];
        while let Some(v) = stack.pop() {
            if v == input {
                return true;
            }
            if std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            for i in self.nodes[v.0].op.inputs() {
                if i.0 >= input.0 && !seen[i.0] {
                    stack.push(i);
                }
            }
        }
        false
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulate into the gradient buffer of `v`, if it needs one.
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:block) => {
                if let Some($ga) = grad_slot(grads, nodes, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                with_grad!(*a, |ga| { gemm(m, n, k, g, false, val(*b), true, ga, true) });
                with_grad!(*b, |gb| { gemm(k, m, n, val(*a), true, g, false, gb, true) });
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                with_grad!(*a, |ga| { gemm(m, n, k, g, false, val(*b), false, ga, true) });
                with_grad!(*b, |gb| { gemm(n, m, k, g, true, val(*a), false, gb, true) });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { axpy(ga, g, 1.0) });
                with_grad!(*b, |gb| { axpy(gb, g, 1.0) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| { axpy(ga, g, 1.0) });
                with_grad!(*b, |gb| { axpy(gb, g, -1.0) });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * x;
                    }
                });
            }
            Op::Affine { a, scale } => {
                with_grad!(*a, |ga| { axpy(ga, g, *scale) });
            }
            Op::AddRow { a, row } => {
                let d = nodes[row.0].value.len();
                with_grad!(*a, |ga| { axpy(ga, g, 1.0) });
                with_grad!(*row, |gr| {
                    for gi in g.chunks_exact(d) {
                        axpy(gr, gi, 1.0);
                    }
                });
            }
            Op::MulRow { a, row } => {
                let r = val(*row);
                let d = r.len();
                with_grad!(*a, |ga| {
                    for (oc, gc) in ga.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for ((o, gi), ri) in oc.iter_mut().zip(gc).zip(r) {
                            *o += gi * ri;
                        }
                    }
                });
                with_grad!(*row, |gr| {
                    for (gc, xc) in g.chunks_exact(d).zip(val(*a).chunks_exact(d)) {
                        for ((o, gi), xi) in gr.iter_mut().zip(gc).zip(xc) {
                            *o += gi * xi;
                        }
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let d = node.last_dim();
                let y = &node.value;
                with_grad!(*a, |ga| {
                    for (r, ((oc, gc), yc)) in ga
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                        .enumerate()
                    {
                        let mg = gc.iter().sum::<f64>() / d as f64;
                        let mgy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, gi), yi) in oc.iter_mut().zip(gc).zip(yc) {
                            *o += inv_std[r] * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let n = node.last_dim();
                let p = &node.value;
                with_grad!(*a, |ga| {
                    for ((oc, gc), pc) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(p.chunks_exact(n))
                    {
                        let dot = gc.iter().zip(pc).map(|(a, b)| a * b).sum::<f64>();
                        for ((o, gi), pi) in oc.iter_mut().zip(gc).zip(pc) {
                            *o += pi * (gi - dot);
                        }
                    }
                });
            }
            Op::Silu { a } => {
                let bias = if self.fault == Some(Fault::SiluBackward) { 1.1 } else { 1.0 };
                with_grad!(*a, |ga| {
                    for ((o, gi), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        let s = kernels::sigmoid(x);
                        *o += bias * gi * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::Gelu { a } => {
                with_grad!(*a, |ga| {
                    for ((o, gi), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * kernels::gelu_grad(x);
                    }
                });
            }
            Op::Rope { a, cos, sin } => {
                with_grad!(*a, |ga| {
                    for (p, (o, gi)) in ga.chunks_exact_mut(2).zip(g.chunks_exact(2)).enumerate() {
                        let (c, s) = (cos[p], sin[p]);
                        o[0] += gi[0] * c + gi[1] * s;
                        o[1] += -gi[0] * s + gi[1] * c;
                    }
                });
            }
            Op::Gather { a, index } => {
                with_grad!(*a, |ga| {
                    for (&i, gi) in index.iter().zip(g) {
                        ga[i] += gi;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let len = node.last_dim();
                let d = nodes[a.0].last_dim();
                with_grad!(*a, |ga| {
                    for (oc, gc) in ga.chunks_exact_mut(d).zip(g.chunks_exact(len.max(1))) {
                        axpy(&mut oc[*start..*start + len], gc, 1.0);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let width = node.last_dim();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].last_dim();
                    with_grad!(p, |gp| {
                        for (oc, gc) in gp.chunks_exact_mut(c.max(1)).zip(g.chunks_exact(width)) {
                            axpy(oc, &gc[off..off + c], 1.0);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let d = node.last_dim();
                with_grad!(*a, |ga| {
                    axpy(&mut ga[start * d..start * d + g.len()], g, 1.0);
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    with_grad!(p, |gp| { axpy(gp, &g[off..off + len], 1.0) });
                    off += len;
                }
            }
            Op::MeanRows { a } => {
                let d = node.last_dim();
                let rows = nodes[a.0].rows() as f64;
                with_grad!(*a, |ga| {
                    for oc in ga.chunks_exact_mut(d) {
                        axpy(oc, g, 1.0 / rows);
                    }
                });
            }
            Op::Sum { a } => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                });
            }
            Op::Mse { a, b } => {
                let n = nodes[a.0].value.len() as f64;
                let c = 2.0 * g[0] / n;
                with_grad!(*a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *o += c * (x - y);
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *o -= c * (x - y);
                    }
                });
            }
            Op::WeightedSum { a, w } => {
                with_grad!(*a, |ga| { axpy(ga, w, g[0]) });
            }
            Op::Reshape { a } => {
                with_grad!(*a, |ga| { axpy(ga, g, 1.0) });
            }
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
