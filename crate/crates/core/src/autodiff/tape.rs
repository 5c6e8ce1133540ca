use std::sync::Arc;

use super::tensor::{matmul, transpose, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    /// Tensor times a single-element node.
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[r, c] + [1, c]`, the row broadcast over every row.
    AddRow(Var, Var),
    /// `[r, c] -> [1, c]`
    SumRows(Var),
    /// `[1, c] -> [r, c]`
    BroadcastRows(Var, usize),
    /// `[r, c] -> [r, 1]`
    SumCols(Var),
    /// `[r, 1] -> [r, c]`
    BroadcastCols(Var, usize),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    /// Single-element node broadcast to a shape.
    Expand(Var, Vec<usize>),
    Reshape(Var, Vec<usize>),
    L2Norm(Var),
    /// Row-wise softmax of a `[r, c]` matrix.
    Softmax(Var),
    /// Mean over rows of `-log softmax(z)[label]`.
    SoftmaxCrossEntropy(Var, Arc<[usize]>),
    /// Identity forward; backward multiplies by `-strength`.
    GradReverse(Var, f64),
    /// Single-element nodes stacked into a `[n, 1]` column.
    Stack(Arc<[Var]>),
    /// Element `index` (row-major) of a tensor, as a single-element node.
    Select(Var, usize),
    /// Single-element node placed at `index` of an otherwise zero tensor.
    Place(Var, usize, Vec<usize>),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | MatMul(a, b) | AddRow(a, b) => {
                f(*a);
                f(*b);
            }
            Scale(a, _)
            | AddConst(a, _)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a, _)
            | SumCols(a)
            | BroadcastCols(a, _)
            | Relu(a)
            | Tanh(a)
            | Abs(a)
            | Exp(a)
            | Sqrt(a)
            | Recip(a)
            | Sum(a)
            | Expand(a, _)
            | Reshape(a, _)
            | L2Norm(a)
            | Softmax(a)
            | SoftmaxCrossEntropy(a, _)
            | GradReverse(a, _)
            | Select(a, _)
            | Place(a, _, _) => f(*a),
            Stack(items) => items.iter().copied().for_each(f),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddConst(..) => "add_const",
            MulScalar(..) => "mul_scalar",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            AddRow(..) => "add_row",
            SumRows(..) => "sum_rows",
            BroadcastRows(..) => "broadcast_rows",
            SumCols(..) => "sum_cols",
            BroadcastCols(..) => "broadcast_cols",
            Relu(..) => "relu",
            Tanh(..) => "tanh",
            Abs(..) => "abs",
            Exp(..) => "exp",
            Sqrt(..) => "sqrt",
            Recip(..) => "recip",
            Sum(..) => "sum",
            Expand(..) => "expand",
            Reshape(..) => "reshape",
            L2Norm(..) => "l2norm",
            Softmax(..) => "softmax",
            SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            GradReverse(..) => "grad_reverse",
            Stack(..) => "stack",
            Select(..) => "select",
            Place(..) => "place",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of primitive operations.
///
/// Every operation is evaluated eagerly and recorded with the handles of its
/// inputs, so node ids are topologically ordered by construction. The backward
/// pass is itself written in terms of tape operations: with
/// [`Tape::grad_graph`] the gradient nodes stay on the tape and can be
/// differentiated again (reverse-over-reverse). [`Tape::grad`] runs the same
/// pass and then discards the emitted nodes.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    higher_order: bool,
}

impl Tape {
    /// A tape that supports first-order gradients only.
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward passes can be recorded for a second differentiation.
    pub fn with_higher_order() -> Self {
        Self {
            nodes: Vec::new(),
            higher_order: true,
        }
    }

    pub fn is_higher_order(&self) -> bool {
        self.higher_order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf node. Parameters, inputs and constants are all leaves; which of
    /// them are differentiated is decided by the `wrt` list of a gradient call.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_value(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    /// Detached copy of a node's current value.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    /// Errors if the node holds NaN or infinite values.
    pub fn check_finite(&self, v: Var) -> Result<(), AutodiffError> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite {
                op: self.nodes[v.0].op.name(),
            })
        }
    }

    fn push_value(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Var {
        let value = evaluate(&op, |v| &self.nodes[v.0].value);
        self.push_value(op, value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(shape_err(op, self.shape(a), self.shape(b)))
        }
    }

    fn matrix_shape(&self, op: &'static str, a: Var) -> Result<(usize, usize), AutodiffError> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(AutodiffError::Shape {
                op,
                detail: format!("expected a 2-D tensor, got {s:?}"),
            }),
        }
    }

    fn scalar_node(&self, op: &'static str, a: Var) -> Result<(), AutodiffError> {
        if self.value(a).is_scalar() {
            Ok(())
        } else {
            Err(AutodiffError::Shape {
                op,
                detail: format!("expected a single-element tensor, got {:?}", self.shape(a)),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::AddConst(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        self.scalar_node("mul_scalar", s)?;
        Ok(self.push(Op::MulScalar(a, s)))
    }

    /// `a / s` for single-element `a` and `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        self.scalar_node("div_scalar", s)?;
        let r = self.push(Op::Recip(s));
        self.mul_scalar(a, r)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (_, k) = self.matrix_shape("matmul", a)?;
        let (k2, _) = self.matrix_shape("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        Ok(self.push(Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.matrix_shape("transpose", a)?;
        Ok(self.push(Op::Transpose(a)))
    }

    /// Adds a `[1, c]` (or `[c]`) bias row to every row of a `[r, c]` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, AutodiffError> {
        let (_, c) = self.matrix_shape("add_row", m)?;
        let ok = match *self.shape(row) {
            [1, rc] | [rc] => rc == c,
            _ => false,
        };
        if !ok {
            return Err(shape_err("add_row", self.shape(m), self.shape(row)));
        }
        Ok(self.push(Op::AddRow(m, row)))
    }

    pub fn sum_rows(&mut self, m: Var) -> Result<Var, AutodiffError> {
        self.matrix_shape("sum_rows", m)?;
        Ok(self.push(Op::SumRows(m)))
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Result<Var, AutodiffError> {
        let (r, _) = self.matrix_shape("broadcast_rows", row)?;
        if r != 1 || rows == 0 {
            return Err(AutodiffError::Shape {
                op: "broadcast_rows",
                detail: format!("cannot broadcast {:?} to {rows} rows", self.shape(row)),
            });
        }
        Ok(self.push(Op::BroadcastRows(row, rows)))
    }

    pub fn sum_cols(&mut self, m: Var) -> Result<Var, AutodiffError> {
        self.matrix_shape("sum_cols", m)?;
        Ok(self.push(Op::SumCols(m)))
    }

    pub fn broadcast_cols(&mut self, col: Var, cols: usize) -> Result<Var, AutodiffError> {
        let (_, c) = self.matrix_shape("broadcast_cols", col)?;
        if c != 1 || cols == 0 {
            return Err(AutodiffError::Shape {
                op: "broadcast_cols",
                detail: format!("cannot broadcast {:?} to {cols} columns", self.shape(col)),
            });
        }
        Ok(self.push(Op::BroadcastCols(col, cols)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    /// Elementwise square root. The derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.push(Op::Recip(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.scalar_node("expand", s)?;
        Ok(self.push(Op::Expand(s, shape.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        Ok(self.push(Op::Reshape(a, shape.to_vec())))
    }

    /// Euclidean norm of all entries. The gradient at the zero vector is zero.
    pub fn l2norm(&mut self, a: Var) -> Var {
        self.push(Op::L2Norm(a))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var, AutodiffError> {
        self.matrix_shape("softmax", z)?;
        Ok(self.push(Op::Softmax(z)))
    }

    /// Mean cross-entropy of row-wise softmax against integer class labels.
    pub fn softmax_cross_entropy(&mut self, z: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = self.matrix_shape("softmax_cross_entropy", z)?;
        if labels.len() != r {
            return Err(AutodiffError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{r} rows of logits but {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        Ok(self.push(Op::SoftmaxCrossEntropy(z, labels.into())))
    }

    /// Gradient reversal: identity forward, backward scaled by `-strength`.
    pub fn grad_reverse(&mut self, a: Var, strength: f64) -> Var {
        self.push(Op::GradReverse(a, strength))
    }

    /// Stacks single-element nodes into a `[n, 1]` column.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var, AutodiffError> {
        if items.is_empty() {
            return Err(AutodiffError::Shape {
                op: "stack",
                detail: "nothing to stack".into(),
            });
        }
        for &v in items {
            self.scalar_node("stack", v)?;
        }
        Ok(self.push(Op::Stack(items.into())))
    }

    pub fn select(&mut self, a: Var, index: usize) -> Result<Var, AutodiffError> {
        if index >= self.value(a).numel() {
            return Err(AutodiffError::Shape {
                op: "select",
                detail: format!("index {index} out of range for {:?}", self.shape(a)),
            });
        }
        Ok(self.push(Op::Select(a, index)))
    }

    /// Gradient of the single-element node `output` with respect to `wrt`,
    /// returned as plain tensors. Nodes emitted by the backward pass are
    /// dropped afterwards.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, AutodiffError> {
        let mark = self.nodes.len();
        let grads = self.backward(output, wrt)?;
        let values = grads.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }

    /// Like [`Tape::grad`], but the gradients are tape nodes that can be
    /// differentiated again. Requires a tape built with
    /// [`Tape::with_higher_order`].
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        if !self.higher_order {
            return Err(AutodiffError::HigherOrderDisabled);
        }
        self.backward(output, wrt)
    }

    fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar(output.0));
        }
        if let Some(w) = wrt.iter().find(|w| w.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownVar(w.0));
        }
        if !self.value(output).is_scalar() {
            return Err(AutodiffError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let n = output.0 + 1;
        let mut live = vec![false; n];
        for w in wrt {
            if w.0 < n {
                live[w.0] = true;
            }
        }
        for i in 0..n {
            if !live[i] {
                let mut any = false;
                self.nodes[i].op.for_each_input(|v| any |= live[v.0]);
                live[i] = any;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if live[output.0] {
            let seed = Tensor::full(self.shape(output), 1.0);
            adj[output.0] = Some(self.constant(seed));
        }
        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop_node(Var(i), &op, g, &live, &mut adj)?;
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    self.constant(z)
                }
            })
            .collect())
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) -> Result<(), AutodiffError> {
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution)?,
        });
        Ok(())
    }

    /// Pushes the vector-Jacobian product of one node onto the tape.
    fn backprop_node(
        &mut self,
        node: Var,
        op: &Op,
        g: Var,
        live: &[bool],
        adj: &mut [Option<Var>],
    ) -> Result<(), AutodiffError> {
        let is_live = |v: Var| live[v.0];
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if is_live(a) {
                    self.accumulate(adj, a, g)?;
                }
                if is_live(b) {
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if is_live(a) {
                    self.accumulate(adj, a, g)?;
                }
                if is_live(b) {
                    let nb = self.neg(g);
                    self.accumulate(adj, b, nb)?;
                }
            }
            Op::Mul(a, b) => {
                if is_live(a) {
                    let c = self.mul(g, b)?;
                    self.accumulate(adj, a, c)?;
                }
                if is_live(b) {
                    let c = self.mul(g, a)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Scale(a, c) => {
                let s = self.scale(g, c);
                self.accumulate(adj, a, s)?;
            }
            Op::AddConst(a, _) => self.accumulate(adj, a, g)?,
            Op::MulScalar(a, s) => {
                if is_live(a) {
                    let c = self.mul_scalar(g, s)?;
                    self.accumulate(adj, a, c)?;
                }
                if is_live(s) {
                    let prod = self.mul(g, a)?;
                    let total = self.sum(prod);
                    let shaped = self.match_shape(total, s)?;
                    self.accumulate(adj, s, shaped)?;
                }
            }
            Op::MatMul(a, b) => {
                if is_live(a) {
                    let bt = self.transpose(b)?;
                    let c = self.matmul(g, bt)?;
                    self.accumulate(adj, a, c)?;
                }
                if is_live(b) {
                    let at = self.transpose(a)?;
                    let c = self.matmul(at, g)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Transpose(a) => {
                let c = self.transpose(g)?;
                self.accumulate(adj, a, c)?;
            }
            Op::AddRow(m, row) => {
                if is_live(m) {
                    self.accumulate(adj, m, g)?;
                }
                if is_live(row) {
                    let s = self.sum_rows(g)?;
                    let shaped = self.match_shape(s, row)?;
                    self.accumulate(adj, row, shaped)?;
                }
            }
            Op::SumRows(m) => {
                let rows = self.shape(m)[0];
                let c = self.broadcast_rows(g, rows)?;
                self.accumulate(adj, m, c)?;
            }
            Op::BroadcastRows(row, _) => {
                let c = self.sum_rows(g)?;
                self.accumulate(adj, row, c)?;
            }
            Op::SumCols(m) => {
                let cols = self.shape(m)[1];
                let c = self.broadcast_cols(g, cols)?;
                self.accumulate(adj, m, c)?;
            }
            Op::BroadcastCols(col, _) => {
                let c = self.sum_cols(g)?;
                self.accumulate(adj, col, c)?;
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                let c = self.mul(g, m)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Tanh(a) => {
                // d tanh = 1 - y^2, written against the output node
                let y2 = self.mul(node, node)?;
                let neg = self.scale(y2, -1.0);
                let d = self.add_const(neg, 1.0);
                let c = self.mul(g, d)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Abs(a) => {
                let sign = self.value(a).map(sign_of);
                let m = self.constant(sign);
                let c = self.mul(g, m)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Exp(a) => {
                let c = self.mul(g, node)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Sqrt(a) => {
                // 0.5 / y, with zero where y == 0
                let inv = if self.value(node).data().contains(&0.0) {
                    let t = self.value(node).map(|v| if v == 0.0 { 0.0 } else { 0.5 / v });
                    self.constant(t)
                } else {
                    let r = self.recip(node);
                    self.scale(r, 0.5)
                };
                let c = self.mul(g, inv)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Recip(a) => {
                // d(1/x) = -y^2
                let y2 = self.mul(node, node)?;
                let d = self.scale(y2, -1.0);
                let c = self.mul(g, d)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                let c = self.expand(g, &shape)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Expand(s, _) => {
                let total = self.sum(g);
                let shaped = self.match_shape(total, s)?;
                self.accumulate(adj, s, shaped)?;
            }
            Op::Reshape(a, _) => {
                let shape = self.shape(a).to_vec();
                let c = self.reshape(g, &shape)?;
                self.accumulate(adj, a, c)?;
            }
            Op::L2Norm(a) => {
                if self.item(node) == 0.0 {
                    return Ok(());
                }
                let r = self.recip(node);
                let s = self.mul(g, r)?;
                let c = self.mul_scalar(a, s)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Softmax(z) => {
                // s * (g - rowsum(g * s))
                let cols = self.shape(z)[1];
                let gs = self.mul(g, node)?;
                let rs = self.sum_cols(gs)?;
                let rb = self.broadcast_cols(rs, cols)?;
                let diff = self.sub(g, rb)?;
                let c = self.mul(node, diff)?;
                self.accumulate(adj, z, c)?;
            }
            Op::SoftmaxCrossEntropy(z, ref labels) => {
                // (softmax(z) - onehot) * g / rows
                let (rows, cols) = (self.shape(z)[0], self.shape(z)[1]);
                let mut onehot = vec![0.0; rows * cols];
                for (r, &l) in labels.iter().enumerate() {
                    onehot[r * cols + l] = 1.0;
                }
                let oh = self.constant(Tensor::from_parts(vec![rows, cols], onehot));
                let s = self.softmax(z)?;
                let diff = self.sub(s, oh)?;
                let gs = self.scale(g, 1.0 / rows as f64);
                let c = self.mul_scalar(diff, gs)?;
                self.accumulate(adj, z, c)?;
            }
            Op::GradReverse(a, strength) => {
                let c = self.scale(g, -strength);
                self.accumulate(adj, a, c)?;
            }
            Op::Stack(ref items) => {
                for (i, &v) in items.iter().enumerate() {
                    if is_live(v) {
                        let e = self.select(g, i)?;
                        let shaped = self.match_shape(e, v)?;
                        self.accumulate(adj, v, shaped)?;
                    }
                }
            }
            Op::Select(a, index) => {
                let shape = self.shape(a).to_vec();
                let c = self.push(Op::Place(g, index, shape));
                self.accumulate(adj, a, c)?;
            }
            Op::Place(s, index, _) => {
                let e = self.select(g, index)?;
                let shaped = self.match_shape(e, s)?;
                self.accumulate(adj, s, shaped)?;
            }
        }
        Ok(())
    }

    fn match_shape(&mut self, v: Var, like: Var) -> Result<Var, AutodiffError> {
        if self.shape(v) == self.shape(like) {
            Ok(v)
        } else {
            let shape = self.shape(like).to_vec();
            self.reshape(v, &shape)
        }
    }

    /// Re-evaluates every recorded operation from the stored leaves and
    /// returns the recomputed node values.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, |v| &values[v.0]),
            };
            values.push(v);
        }
        values
    }
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: format!("incompatible shapes {a:?} and {b:?}"),
    }
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let (r, c) = (z.shape()[0], z.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = z.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            total += e;
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= total;
        }
    }
    Tensor::from_parts(vec![r, c], out)
}

fn evaluate<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Tensor {
    match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => get(a).zip(get(b), |x, y| x + y),
        Op::Sub(a, b) => get(a).zip(get(b), |x, y| x - y),
        Op::Mul(a, b) => get(a).zip(get(b), |x, y| x * y),
        Op::Scale(a, c) => get(a).map(|x| x * c),
        Op::AddConst(a, c) => get(a).map(|x| x + c),
        Op::MulScalar(a, s) => {
            let s = get(s).item();
            get(a).map(|x| x * s)
        }
        Op::MatMul(a, b) => matmul(get(a), get(b)),
        Op::Transpose(a) => transpose(get(a)),
        Op::AddRow(m, row) => {
            let (m, row) = (get(m), get(row).data());
            let c = row.len();
            let data = m.data().iter().enumerate().map(|(i, &x)| x + row[i % c]).collect();
            Tensor::from_parts(m.shape().to_vec(), data)
        }
        Op::SumRows(m) => {
            let m = get(m);
            let c = m.cols();
            let mut out = vec![0.0; c];
            for r in 0..m.rows() {
                for (o, &x) in out.iter_mut().zip(m.row(r)) {
                    *o += x;
                }
            }
            Tensor::from_parts(vec![1, c], out)
        }
        Op::BroadcastRows(row, rows) => {
            let row = get(row).data();
            let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
            Tensor::from_parts(vec![rows, row.len()], data)
        }
        Op::SumCols(m) => {
            let m = get(m);
            let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
            Tensor::from_parts(vec![m.rows(), 1], data)
        }
        Op::BroadcastCols(col, cols) => {
            let col = get(col).data();
            let data = col.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
            Tensor::from_parts(vec![col.len(), cols], data)
        }
        Op::Relu(a) => get(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Tanh(a) => get(a).map(f64::tanh),
        Op::Abs(a) => get(a).map(f64::abs),
        Op::Exp(a) => get(a).map(f64::exp),
        Op::Sqrt(a) => get(a).map(f64::sqrt),
        Op::Recip(a) => get(a).map(|x| 1.0 / x),
        Op::Sum(a) => Tensor::scalar(get(a).data().iter().sum()),
        Op::Expand(s, ref shape) => Tensor::full(shape, get(s).item()),
        Op::Reshape(a, ref shape) => Tensor::from_parts(shape.clone(), get(a).data().to_vec()),
        Op::L2Norm(a) => Tensor::scalar(get(a).data().iter().map(|x| x * x).sum::<f64>().sqrt()),
        Op::Softmax(z) => softmax_rows(get(z)),
        Op::SoftmaxCrossEntropy(z, ref labels) => {
            let z = get(z);
            let mut total = 0.0;
            for (r, &l) in labels.iter().enumerate() {
                let row = z.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[l];
            }
            Tensor::scalar(total / labels.len() as f64)
        }
        Op::GradReverse(a, _) => get(a).clone(),
        Op::Stack(ref items) => {
            let data: Vec<f64> = items.iter().map(|&v| get(v).item()).collect();
            Tensor::from_parts(vec![data.len(), 1], data)
        }
        Op::Select(a, index) => Tensor::scalar(get(a).data()[index]),
        Op::Place(s, index, ref shape) => {
            let mut t = Tensor::zeros(shape);
            t.data_mut()[index] = get(s).item();
            t
        }
    }
}
