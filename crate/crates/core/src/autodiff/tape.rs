//! Tape-based reverse-mode differentiation over rank ≤ 2 tensors.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the tape is already in topological order and the
//! backward pass is a single reverse sweep.

use std::cell::RefCell;

use super::kernels;
use super::tensor::{dims2, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    SumRows(usize),
    MaxRows(usize, Vec<usize>),
    Softmax(usize, f64),
    LogSoftmax(usize, f64),
    L2Normalize(usize, Vec<f64>),
    ConcatRows(usize, usize),
    Contrastive(Box<ContrastiveCache>),
}

#[derive(Debug)]
struct ContrastiveCache {
    input: usize,
    anchors: usize,
    labels: Vec<usize>,
    tau: f64,
    /// Per-anchor log-sum-exp over `j ≠ i`.
    lse: Vec<f64>,
    /// Per-anchor positive count.
    positives: Vec<usize>,
    /// `anchors × rows` softmax weights over `j ≠ i`, zero on the diagonal.
    prob: Vec<f64>,
}

/// Anchor rows per block in the contrastive kernels.
const CONTRASTIVE_BLOCK: usize = 64;

impl ContrastiveCache {
    /// `s_ij = a_i·a_j/τ` for anchors `i` in `lo..hi` and every row `j`.
    fn similarities(&self, a: &[f64], rows: usize, cols: usize, lo: usize, hi: usize) -> Vec<f64> {
        let mut s = kernels::mm_bt(&a[lo * cols..hi * cols], a, hi - lo, cols, rows);
        s.iter_mut().for_each(|v| *v /= self.tau);
        s
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Single-threaded: a tape is not `Sync`. Independent tapes on separate
/// threads share nothing.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar loss with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `var` into `tensor.grad`; repeated calls accumulate.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Ok(());
        }
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>().max(1), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf; it receives a gradient iff `requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].shape.is_empty() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
        }
        // Only leaf gradients are kept.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) || !nodes[id].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if nodes[*b].requires_grad {
                let (_, c) = dims2(&node.shape);
                accumulate(grads, nodes, *b, kernels::column_sums(g, c));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.iter().map(|v| v * s).collect()),
        Op::Shift(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (m, k) = dims2(&nodes[*a].shape);
            let (_, n) = dims2(&nodes[*b].shape);
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, kernels::mm_bt(g, &nodes[*b].value, m, n, k));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, kernels::mm_at(&nodes[*a].value, g, m, k, n));
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = dims2(&nodes[*a].shape);
            let (n, _) = dims2(&nodes[*b].shape);
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, kernels::mm(g, &nodes[*b].value, m, n, k));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, kernels::mm_at(g, &nodes[*a].value, m, n, k));
            }
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            let d = g
                .iter()
                .zip(x)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
        Op::Log(a) => {
            let x = &nodes[*a].value;
            accumulate(grads, nodes, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, vec![g[0]; nodes[*a].value.len()]),
        Op::SumRows(a) => {
            let (r, c) = dims2(&nodes[*a].shape);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = g[i]);
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::MaxRows(a, argmax) => {
            let (r, c) = dims2(&nodes[*a].shape);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c + argmax[i]] = g[i];
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax(a, t) => {
            let (r, c) = dims2(&node.shape);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let y = &out[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    d[i * c + j] = y[j] * (gr[j] - dot) / t;
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::LogSoftmax(a, t) => {
            let (r, c) = dims2(&node.shape);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let y = &out[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    d[i * c + j] = (gr[j] - y[j].exp() * total) / t;
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::L2Normalize(a, norms) => {
            let (r, c) = dims2(&node.shape);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let y = &out[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    d[i * c + j] = (gr[j] - y[j] * dot) / norms[i];
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[*a].value.len();
            accumulate(grads, nodes, *a, g[..split].to_vec());
            accumulate(grads, nodes, *b, g[split..].to_vec());
        }
        Op::Contrastive(c) => {
            let a = &nodes[c.input].value;
            let (rows, cols) = dims2(&nodes[c.input].shape);
            let mut d = vec![0.0; rows * cols];
            for lo in (0..c.anchors).step_by(CONTRASTIVE_BLOCK) {
                let hi = (lo + CONTRASTIVE_BLOCK).min(c.anchors);
                // w_ij = g_i (softmax_ij − [j ∈ P(i)]/|P(i)|) / τ, zero on the diagonal
                let mut w = c.prob[lo * rows..hi * rows].to_vec();
                for i in lo..hi {
                    let row = &mut w[(i - lo) * rows..(i - lo + 1) * rows];
                    if c.positives[i] == 0 || g[i] == 0.0 {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let inv_p = 1.0 / c.positives[i] as f64;
                    for j in (0..c.anchors).filter(|&j| j != i && c.labels[j] == c.labels[i]) {
                        row[j] -= inv_p;
                    }
                    let scale = g[i] / c.tau;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                let n = hi - lo;
                let own = kernels::mm(&w, a, n, rows, cols);
                d[lo * cols..hi * cols].iter_mut().zip(&own).for_each(|(x, y)| *x += y);
                let other = kernels::mm_at(&w, &a[lo * cols..hi * cols], n, rows, cols);
                d.iter_mut().zip(&other).for_each(|(x, y)| *x += y);
            }
            accumulate(grads, nodes, c.input, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.tape.nodes.borrow()[self.id].shape)
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrows the forward value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape shapes are valid")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn zip_same(&self, other: &Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape, b.shape
            )));
        }
        let v = a.value.iter().zip(&b.value).map(|(x, y)| f(*x, *y)).collect();
        Ok((a.shape.clone(), v))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.iter().map(|x| f(*x)).collect())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (s, v) = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, s, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (s, v) = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, s, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (s, v) = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, s, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a length-`c` row vector to every row of an `r×c` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[row.id]);
            let (r, c) = dims2(&a.shape);
            if b.shape != [c] {
                return Err(Error::shape(format!(
                    "add_row: row of shape {:?} for matrix {:?}",
                    b.shape, a.shape
                )));
            }
            let mut v = a.value.clone();
            for i in 0..r {
                v[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&b.value)
                    .for_each(|(x, y)| *x += y);
            }
            (a.shape.clone(), v)
        };
        Ok(self.binary(row, shape, value, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let (shape, v) = self.map(|x| x * s);
        self.unary(shape, v, Op::Scale(self.id, s))
    }

    /// Adds a constant tensor; the gradient passes through unchanged.
    pub fn shift(&self, offset: &[f64]) -> Result<Var<'t>> {
        let (shape, mut v) = self.map(|x| x);
        if offset.len() != v.len() {
            return Err(Error::shape("shift: offset length mismatch"));
        }
        v.iter_mut().zip(offset).for_each(|(x, o)| *x += o);
        Ok(self.unary(shape, v, Op::Shift(self.id)))
    }

    /// `self · other` for `m×k` and `k×n` matrices.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape, b.shape
                )));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (vec![m, n], kernels::mm(&a.value, &b.value, m, k, n))
        };
        Ok(self.binary(other, shape, value, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ` for `m×k` and `n×k` matrices.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                return Err(Error::shape(format!(
                    "matmul_t: {:?} x {:?}ᵀ",
                    a.shape, b.shape
                )));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            (vec![m, n], kernels::mm_bt(&a.value, &b.value, m, k, n))
        };
        Ok(self.binary(other, shape, value, Op::MatMulT(self.id, other.id)))
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&self) -> Var<'t> {
        let (s, v) = self.map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(s, v, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let (s, v) = self.map(f64::exp);
        self.unary(s, v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let (s, v) = self.map(f64::ln);
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("log of a negative value".into()));
        }
        Ok(self.unary(s, v, Op::Log(self.id)))
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&self) -> Var<'t> {
        let total = self.with_value(|v| v.iter().sum());
        self.unary(Vec::new(), vec![total], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with_value(|v| v.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums of an `r×c` matrix, shape `[r]`.
    pub fn sum_rows(&self) -> Var<'t> {
        let (r, c) = self.dims2();
        let v = self.with_value(|v| (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect());
        self.unary(vec![r], v, Op::SumRows(self.id))
    }

    /// Row maxima, shape `[r]`; the gradient goes to the first maximiser.
    pub fn max_rows(&self) -> Var<'t> {
        let (r, c) = self.dims2();
        let (v, arg): (Vec<f64>, Vec<usize>) = self.with_value(|v| {
            (0..r)
                .map(|i| {
                    let row = &v[i * c..(i + 1) * c];
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    (row[best], best)
                })
                .unzip()
        });
        self.unary(vec![r], v, Op::MaxRows(self.id, arg))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let (r, c) = self.dims2();
        let v = self.with_value(|v| {
            let mut out = vec![0.0; v.len()];
            for i in 0..r {
                kernels::softmax_into(&v[i * c..(i + 1) * c], temperature, &mut out[i * c..(i + 1) * c]);
            }
            out
        });
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax of non-finite logits".into()));
        }
        Ok(self.unary(self.shape(), v, Op::Softmax(self.id, temperature)))
    }

    /// Row-wise `log_softmax(x / temperature)` via log-sum-exp.
    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let (r, c) = self.dims2();
        let v = self.with_value(|v| {
            let mut out = vec![0.0; v.len()];
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let lse = kernels::log_sum_exp_scaled(row, temperature);
                for j in 0..c {
                    out[i * c + j] = row[j] / temperature - lse;
                }
            }
            out
        });
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("log_softmax of non-finite logits".into()));
        }
        Ok(self.unary(self.shape(), v, Op::LogSoftmax(self.id, temperature)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims2();
        let (v, norms) = self.with_value(|v| {
            let mut out = v.to_vec();
            let mut norms = Vec::with_capacity(r);
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
            (out, norms)
        });
        if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {} and cannot be normalised",
                norms[i]
            )));
        }
        Ok(self.unary(self.shape(), v, Op::L2Normalize(self.id, norms)))
    }

    /// Stacks the rows of `other` below the rows of `self`.
    pub fn concat_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                return Err(Error::shape(format!(
                    "concat_rows: {:?} and {:?}",
                    a.shape, b.shape
                )));
            }
            let mut v = a.value.clone();
            v.extend_from_slice(&b.value);
            (vec![a.shape[0] + b.shape[0], a.shape[1]], v)
        };
        Ok(self.binary(other, shape, value, Op::ConcatRows(self.id, other.id)))
    }

    /// Per-anchor supervised contrastive terms over the rows of `self`.
    ///
    /// Rows `0..labels.len()` are anchors; the remaining rows only enter
    /// denominators. With `s_ij = a_i·a_j / τ` and `P(i)` the other anchors
    /// sharing `labels[i]`, the output `[anchors]` holds
    /// `log Σ_{j≠i} exp(s_ij) − mean_{p∈P(i)} s_ip`, or exactly 0 when `P(i)`
    /// is empty.
    pub fn contrastive_rows(&self, labels: &[usize], tau: f64) -> Result<Var<'t>> {
        check_temperature(tau)?;
        let anchors = labels.len();
        let (value, cache) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            if node.shape.len() != 2 || anchors == 0 || anchors > node.shape[0] {
                return Err(Error::shape(format!(
                    "contrastive_rows: {anchors} anchors over shape {:?}",
                    node.shape
                )));
            }
            let (rows, cols) = (node.shape[0], node.shape[1]);
            let positives: Vec<usize> = labels
                .iter()
                .enumerate()
                .map(|(i, y)| labels.iter().enumerate().filter(|&(j, l)| j != i && l == y).count())
                .collect();
            let mut cache = ContrastiveCache {
                input: self.id,
                anchors,
                labels: labels.to_vec(),
                tau,
                lse: vec![0.0; anchors],
                positives,
                prob: Vec::with_capacity(anchors * rows),
            };
            let mut value = vec![0.0; anchors];
            for lo in (0..anchors).step_by(CONTRASTIVE_BLOCK) {
                let hi = (lo + CONTRASTIVE_BLOCK).min(anchors);
                let mut s = cache.similarities(&node.value, rows, cols, lo, hi);
                for i in lo..hi {
                    let row = &mut s[(i - lo) * rows..(i - lo + 1) * rows];
                    let pos: f64 = (0..anchors)
                        .filter(|&j| j != i && labels[j] == labels[i])
                        .map(|j| row[j])
                        .sum();
                    row[i] = f64::NEG_INFINITY;
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    if !m.is_finite() {
                        // single row: empty denominator
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        total += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= total);
                    let lse = m + total.ln();
                    cache.lse[i] = lse;
                    if cache.positives[i] > 0 {
                        value[i] = lse - pos / cache.positives[i] as f64;
                    }
                }
                cache.prob.extend_from_slice(&s);
            }
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite contrastive term".into()));
            }
            (value, cache)
        };
        Ok(self.unary(vec![anchors], value, Op::Contrastive(Box::new(cache))))
    }

    /// Copy of the value with no route back for gradients.
    pub fn detach(&self) -> Var<'t> {
        let (s, v) = self.map(|x| x);
        self.tape.push(s, v, Op::Leaf, false)
    }

    pub fn numel(&self) -> usize {
        self.with_value(|v| v.len())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}
