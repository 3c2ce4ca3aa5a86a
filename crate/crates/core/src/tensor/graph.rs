use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::{kernels, numel, Result, Tensor, TensorError};

/// Recorded operation; ids refer to earlier nodes on the same tape.
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, batch: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize, cols: usize },
    Scale { a: usize, factor: f64 },
    Shift { a: usize },
    Reshape { a: usize },
    Concat { parts: Vec<(usize, usize)>, rows: usize, width: usize },
    Slice { a: usize, start: usize, width: usize, in_width: usize },
    Softmax { a: usize, cols: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: usize },
    Embedding { table: usize, ids: Vec<usize>, cols: usize },
    GatherRows { a: usize, rows: Vec<usize>, cols: usize },
    Sum { a: usize },
    Mean { a: usize },
    Mse { pred: usize, target: usize },
    SoftCrossEntropy { logits: usize, target: usize, probs: Vec<f64>, cols: usize },
    CosineRows { a: usize, b: usize, cols: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Dynamic tape recording operations in execution order.
///
/// A graph belongs to one thread for the duration of a forward/backward
/// pass. [`Graph::backward`] may run once; afterwards the graph is spent.
#[derive(Default)]
pub struct Graph {
    tape: RefCell<Tape>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad and fed the loss; `None` otherwise.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[var.id].clone(), Arc::new(g.clone())))
    }

    pub fn data(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id)?.take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a leaf; it receives a gradient iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), Arc::clone(tensor.storage()), Op::Leaf, tensor.requires_grad())
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), Arc::clone(tensor.storage()), Op::Leaf, false)
    }

    fn push(&self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut tape = self.tape.borrow_mut();
        debug_assert_eq!(numel(&shape), value.len());
        tape.nodes.push(Node { shape, value, op, needs_grad });
        Var { graph: self, id: tape.nodes.len() - 1 }
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.tape.borrow().nodes[id].shape.clone()
    }

    fn value_of(&self, id: usize) -> Arc<Vec<f64>> {
        Arc::clone(&self.tape.borrow().nodes[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.tape.borrow().nodes[id].needs_grad
    }

    /// Back-propagates from a scalar loss. Errors if called twice.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut tape = self.tape.borrow_mut();
        if tape.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let loss_shape = &tape.nodes[loss.id].shape;
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.clone()));
        }
        tape.consumed = true;
        let nodes = &tape.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            backprop(nodes, id, &g, &mut grads);
        }
        let shapes =
            nodes.iter().map(|n| if matches!(n.op, Op::Leaf) { n.shape.clone() } else { Vec::new() }).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &[f64] { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(grads, nodes, a) {
                kernels::gemm(m, n, k, g, false, val(b), true, da, 1.0);
            }
            if let Some(db) = slot(grads, nodes, b) {
                kernels::gemm(k, m, n, val(a), true, g, false, db, 1.0);
            }
        }
        &Op::BatchMatMul { a, b, batch, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            if let Some(da) = slot(grads, nodes, a) {
                for t in 0..batch {
                    kernels::gemm(m, n, k, &g[t * m * n..], false, &bv[t * k * n..], true, &mut da[t * m * k..], 1.0);
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for t in 0..batch {
                    kernels::gemm(k, m, n, &av[t * m * k..], true, &g[t * m * n..], false, &mut db[t * k * n..], 1.0);
                }
            }
        }
        &Op::Transpose { a, batch, rows, cols } => {
            if let Some(da) = slot(grads, nodes, a) {
                let mut tmp = vec![0.0; g.len()];
                kernels::transpose_into(g, batch, cols, rows, &mut tmp);
                add_into(da, &tmp);
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, b) {
                add_into(db, g);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, b) {
                db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
            }
        }
        &Op::Mul { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(g).zip(val(b)).for_each(|((d, gv), bv)| *d += gv * bv);
            }
            if let Some(db) = slot(grads, nodes, b) {
                db.iter_mut().zip(g).zip(val(a)).for_each(|((d, gv), av)| *d += gv * av);
            }
        }
        &Op::AddBias { a, bias, cols } => {
            if let Some(da) = slot(grads, nodes, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, bias) {
                for row in g.chunks_exact(cols) {
                    add_into(db, row);
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(g).for_each(|(d, gv)| *d += factor * gv);
            }
        }
        &Op::Shift { a } | &Op::Reshape { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                add_into(da, g);
            }
        }
        Op::Concat { parts, rows, width } => {
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(dp) = slot(grads, nodes, p) {
                    for r in 0..*rows {
                        let src = &g[r * width + offset..r * width + offset + w];
                        add_into(&mut dp[r * w..(r + 1) * w], src);
                    }
                }
                offset += w;
            }
        }
        &Op::Slice { a, start, width, in_width } => {
            if let Some(da) = slot(grads, nodes, a) {
                for (r, src) in g.chunks_exact(width).enumerate() {
                    add_into(&mut da[r * in_width + start..r * in_width + start + width], src);
                }
            }
        }
        &Op::Softmax { a, cols } => {
            if let Some(da) = slot(grads, nodes, a) {
                let y = &node.value;
                for ((dst, gy), yy) in da.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                    let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gy).zip(yy) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, cols, xhat, inv_std } => {
            let cols = *cols;
            let gv = val(*gain);
            if let Some(dx) = slot(grads, nodes, *x) {
                let n = cols as f64;
                for (r, ((dst, gy), xh)) in
                    dx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(xhat.chunks_exact(cols)).enumerate()
                {
                    let dxhat: Vec<f64> = gy.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let scale = inv_std[r] / n;
                    for ((d, dh), xv) in dst.iter_mut().zip(&dxhat).zip(xh) {
                        *d += scale * (n * dh - sum_d - xv * sum_dx);
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gain) {
                for (gy, xh) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    dg.iter_mut().zip(gy).zip(xh).for_each(|((d, a), b)| *d += a * b);
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for gy in g.chunks_exact(cols) {
                    add_into(db, gy);
                }
            }
        }
        &Op::Gelu { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().zip(g).zip(val(a)).for_each(|((d, gv), x)| *d += gv * kernels::gelu_grad(*x));
            }
        }
        Op::Embedding { table, ids, cols } => {
            if let Some(dt) = slot(grads, nodes, *table) {
                for (row, &tok) in g.chunks_exact(*cols).zip(ids) {
                    add_into(&mut dt[tok * cols..(tok + 1) * cols], row);
                }
            }
        }
        Op::GatherRows { a, rows, cols } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (row, &r) in g.chunks_exact(*cols).zip(rows) {
                    add_into(&mut da[r * cols..(r + 1) * cols], row);
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                let s = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Mse { pred, target } => {
            if let Some(dp) = slot(grads, nodes, pred) {
                let s = 2.0 * g[0] / dp.len() as f64;
                dp.iter_mut().zip(val(pred)).zip(val(target)).for_each(|((d, p), t)| *d += s * (p - t));
            }
        }
        Op::SoftCrossEntropy { logits, target, probs, cols } => {
            if let Some(dl) = slot(grads, nodes, *logits) {
                let t = val(*target);
                let rows = t.len() / cols;
                let s = g[0] / rows as f64;
                for ((dst, p), tt) in
                    dl.chunks_exact_mut(*cols).zip(probs.chunks_exact(*cols)).zip(t.chunks_exact(*cols))
                {
                    let mass: f64 = tt.iter().sum();
                    for ((d, pv), tv) in dst.iter_mut().zip(p).zip(tt) {
                        *d += s * (pv * mass - tv);
                    }
                }
            }
        }
        &Op::CosineRows { a, b, cols } => {
            let (av, bv) = (val(a), val(b));
            let mut da_rows = vec![0.0; av.len()];
            let mut db_rows = vec![0.0; bv.len()];
            for (r, gr) in g.iter().enumerate() {
                let x = &av[r * cols..(r + 1) * cols];
                let y = &bv[r * cols..(r + 1) * cols];
                let (nx, ny, dot) = norms_dot(x, y);
                let cos = dot / (nx * ny);
                for c in 0..cols {
                    da_rows[r * cols + c] = gr * (y[c] / (nx * ny) - cos * x[c] / (nx * nx));
                    db_rows[r * cols + c] = gr * (x[c] / (nx * ny) - cos * y[c] / (ny * ny));
                }
            }
            if let Some(da) = slot(grads, nodes, a) {
                add_into(da, &da_rows);
            }
            if let Some(db) = slot(grads, nodes, b) {
                add_into(db, &db_rows);
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn norms_dot(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    let dot = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (nx, ny, dot)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    shape.last().copied().ok_or_else(|| TensorError::InvalidArgument { op, reason: "needs rank >= 1".into() })
}

impl<'g> Var<'g> {
    fn same_graph(&self, other: &Var<'g>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument { op, reason: "operands recorded on different graphs".into() })
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    /// Current value, detached from the graph.
    pub fn value(&self) -> Tensor {
        Tensor::from_parts(self.shape(), self.graph.value_of(self.id))
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Same value as a constant node: gradients stop here.
    pub fn detach(&self) -> Var<'g> {
        self.graph.push(self.shape(), self.graph.value_of(self.id), Op::Leaf, false)
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'g> {
        self.graph.push(shape, Arc::new(value), op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g>, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'g> {
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(shape, Arc::new(value), op, needs)
    }

    /// `[..., k] × [k, n] → [..., n]`; leading axes are flattened into rows.
    pub fn matmul(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs, "matmul")?;
        let (sa, sb) = (self.shape(), rhs.shape());
        let k = last_dim("matmul", &sa)?;
        if sb.len() != 2 || sb[0] != k {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.graph.value_of(self.id), false, &rhs.graph.value_of(rhs.id), false, &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.binary(&rhs, shape, out, Op::MatMul { a: self.id, b: rhs.id, m, k, n }))
    }

    /// Batched product over matching leading axes: `[.., m, k] × [.., k, n]`.
    pub fn bmm(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs, "bmm")?;
        let (sa, sb) = (self.shape(), rhs.shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let (av, bv) = (self.graph.value_of(self.id), self.graph.value_of(rhs.id));
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            kernels::gemm(m, k, n, &av[t * m * k..], false, &bv[t * k * n..], false, &mut out[t * m * n..], 0.0);
        }
        let mut shape = sa;
        shape[r - 1] = n;
        Ok(self.binary(&rhs, shape, out, Op::BatchMatMul { a: self.id, b: rhs.id, batch, m, k, n }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let s = self.shape();
        let r = s.len();
        if r < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("needs rank >= 2, got {s:?}"),
            });
        }
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch = numel(&s[..r - 2]);
        let mut out = vec![0.0; numel(&s)];
        kernels::transpose_into(&self.graph.value_of(self.id), batch, rows, cols, &mut out);
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        Ok(self.unary(shape, out, Op::Transpose { a: self.id, batch, rows, cols }))
    }

    fn zip_same(&self, rhs: &Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        self.same_graph(rhs, op)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(mismatch(op, &sa, &sb));
        }
        let (av, bv) = (self.graph.value_of(self.id), self.graph.value_of(rhs.id));
        Ok((sa, av.iter().zip(bv.iter()).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn add(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (shape, out) = self.zip_same(&rhs, "add", |a, b| a + b)?;
        Ok(self.binary(&rhs, shape, out, Op::Add { a: self.id, b: rhs.id }))
    }

    pub fn sub(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (shape, out) = self.zip_same(&rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(&rhs, shape, out, Op::Sub { a: self.id, b: rhs.id }))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (shape, out) = self.zip_same(&rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(&rhs, shape, out, Op::Mul { a: self.id, b: rhs.id }))
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_bias(&self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&bias, "add_bias")?;
        let (s, sb) = (self.shape(), bias.shape());
        let cols = last_dim("add_bias", &s)?;
        if sb != [cols] {
            return Err(mismatch("add_bias", &s, &sb));
        }
        let bv = self.graph.value_of(bias.id);
        let mut out = self.graph.value_of(self.id).to_vec();
        for row in out.chunks_exact_mut(cols) {
            add_into(row, &bv);
        }
        Ok(self.binary(&bias, s, out, Op::AddBias { a: self.id, bias: bias.id, cols }))
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        let out = self.graph.value_of(self.id).iter().map(|v| v * factor).collect();
        self.unary(self.shape(), out, Op::Scale { a: self.id, factor })
    }

    pub fn add_scalar(&self, shift: f64) -> Var<'g> {
        let out = self.graph.value_of(self.id).iter().map(|v| v + shift).collect();
        self.unary(self.shape(), out, Op::Shift { a: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let s = self.shape();
        if numel(shape) != numel(&s) || shape.contains(&0) {
            return Err(mismatch("reshape", &s, shape));
        }
        let needs = self.requires_grad();
        Ok(self.graph.push(shape.to_vec(), self.graph.value_of(self.id), Op::Reshape { a: self.id }, needs))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&self, start: usize, width: usize) -> Result<Var<'g>> {
        let s = self.shape();
        let in_width = last_dim("slice_last", &s)?;
        if width == 0 || start + width > in_width {
            return Err(TensorError::IndexOutOfRange { op: "slice_last", index: start + width, bound: in_width });
        }
        let v = self.graph.value_of(self.id);
        let out: Vec<f64> =
            v.chunks_exact(in_width).flat_map(|row| row[start..start + width].iter().copied()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = width;
        Ok(self.unary(shape, out, Op::Slice { a: self.id, start, width, in_width }))
    }

    /// Stable softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let s = self.shape();
        let cols = last_dim("softmax", &s)?;
        let v = self.graph.value_of(self.id);
        let mut out = vec![0.0; v.len()];
        kernels::softmax_rows(&v, cols, &mut out);
        Ok(self.unary(s, out, Op::Softmax { a: self.id, cols }))
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(&gain, "layernorm")?;
        self.same_graph(&bias, "layernorm")?;
        let s = self.shape();
        let cols = last_dim("layernorm", &s)?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(mismatch("layernorm", &s, &gain.shape()));
        }
        let (xhat, inv_std) = kernels::standardize_rows(&self.graph.value_of(self.id), cols, eps);
        let (gv, bv) = (self.graph.value_of(gain.id), self.graph.value_of(bias.id));
        let mut out = vec![0.0; xhat.len()];
        for (dst, src) in out.chunks_exact_mut(cols).zip(xhat.chunks_exact(cols)) {
            for c in 0..cols {
                dst[c] = gv[c] * src[c] + bv[c];
            }
        }
        let needs = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            s,
            Arc::new(out),
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, cols, xhat, inv_std },
            needs,
        ))
    }

    /// GELU, tanh approximation with cubic constant 0.044715.
    pub fn gelu(&self) -> Var<'g> {
        let out = self.graph.value_of(self.id).iter().map(|&x| kernels::gelu(x)).collect();
        self.unary(self.shape(), out, Op::Gelu { a: self.id })
    }

    /// Selects rows of the `[rows, cols]` view (leading axes flattened).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'g>> {
        let s = self.shape();
        let cols = last_dim("gather_rows", &s)?;
        let total = numel(&s) / cols;
        if rows.is_empty() {
            return Err(TensorError::InvalidArgument { op: "gather_rows", reason: "no rows selected".into() });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: bad, bound: total });
        }
        let v = self.graph.value_of(self.id);
        let out: Vec<f64> = rows.iter().flat_map(|&r| v[r * cols..(r + 1) * cols].iter().copied()).collect();
        Ok(self.unary(vec![rows.len(), cols], out, Op::GatherRows { a: self.id, rows: rows.to_vec(), cols }))
    }

    pub fn sum(&self) -> Var<'g> {
        let total = self.graph.value_of(self.id).iter().sum();
        self.unary(Vec::new(), vec![total], Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'g> {
        let v = self.graph.value_of(self.id);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.unary(Vec::new(), vec![m], Op::Mean { a: self.id })
    }
}

/// Concatenates along the last axis; leading axes must agree.
pub fn concat_last<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::InvalidArgument { op: "concat_last", reason: "nothing to concatenate".into() })?;
    let lead = first.shape();
    let lead = &lead[..lead.len().saturating_sub(1)];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_graph(p, "concat_last")?;
        let s = p.shape();
        if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
            return Err(mismatch("concat_last", &first.shape(), &s));
        }
        widths.push(s[lead.len()]);
    }
    let width: usize = widths.iter().sum();
    let rows = numel(lead);
    let mut out = vec![0.0; rows * width];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let v = p.graph.value_of(p.id);
        for r in 0..rows {
            out[r * width + offset..r * width + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let mut shape = lead.to_vec();
    shape.push(width);
    let needs = parts.iter().any(|p| p.requires_grad());
    let op = Op::Concat { parts: parts.iter().map(|p| p.id).zip(widths).collect(), rows, width };
    Ok(first.graph.push(shape, Arc::new(out), op, needs))
}

/// Splits the last axis into `parts` equal slices.
pub fn split_last<'g>(x: Var<'g>, parts: usize) -> Result<Vec<Var<'g>>> {
    let width = last_dim("split_last", &x.shape())?;
    if parts == 0 || width % parts != 0 {
        return Err(TensorError::InvalidArgument {
            op: "split_last",
            reason: format!("{parts} parts do not divide width {width}"),
        });
    }
    let w = width / parts;
    (0..parts).map(|p| x.slice_last(p * w, w)).collect()
}

/// Looks up rows of a `[vocab, dim]` table; output is `[ids.len(), dim]`.
pub fn embedding<'g>(table: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
    let s = table.shape();
    if s.len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "embedding",
            reason: format!("table must be a matrix, got {s:?}"),
        });
    }
    let (vocab, cols) = (s[0], s[1]);
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
        return Err(TensorError::IndexOutOfRange { op: "embedding", index: bad, bound: vocab });
    }
    if ids.is_empty() {
        return Err(TensorError::InvalidArgument { op: "embedding", reason: "empty id list".into() });
    }
    let v = table.graph.value_of(table.id);
    let out: Vec<f64> = ids.iter().flat_map(|&t| v[t * cols..(t + 1) * cols].iter().copied()).collect();
    Ok(table.unary(vec![ids.len(), cols], out, Op::Embedding { table: table.id, ids: ids.to_vec(), cols }))
}

/// Mean over all elements of `(pred - target)²`; `target` is treated as a constant.
pub fn mse<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    pred.same_graph(&target, "mse")?;
    let (sp, st) = (pred.shape(), target.shape());
    if sp != st {
        return Err(mismatch("mse", &sp, &st));
    }
    let (pv, tv) = (pred.graph.value_of(pred.id), pred.graph.value_of(target.id));
    let loss = pv.iter().zip(tv.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pv.len() as f64;
    Ok(pred.unary(Vec::new(), vec![loss], Op::Mse { pred: pred.id, target: target.id }))
}

/// Row-mean of `-Σ target · log_softmax(logits)` over the last axis.
///
/// `target` rows must be probability distributions and are treated as constants.
pub fn soft_cross_entropy<'g>(target: Var<'g>, logits: Var<'g>) -> Result<Var<'g>> {
    logits.same_graph(&target, "soft_cross_entropy")?;
    let (st, sl) = (target.shape(), logits.shape());
    if st != sl {
        return Err(mismatch("soft_cross_entropy", &st, &sl));
    }
    let cols = last_dim("soft_cross_entropy", &sl)?;
    let (tv, lv) = (target.graph.value_of(target.id), logits.graph.value_of(logits.id));
    if !lv.iter().all(|v| v.is_finite()) || !tv.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite("soft_cross_entropy"));
    }
    for row in tv.chunks_exact(cols) {
        let mass: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (mass - 1.0).abs() > 1e-6 {
            return Err(TensorError::InvalidArgument {
                op: "soft_cross_entropy",
                reason: format!("target row is not a distribution (mass {mass})"),
            });
        }
    }
    let mut logp = vec![0.0; lv.len()];
    kernels::log_softmax_rows(&lv, cols, &mut logp);
    let rows = lv.len() / cols;
    let total: f64 = tv.iter().zip(&logp).map(|(t, l)| if *t == 0.0 { 0.0 } else { -t * l }).sum();
    let probs = logp.iter().map(|l| l.exp()).collect();
    Ok(logits.unary(
        Vec::new(),
        vec![total / rows as f64],
        Op::SoftCrossEntropy { logits: logits.id, target: target.id, probs, cols },
    ))
}

/// Cosine similarity of matching rows; output has one entry per row.
pub fn cosine_similarity_rows<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    a.same_graph(&b, "cosine_similarity_rows")?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(mismatch("cosine_similarity_rows", &sa, &sb));
    }
    let cols = last_dim("cosine_similarity_rows", &sa)?;
    let (av, bv) = (a.graph.value_of(a.id), a.graph.value_of(b.id));
    let out: Vec<f64> = av
        .chunks_exact(cols)
        .zip(bv.chunks_exact(cols))
        .map(|(x, y)| {
            let (nx, ny, dot) = norms_dot(x, y);
            dot / (nx * ny)
        })
        .collect();
    let rows = out.len();
    Ok(a.binary(&b, vec![rows], out, Op::CosineRows { a: a.id, b: b.id, cols }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let g = Graph::new();
        let m = g.constant(&t(&[&[1.5, -2.0], &[0.25, 4.0]]));
        let eye = g.constant(&Tensor::eye(2));
        assert_eq!(eye.matmul(m).unwrap().value(), m.value());
        let a = g.constant(&t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = g.constant(&t(&[&[1.0], &[1.0]]));
        let y = a.matmul(ones).unwrap();
        assert_eq!(y.shape(), vec![2, 1]);
        assert_eq!(y.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_edge_cases() {
        let g = Graph::new();
        let x = g.constant(&t(&[&[0.0, 0.0, 0.0, 0.0], &[1000.0, 0.0, -5.0, 2.0]]));
        let y = x.softmax().unwrap().value();
        assert_eq!(&y.data()[..4], &[0.25; 4]);
        assert!((y.data()[4] - 1.0).abs() < 1e-12);
        assert!(y.is_finite());
        let z = g.constant(&t(&[&[1.0, 2.0, 3.0]])).softmax().unwrap().value();
        assert!((z.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_edge_cases() {
        let g = Graph::new();
        let gain = g.constant(&Tensor::ones(&[2]));
        let bias = g.constant(&Tensor::zeros(&[2]));
        let y = g.constant(&t(&[&[1.0, 3.0]])).layernorm(gain, bias, 1e-12).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-10 && (y.data()[1] - 1.0).abs() < 1e-10);
        let gain4 = g.constant(&Tensor::ones(&[4]));
        let bias4 = g.constant(&Tensor::zeros(&[4]));
        let c = g.constant(&t(&[&[7.0; 4]])).layernorm(gain4, bias4, 1e-12).unwrap().value();
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mse_values() {
        let g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[2, 2]));
        let o = g.constant(&Tensor::ones(&[2, 2]));
        assert_eq!(mse(z, o).unwrap().item(), 1.0);
        assert_eq!(mse(o, o).unwrap().item(), 0.0);
        assert!(mse(z, g.constant(&Tensor::zeros(&[4]))).is_err());
    }

    #[test]
    fn soft_cross_entropy_uniform_is_ln4() {
        let g = Graph::new();
        let target = g.constant(&Tensor::full(&[3, 4], 0.25));
        let logits = g.constant(&Tensor::zeros(&[3, 4]));
        let ce = soft_cross_entropy(target, logits).unwrap().item();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn soft_cross_entropy_rejects_bad_inputs() {
        let g = Graph::new();
        let bad = g.constant(&Tensor::full(&[1, 2], 0.7));
        let logits = g.constant(&Tensor::zeros(&[1, 2]));
        assert!(soft_cross_entropy(bad, logits).is_err());
        let nan = g.constant(&Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        let ok = g.constant(&Tensor::full(&[1, 2], 0.5));
        assert_eq!(soft_cross_entropy(ok, nan).unwrap_err(), TensorError::NonFinite("soft_cross_entropy"));
    }

    #[test]
    fn soft_cross_entropy_stationary_when_target_matches() {
        let g = Graph::new();
        let logits_t = t(&[&[0.3, -1.2, 2.0], &[1.0, 1.5, -0.5]]).with_grad();
        let logits = g.leaf(&logits_t);
        let target = logits.softmax().unwrap().detach();
        let loss = soft_cross_entropy(target, logits).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.get(logits).unwrap();
        assert!(d.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn second_backward_is_an_error() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::ones(&[2]).with_grad());
        let loss = x.sum();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).err(), Some(TensorError::GraphConsumed));
    }

    #[test]
    fn grad_present_only_for_participating_trainable_leaves() {
        let g = Graph::new();
        let used = g.leaf(&Tensor::ones(&[2]).with_grad());
        let unused = g.leaf(&Tensor::ones(&[2]).with_grad());
        let frozen = g.leaf(&Tensor::ones(&[2]));
        let loss = used.mul(frozen).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(used).unwrap().shape(), &[2]);
        assert!(grads.get(unused).is_none());
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::ones(&[2]).with_grad());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn concat_split_roundtrip() {
        let g = Graph::new();
        let x = g.constant(&Tensor::new(vec![2, 3, 6], (0..36).map(f64::from).collect()).unwrap());
        let parts = split_last(x, 3).unwrap();
        assert_eq!(parts[1].shape(), vec![2, 3, 2]);
        assert_eq!(concat_last(&parts).unwrap().value(), x.value());
        assert!(split_last(x, 4).is_err());
    }

    #[test]
    fn gather_and_embedding_bounds() {
        let g = Graph::new();
        let table = g.constant(&Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        assert_eq!(embedding(table, &[2, 0]).unwrap().value().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(embedding(table, &[3]).is_err());
        assert_eq!(table.gather_rows(&[1]).unwrap().value().data(), &[2.0, 3.0]);
        assert!(table.gather_rows(&[5]).is_err());
    }

    #[test]
    fn cosine_rows_values() {
        let g = Graph::new();
        let a = g.constant(&t(&[&[1.0, 2.0], &[3.0, -1.0]]));
        let b = g.constant(&t(&[&[-1.0, -2.0], &[30.0, -10.0]]));
        let c = cosine_similarity_rows(a, b).unwrap().value();
        assert!((c.data()[0] + 1.0).abs() < 1e-12);
        assert!((c.data()[1] - 1.0).abs() < 1e-12);
    }
}
