use std::borrow::Cow;

use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `[rows, cols]` attention mask; `true` marks an entry that is kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(TensorError::Length {
                shape: vec![rows, cols],
                len: keep.len(),
            });
        }
        Ok(Mask { rows, cols, keep })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let keep = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Mask { rows, cols, keep }
    }

    /// Lower-triangular mask: row `p` sees columns `0..=p`.
    pub fn causal(n: usize) -> Self {
        Mask::from_fn(n, n, |r, c| c <= r)
    }

    /// Banded mask: `p` sees `j` iff `|p - j| <= (window / 2) * dilation` and
    /// `p - j` is a multiple of `dilation`.
    pub fn sliding_window(n: usize, window: usize, dilation: usize) -> Self {
        let dilation = dilation.max(1);
        let reach = (window / 2) * dilation;
        Mask::from_fn(n, n, |r, c| {
            let dist = r.abs_diff(c);
            dist <= reach && dist % dilation == 0
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

impl Node<'_> {
    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.value.len() / c,
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the variable does not influence the root.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// A Wengert list: every op appends one node whose inputs already exist, so
/// node order is a topological order and backward is a single reverse sweep.
///
/// Parameters are borrowed through [`Tape::param`], so building a graph over
/// a large parameter set copies nothing.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn grad_slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable leaf borrowing its data.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf owning its data.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: s.clone(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op_name = if transpose_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.matrix_dims(a, op_name)?;
        let (br, bc) = self.matrix_dims(b, op_name)?;
        let (bk, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(TensorError::Shape {
                op: op_name,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            transpose_b,
            &mut out,
            false,
        );
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, transpose_b }, g))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::Shape {
                op,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Add(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Mul(a, b), g))
    }

    /// Adds `row` (any shape with `cols(x)` elements) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.node(x).cols();
        if self.node(row).value.len() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(row).shape.clone(),
            });
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let g = self.grad_flag(&[x, row]);
        Ok(self.push(self.node(x).shape.clone(), out, Op::AddRow { x, row }, g))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let g = self.grad_flag(&[x]);
        self.push(self.node(x).shape.clone(), out, Op::Scale(x, s), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let g = self.grad_flag(&[x]);
        self.push(self.node(x).shape.clone(), out, Op::Gelu(x), g)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { index: bad, rows });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let g = self.grad_flag(&[table]);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if start + width > cols {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: vec![rows, cols],
                rhs: vec![start, width],
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        let g = self.grad_flag(&[x]);
        Ok(self.push(vec![rows, width], out, Op::SliceCols { x, start }, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.node(first).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let g = self.grad_flag(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(TensorError::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = self.node(x).cols();
        for p in [gain, bias] {
            if self.node(p).value.len() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.node(x).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
        }
        let rows = self.node(x).rows();
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(xv.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xv.chunks(d.max(1)).take(rows) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(gv)
                    .zip(bv)
                    .map(|((v, g), b)| (v - mean) * rstd * g + b),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        let g = self.grad_flag(&[x, gain, bias]);
        Ok(self.push(
            self.node(x).shape.clone(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            g,
        ))
    }

    /// Row-wise softmax with max subtraction. Masked entries come out as
    /// exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "softmax_rows")?;
        if let Some(m) = mask {
            if m.rows != rows || m.cols != cols {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![m.rows, m.cols],
                });
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let keep = |c: usize| mask.is_none_or(|m| m.keeps(r, c));
            let row = &xv[r * cols..(r + 1) * cols];
            if !(0..cols).any(keep) {
                return Err(TensorError::DegenerateRow { row: r });
            }
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for c in (0..cols).filter(|&c| keep(c)) {
                o[c] = (row[c] - max).exp();
                total += o[c];
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let g = self.grad_flag(&[x]);
        Ok(self.push(vec![rows, cols], out, Op::Softmax(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let g = self.grad_flag(&[x]);
        self.push(Vec::new(), vec![total], Op::Sum(x), g)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [n, v]`, skipping positions whose target is `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad && t >= v) {
            return Err(TensorError::Target {
                target: bad,
                classes: v,
            });
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut total = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                total += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= total);
            loss -= row[t] - max - total.ln();
        }
        loss /= count as f64;
        let g = self.grad_flag(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            g,
        ))
    }

    /// Reverse sweep from a scalar `root`. Gradients of every node feeding
    /// the root are accumulated additively.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = self.node(root);
        if rn.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (self.node(*a).shape[0], self.node(*a).shape[1]);
                let n = node.shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, dy, false, bv, !transpose_b, ga, true);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    if *transpose_b {
                        // C = A·Bᵀ  =>  dB = dCᵀ · A, shape [n, k]
                        gemm(n, m, k, dy, true, av, false, gb, true);
                    } else {
                        // dB = Aᵀ · dC, shape [k, n]
                        gemm(k, m, n, av, true, dy, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = grad_slot(nodes, grads, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(g) = grad_slot(nodes, grads, *a) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(g) = grad_slot(nodes, grads, *b) {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::AddRow { x, row } => {
                let cols = node.cols().max(1);
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = grad_slot(nodes, grads, *row) {
                    for chunk in dy.chunks(cols) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for ((g, d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        *g += d * gelu_grad(v);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = node.cols();
                if let Some(g) = grad_slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&dy[r * cols..(r + 1) * cols])
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.node(*x).shape[1];
                let width = node.shape[1];
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for (r, chunk) in dy.chunks(width.max(1)).enumerate().take(node.shape[0]) {
                        let dst = &mut g[r * cols + start..r * cols + start + width];
                        dst.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.node(p).shape[1];
                    if let Some(g) = grad_slot(nodes, grads, p) {
                        for r in 0..rows {
                            let src = &dy[r * total + offset..r * total + offset + w];
                            g[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    offset += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = node.cols();
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let xhat = |r: usize, c: usize| (xv[r * d + c] - mean[r]) * rstd[r];
                if let Some(g) = grad_slot(nodes, grads, *gain) {
                    for (r, chunk) in dy.chunks(d).enumerate() {
                        for (c, dv) in chunk.iter().enumerate() {
                            g[c] += dv * xhat(r, c);
                        }
                    }
                }
                if let Some(g) = grad_slot(nodes, grads, *bias) {
                    for chunk in dy.chunks(d) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for (r, chunk) in dy.chunks(d).enumerate() {
                        let dxhat: Vec<f64> = chunk.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(c, v)| v * xhat(r, c))
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            g[r * d + c] += rstd[r] * (dxhat[c] - m1 - xhat(r, c) * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.cols();
                let y = &node.value;
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for r in 0..node.rows() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &dy[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            g[r * cols + c] += yr[c] * (dr[c] - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                let v = self.node(*logits).shape[1];
                let scale = dy[0] / *count as f64;
                if let Some(g) = grad_slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let gr = &mut g[r * v..(r + 1) * v];
                        for (gi, p) in gr.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *gi += scale * p;
                        }
                        gr[t] -= scale;
                    }
                }
            }
        }
    }
}
