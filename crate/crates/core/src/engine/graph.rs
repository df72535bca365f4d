//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and parent
//! handles. `backward` walks the nodes in reverse creation order, so each
//! node is visited exactly once after all of its consumers.

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBias(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    BlocksToCols(Var, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Pick(Var, Vec<usize>),
    /// q, k, v, scale and the row-softmax weights kept for the backward pass.
    Attention(Var, Var, Var, f64, Vec<f64>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Tape of forward operations over 2-D float64 matrices.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Single value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node dims are consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::ConcatCols(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.as_matrix_dims()?;
        self.constant(r, c, t.data().to_vec())
    }

    /// Leaf bound to a stored parameter. Gradients flow back into the store
    /// only when the tensor has `requires_grad` set.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        let (r, c) = t.as_matrix_dims()?;
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf);
        let node = &mut self.nodes[v.0];
        node.param = Some(id);
        node.needs_grad = t.requires_grad();
        Ok(v)
    }

    /// Copy of `v` cut off from the tape (the stop-gradient of `v`).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, val, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(shape_err(name, da, db));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(da.0, da.1, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a` (m×n) plus the 1×n row `bias` on every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let db = self.dims(bias);
        if db != (1, n) {
            return Err(shape_err("add_row_bias", (m, n), db));
        }
        let b = &self.nodes[bias.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(m, n, out, Op::AddRowBias(a, bias)))
    }

    /// Scales row i of `a` (m×n) by `s[i]` where `s` is m×1.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let ds = self.dims(s);
        if ds != (m, 1) {
            return Err(shape_err("mul_rows", (m, n), ds));
        }
        let sv = &self.nodes[s.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for (row, &k) in out.chunks_exact_mut(n).zip(sv) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        Ok(self.push(m, n, out, Op::MulRows(a, s)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        self.push(r, c, out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|x| x + k).collect();
        self.push(r, c, out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        self.push(r, c, out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        out.chunks_exact_mut(c).for_each(softmax_in_place);
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(r, c, out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise L2 normalization; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.push(r, c, out, Op::NormalizeRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols needs at least one input"));
        };
        let rows = self.dims(*first).0;
        let mut cols = 0;
        for p in parts {
            let d = self.dims(*p);
            if d.0 != rows {
                return Err(shape_err("concat_cols", self.dims(*first), d));
            }
            cols += d.1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let c = self.nodes[p.0].cols;
                out.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", (r, c), (start, end)));
        }
        let w = end - start;
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        Ok(self.push(r, w, out, Op::SliceCols(a, start)))
    }

    /// Rows of `a` at `index`, in order; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", (r, c), (bad, 0)));
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push(index.len(), c, out, Op::GatherRows(a, index.to_vec())))
    }

    /// Reinterprets a (blocks·m)×n matrix made of `blocks` stacked m×n blocks
    /// as m×(blocks·n), block k occupying columns k·n..(k+1)·n.
    pub fn blocks_to_cols(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let (r, n) = self.dims(a);
        if blocks == 0 || r % blocks != 0 {
            return Err(shape_err("blocks_to_cols", (r, n), (blocks, 0)));
        }
        let m = r / blocks;
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * n];
        for k in 0..blocks {
            for i in 0..m {
                let src = &x[(k * m + i) * n..(k * m + i + 1) * n];
                out[i * blocks * n + k * n..i * blocks * n + (k + 1) * n].copy_from_slice(src);
            }
        }
        Ok(self.push(m, blocks * n, out, Op::BlocksToCols(a, blocks)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(1, 1, vec![s], Op::Mean(a))
    }

    /// Column sums: m×n → 1×n.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = vec![0.0; n];
        for row in self.nodes[a.0].value.chunks_exact(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        self.push(1, n, out, Op::SumRows(a))
    }

    /// Picks column `cols[i]` from row i: m×n → m×1.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if cols.len() != m {
            return Err(shape_err("pick", (m, n), (cols.len(), 1)));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(shape_err("pick", (m, n), (0, bad)));
        }
        let x = &self.nodes[a.0].value;
        let out = cols.iter().enumerate().map(|(i, &c)| x[i * n + c]).collect();
        Ok(self.push(m, 1, out, Op::Pick(a, cols.to_vec())))
    }

    /// Scaled dot-product attention `softmax(scale · q kᵀ) v` for q (m×d),
    /// k (n×d) and v (n×e). Only the m×n weight matrix is stored.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (m, d) = self.dims(q);
        let (n, dk) = self.dims(k);
        let (nv, e) = self.dims(v);
        if d != dk || n != nv || n == 0 {
            return Err(shape_err("attention", (m, d), (n, dk)));
        }
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut weights = vec![0.0; m * n];
        let mut out = vec![0.0; m * e];
        for i in 0..m {
            let qi = &qv[i * d..(i + 1) * d];
            let wi = &mut weights[i * n..(i + 1) * n];
            for (j, w) in wi.iter_mut().enumerate() {
                *w = scale * dot(qi, &kv[j * d..(j + 1) * d]);
            }
            softmax_in_place(wi);
            let oi = &mut out[i * e..(i + 1) * e];
            for (j, &w) in wi.iter().enumerate() {
                oi.iter_mut().zip(&vv[j * e..(j + 1) * e]).for_each(|(o, x)| *o += w * x);
            }
        }
        Ok(self.push(m, e, out, Op::Attention(q, k, v, scale, weights)))
    }

    /// Back-propagates from the scalar `loss` and adds the resulting
    /// gradients into every trainable parameter reached by the tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                let t = store.get_mut(id);
                if t.requires_grad() {
                    t.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every node that needs one.
    fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.wants(*a) {
                    let g = grad_slot(grads, *a, m * k);
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let dci = &dy[i * n..(i + 1) * n];
                        let gi = &mut g[i * k..(i + 1) * k];
                        for (kk, gik) in gi.iter_mut().enumerate() {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            *gik += dot(dci, brow);
                        }
                    }
                }
                if self.wants(*b) {
                    let g = grad_slot(grads, *b, k * n);
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let dci = &dy[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &mut g[kk * n..(kk + 1) * n];
                            grow.iter_mut().zip(dci).for_each(|(gv, d)| *gv += aik * d);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let g = grad_slot(grads, *a, rows * cols);
                    // y is rows×cols, a is cols×rows
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j * rows + i] += dy[i * cols + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, dy));
                self.acc(grads, *b, |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, dy));
                self.acc(grads, *b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.acc(grads, *a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * x;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                self.acc(grads, *a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d / x;
                    }
                });
                self.acc(grads, *b, |g| {
                    for (((g, d), x), q) in g.iter_mut().zip(dy).zip(bv).zip(y) {
                        *g -= d * q / x;
                    }
                });
            }
            Op::AddRowBias(a, bias) => {
                self.acc(grads, *a, |g| add_into(g, dy));
                self.acc(grads, *bias, |g| {
                    for row in dy.chunks_exact(cols) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulRows(a, s) => {
                let av = &self.nodes[a.0].value;
                let sv = &self.nodes[s.0].value;
                self.acc(grads, *a, |g| {
                    for ((gr, dr), k) in g.chunks_exact_mut(cols).zip(dy.chunks_exact(cols)).zip(sv)
                    {
                        gr.iter_mut().zip(dr).for_each(|(g, d)| *g += d * k);
                    }
                });
                self.acc(grads, *s, |g| {
                    for ((gi, dr), ar) in g.iter_mut().zip(dy.chunks_exact(cols)).zip(av.chunks_exact(cols))
                    {
                        *gi += dot(dr, ar);
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * k));
            }
            Op::AddScalar(a) => self.acc(grads, *a, |g| add_into(g, dy)),
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                self.acc(grads, *a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |g| {
                    for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                self.acc(grads, *a, |g| {
                    for ((gr, dr), yr) in g
                        .chunks_exact_mut(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let inner = dot(dr, yr);
                        for ((g, d), s) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += s * (d - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                self.acc(grads, *a, |g| {
                    for ((gr, dr), yr) in g
                        .chunks_exact_mut(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let total: f64 = dr.iter().sum();
                        for ((g, d), ly) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += d - ly.exp() * total;
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let av = &self.nodes[a.0].value;
                self.acc(grads, *a, |g| {
                    for (((gr, dr), yr), xr) in g
                        .chunks_exact_mut(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                        .zip(av.chunks_exact(cols))
                    {
                        let norm = dot(xr, xr).sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let proj = dot(yr, dr);
                        for ((g, d), u) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += (d - u * proj) / norm;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].cols;
                    if self.wants(*p) {
                        let g = grad_slot(grads, *p, rows * pc);
                        for i in 0..rows {
                            let src = &dy[i * cols + offset..i * cols + offset + pc];
                            add_into(&mut g[i * pc..(i + 1) * pc], src);
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.nodes[a.0].cols;
                self.acc(grads, *a, |g| {
                    for i in 0..rows {
                        let dst = &mut g[i * ac + start..i * ac + start + cols];
                        add_into(dst, &dy[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::GatherRows(a, index) => {
                self.acc(grads, *a, |g| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut g[i * cols..(i + 1) * cols], &dy[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::BlocksToCols(a, blocks) => {
                let n = cols / blocks;
                let m = rows;
                self.acc(grads, *a, |g| {
                    for k in 0..*blocks {
                        for i in 0..m {
                            let src = &dy[i * cols + k * n..i * cols + (k + 1) * n];
                            add_into(&mut g[(k * m + i) * n..(k * m + i + 1) * n], src);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let d = dy[0];
                self.acc(grads, *a, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len().max(1) as f64;
                let d = dy[0] / len;
                self.acc(grads, *a, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::SumRows(a) => {
                self.acc(grads, *a, |g| {
                    for gr in g.chunks_exact_mut(cols) {
                        add_into(gr, dy);
                    }
                });
            }
            Op::Attention(q, k, v, scale, weights) => {
                let (m, d) = self.dims(*q);
                let n = self.nodes[k.0].rows;
                let e = cols;
                let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * e];
                let mut ds = vec![0.0; n];
                for i in 0..m {
                    let wi = &weights[i * n..(i + 1) * n];
                    let doi = &dy[i * e..(i + 1) * e];
                    for (j, s) in ds.iter_mut().enumerate() {
                        *s = dot(doi, &vv[j * e..(j + 1) * e]);
                    }
                    let inner = dot(&ds, wi);
                    let qi = &qv[i * d..(i + 1) * d];
                    let dqi = &mut dq[i * d..(i + 1) * d];
                    for j in 0..n {
                        let w = wi[j];
                        let s = scale * w * (ds[j] - inner);
                        let kj = &kv[j * d..(j + 1) * d];
                        dqi.iter_mut().zip(kj).for_each(|(g, x)| *g += s * x);
                        dk[j * d..(j + 1) * d].iter_mut().zip(qi).for_each(|(g, x)| *g += s * x);
                        dv[j * e..(j + 1) * e].iter_mut().zip(doi).for_each(|(g, x)| *g += w * x);
                    }
                }
                self.acc(grads, *q, |g| add_into(g, &dq));
                self.acc(grads, *k, |g| add_into(g, &dk));
                self.acc(grads, *v, |g| add_into(g, &dv));
            }
            Op::Pick(a, picks) => {
                let n = self.nodes[a.0].cols;
                self.acc(grads, *a, |g| {
                    for (i, &c) in picks.iter().enumerate() {
                        g[i * n + c] += dy[i];
                    }
                });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.wants(v) {
            let len = self.nodes[v.0].value.len();
            f(grad_slot(grads, v, len));
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRowBias(a, b)
        | Op::MulRows(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::NormalizeRows(a)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _)
        | Op::BlocksToCols(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::Pick(a, _) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Attention(q, k, v, _, _) => vec![*q, *k, *v],
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a · b` for row-major a (m×k), b (k×n).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aik * bv);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
