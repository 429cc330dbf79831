//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; nodes are created in
//! topological order, so backward is a single reverse sweep. A `Graph` lives
//! for one forward/backward pass and is not shared across threads.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[Vec<usize>]>),
    Pick(Var, Rc<[usize]>),
    L2NormalizeRows(Var, Vec<f64>),
    LogSumExp(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if the root does
    /// not depend on it (the gradient is then identically zero).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        ParamGrads { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        self.grads[id.0] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    touched: Vec<ParamId>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { params: None, nodes: Vec::new(), param_vars: HashMap::new(), touched: Vec::new() }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph { params: Some(store), ..Graph::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameters read by this graph, in first-use order.
    pub fn touched_params(&self) -> &[ParamId] {
        &self.touched
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Registers (once) and returns the leaf for a stored parameter. Frozen
    /// parameters enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let value = store.get(id).clone();
        let v = self.push(value, Op::Param, !store.is_frozen(id));
        self.param_vars.insert(id, v);
        self.touched.push(id);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.shape().len() == 2 && bv.shape().len() == 2 && av.shape()[1] == bv.shape()[0],
            "matmul {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.shape().len() == 2 && bv.shape().len() == 2 && av.shape()[1] == bv.shape()[1],
            "matmul_nt {:?} x {:?}ᵀ",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (1, k), &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose().expect("transpose of a matrix");
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let cols = av.cols();
        assert_eq!(rv.numel(), cols, "add_row: bias of {} for width {}", rv.numel(), cols);
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, b) in chunk.iter_mut().zip(rv.data()) {
                *d += b;
            }
        }
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, row]);
        self.push(t, Op::AddRow(a, row), rg)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.numel(), 1, "mul_scalar expects a single value");
        let c = sv.data()[0];
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a, s]);
        self.push(t, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddConst(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Square root; the backward pass treats zero as having zero slope.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along the last axis. `allowed` is an optional `rows × cols`
    /// visibility map; hidden entries get probability exactly zero.
    pub fn softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let av = self.value(a);
        if let Some(m) = allowed {
            assert_eq!(m.len(), av.numel(), "softmax mask size");
        }
        let data = kernels::softmax_rows(av.data(), av.cols(), allowed);
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = kernels::log_softmax_rows(av.data(), av.cols());
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        assert_eq!(self.value(gamma).numel(), cols, "layer_norm gamma width");
        assert_eq!(self.value(beta).numel(), cols, "layer_norm beta width");
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in xv.data().chunks(cols).enumerate() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (j, v) in row.iter().enumerate() {
                xhat[r * cols + j] = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(cols) {
            for j in 0..cols {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut norms = Vec::with_capacity(av.rows());
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::L2NormalizeRows(a, norms), rg)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// `log Σ exp(a)` over every element, as a scalar.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::LogSumExp(a), rg)
    }

    /// `out[i] = a[i, cols[i]]`, shape `[rows]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        assert_eq!(cols.len(), av.rows(), "pick needs one column per row");
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < c, "pick column {j} out of {c}");
                av.data()[r * c + j]
            })
            .collect::<Vec<_>>();
        let t = Tensor::from_parts(vec![cols.len()], data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Pick(a, cols.into()), rg)
    }

    // ---- structure ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).reshape(shape).expect("reshape preserves element count");
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start + len <= av.rows(), "slice_rows {start}+{len} of {}", av.rows());
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::from_parts(vec![len, cols], data);
        let rg = self.rg(&[a]);
        self.push(t, Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.cols(parts[0]);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start + len <= cols, "slice_cols {start}+{len} of {cols}");
        let mut data = Vec::with_capacity(av.rows() * len);
        for row in av.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::from_parts(vec![av.rows(), len], data);
        let rg = self.rg(&[a]);
        self.push(t, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.rows(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.cols(p)).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row gather (embedding lookup, permutation, broadcast by repetition).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of {rows}");
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), cols], data);
        let rg = self.rg(&[a]);
        self.push(t, Op::GatherRows(a, idx.into()), rg)
    }

    /// One output row per group: the mean of the listed input rows (zeros
    /// for an empty group).
    pub fn segment_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let out = &mut data[g * cols..(g + 1) * cols];
            for &m in members {
                assert!(m < rows, "segment member {m} out of {rows}");
                for (o, v) in out.iter_mut().zip(av.row(m)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::from_parts(vec![groups.len(), cols], data);
        let rg = self.rg(&[a]);
        self.push(t, Op::SegmentMean(a, groups.into()), rg)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    /// Collects gradients of every parameter leaf into store order.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let len = self.params.map_or(0, ParamStore::len);
        let mut out = ParamGrads::empty(len);
        for (&id, &v) in &self.param_vars {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            if let Some(g) = grads.get(v) {
                out.set(id, Tensor::from_parts(self.value(v).shape().to_vec(), g.to_vec()));
            }
        }
        out
    }

    /// Gradient of `v` as a tensor, zero-filled when the root does not depend on it.
    pub fn grad_tensor(&self, grads: &Gradients, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match grads.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, gout, (n, 1), bv.data(), (1, n), da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, av.data(), (1, k), gout, (n, 1), db, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, gout, (n, 1), bv.data(), (k, 1), da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(n, m, k, gout, (1, n), av.data(), (k, 1), db, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                if let Some(da) = self.slot(grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += gout[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, gout, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    axpy(db, gout, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, gout, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    axpy(db, gout, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), y) in da.iter_mut().zip(gout).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, g), x) in db.iter_mut().zip(gout).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, gout, 1.0);
                }
                let cols = self.value(*a).cols();
                if let Some(dr) = self.slot(grads, *row) {
                    for chunk in gout.chunks(cols) {
                        axpy(dr, chunk, 1.0);
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).data()[0];
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, gout, c);
                }
                let av = self.value(*a).data();
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] += gout.iter().zip(av).map(|(g, x)| g * x).sum::<f64>();
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, gout, *c);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, gout, 1.0);
                }
            }
            Op::Gelu(a) => self.unary_back(grads, *a, gout, |x, _| kernels::gelu_grad(x)),
            Op::Softplus(a) => self.unary_back(grads, *a, gout, |x, _| kernels::sigmoid(x)),
            Op::Exp(a) => self.unary_back_out(grads, *a, gout, out, |_, y| y),
            Op::Log(a) => self.unary_back(grads, *a, gout, |x, _| 1.0 / x),
            Op::Sqrt(a) => {
                self.unary_back_out(grads, *a, gout, out, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
            }
            Op::Square(a) => self.unary_back(grads, *a, gout, |x, _| 2.0 * x),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_back(grads, *a, gout, |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for ((y, g), d) in out.chunks(cols).zip(gout.chunks(cols)).zip(da.chunks_mut(cols)) {
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for ((y, g), d) in out.chunks(cols).zip(gout.chunks(cols)).zip(da.chunks_mut(cols)) {
                        let total: f64 = g.iter().sum();
                        for j in 0..cols {
                            d[j] += g[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = node.value.cols();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (g, xh) in gout.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += g[j] * xh[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for g in gout.chunks(cols) {
                        axpy(db, g, 1.0);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_n = 1.0 / cols as f64;
                    for (r, ((g, xh), d)) in
                        gout.chunks(cols).zip(xhat.chunks(cols)).zip(dx.chunks_mut(cols)).enumerate()
                    {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..cols {
                            let dxh = g[j] * gam[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        for j in 0..cols {
                            let dxh = g[j] * gam[j];
                            d[j] += rstd[r] * (dxh - inv_n * sum_dxh - xh[j] * inv_n * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let g = gout[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a).data();
                let s = out[0];
                if let Some(da) = self.slot(grads, *a) {
                    for (d, x) in da.iter_mut().zip(av) {
                        *d += gout[0] * (x - s).exp();
                    }
                }
            }
            Op::Pick(a, cols) => {
                let c = self.value(*a).cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (r, &j) in cols.iter().enumerate() {
                        da[r * c + j] += gout[r];
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let cols = self.value(*a).cols();
                if let Some(da) = self.slot(grads, *a) {
                    axpy(&mut da[start * cols..start * cols + gout.len()], gout, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(dp, &gout[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let len = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (r, g) in gout.chunks(len).enumerate() {
                        axpy(&mut da[r * cols + start..r * cols + start + len], g, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for (r, d) in dp.chunks_mut(w).enumerate() {
                            axpy(d, &gout[r * total + off..r * total + off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let cols = self.value(*a).cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(&mut da[i * cols..(i + 1) * cols], &gout[k * cols..(k + 1) * cols], 1.0);
                    }
                }
            }
            Op::SegmentMean(a, groups) => {
                let cols = self.value(*a).cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (g, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let w = 1.0 / members.len() as f64;
                        let go = &gout[g * cols..(g + 1) * cols];
                        for &m in members {
                            axpy(&mut da[m * cols..(m + 1) * cols], go, w);
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let cols = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (r, ((y, g), d)) in
                        out.chunks(cols).zip(gout.chunks(cols)).zip(da.chunks_mut(cols)).enumerate()
                    {
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            d[j] += (g[j] - y[j] * dot) / norms[r];
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        gout: &[f64],
        dfdx: impl Fn(f64, f64) -> f64,
    ) {
        let xs = self.value(a).data();
        if let Some(da) = self.slot(grads, a) {
            for ((d, g), &x) in da.iter_mut().zip(gout).zip(xs) {
                *d += g * dfdx(x, 0.0);
            }
        }
    }

    fn unary_back_out(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        gout: &[f64],
        out: &[f64],
        dfdy: impl Fn(f64, f64) -> f64,
    ) {
        let xs = self.value(a).data();
        if let Some(da) = self.slot(grads, a) {
            for (((d, g), &x), &y) in da.iter_mut().zip(gout).zip(xs).zip(out) {
                *d += g * dfdy(x, y);
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(dst.len(), src.len());
    if alpha == 1.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += alpha * s;
        }
    }
}
