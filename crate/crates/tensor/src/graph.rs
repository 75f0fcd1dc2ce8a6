//! Tape-based computation graph.
//!
//! Every forward op appends one node. `backward` sweeps the tape in exact
//! reverse creation order, so no explicit topological sort is needed.

use crate::error::{Result, TensorError};
use crate::kernels::{gemm, sigmoid, softmax_rows};
use crate::tensor::{numel, ParamGrads, ParamId, ParamSet, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

pub(crate) enum Op {
    Constant,
    Tracked,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, batch: usize, r: usize, s: usize, t: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax { a: Var, cols: usize },
    Pick { a: Var, idx: Vec<usize> },
    GatherCols { a: Var, idx: Vec<usize>, k: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    RowScale { a: Var, w: Var },
    ConcatCols { parts: Vec<Var> },
    MeanRows { a: Var, groups: usize, rows: usize },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    SwapMid { a: Var, dims: [usize; 4] },
    InstanceNorm { x: Var, gamma: Var, beta: Var, dims: [usize; 3], xhat: Vec<f64>, inv_std: Vec<f64> },
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Value,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A single-threaded reverse-mode tape. Parameters are borrowed from a
/// [`ParamSet`] rather than copied into the graph.
pub struct Graph<'p> {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Option<&'p ParamSet>,
    param_vars: Vec<Option<Var>>,
    pub(crate) leaf_grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    pub(crate) inject_fault: bool,
    pub(crate) last_visits: usize,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            leaf_grads: Vec::new(),
            grad_enabled: true,
            inject_fault: false,
            last_visits: 0,
        }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            ..Self::new()
        }
    }

    /// Disable recording of backward information. Ops still compute values.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    /// Debug switch: corrupts the weight gradient of `matmul` so gradient
    /// checks can be shown to fail.
    pub fn with_backward_fault(mut self, on: bool) -> Self {
        self.inject_fault = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node created at or after `mark`. Handles to dropped nodes
    /// become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.leaf_grads.truncate(mark);
        for slot in &mut self.param_vars {
            if slot.is_some_and(|v| v.0 >= mark) {
                *slot = None;
            }
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(p) => &self.params.expect("param graph").get(*p).data,
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn cols(&self, v: Var) -> usize {
        *self.shape(v).last().unwrap_or(&1)
    }

    fn rows(&self, v: Var) -> usize {
        let c = self.cols(v);
        if c == 0 {
            0
        } else {
            self.value(v).len() / c
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Constant, &[])
    }

    /// Tracked leaf; its gradient is retained after `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape,
            value: Value::Owned(t.data),
            op: Op::Tracked,
            requires_grad: self.grad_enabled,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf bound to a parameter of the borrowed [`ParamSet`]. The
    /// same handle is returned on repeated calls.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.expect("graph built without params").get(id).shape.clone();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Tracked,
            requires_grad: self.grad_enabled,
        });
        self.leaf_grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients of every parameter in the bound set (zeros for unused ones).
    pub fn param_grads(&self) -> ParamGrads {
        let params = self.params.expect("graph built without params");
        let mut out = ParamGrads::zeros_like(params);
        for (pid, slot) in self.param_vars.iter().enumerate() {
            if let Some(g) = slot.and_then(|v| self.grad(v)) {
                out.grads[pid].copy_from_slice(g);
            }
        }
        out
    }

    /// Number of nodes processed by the most recent `backward`.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- linear algebra ----

    /// `a[..., s] · b[s, t] -> [..., t]`. Leading axes of `a` act as batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (s, t) = (sb[0], sb[1]);
        let r = self.rows(a);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(t);
        let mut out = vec![0.0; r * t];
        gemm(r, s, t, self.value(a), (s as isize, 1), self.value(b), (t as isize, 1), &mut out, 0.0);
        Ok(self.push(shape, out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over shared leading axes: `a[.., r, s] · b[.., s, t]`,
    /// or `a · bᵀ` with `b[.., t, s]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let l = sa.len();
        let (r, s) = (sa[l - 2], sa[l - 1]);
        let (t, inner) = if trans_b { (sb[l - 2], sb[l - 1]) } else { (sb[l - 1], sb[l - 2]) };
        if inner != s {
            return Err(err());
        }
        let batch = numel(&sa[..l - 2]);
        let mut out = vec![0.0; batch * r * t];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                let ab = &av[i * r * s..(i + 1) * r * s];
                let bb = &bv[i * s * t..(i + 1) * s * t];
                let b_strides = if trans_b { (1, s as isize) } else { (t as isize, 1) };
                gemm(r, s, t, ab, (s as isize, 1), bb, b_strides, &mut out[i * r * t..(i + 1) * r * t], 0.0);
            }
        }
        let mut shape = sa[..l - 2].to_vec();
        shape.extend([r, t]);
        Ok(self.push(shape, out, Op::Bmm { a, b, batch, r, s, t, trans_b }, &[a, b]))
    }

    // ---- elementwise ----

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b]))
    }

    /// `a[..., c] + bias[c]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.cols(a);
        if self.shape(bias).len() != 1 || self.shape(bias)[0] != c {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    // ---- normalisation ----

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the trailing axis. `mask[i] == false` excludes entry `i`;
    /// excluded entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        if let Some(m) = mask {
            if m.len() != self.value(a).len() {
                return Err(TensorError::Shape {
                    op: "masked_softmax",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let cols = self.cols(a);
        let out = softmax_rows(self.value(a), cols, mask).map_err(|row| TensorError::Infeasible { row })?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax { a, cols }, &[a]))
    }

    /// Per-feature normalisation across the node axis of `x[.., n, d]` with
    /// affine `gamma[d]`, `beta[d]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(TensorError::Shape { op: "instance_norm", lhs: sx, rhs: vec![] });
        }
        let (n, d) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::Shape {
                op: "instance_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let b = numel(&sx[..sx.len() - 2]);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; b * d];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            let base = bi * n * d;
            for j in 0..d {
                let mut mean = 0.0;
                for i in 0..n {
                    mean += xv[base + i * d + j];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for i in 0..n {
                    let c = xv[base + i * d + j] - mean;
                    var += c * c;
                }
                var /= n as f64;
                let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                inv_std[bi * d + j] = is;
                for i in 0..n {
                    let k = base + i * d + j;
                    xhat[k] = (xv[k] - mean) * is;
                    out[k] = gv[j] * xhat[k] + bv[j];
                }
            }
        }
        let op = Op::InstanceNorm { x, gamma, beta, dims: [b, n, d], xhat, inv_std };
        Ok(self.push(sx, out, op, &[x, gamma, beta]))
    }

    // ---- indexing ----

    /// `out[r] = a[r, idx[r]]` for `a` viewed as rows × cols.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.rows(a), self.cols(a));
        if idx.len() != rows {
            return Err(TensorError::Shape { op: "pick", lhs: self.shape(a).to_vec(), rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Index { op: "pick", index: bad, extent: cols });
        }
        let av = self.value(a);
        let out = idx.iter().enumerate().map(|(r, &c)| av[r * cols + c]).collect();
        Ok(self.push(vec![rows], out, Op::Pick { a, idx: idx.to_vec() }, &[a]))
    }

    /// `out[r, j] = a[r, idx[r * k + j]]`, giving `[rows, k]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (rows, cols) = (self.rows(a), self.cols(a));
        if idx.len() != rows * k {
            return Err(TensorError::Shape { op: "gather_cols", lhs: self.shape(a).to_vec(), rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Index { op: "gather_cols", index: bad, extent: cols });
        }
        let av = self.value(a);
        let out = idx.iter().enumerate().map(|(f, &c)| av[(f / k) * cols + c]).collect();
        Ok(self.push(vec![rows, k], out, Op::GatherCols { a, idx: idx.to_vec(), k }, &[a]))
    }

    /// Select rows of `a` (viewed as rows × cols) giving `[idx.len(), cols]`.
    /// Repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.rows(a), self.cols(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, extent: rows });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&av[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(vec![idx.len(), cols], out, Op::GatherRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Inverse of `gather_rows`: row `i` of `a` is added into row `idx[i]` of
    /// a zero `[rows_out, cols]` tensor.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows_out: usize) -> Result<Var> {
        let (rows, cols) = (self.rows(a), self.cols(a));
        if idx.len() != rows {
            return Err(TensorError::Shape { op: "scatter_rows", lhs: self.shape(a).to_vec(), rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows_out) {
            return Err(TensorError::Index { op: "scatter_rows", index: bad, extent: rows_out });
        }
        let av = self.value(a);
        let mut out = vec![0.0; rows_out * cols];
        for (r, &i) in idx.iter().enumerate() {
            for (o, x) in out[i * cols..(i + 1) * cols].iter_mut().zip(&av[r * cols..(r + 1) * cols]) {
                *o += x;
            }
        }
        Ok(self.push(vec![rows_out, cols], out, Op::ScatterRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Scale row `r` of `a` by `w[r]`.
    pub fn row_scale(&mut self, a: Var, w: Var) -> Result<Var> {
        let (rows, cols) = (self.rows(a), self.cols(a));
        if self.value(w).len() != rows {
            return Err(TensorError::Shape { op: "row_scale", lhs: self.shape(a).to_vec(), rhs: self.shape(w).to_vec() });
        }
        let (av, wv) = (self.value(a), self.value(w));
        let out = av.chunks(cols).zip(wv).flat_map(|(row, &s)| row.iter().map(move |x| x * s)).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::RowScale { a, w }, &[a, w]))
    }

    /// Concatenate along the trailing axis; all parts must share row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.rows(parts[0]);
        for &p in parts {
            if self.rows(p) != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.cols(p)).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        Ok(self.push(shape, out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    // ---- reductions / reshapes ----

    /// Mean over the second-to-last axis: `[.., n, c] -> [.., c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || sa[sa.len() - 2] == 0 {
            return Err(TensorError::Shape { op: "mean_rows", lhs: sa, rhs: vec![] });
        }
        let (rows, cols) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let groups = numel(&sa[..sa.len() - 2]);
        let av = self.value(a);
        let mut out = vec![0.0; groups * cols];
        for gi in 0..groups {
            let acc = &mut out[gi * cols..(gi + 1) * cols];
            for r in 0..rows {
                let row = &av[(gi * rows + r) * cols..(gi * rows + r + 1) * cols];
                acc.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
            acc.iter_mut().for_each(|o| *o /= rows as f64);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(cols);
        Ok(self.push(shape, out, Op::MeanRows { a, groups, rows }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::MeanAll(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    /// `[d0, d1, d2, d3] -> [d0, d2, d1, d3]`; used to split/merge heads.
    pub fn swap_mid(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 {
            return Err(TensorError::Shape { op: "swap_mid", lhs: sa, rhs: vec![] });
        }
        let dims = [sa[0], sa[1], sa[2], sa[3]];
        let out = swap_mid_data(self.value(a), dims);
        Ok(self.push(vec![dims[0], dims[2], dims[1], dims[3]], out, Op::SwapMid { a, dims }, &[a]))
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }
}

pub(crate) fn swap_mid_data(v: &[f64], [d0, d1, d2, d3]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let src = ((i * d1 + j) * d2 + k) * d3;
                let dst = ((i * d2 + k) * d1 + j) * d3;
                out[dst..dst + d3].copy_from_slice(&v[src..src + d3]);
            }
        }
    }
    out
}
