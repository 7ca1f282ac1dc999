//! Tape for reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D [`Tensor`]; vectors are `1 x n` rows and
//! scalars are `1 x 1`. Operations append a node holding the forward value
//! and the recipe for its backward pass. [`Graph::backward`] walks the tape
//! in reverse and returns the gradients of the parameters that were read.
//!
//! Binary elementwise ops broadcast their right operand when it is `1 x n`,
//! `m x 1` or `1 x 1`.

use crate::error::{Error, Result};

use super::tensor::{Gradients, ParamId, ParamStore, Tensor};

const GELU_COEFF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    ColMeans(Var),
    CumsumRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    TileRows(Var),
    GroupMeanRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    // Op-specific forward cache (layer-norm row statistics, softmax probabilities).
    cache: Vec<f64>,
}

/// A tape recording one forward pass.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    nonfinite: Option<String>,
}

impl std::fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

fn broadcast_index(a_rows: usize, a_cols: usize, b: &Tensor) -> impl Fn(usize, usize) -> usize {
    let (br, bc) = (b.rows(), b.cols());
    assert!(
        (br == a_rows || br == 1) && (bc == a_cols || bc == 1),
        "cannot broadcast {br}x{bc} onto {a_rows}x{a_cols}"
    );
    move |i, j| {
        let r = if br == 1 { 0 } else { i };
        let c = if bc == 1 { 0 } else { j };
        r * bc + c
    }
}

/// `c (+)= op(a) * op(b)` through `matrixmultiply` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable softmax of one slice, written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<'p> Graph<'p> {
    /// A tape that can read parameters from `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            nonfinite: None,
        }
    }

    /// A tape without parameters; only constants and ops.
    pub fn detached() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            nonfinite: None,
        }
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

    /// The single entry of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar: shape {:?}", t.shape());
        t.data()[0]
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_cached(value, op, needs_grad, Vec::new())
    }

    fn push_cached(&mut self, value: Tensor, op: Op, needs_grad: bool, cache: Vec<f64>) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(format!("{} produced a non-finite value", op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            cache,
        });
        Var(self.nodes.len() - 1)
    }

    /// Errors if any node so far held a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(msg) => Err(Error::Numerical(msg.clone())),
            None => Ok(()),
        }
    }

    /// A constant (no gradient) matrix.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            Tensor::matrix(r, c, t.into_data())
        };
        self.push(t, Op::Leaf, false)
    }

    /// Reads a parameter. Repeated reads of the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.get(id);
        let value = Tensor::matrix(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push(value, Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        assert_eq!(k, k2, "matmul inner dims {m}x{k} * {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng)
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        assert_eq!(k, k2, "matmul_bt inner dims {m}x{k} * ({n}x{k2})^T");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(n, m, out), Op::Transpose(a), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape2(a);
        let bt = self.value(b);
        let idx = broadcast_index(m, n, bt);
        let ad = self.value(a).data();
        let bd = bt.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(f(ad[i * n + j], bd[idx(i, j)]));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape2(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, n, out), op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Tanh-approximated Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_scalar, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_scalar, Op::Softplus(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for (row_in, row_out) in src.chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(row_in, row_out);
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, n, out), Op::SoftmaxRows(a), ng)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.shape2(x);
        assert_eq!(self.shape2(gamma), (1, n));
        assert_eq!(self.shape2(beta), (1, n));
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        let mut cache = Vec::with_capacity(2 * m);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
            cache.push(mean);
            cache.push(rstd);
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_cached(Tensor::matrix(m, n, out), Op::LayerNorm { x, gamma, beta }, ng, cache)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Sum across each row: `m x n -> m x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let out = self.value(a).data().chunks(n).map(|r| r.iter().sum()).collect();
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, 1, out), Op::RowSums(a), ng)
    }

    /// Mean down each column: `m x n -> 1 x n`.
    pub fn col_means(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(1, n, out), Op::ColMeans(a), ng)
    }

    /// Running sum along each row.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for j in 1..n {
                row[j] += row[j - 1];
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, n, out), Op::CumsumRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape2(a);
        assert!(len > 0 && start + len <= n, "slice_cols {start}+{len} of {n}");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, len, out), Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape2(a);
        assert!(len > 0 && start + len <= m, "slice_rows {start}+{len} of {m}");
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs(a);
        self.push(Tensor::matrix(len, n, out), Op::SliceRows(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape2(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        let mut ng = false;
        for &p in parts {
            let (pm, pn) = self.shape2(p);
            assert_eq!(pn, n, "concat_rows width mismatch");
            out.extend_from_slice(self.value(p).data());
            m += pm;
            ng |= self.needs(p);
        }
        self.push(Tensor::matrix(m, n, out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape2(p).1).collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        let mut ng = false;
        for (&p, &w) in parts.iter().zip(&widths) {
            assert_eq!(self.shape2(p).0, m, "concat_cols height mismatch");
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + offset..i * n + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
            ng |= self.needs(p);
        }
        self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let (m, n) = self.shape2(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * n * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(m * times, n, out), Op::TileRows(a), ng)
    }

    /// Means of consecutive blocks of `group` rows: `(g*b) x n -> b x n`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let (m, n) = self.shape2(a);
        assert!(group > 0 && m % group == 0, "{m} rows not divisible into groups of {group}");
        let blocks = m / group;
        let src = self.value(a).data();
        let mut out = vec![0.0; blocks * n];
        for b in 0..blocks {
            for r in 0..group {
                let row = &src[(b * group + r) * n..(b * group + r + 1) * n];
                for (o, v) in out[b * n..(b + 1) * n].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.needs(a);
        self.push(Tensor::matrix(blocks, n, out), Op::GroupMeanRows(a, group), ng)
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let (m, n) = self.shape2(a);
        assert!(!indices.is_empty());
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            assert!(i < m, "row index {i} out of range {m}");
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(
            Tensor::matrix(indices.len(), n, out),
            Op::SelectRows(a, indices.to_vec()),
            ng,
        )
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.shape2(logits);
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for {b} rows of logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Value(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            softmax_into(row, &mut probs[i * c..(i + 1) * c]);
        }
        let ng = self.needs(logits);
        Ok(self.push_cached(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy(logits, labels.to_vec()),
            ng,
            probs,
        ))
    }

    /// Reverse pass from the scalar `root`; returns parameter gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_finite()?;
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut param_grads);
        }
        if param_grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok(Gradients::new(param_grads))
    }

    /// Gradient buffer of `v`, zero-initialized on first use; `None` if `v` needs none.
    fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [Option<Vec<f64>>],
    ) {
        let (m, n) = (node.value.rows(), node.value.cols());
        macro_rules! acc {
            ($v:expr) => {
                Self::grad_slot(&self.nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let entry = param_grads[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
                for (e, v) in entry.iter_mut().zip(g) {
                    *e += v;
                }
            }
            Op::MatMul(a, b) => {
                let (_, k) = self.shape2(*a);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(ga) = acc!(*a) {
                    // dA = dC * B^T
                    gemm(m, n, k, g, (n, 1), bd, (1, n), ga, true);
                }
                if let Some(gb) = acc!(*b) {
                    // dB = A^T * dC
                    gemm(k, m, n, ad, (1, k), g, (n, 1), gb, true);
                }
            }
            Op::MatMulBt(a, b) => {
                let (_, k) = self.shape2(*a);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(ga) = acc!(*a) {
                    // dA = dC * B
                    gemm(m, n, k, g, (n, 1), bd, (k, 1), ga, true);
                }
                if let Some(gb) = acc!(*b) {
                    // dB = dC^T * A
                    gemm(n, m, k, g, (1, n), ad, (k, 1), gb, true);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = acc!(*a) {
                    // node is m x n, parent is n x m
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let ad = self.value(*a).data();
                let bt = self.value(*b);
                let bd = bt.data();
                let idx = broadcast_index(m, n, bt);
                let op = &node.op;
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            let k = i * n + j;
                            ga[k] += match op {
                                Op::Add(..) | Op::Sub(..) => g[k],
                                Op::Mul(..) => g[k] * bd[idx(i, j)],
                                _ => g[k] / bd[idx(i, j)],
                            };
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..m {
                        for j in 0..n {
                            let k = i * n + j;
                            let bv = bd[idx(i, j)];
                            gb[idx(i, j)] += match op {
                                Op::Add(..) => g[k],
                                Op::Sub(..) => -g[k],
                                Op::Mul(..) => g[k] * ad[k],
                                _ => -g[k] * ad[k] / (bv * bv),
                            };
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = acc!(*a) {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Softplus(a)
            | Op::ClampMin(a, _) => {
                let xd = self.value(*a).data();
                let yd = node.value.data();
                let op = &node.op;
                if let Some(ga) = acc!(*a) {
                    for k in 0..g.len() {
                        let (x, y) = (xd[k], yd[k]);
                        let d = match op {
                            Op::Gelu(_) => gelu_derivative(x),
                            Op::Sigmoid(_) => y * (1.0 - y),
                            Op::Exp(_) => y,
                            Op::Ln(_) => 1.0 / x,
                            Op::Sqrt(_) => {
                                if y > 0.0 {
                                    0.5 / y
                                } else {
                                    0.0
                                }
                            }
                            Op::Abs(_) => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Op::Softplus(_) => sigmoid_scalar(x),
                            Op::ClampMin(_, floor) => {
                                if x > *floor {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        };
                        ga[k] += g[k] * d;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = acc!(*a) {
                    let yd = node.value.data();
                    for i in 0..m {
                        let y = &yd[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let xhat = |i: usize, j: usize| (xd[i * n + j] - node.cache[2 * i]) * node.cache[2 * i + 1];
                if let Some(gg) = acc!(*gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat(i, j);
                        }
                    }
                }
                if let Some(gbeta) = acc!(*beta) {
                    for i in 0..m {
                        for j in 0..n {
                            gbeta[j] += g[i * n + j];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    for i in 0..m {
                        let rstd = node.cache[2 * i + 1];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gd[j];
                            mean_d += d;
                            mean_dx += d * xhat(i, j);
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[i * n + j] * gd[j];
                            gx[i * n + j] += rstd * (d - mean_d - xhat(i, j) * mean_dx);
                        }
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let len = self.value(*a).len();
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|o| *o += scale);
                }
            }
            Op::RowSums(a) => {
                let w = self.shape2(*a).1;
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for o in &mut ga[i * w..(i + 1) * w] {
                            *o += g[i];
                        }
                    }
                }
            }
            Op::ColMeans(a) => {
                let rows = self.shape2(*a).0;
                if let Some(ga) = acc!(*a) {
                    for i in 0..rows {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / rows as f64;
                        }
                    }
                }
            }
            Op::CumsumRows(a) => {
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        let mut running = 0.0;
                        for j in (0..n).rev() {
                            running += g[i * n + j];
                            ga[i * n + j] += running;
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let w = self.shape2(*a).1;
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * w + start + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = acc!(*a) {
                    for (o, v) in ga[start * n..(start + m) * n].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = acc!(p) {
                        for (o, v) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *o += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape2(p).1;
                    if let Some(gp) = acc!(p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::TileRows(a) => {
                if let Some(ga) = acc!(*a) {
                    let len = ga.len();
                    for chunk in g.chunks(len) {
                        for (o, v) in ga.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GroupMeanRows(a, group) => {
                if let Some(ga) = acc!(*a) {
                    let inv = 1.0 / *group as f64;
                    for b in 0..m {
                        for r in 0..*group {
                            let row = b * group + r;
                            for j in 0..n {
                                ga[row * n + j] += g[b * n + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::SelectRows(a, indices) => {
                if let Some(ga) = acc!(*a) {
                    for (out_row, &src_row) in indices.iter().enumerate() {
                        for j in 0..n {
                            ga[src_row * n + j] += g[out_row * n + j];
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let c = self.shape2(*logits).1;
                let b = labels.len() as f64;
                if let Some(gl) = acc!(*logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[i * c + j] += g[0] * (node.cache[i * c + j] - onehot) / b;
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "parameter",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Gelu(_) => "gelu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Exp(_) => "exp",
        Op::Ln(_) => "ln",
        Op::Sqrt(_) => "sqrt",
        Op::Abs(_) => "abs",
        Op::Softplus(_) => "softplus",
        Op::ClampMin(..) => "clamp_min",
        Op::SoftmaxRows(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SumAll(_) => "sum",
        Op::MeanAll(_) => "mean",
        Op::RowSums(_) => "row_sums",
        Op::ColMeans(_) => "col_means",
        Op::CumsumRows(_) => "cumsum",
        Op::SliceCols(..) => "slice_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::TileRows(_) => "tile_rows",
        Op::GroupMeanRows(..) => "group_mean_rows",
        Op::SelectRows(..) => "select_rows",
        Op::CrossEntropy(..) => "cross_entropy",
    }
}
