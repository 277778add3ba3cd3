//! Wengert tape: operations are recorded in append order during the forward
//! pass and replayed in strict reverse order by [`Tape::backward`].

use super::{check_finite_slice, Tensor, TensorError, TensorResult};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    AddConst { a: usize },
    MinConst { a: usize, cap: f64 },
    Clamp { a: usize, lo: f64, hi: f64 },
    Relu { a: usize },
    Sigmoid { a: usize },
    Log { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    AddRowBroadcast { a: usize, bias: usize, rows: usize, cols: usize },
    Softmax { a: usize, outer: usize, n: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, d: usize, eps: f64 },
    Conv1d { x: usize, kernels: usize, width: usize, d_in: usize, d_out: usize },
    MaxOverTime { x: usize, cols: usize, argmax: Vec<usize> },
    MeanOverTime { x: usize, rows: usize, cols: usize },
    RowSums { a: usize, rows: usize, cols: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    L2Norm { a: usize },
    RowL2Norms { a: usize, rows: usize, cols: usize },
    RowScale { a: usize, s: usize, rows: usize, cols: usize },
    GuardedDiv { a: usize, b: usize, eps: f64 },
    GuardedRowNormalize { a: usize, rows: usize, cols: usize, eps: f64, norms: Vec<f64> },
    LogSumExpRows { a: usize, rows: usize, cols: usize },
    TakeDiag { a: usize, n: usize },
    ConcatRows { parts: Vec<usize>, cols: usize },
    ConcatCols { parts: Vec<usize>, widths: Vec<usize>, rows: usize },
    EmbedRows { table: usize, indices: Vec<usize>, dim: usize },
    EmbedSumRows { table: usize, sets: Vec<Vec<usize>>, dim: usize },
    Dropout { a: usize, mask: Vec<f64> },
    SliceRows { a: usize, start: usize, len: usize, cols: usize },
    SliceCols { a: usize, start: usize, len: usize, rows: usize, cols: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
}

/// Append-only computation graph over row-major `f64` buffers.
///
/// A tape is single-owner and lives for one forward/backward cycle; leaves
/// copy their values in and gradients are read back out with [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            // allocated on first write during the reverse sweep
            grad: Vec::new(),
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn ensure_grad(&mut self, id: usize) {
        if self.nodes[id].grad.is_empty() {
            self.nodes[id].grad = vec![0.0; self.nodes[id].value.len()];
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Registers a tensor as a leaf; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, t: &Tensor, trainable: bool) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, trainable)
    }

    /// Non-trainable leaf built from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorResult<TensorId> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient buffer of a node after `backward`. An empty slice means no
    /// gradient reached the node (identically zero).
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("tape node shapes are consistent by construction")
    }

    /// First scalar of a node; handy for reading losses.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn check_finite(&self, id: TensorId, context: &str) -> TensorResult<()> {
        check_finite_slice(&self.nodes[id.0].value, context)
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    fn binary_layout(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> TensorResult<(Vec<usize>, bool, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok((sa.clone(), false, false))
        } else if na == 1 {
            Ok((sb.clone(), true, false))
        } else if nb == 1 {
            Ok((sa.clone(), false, true))
        } else {
            Err(TensorError::DimensionMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (shape, a_scalar, b_scalar) = self.binary_layout("add", a, b)?;
        let n = shape.iter().product();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let av = self.nodes[a.0].value[if a_scalar { 0 } else { i }];
            let bv = self.nodes[b.0].value[if b_scalar { 0 } else { i }];
            out[i] = av + bv;
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (shape, a_scalar, b_scalar) = self.binary_layout("sub", a, b)?;
        let n = shape.iter().product();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let av = self.nodes[a.0].value[if a_scalar { 0 } else { i }];
            let bv = self.nodes[b.0].value[if b_scalar { 0 } else { i }];
            out[i] = av - bv;
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(shape, out, Op::Sub { a: a.0, b: b.0 }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (shape, a_scalar, b_scalar) = self.binary_layout("mul", a, b)?;
        let n = shape.iter().product();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let av = self.nodes[a.0].value[if a_scalar { 0 } else { i }];
            let bv = self.nodes[b.0].value[if b_scalar { 0 } else { i }];
            out[i] = av * bv;
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    /// Elementwise `a / b` that returns 0 (with zero gradients) wherever
    /// `|b| <= eps`; the continuous extension used by norm ratios.
    pub fn guarded_div(&mut self, a: TensorId, b: TensorId, eps: f64) -> TensorResult<TensorId> {
        let (shape, a_scalar, b_scalar) = self.binary_layout("guarded_div", a, b)?;
        if a_scalar {
            return Err(TensorError::DimensionMismatch {
                op: "guarded_div",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let n = shape.iter().product();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let av = self.nodes[a.0].value[i];
            let bv = self.nodes[b.0].value[if b_scalar { 0 } else { i }];
            out[i] = if bv.abs() <= eps { 0.0 } else { av / bv };
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(shape, out, Op::GuardedDiv { a: a.0, b: b.0, eps }, needs))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let value = self.nodes[a.0].value.iter().map(|v| v * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        self.push(shape, value, Op::Scale { a: a.0, factor }, needs)
    }

    pub fn add_const(&mut self, a: TensorId, offset: f64) -> TensorId {
        let value = self.nodes[a.0].value.iter().map(|v| v + offset).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        self.push(shape, value, Op::AddConst { a: a.0 }, needs)
    }

    /// Elementwise `min(a, cap)`; gradient passes only where `a < cap`.
    pub fn min_const(&mut self, a: TensorId, cap: f64) -> TensorId {
        let value = self.nodes[a.0].value.iter().map(|v| v.min(cap)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        self.push(shape, value, Op::MinConst { a: a.0, cap }, needs)
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes on the interior only.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let value = self
            .nodes[a.0]
            .value
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        self.push(shape, value, Op::Clamp { a: a.0, lo, hi }, needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        self.push(shape, value, Op::Relu { a: a.0 }, needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let value = self
            .nodes[a.0]
            .value
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        self.push(shape, value, Op::Sigmoid { a: a.0 }, needs)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        self.push(shape, value, Op::Log { a: a.0 }, needs)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    fn dims2(&self, op: &'static str, id: TensorId) -> TensorResult<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op,
                expected: "rank-2 tensor".into(),
                got: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n, &mut out);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0, m, k: ka, n }, needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("transpose", a)?;
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: a.0, rows, cols }, needs))
    }

    /// `[m x n] + [n]` with the bias added to every row.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("add_row_broadcast", a)?;
        if self.nodes[bias.0].value.len() != cols {
            return Err(TensorError::DimensionMismatch {
                op: "add_row_broadcast",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += self.nodes[bias.0].value[c];
            }
        }
        let needs = self.needs(a.0) || self.needs(bias.0);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::AddRowBroadcast { a: a.0, bias: bias.0, rows, cols },
            needs,
        ))
    }

    /// Max-subtracted softmax along `axis`. Entries where `mask` is false get
    /// zero probability; a slice with no unmasked entry is a contract error.
    pub fn softmax(
        &mut self,
        a: TensorId,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> TensorResult<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: format!("non-empty axis {axis}"),
                got: shape,
            });
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[a.0].value;
        if let Some(m) = mask {
            if m.len() != src.len() {
                return Err(TensorError::BadShape {
                    op: "softmax mask",
                    expected: format!("{} entries", src.len()),
                    got: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let live = |j: usize| mask.map_or(true, |m| m[at(j)]);
                let mut hi = f64::NEG_INFINITY;
                for j in 0..n {
                    if live(j) {
                        hi = hi.max(src[at(j)]);
                    }
                }
                if hi == f64::NEG_INFINITY {
                    return Err(TensorError::Contract(format!(
                        "softmax slice (outer {o}, inner {i}) is fully masked"
                    )));
                }
                let mut total = 0.0;
                for j in 0..n {
                    let e = if live(j) { (src[at(j)] - hi).exp() } else { 0.0 };
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(shape, out, Op::Softmax { a: a.0, outer, n, inner }, needs))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the elementwise affine `gain * xhat + bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| TensorError::BadShape {
            op: "layer_norm",
            expected: "rank >= 1".into(),
            got: shape.clone(),
        })?;
        if self.nodes[gain.0].value.len() != d || self.nodes[bias.0].value.len() != d {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut out = vec![0.0; src.len()];
        for s in 0..src.len() / d {
            let row = &src[s * d..(s + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[s * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, d, eps }, needs))
    }

    /// Valid 1D convolution over the row axis: `x [L x d_in]` with kernels
    /// `[f x d_in x d_out]` gives `[(L-f+1) x d_out]`. No implicit activation.
    pub fn conv1d(&mut self, x: TensorId, kernels: TensorId) -> TensorResult<TensorId> {
        let (len, d_in) = self.dims2("conv1d", x)?;
        let ks = &self.nodes[kernels.0].shape;
        if ks.len() != 3 || ks[1] != d_in {
            return Err(TensorError::DimensionMismatch {
                op: "conv1d",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: ks.clone(),
            });
        }
        let (width, d_out) = (ks[0], ks[2]);
        if len < width {
            return Err(TensorError::InputTooShort { len, width });
        }
        let l_out = len - width + 1;
        let src = &self.nodes[x.0].value;
        let k = &self.nodes[kernels.0].value;
        let mut out = vec![0.0; l_out * d_out];
        let window = width * d_in;
        for t in 0..l_out {
            let xs = &src[t * d_in..t * d_in + window];
            let orow = &mut out[t * d_out..(t + 1) * d_out];
            for (p, &xv) in xs.iter().enumerate() {
                let krow = &k[p * d_out..(p + 1) * d_out];
                for (o, &kv) in orow.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
        let needs = self.needs(x.0) || self.needs(kernels.0);
        Ok(self.push(
            vec![l_out, d_out],
            out,
            Op::Conv1d { x: x.0, kernels: kernels.0, width, d_in, d_out },
            needs,
        ))
    }

    /// Column-wise max over the row (time) axis: `[L x d] -> [1 x d]`.
    /// Ties resolve to the earliest row.
    pub fn max_over_time(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("max_over_time", x)?;
        if rows == 0 {
            return Err(TensorError::BadShape {
                op: "max_over_time",
                expected: "at least one row".into(),
                got: self.nodes[x.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let mut out = src[..cols].to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = src[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(vec![1, cols], out, Op::MaxOverTime { x: x.0, cols, argmax }, needs))
    }

    /// Column-wise mean over the row axis: `[L x d] -> [1 x d]`.
    pub fn mean_over_time(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("mean_over_time", x)?;
        if rows == 0 {
            return Err(TensorError::BadShape {
                op: "mean_over_time",
                expected: "at least one row".into(),
                got: self.nodes[x.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += src[r * cols + c];
            }
        }
        for v in out.iter_mut() {
            *v /= rows as f64;
        }
        let needs = self.needs(x.0);
        Ok(self.push(vec![1, cols], out, Op::MeanOverTime { x: x.0, rows, cols }, needs))
    }

    /// Per-row sum: `[m x n] -> [m x 1]`.
    pub fn row_sums(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("row_sums", a)?;
        let src = &self.nodes[a.0].value;
        let out = (0..rows)
            .map(|r| src[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let needs = self.needs(a.0);
        Ok(self.push(vec![rows, 1], out, Op::RowSums { a: a.0, rows, cols }, needs))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a.0);
        self.push(vec![1], vec![total], Op::SumAll { a: a.0 }, needs)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len().max(1);
        let total: f64 = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a.0);
        self.push(vec![1], vec![total / n as f64], Op::MeanAll { a: a.0 }, needs)
    }

    /// Whole-tensor Euclidean norm as a scalar.
    pub fn l2_norm(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].value.iter().map(|v| v * v).sum();
        let needs = self.needs(a.0);
        self.push(vec![1], vec![total.sqrt()], Op::L2Norm { a: a.0 }, needs)
    }

    /// Per-row Euclidean norms: `[m x n] -> [m x 1]`.
    pub fn row_l2_norms(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("row_l2_norms", a)?;
        let src = &self.nodes[a.0].value;
        let out = (0..rows)
            .map(|r| {
                src[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let needs = self.needs(a.0);
        Ok(self.push(vec![rows, 1], out, Op::RowL2Norms { a: a.0, rows, cols }, needs))
    }

    /// Multiplies row `r` of `a [m x n]` by the scalar `s[r]` (`s` is `[m x 1]`).
    pub fn row_scale(&mut self, a: TensorId, s: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("row_scale", a)?;
        if self.nodes[s.0].value.len() != rows {
            return Err(TensorError::DimensionMismatch {
                op: "row_scale",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let src = &self.nodes[a.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = src[r * cols + c] * sv[r];
            }
        }
        let needs = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(vec![rows, cols], out, Op::RowScale { a: a.0, s: s.0, rows, cols }, needs))
    }

    /// Divides each row by its L2 norm; rows with norm `<= eps` become zero
    /// rows and pass no gradient (cosine-similarity guard).
    pub fn guarded_row_normalize(&mut self, a: TensorId, eps: f64) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("guarded_row_normalize", a)?;
        let src = &self.nodes[a.0].value;
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm > eps {
                for c in 0..cols {
                    out[r * cols + c] = row[c] / norm;
                }
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::GuardedRowNormalize { a: a.0, rows, cols, eps, norms },
            needs,
        ))
    }

    /// Per-row `log(sum(exp(x)))` with max subtraction: `[m x n] -> [m x 1]`.
    pub fn log_sum_exp_rows(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("log_sum_exp_rows", a)?;
        let src = &self.nodes[a.0].value;
        let out = (0..rows)
            .map(|r| {
                let row = &src[r * cols..(r + 1) * cols];
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                hi + row.iter().map(|v| (v - hi).exp()).sum::<f64>().ln()
            })
            .collect();
        let needs = self.needs(a.0);
        Ok(self.push(vec![rows, 1], out, Op::LogSumExpRows { a: a.0, rows, cols }, needs))
    }

    /// Diagonal of a square matrix as `[n x 1]`.
    pub fn take_diag(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("take_diag", a)?;
        if rows != cols {
            return Err(TensorError::BadShape {
                op: "take_diag",
                expected: "square matrix".into(),
                got: self.nodes[a.0].shape.clone(),
            });
        }
        let src = &self.nodes[a.0].value;
        let out = (0..rows).map(|r| src[r * cols + r]).collect();
        let needs = self.needs(a.0);
        Ok(self.push(vec![rows, 1], out, Op::TakeDiag { a: a.0, n: rows }, needs))
    }

    /// Concatenation of rank-2 tensors along `axis` (0 stacks rows, 1 widens).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        match axis {
            0 => {
                let (_, cols) = self.dims2("concat", parts[0])?;
                let mut rows = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let (r, c) = self.dims2("concat", p)?;
                    if c != cols {
                        return Err(TensorError::DimensionMismatch {
                            op: "concat axis 0",
                            lhs: vec![rows, cols],
                            rhs: self.nodes[p.0].shape.clone(),
                        });
                    }
                    rows += r;
                    out.extend_from_slice(&self.nodes[p.0].value);
                }
                let needs = parts.iter().any(|p| self.needs(p.0));
                let ids = parts.iter().map(|p| p.0).collect();
                Ok(self.push(vec![rows, cols], out, Op::ConcatRows { parts: ids, cols }, needs))
            }
            1 => {
                let (rows, _) = self.dims2("concat", parts[0])?;
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (r, c) = self.dims2("concat", p)?;
                    if r != rows {
                        return Err(TensorError::DimensionMismatch {
                            op: "concat axis 1",
                            lhs: self.nodes[parts[0].0].shape.clone(),
                            rhs: self.nodes[p.0].shape.clone(),
                        });
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut out = vec![0.0; rows * total];
                let mut offset = 0;
                for (i, &p) in parts.iter().enumerate() {
                    let c = widths[i];
                    let src = &self.nodes[p.0].value;
                    for r in 0..rows {
                        out[r * total + offset..r * total + offset + c]
                            .copy_from_slice(&src[r * c..(r + 1) * c]);
                    }
                    offset += c;
                }
                let needs = parts.iter().any(|p| self.needs(p.0));
                let ids = parts.iter().map(|p| p.0).collect();
                Ok(self.push(
                    vec![rows, total],
                    out,
                    Op::ConcatCols { parts: ids, widths, rows },
                    needs,
                ))
            }
            _ => Err(TensorError::BadShape {
                op: "concat",
                expected: "axis 0 or 1".into(),
                got: vec![axis],
            }),
        }
    }

    /// Gathers table rows by index: `[v x d]` with `len` indices gives `[len x d]`.
    pub fn embed_rows(&mut self, table: TensorId, indices: &[usize]) -> TensorResult<TensorId> {
        let (rows, dim) = self.dims2("embed_rows", table)?;
        let mut out = vec![0.0; indices.len() * dim];
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(TensorError::IndexOutOfRange { index: idx, rows });
            }
            out[i * dim..(i + 1) * dim]
                .copy_from_slice(&self.nodes[table.0].value[idx * dim..(idx + 1) * dim]);
        }
        let needs = self.needs(table.0);
        Ok(self.push(
            vec![indices.len(), dim],
            out,
            Op::EmbedRows { table: table.0, indices: indices.to_vec(), dim },
            needs,
        ))
    }

    /// Bag-of-rows embedding: row `t` of the output is the sum of the table
    /// rows named by `sets[t]`. Empty sets give zero rows.
    pub fn embed_sum_rows(
        &mut self,
        table: TensorId,
        sets: &[Vec<usize>],
    ) -> TensorResult<TensorId> {
        let (rows, dim) = self.dims2("embed_sum_rows", table)?;
        let mut out = vec![0.0; sets.len() * dim];
        for (t, set) in sets.iter().enumerate() {
            for &idx in set {
                if idx >= rows {
                    return Err(TensorError::IndexOutOfRange { index: idx, rows });
                }
                let src = &self.nodes[table.0].value[idx * dim..(idx + 1) * dim];
                for (o, v) in out[t * dim..(t + 1) * dim].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let needs = self.needs(table.0);
        Ok(self.push(
            vec![sets.len(), dim],
            out,
            Op::EmbedSumRows { table: table.0, sets: sets.to_vec(), dim },
            needs,
        ))
    }

    /// Inverted dropout. Training mode zeroes entries with probability `rate`
    /// and scales survivors by `1/(1-rate)`; eval mode is the identity (the
    /// input id is returned unchanged and nothing is recorded).
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[a.0].value.len())
            .map(|_| {
                if rng.random_range(0.0..1.0) < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let value = self
            .nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a.0);
        Ok(self.push(shape, value, Op::Dropout { a: a.0, mask }, needs))
    }

    /// Contiguous row block `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("slice_rows", a)?;
        if start + len > rows || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                expected: format!("rows [{start}, {}) within 0..{rows}", start + len),
                got: self.nodes[a.0].shape.clone(),
            });
        }
        let value = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(vec![len, cols], value, Op::SliceRows { a: a.0, start, len, cols }, needs))
    }

    /// Contiguous column block `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorResult<TensorId> {
        let (rows, cols) = self.dims2("slice_cols", a)?;
        if start + len > cols || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                expected: format!("cols [{start}, {}) within 0..{cols}", start + len),
                got: self.nodes[a.0].shape.clone(),
            });
        }
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows * len];
        for r in 0..rows {
            value[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a.0);
        Ok(self.push(
            vec![rows, len],
            value,
            Op::SliceCols { a: a.0, start, len, rows, cols },
            needs,
        ))
    }

    // ── Reverse sweep ───────────────────────────────────────────────────

    /// Seeds the scalar `loss` with gradient 1 and walks the tape in reverse
    /// append order, accumulating gradients into every node that needs them.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.ensure_grad(loss.0);
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_empty() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.step_backward(i, &op);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, op: &Op) {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                self.accumulate(a, &g, AccMode::Direct);
                self.accumulate(b, &g, AccMode::Direct);
                self.nodes[i].grad = g;
            }
            Op::Sub { a, b } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                self.accumulate(a, &g, AccMode::Direct);
                self.accumulate(b, &g, AccMode::Negated);
                self.nodes[i].grad = g;
            }
            Op::Mul { a, b } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                if self.needs(a) {
                    let factor: Vec<f64> = broadcast_read(&self.nodes[b].value, g.len());
                    let da: Vec<f64> = g.iter().zip(&factor).map(|(gv, f)| gv * f).collect();
                    self.accumulate(a, &da, AccMode::Direct);
                }
                if self.needs(b) {
                    let factor: Vec<f64> = broadcast_read(&self.nodes[a].value, g.len());
                    let db: Vec<f64> = g.iter().zip(&factor).map(|(gv, f)| gv * f).collect();
                    self.accumulate(b, &db, AccMode::Direct);
                }
                self.nodes[i].grad = g;
            }
            Op::GuardedDiv { a, b, eps } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                let b_scalar = self.nodes[b].value.len() == 1;
                if self.needs(a) {
                    let mut da = vec![0.0; g.len()];
                    for j in 0..g.len() {
                        let bv = self.nodes[b].value[if b_scalar { 0 } else { j }];
                        if bv.abs() > eps {
                            da[j] = g[j] / bv;
                        }
                    }
                    self.accumulate(a, &da, AccMode::Direct);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; self.nodes[b].value.len()];
                    for j in 0..g.len() {
                        let bj = if b_scalar { 0 } else { j };
                        let bv = self.nodes[b].value[bj];
                        if bv.abs() > eps {
                            db[bj] -= g[j] * self.nodes[a].value[j] / (bv * bv);
                        }
                    }
                    self.add_assign_grad(b, &db);
                }
                self.nodes[i].grad = g;
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = self.nodes[i].grad.iter().map(|g| g * factor).collect();
                self.add_assign_grad(a, &da);
            }
            Op::AddConst { a } => {
                let g = self.nodes[i].grad.clone();
                self.add_assign_grad(a, &g);
            }
            Op::MinConst { a, cap } => {
                let da: Vec<f64> = self
                    .nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(g, &x)| if x < cap { *g } else { 0.0 })
                    .collect();
                self.add_assign_grad(a, &da);
            }
            Op::Clamp { a, lo, hi } => {
                let da: Vec<f64> = self
                    .nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(g, &x)| if x > lo && x < hi { *g } else { 0.0 })
                    .collect();
                self.add_assign_grad(a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = self
                    .nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_assign_grad(a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = self
                    .nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[i].value)
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.add_assign_grad(a, &da);
            }
            Op::Log { a } => {
                let da: Vec<f64> = self
                    .nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(g, &x)| g / x)
                    .collect();
                self.add_assign_grad(a, &da);
            }
            Op::Matmul { a, b, m, k, n } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(&g, &self.nodes[b].value, m, n, k, &mut da);
                    self.add_assign_grad(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(&self.nodes[a].value, &g, m, k, n, &mut db);
                    self.add_assign_grad(b, &db);
                }
                self.nodes[i].grad = g;
            }
            Op::Transpose { a, rows, cols } => {
                let g = &self.nodes[i].grad;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                self.add_assign_grad(a, &da);
            }
            Op::AddRowBroadcast { a, bias, rows, cols } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                if self.needs(a) {
                    self.add_assign_grad(a, &g);
                }
                if self.needs(bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    self.add_assign_grad(bias, &db);
                }
                self.nodes[i].grad = g;
            }
            Op::Softmax { a, outer, n, inner } => {
                let g = &self.nodes[i].grad;
                let s = &self.nodes[i].value;
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + ii;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[at(j)] * s[at(j)];
                        }
                        for j in 0..n {
                            da[at(j)] = s[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.add_assign_grad(a, &da);
            }
            Op::LayerNorm { x, gain, bias, d, eps } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                let src = self.nodes[x].value.clone();
                let gn = self.nodes[gain].value.clone();
                let slices = src.len() / d;
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for s in 0..slices {
                    let row = &src[s * d..(s + 1) * d];
                    let grow = &g[s * d..(s + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(&gn).map(|(gv, gm)| gv * gm).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dx[s * d + j] = inv / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if self.needs(x) {
                    self.add_assign_grad(x, &dx);
                }
                if self.needs(gain) {
                    self.add_assign_grad(gain, &dgain);
                }
                if self.needs(bias) {
                    self.add_assign_grad(bias, &dbias);
                }
                self.nodes[i].grad = g;
            }
            Op::Conv1d { x, kernels, width, d_in, d_out } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                let l_out = g.len() / d_out;
                let window = width * d_in;
                let need_x = self.needs(x);
                let need_k = self.needs(kernels);
                let mut dx = vec![0.0; self.nodes[x].value.len()];
                let mut dk = vec![0.0; self.nodes[kernels].value.len()];
                for t in 0..l_out {
                    let grow = &g[t * d_out..(t + 1) * d_out];
                    if need_k {
                        let xs = &self.nodes[x].value[t * d_in..t * d_in + window];
                        for (p, &xv) in xs.iter().enumerate() {
                            let dkrow = &mut dk[p * d_out..(p + 1) * d_out];
                            for (o, &gv) in dkrow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                    if need_x {
                        let k = &self.nodes[kernels].value;
                        let dxw = &mut dx[t * d_in..t * d_in + window];
                        for (p, o) in dxw.iter_mut().enumerate() {
                            *o += dot8(&k[p * d_out..(p + 1) * d_out], grow);
                        }
                    }
                }
                if need_x {
                    self.add_assign_grad(x, &dx);
                }
                if need_k {
                    self.add_assign_grad(kernels, &dk);
                }
                self.nodes[i].grad = g;
            }
            Op::MaxOverTime { x, cols, ref argmax } => {
                let g = self.nodes[i].grad.clone();
                let mut dx = vec![0.0; self.nodes[x].value.len()];
                for c in 0..cols {
                    dx[argmax[c] * cols + c] = g[c];
                }
                self.add_assign_grad(x, &dx);
            }
            Op::MeanOverTime { x, rows, cols } => {
                let g = self.nodes[i].grad.clone();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c] / rows as f64;
                    }
                }
                self.add_assign_grad(x, &dx);
            }
            Op::RowSums { a, rows, cols } => {
                let g = self.nodes[i].grad.clone();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[r];
                    }
                }
                self.add_assign_grad(a, &da);
            }
            Op::SumAll { a } => {
                let g = self.nodes[i].grad[0];
                let da = vec![g; self.nodes[a].value.len()];
                self.add_assign_grad(a, &da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a].value.len().max(1);
                let g = self.nodes[i].grad[0] / n as f64;
                let da = vec![g; self.nodes[a].value.len()];
                self.add_assign_grad(a, &da);
            }
            Op::L2Norm { a } => {
                let norm = self.nodes[i].value[0];
                if norm > 0.0 {
                    let g = self.nodes[i].grad[0];
                    let da: Vec<f64> =
                        self.nodes[a].value.iter().map(|x| g * x / norm).collect();
                    self.add_assign_grad(a, &da);
                }
            }
            Op::RowL2Norms { a, rows, cols } => {
                let g = self.nodes[i].grad.clone();
                let norms = self.nodes[i].value.clone();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    if norms[r] > 0.0 {
                        for c in 0..cols {
                            da[r * cols + c] = g[r] * self.nodes[a].value[r * cols + c] / norms[r];
                        }
                    }
                }
                self.add_assign_grad(a, &da);
            }
            Op::RowScale { a, s, rows, cols } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                if self.needs(a) {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let sv = self.nodes[s].value[r];
                        for c in 0..cols {
                            da[r * cols + c] = g[r * cols + c] * sv;
                        }
                    }
                    self.add_assign_grad(a, &da);
                }
                if self.needs(s) {
                    let mut ds = vec![0.0; rows];
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += g[r * cols + c] * self.nodes[a].value[r * cols + c];
                        }
                        ds[r] = acc;
                    }
                    self.add_assign_grad(s, &ds);
                }
                self.nodes[i].grad = g;
            }
            Op::GuardedRowNormalize { a, rows, cols, eps, ref norms } => {
                let g = self.nodes[i].grad.clone();
                let y = self.nodes[i].value.clone();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    if norms[r] > eps {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            da[r * cols + c] = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                }
                self.add_assign_grad(a, &da);
            }
            Op::LogSumExpRows { a, rows, cols } => {
                let g = self.nodes[i].grad.clone();
                let lse = self.nodes[i].value.clone();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] =
                            g[r] * (self.nodes[a].value[r * cols + c] - lse[r]).exp();
                    }
                }
                self.add_assign_grad(a, &da);
            }
            Op::TakeDiag { a, n } => {
                let g = self.nodes[i].grad.clone();
                let mut da = vec![0.0; n * n];
                for r in 0..n {
                    da[r * n + r] = g[r];
                }
                self.add_assign_grad(a, &da);
            }
            Op::ConcatRows { ref parts, cols } => {
                let g = self.nodes[i].grad.clone();
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let rows = self.nodes[p].value.len() / cols;
                    let chunk = g[offset..offset + rows * cols].to_vec();
                    offset += rows * cols;
                    if self.needs(p) {
                        self.add_assign_grad(p, &chunk);
                    }
                }
            }
            Op::ConcatCols { ref parts, ref widths, rows } => {
                let g = self.nodes[i].grad.clone();
                let parts = parts.clone();
                let widths = widths.clone();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, c) in parts.into_iter().zip(widths) {
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.add_assign_grad(p, &dp);
                    }
                    offset += c;
                }
            }
            Op::EmbedRows { table, ref indices, dim } => {
                if !self.needs(table) {
                    return;
                }
                let g = std::mem::take(&mut self.nodes[i].grad);
                let indices = indices.clone();
                self.ensure_grad(table);
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut self.nodes[table].grad[idx * dim..(idx + 1) * dim];
                    for (o, &gv) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *o += gv;
                    }
                }
                self.nodes[i].grad = g;
            }
            Op::EmbedSumRows { table, ref sets, dim } => {
                if !self.needs(table) {
                    return;
                }
                let g = std::mem::take(&mut self.nodes[i].grad);
                let sets = sets.clone();
                self.ensure_grad(table);
                for (t, set) in sets.iter().enumerate() {
                    for &idx in set {
                        let dst = &mut self.nodes[table].grad[idx * dim..(idx + 1) * dim];
                        for (o, &gv) in dst.iter_mut().zip(&g[t * dim..(t + 1) * dim]) {
                            *o += gv;
                        }
                    }
                }
                self.nodes[i].grad = g;
            }
            Op::Dropout { a, ref mask } => {
                let da: Vec<f64> = self
                    .nodes[i]
                    .grad
                    .iter()
                    .zip(mask)
                    .map(|(g, m)| g * m)
                    .collect();
                self.add_assign_grad(a, &da);
            }
            Op::SliceRows { a, start, len, cols } => {
                let g = self.nodes[i].grad.clone();
                let mut da = vec![0.0; self.nodes[a].value.len()];
                da[start * cols..(start + len) * cols].copy_from_slice(&g);
                self.add_assign_grad(a, &da);
            }
            Op::SliceCols { a, start, len, rows, cols } => {
                let g = self.nodes[i].grad.clone();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.add_assign_grad(a, &da);
            }
        }
    }

    fn accumulate(&mut self, target: usize, grad: &[f64], mode: AccMode) {
        if !self.needs(target) {
            return;
        }
        self.ensure_grad(target);
        let t_len = self.nodes[target].grad.len();
        if t_len == grad.len() {
            let tg = &mut self.nodes[target].grad;
            match mode {
                AccMode::Direct => {
                    for (t, g) in tg.iter_mut().zip(grad) {
                        *t += g;
                    }
                }
                AccMode::Negated => {
                    for (t, g) in tg.iter_mut().zip(grad) {
                        *t -= g;
                    }
                }
            }
        } else {
            // scalar-broadcast leaf: fold the whole gradient into one cell
            debug_assert_eq!(t_len, 1);
            let total: f64 = grad.iter().sum();
            match mode {
                AccMode::Direct => self.nodes[target].grad[0] += total,
                AccMode::Negated => self.nodes[target].grad[0] -= total,
            }
        }
    }

    fn add_assign_grad(&mut self, target: usize, grad: &[f64]) {
        self.accumulate(target, grad, AccMode::Direct);
    }
}

#[derive(Clone, Copy)]
enum AccMode {
    Direct,
    Negated,
}

fn broadcast_read(src: &[f64], len: usize) -> Vec<f64> {
    if src.len() == len {
        src.to_vec()
    } else {
        vec![src[0]; len]
    }
}

// ── Raw GEMM kernels ────────────────────────────────────────────────────

/// `out[m x n] += a[m x k] * b[k x n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Eight-lane dot product: independent accumulators keep the loop free of a
/// serial dependency so it vectorizes; a single-accumulator reduction cannot
/// be reassociated and runs at latency speed.
fn dot8(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let mut tail = 0.0;
    for (xv, yv) in xc.remainder().iter().zip(yc.remainder()) {
        tail += xv * yv;
    }
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `out[m x k] += a[m x n] * b[k x n]^T`
fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot8(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]), false);
        let a = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
        let zero = tape.leaf(&t2(2, 2, &[0.0; 4]), false);
        let annihilated = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(annihilated), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_hand_multiplication() {
        // oracle: 2x2 product worked out by explicit row-column sums
        let a = [[1.0, 2.0], [3.0, 4.0]];
        let b = [[5.0, 6.0], [7.0, 8.0]];
        let mut expect = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    expect[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        assert_eq!(expect, [[19.0, 22.0], [43.0, 50.0]]);

        let mut tape = Tape::new();
        let ta = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let tb = tape.leaf(&t2(2, 2, &[5.0, 6.0, 7.0, 8.0]), false);
        let out = tape.matmul(ta, tb).unwrap();
        assert_eq!(tape.value(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(2, 3, &[0.0; 6]), false);
        let b = tape.leaf(&t2(2, 2, &[0.0; 4]), false);
        match tape.matmul(a, b).unwrap_err() {
            TensorError::DimensionMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_shift_invariant_and_exact() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap(), false);
        let s = tape.softmax(x, 0, None).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // shift invariance
        let y = tape.leaf(&Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap(), false);
        let sy = tape.softmax(y, 0, None).unwrap();
        let y_shift =
            tape.leaf(&Tensor::new(vec![3], vec![0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0]).unwrap(), false);
        let sy_shift = tape.softmax(y_shift, 0, None).unwrap();
        for (a, b) in tape.value(sy).iter().zip(tape.value(sy_shift)) {
            assert!((a - b).abs() < 1e-12);
        }

        // direct exp/sum evaluation: [0, ln2, ln3] -> [1/6, 2/6, 3/6]
        let z = tape.leaf(
            &Tensor::new(vec![3], vec![0.0, 2.0f64.ln(), 3.0f64.ln()]).unwrap(),
            false,
        );
        let sz = tape.softmax(z, 0, None).unwrap();
        let got = tape.value(sz);
        for (g, e) in got.iter().zip(&[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::uniform(vec![4, 7], -3.0, 3.0, &mut rng), false);
        let s = tape.softmax(x, 1, None).unwrap();
        for r in 0..4 {
            let row = &tape.value(s)[r * 7..(r + 1) * 7];
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let mask = vec![true, true, false, false];
        let err = tape.softmax(x, 1, Some(&mask)).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn softmax_mask_zeroes_dead_positions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(1, 3, &[5.0, 1.0, 100.0]), false);
        let mask = vec![true, true, false];
        let s = tape.softmax(x, 1, Some(&mask)).unwrap();
        let v = tape.value(s);
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!(v[0] > v[1]);
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let gain = tape.leaf(&Tensor::new(vec![3], vec![1.0; 3]).unwrap(), false);
        let bias = tape.leaf(&Tensor::new(vec![3], vec![0.0; 3]).unwrap(), false);

        // constant slice collapses to bias
        let x = tape.leaf(&t2(1, 3, &[5.0, 5.0, 5.0]), false);
        let out = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(out) {
            assert!(v.abs() < 1e-9);
        }

        // [1, -1]: mean 0, var 1, xhat = 1/sqrt(1 + eps)
        let g2 = tape.leaf(&Tensor::new(vec![2], vec![1.0; 2]).unwrap(), false);
        let b2 = tape.leaf(&Tensor::new(vec![2], vec![0.0; 2]).unwrap(), false);
        let y = tape.leaf(&t2(1, 2, &[1.0, -1.0]), false);
        let out2 = tape.layer_norm(y, g2, b2, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(out2)[0] - expect).abs() < 1e-12);
        assert!((tape.value(out2)[1] + expect).abs() < 1e-12);
        assert!((expect - 0.999995).abs() < 1e-6);

        // zero gain leaves only the bias
        let g0 = tape.leaf(&Tensor::new(vec![2], vec![0.0; 2]).unwrap(), false);
        let b3 = tape.leaf(&Tensor::new(vec![2], vec![0.7, -0.3]).unwrap(), false);
        let out3 = tape.layer_norm(y, g0, b3, 1e-5).unwrap();
        assert_eq!(tape.value(out3), &[0.7, -0.3]);
    }

    #[test]
    fn layer_norm_moments_before_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let d = 16;
        let gain = tape.leaf(&Tensor::new(vec![d], vec![1.0; d]).unwrap(), false);
        let bias = tape.leaf(&Tensor::new(vec![d], vec![0.0; d]).unwrap(), false);
        let x = tape.leaf(&Tensor::uniform(vec![5, d], -2.0, 2.0, &mut rng), false);
        let out = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        for s in 0..5 {
            let row = &tape.value(out)[s * d..(s + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() <= 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "var {var}");
        }
    }

    #[test]
    fn conv1d_hand_cases() {
        let mut tape = Tape::new();
        // width-1 kernel acting as identity projection
        let x = tape.leaf(&t2(3, 1, &[1.0, 2.0, 3.0]), false);
        let k_id = tape.leaf(&Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(), false);
        let out = tape.conv1d(x, k_id).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0]);

        // all-ones width-2 kernel: [1,2,3] -> [3,5]
        let k_ones = tape.leaf(&Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap(), false);
        let out2 = tape.conv1d(x, k_ones).unwrap();
        assert_eq!(tape.value(out2), &[3.0, 5.0]);

        // zero kernel annihilates
        let k_zero = tape.leaf(&Tensor::new(vec![2, 1, 2], vec![0.0; 4]).unwrap(), false);
        let out3 = tape.conv1d(x, k_zero).unwrap();
        assert_eq!(tape.value(out3), &[0.0; 4]);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(2, 1, &[1.0, 2.0]), false);
        let k = tape.leaf(&Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap(), false);
        assert!(matches!(
            tape.conv1d(x, k).unwrap_err(),
            TensorError::InputTooShort { len: 2, width: 3 }
        ));
    }

    #[test]
    fn backward_quadratic_and_constant() {
        // f(x) = sum(x*x) has gradient 2x
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[2.0, 4.0, 6.0]);

        // constant function has zero gradient
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let c = tape.scalar_const(4.25);
        let zero = tape.scale(c, 1.0);
        tape.backward(zero).unwrap();
        // no gradient path reaches x: the buffer stays unallocated (zero)
        assert!(tape.grad(x).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let doubled = tape.scale(x, 2.0);
        assert!(matches!(
            tape.backward(doubled).unwrap_err(),
            TensorError::Contract(_)
        ));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::uniform(vec![4, 4], -1.0, 1.0, &mut rng), true);
            let w = tape.leaf(&Tensor::uniform(vec![4, 4], -1.0, 1.0, &mut rng), true);
            let h = tape.matmul(x, w).unwrap();
            let s = tape.softmax(h, 1, None).unwrap();
            let d = tape.dropout(s, 0.1, true, &mut rng).unwrap();
            let loss = tape.mean_all(d);
            tape.backward(loss).unwrap();
            (tape.grad(x).to_vec(), tape.grad(w).to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![4], vec![1.0; 4]).unwrap(), false);
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval, x);
        let train = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        for v in tape.value(train) {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t2(3, 2, &[0.0; 6]), false);
        assert!(matches!(
            tape.embed_rows(table, &[0, 3]).unwrap_err(),
            TensorError::IndexOutOfRange { index: 3, rows: 3 }
        ));
    }

    #[test]
    fn embed_sum_rows_is_order_free() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t2(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), false);
        let a = tape.embed_sum_rows(table, &[vec![0, 2, 3]]).unwrap();
        let b = tape.embed_sum_rows(table, &[vec![3, 0, 2]]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let empty = tape.embed_sum_rows(table, &[vec![]]).unwrap();
        assert_eq!(tape.value(empty), &[0.0, 0.0]);
    }

    #[test]
    fn max_over_time_takes_column_maxima() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(3, 2, &[1.0, 9.0, 5.0, 2.0, 3.0, 4.0]), true);
        let m = tape.max_over_time(x).unwrap();
        assert_eq!(tape.value(m), &[5.0, 9.0]);
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_roundtrips_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(1, 2, &[1.0, 2.0]), true);
        let b = tape.leaf(&t2(1, 3, &[3.0, 4.0, 5.0]), true);
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let loss = tape.sum_all(cat);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), &[1.0, 1.0]);
        assert_eq!(tape.grad(b), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn guarded_div_zero_denominator_yields_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let b = tape.leaf(&Tensor::new(vec![2], vec![2.0, 0.0]).unwrap(), true);
        let q = tape.guarded_div(a, b, 1e-12).unwrap();
        assert_eq!(tape.value(q), &[1.5, 0.0]);
        let loss = tape.sum_all(q);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), &[0.5, 0.0]);
        assert_eq!(tape.grad(b)[1], 0.0);
    }

    #[test]
    fn min_const_clamps_and_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap(), true);
        let m = tape.min_const(x, 1.0);
        assert_eq!(tape.value(m), &[0.5, 1.0, 1.0]);
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 0.0, 0.0]);
    }
}
