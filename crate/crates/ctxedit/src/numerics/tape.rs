//! Single-pass gradient tape.
//!
//! A [`Tape`] records every primitive applied during one forward pass as a
//! node with parent references. [`Tape::backward`] walks the record in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers. Nodes are referenced by [`Var`] handles (indices), so graphs are
//! plain `Vec`s and the whole structure is dropped after the step.
//!
//! Gradients accumulate: a node feeding two consumers receives the sum of
//! both contributions, so `d(x+x)/dx == 2`.

use super::{NumResult, Tensor, TensorError};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Offset { a: Var },
    Transpose { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Exp { a: Var },
    Ln { a: Var },
    Sqrt { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    RowSum { a: Var },
    ColMean { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, class_axis: usize },
    BceWithLogits { logits: Var, target: Var },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize, len: usize },
    Reshape { a: Var },
    PoolAvg2 { a: Var, grid: usize },
    UpsampleNearest { a: Var, grid: usize, factor: usize },
    StraightThroughStep { a: Var },
}

#[derive(Debug, Clone)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Forward-pass record with reverse-mode backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let av = a[i * q + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// (outer, axis_len, inner) decomposition for an axis reduction/scan.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.node(v).data.len(), 1);
        self.node(v).data[0]
    }

    /// Gradient of a node after `backward`; `None` when the node does not
    /// require grad or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Bind a persistent tensor as a leaf. The tape copies the data; the
    /// caller harvests gradients back via [`Tape::grad`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> NumResult<Var> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> NumResult<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::NotMatrix {
                op,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Binary elementwise ──────────────────────────────────────────

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> NumResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> NumResult<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> NumResult<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> NumResult<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let out = self.elementwise("div", a, b, |x, y| x / y, Op::Div { a, b })?;
        if !self.node(out).data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "div" });
        }
        Ok(out)
    }

    /// `a + bias` where `a` is `[n, d]` and `bias` is `[d]`, broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> NumResult<Var> {
        let (n, d) = self.require_matrix("add_bias", a)?;
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.node(a).data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.node(bias).data[j];
            }
        }
        let rg = self.node(a).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(data, vec![n, d], rg, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.node(a).data.iter().map(|&x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        self.push(data, shape, rg, Op::Scale { a, c })
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let data = self.node(a).data.iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        self.push(data, shape, rg, Op::Offset { a })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ── Matrix ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let (p, q) = self.require_matrix("matmul", a)?;
        let (q2, r) = self.require_matrix("matmul", b)?;
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![p, q],
                right: vec![q2, r],
            });
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, p, q, r);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(data, vec![p, r], rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> NumResult<Var> {
        let (rows, cols) = self.require_matrix("transpose", a)?;
        let data = transpose_raw(&self.node(a).data, rows, cols);
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![cols, rows], rg, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> NumResult<Var> {
        let expected: usize = shape.iter().product();
        if expected != self.node(a).data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.node(a).data.len(),
            });
        }
        let data = self.node(a).data.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape { a }))
    }

    // ── Unary activations ───────────────────────────────────────────

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.node(a).data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        self.push(data, shape, rg, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu { a },
        )
    }

    pub fn exp(&mut self, a: Var) -> NumResult<Var> {
        let out = self.unary(a, f64::exp, Op::Exp { a });
        if !self.node(out).data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        Ok(out)
    }

    pub fn ln(&mut self, a: Var) -> NumResult<Var> {
        let out = self.unary(a, f64::ln, Op::Ln { a });
        if !self.node(out).data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "ln" });
        }
        Ok(out)
    }

    pub fn sqrt(&mut self, a: Var) -> NumResult<Var> {
        let out = self.unary(a, f64::sqrt, Op::Sqrt { a });
        if !self.node(out).data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "sqrt" });
        }
        Ok(out)
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.node(a).data.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(vec![s], vec![1], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.node(a).data.len() as f64;
        let s: f64 = self.node(a).data.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(vec![s / n], vec![1], rg, Op::MeanAll { a })
    }

    /// Per-row sums of a matrix: `[n, d] -> [n]`.
    pub fn row_sum(&mut self, a: Var) -> NumResult<Var> {
        let (n, d) = self.require_matrix("row_sum", a)?;
        let data = (0..n)
            .map(|i| self.node(a).data[i * d..(i + 1) * d].iter().sum())
            .collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![n], rg, Op::RowSum { a }))
    }

    /// Per-column means of a matrix: `[n, d] -> [d]`.
    pub fn col_mean(&mut self, a: Var) -> NumResult<Var> {
        let (n, d) = self.require_matrix("col_mean", a)?;
        let mut data = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                data[j] += self.node(a).data[i * d + j];
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![d], rg, Op::ColMean { a }))
    }

    // ── Structured ops ──────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> NumResult<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.node(a).data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    data[at(k)] = e;
                    denom += e;
                }
                for k in 0..len {
                    data[at(k)] /= denom;
                }
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, shape, rg, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> NumResult<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::NotMatrix {
            op: "layer_norm",
            shape: shape.clone(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gamma).to_vec(),
            });
        }
        let src = &self.node(x).data;
        let mut data = vec![0.0; src.len()];
        let rows = src.len() / d;
        for r in 0..rows {
            let s = &src[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] =
                    (s[j] - mean) * inv * self.node(gamma).data[j] + self.node(beta).data[j];
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        Ok(self.push(data, self.shape(x).to_vec(), rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Mean cross-entropy of integer targets against log-softmax along
    /// `class_axis` of a 2-D logits matrix. With `class_axis = 1`, lanes are
    /// rows and `targets[i]` names the correct column of row `i`; with
    /// `class_axis = 0`, lanes are columns.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_axis: usize,
    ) -> NumResult<Var> {
        let (rows, cols) = self.require_matrix("cross_entropy", logits)?;
        if class_axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: "cross_entropy",
                axis: class_axis,
                shape: vec![rows, cols],
            });
        }
        let (classes, lanes) = if class_axis == 1 { (cols, rows) } else { (rows, cols) };
        if targets.len() != lanes {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![lanes],
                right: vec![targets.len()],
            });
        }
        let src = &self.node(logits).data;
        let fetch = |lane: usize, class: usize| -> f64 {
            if class_axis == 1 {
                src[lane * cols + class]
            } else {
                src[class * cols + lane]
            }
        };
        let mut total = 0.0;
        for (lane, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: classes,
                });
            }
            let max = (0..classes)
                .map(|c| fetch(lane, c))
                .fold(f64::NEG_INFINITY, f64::max);
            let log_denom = (0..classes)
                .map(|c| (fetch(lane, c) - max).exp())
                .sum::<f64>()
                .ln();
            total -= fetch(lane, t) - max - log_denom;
        }
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![total / lanes as f64],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                class_axis,
            },
        ))
    }

    /// Mean binary cross-entropy computed from logits (numerically stable at
    /// saturation). `target` must hold values in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> NumResult<Var> {
        if self.shape(logits) != self.shape(target) {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: self.shape(target).to_vec(),
            });
        }
        let n = self.node(logits).data.len();
        let mut total = 0.0;
        for i in 0..n {
            let x = self.node(logits).data[i];
            let g = self.node(target).data[i];
            total += x.max(0.0) - x * g + (-x.abs()).exp().ln_1p();
        }
        let rg = self.node(logits).requires_grad || self.node(target).requires_grad;
        Ok(self.push(
            vec![total / n as f64],
            vec![1],
            rg,
            Op::BceWithLogits { logits, target },
        ))
    }

    /// Concatenate 2-D blocks along `axis` (0 = stack rows, 1 = widen cols).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> NumResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::Degenerate {
                op: "concat",
                detail: "empty part list".into(),
            });
        }
        if axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: self.shape(parts[0]).to_vec(),
            });
        }
        let (r0, c0) = self.require_matrix("concat", parts[0])?;
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.require_matrix("concat", p)?;
            if axis == 0 {
                if c != c0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: vec![r0, c0],
                        right: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: vec![r0, c0],
                        right: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(&self.node(p).data);
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let pc = self.shape(p)[1];
                    data.extend_from_slice(&self.node(p).data[i * pc..(i + 1) * pc]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        Ok(self.push(
            data,
            vec![rows, cols],
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Select rows of a matrix by index (also serves as embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> NumResult<Var> {
        let (rows, cols) = self.require_matrix("gather_rows", a)?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(&self.node(a).data[i * cols..(i + 1) * cols]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(
            data,
            vec![idx.len(), cols],
            rg,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Take a contiguous column range of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> NumResult<Var> {
        let (rows, cols) = self.require_matrix("slice_cols", a)?;
        if start + len > cols || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&self.node(a).data[i * cols + start..i * cols + start + len]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![rows, len], rg, Op::SliceCols { a, start, len }))
    }

    /// 2x2 average pooling over a `[grid*grid, c]` feature map.
    pub fn pool_avg2(&mut self, a: Var, grid: usize) -> NumResult<Var> {
        let (n, c) = self.require_matrix("pool_avg2", a)?;
        if n != grid * grid || grid % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "pool_avg2",
                left: vec![n, c],
                right: vec![grid * grid, c],
            });
        }
        let half = grid / 2;
        let src = &self.node(a).data;
        let mut data = vec![0.0; half * half * c];
        for y in 0..half {
            for x in 0..half {
                for j in 0..c {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += src[((2 * y + dy) * grid + 2 * x + dx) * c + j];
                        }
                    }
                    data[(y * half + x) * c + j] = s / 4.0;
                }
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(data, vec![half * half, c], rg, Op::PoolAvg2 { a, grid }))
    }

    /// Nearest-neighbour upsampling of a `[grid*grid, c]` map by `factor`.
    pub fn upsample_nearest(&mut self, a: Var, grid: usize, factor: usize) -> NumResult<Var> {
        let (n, c) = self.require_matrix("upsample_nearest", a)?;
        if n != grid * grid || factor == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "upsample_nearest",
                left: vec![n, c],
                right: vec![grid * grid, c],
            });
        }
        let big = grid * factor;
        let src = &self.node(a).data;
        let mut data = vec![0.0; big * big * c];
        for y in 0..big {
            for x in 0..big {
                let sy = y / factor;
                let sx = x / factor;
                for j in 0..c {
                    data[(y * big + x) * c + j] = src[(sy * grid + sx) * c + j];
                }
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(
            data,
            vec![big * big, c],
            rg,
            Op::UpsampleNearest { a, grid, factor },
        ))
    }

    /// Hard threshold with a straight-through gradient: forward emits
    /// `{0, 1}`, backward passes the incoming gradient unchanged.
    pub fn straight_through_step(&mut self, a: Var, thresh: f64) -> Var {
        let data = self
            .node(a)
            .data
            .iter()
            .map(|&x| if x >= thresh { 1.0 } else { 0.0 })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        self.push(data, shape, rg, Op::StraightThroughStep { a })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates per-node gradient
    /// buffers readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> NumResult<()> {
        if self.node(loss).data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let grad = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(Var(i), &op, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn add_into(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, out: Var, op: &Op, grad: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[1];
                let bt = transpose_raw(&self.nodes[b.0].data, q, r);
                let da = matmul_raw(grad, &bt, p, r, q);
                let at = transpose_raw(&self.nodes[a.0].data, p, q);
                let db = matmul_raw(&at, grad, q, p, r);
                self.add_into(a, &da);
                self.add_into(b, &db);
            }
            Op::Add { a, b } => {
                self.add_into(a, grad);
                self.add_into(b, grad);
            }
            Op::Sub { a, b } => {
                self.add_into(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.add_into(b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| g * x)
                    .collect();
                self.add_into(a, &da);
                self.add_into(b, &db);
            }
            Op::Div { a, b } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(g, y)| g / y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.add_into(a, &da);
                self.add_into(b, &db);
            }
            Op::AddBias { a, bias } => {
                self.add_into(a, grad);
                let d = self.shape(bias)[0];
                let mut db = vec![0.0; d];
                for (k, g) in grad.iter().enumerate() {
                    db[k % d] += g;
                }
                self.add_into(bias, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = grad.iter().map(|g| c * g).collect();
                self.add_into(a, &da);
            }
            Op::Offset { a } | Op::Reshape { a } | Op::StraightThroughStep { a } => {
                self.add_into(a, grad);
            }
            Op::Transpose { a } => {
                let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                let da = transpose_raw(grad, cols, rows);
                self.add_into(a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[out.0].data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.add_into(a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[out.0].data)
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                self.add_into(a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_into(a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.add_into(a, &da);
            }
            Op::Exp { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[out.0].data)
                    .map(|(g, e)| g * e)
                    .collect();
                self.add_into(a, &da);
            }
            Op::Ln { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| g / x)
                    .collect();
                self.add_into(a, &da);
            }
            Op::Sqrt { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[out.0].data)
                    .map(|(g, s)| g / (2.0 * s))
                    .collect();
                self.add_into(a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![grad[0]; self.nodes[a.0].data.len()];
                self.add_into(a, &da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                let da = vec![grad[0] / n as f64; n];
                self.add_into(a, &da);
            }
            Op::RowSum { a } => {
                let (n, d) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = grad[i];
                    }
                }
                self.add_into(a, &da);
            }
            Op::ColMean { a } => {
                let (n, d) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = grad[j] / n as f64;
                    }
                }
                self.add_into(a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = self.shape(out).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let s = &self.nodes[out.0].data;
                let mut da = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| grad[at(k)] * s[at(k)]).sum();
                        for k in 0..len {
                            da[at(k)] = s[at(k)] * (grad[at(k)] - dot);
                        }
                    }
                }
                self.add_into(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.shape(x).last().unwrap();
                let rows = self.nodes[x.0].data.len() / d;
                let xs = self.nodes[x.0].data.clone();
                let gm = self.nodes[gamma.0].data.clone();
                let mut dx = vec![0.0; xs.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xrow = &xs[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var =
                        xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gm[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.add_into(x, &dx);
                self.add_into(gamma, &dgamma);
                self.add_into(beta, &dbeta);
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                class_axis,
            } => {
                let (rows, cols) = (self.shape(logits)[0], self.shape(logits)[1]);
                let (classes, lanes) = if class_axis == 1 { (cols, rows) } else { (rows, cols) };
                let src = self.nodes[logits.0].data.clone();
                let pos = |lane: usize, class: usize| -> usize {
                    if class_axis == 1 {
                        lane * cols + class
                    } else {
                        class * cols + lane
                    }
                };
                let mut dl = vec![0.0; src.len()];
                let g0 = grad[0] / lanes as f64;
                for (lane, &t) in targets.iter().enumerate() {
                    let max = (0..classes)
                        .map(|c| src[pos(lane, c)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..classes).map(|c| (src[pos(lane, c)] - max).exp()).sum();
                    for c in 0..classes {
                        let p = (src[pos(lane, c)] - max).exp() / denom;
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dl[pos(lane, c)] = g0 * (p - onehot);
                    }
                }
                self.add_into(logits, &dl);
            }
            Op::BceWithLogits { logits, target } => {
                let n = self.nodes[logits.0].data.len();
                let g0 = grad[0] / n as f64;
                let dl: Vec<f64> = self.nodes[logits.0]
                    .data
                    .iter()
                    .zip(&self.nodes[target.0].data)
                    .map(|(&x, &g)| g0 * (1.0 / (1.0 + (-x).exp()) - g))
                    .collect();
                self.add_into(logits, &dl);
                if self.nodes[target.0].requires_grad {
                    let dt: Vec<f64> = self.nodes[logits.0]
                        .data
                        .iter()
                        .map(|&x| -g0 * x)
                        .collect();
                    self.add_into(target, &dt);
                }
            }
            Op::Concat { ref parts, axis } => {
                let cols = self.shape(out)[1];
                if axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].data.len();
                        let slice = grad[offset..offset + n].to_vec();
                        self.add_into(p, &slice);
                        offset += n;
                    }
                } else {
                    let rows = self.shape(out)[0];
                    let mut col_off = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        let mut dp = vec![0.0; rows * pc];
                        for i in 0..rows {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&grad[i * cols + col_off..i * cols + col_off + pc]);
                        }
                        self.add_into(p, &dp);
                        col_off += pc;
                    }
                }
            }
            Op::GatherRows { a, ref idx } => {
                let cols = self.shape(a)[1];
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        da[i * cols + j] += grad[k * cols + j];
                    }
                }
                self.add_into(a, &da);
            }
            Op::SliceCols { a, start, len } => {
                let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..len {
                        da[i * cols + start + j] = grad[i * len + j];
                    }
                }
                self.add_into(a, &da);
            }
            Op::PoolAvg2 { a, grid } => {
                let c = self.shape(a)[1];
                let half = grid / 2;
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for y in 0..half {
                    for x in 0..half {
                        for j in 0..c {
                            let g = grad[(y * half + x) * c + j] / 4.0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    da[((2 * y + dy) * grid + 2 * x + dx) * c + j] += g;
                                }
                            }
                        }
                    }
                }
                self.add_into(a, &da);
            }
            Op::UpsampleNearest { a, grid, factor } => {
                let c = self.shape(a)[1];
                let big = grid * factor;
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for y in 0..big {
                    for x in 0..big {
                        let src = (y / factor * grid + x / factor) * c;
                        for j in 0..c {
                            da[src + j] += grad[(y * big + x) * c + j];
                        }
                    }
                }
                self.add_into(a, &da);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, data: Vec<f64>, shape: Vec<usize>) -> Var {
        let t = Tensor::from_vec(data, shape).unwrap().with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape
            .constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2])
            .unwrap();
        let m = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2])
            .unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilation() {
        let mut tape = Tape::new();
        let a = tape
            .constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2])
            .unwrap();
        let b = tape.constant(vec![0.0, 5.0], vec![2, 1]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        // Independent reference: plain i/j/k loops, no skips or reordering.
        let mut want = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                want[i * 2 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let out = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.data(out).iter().zip(&want) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_input() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_overflow_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1000.0, 0.0], vec![2]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.data(s);
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // Reference values for softmax([1, 2, 3]) computed with 50-digit
        // arithmetic and rounded to f64.
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        for (got, want) in tape.data(s).iter().zip(expected) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_sums_to_one_on_both_axes() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![0.3, -1.2, 4.0, 2.0, 0.0, -0.5], vec![2, 3])
            .unwrap();
        for axis in [0usize, 1] {
            let s = tape.softmax(x, axis).unwrap();
            let d = tape.data(s).to_vec();
            let (outer, len, inner) = super::axis_split(&[2, 3], axis);
            for o in 0..outer {
                for i in 0..inner {
                    let sum: f64 = (0..len).map(|k| d[o * len * inner + k * inner + i]).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                    assert!((0..len).all(|k| d[o * len * inner + k * inner + i] >= 0.0));
                }
            }
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0], vec![1]).unwrap();
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s), 0.5);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![50.0, -50.0], vec![1, 2]).unwrap();
        let ce = tape.cross_entropy(logits, &[0], 1).unwrap();
        assert!(tape.value(ce).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_two_classes_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let ce = tape.cross_entropy(logits, &[1], 1).unwrap();
        assert!((tape.value(ce) - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[2], 1),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, -2.0, 3.5, 0.0], vec![2, 2]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, -2.0, 3.0], vec![3]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn shared_subexpression_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3.0], vec![1]);
        let twice = tape.add(x, x).unwrap();
        let loss = tape.sum_all(twice);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 2.0], vec![2]);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_through_constant_graph_is_a_noop() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0], vec![1]).unwrap();
        tape.backward(x).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn straight_through_binarizes_forward_and_passes_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.2, 0.5, 0.9], vec![3]);
        let b = tape.straight_through_step(x, 0.5);
        assert_eq!(tape.data(b), &[0.0, 1.0, 1.0]);
        let loss = tape.sum_all(b);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_and_gather_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = tape.constant(vec![3.0, 4.0], vec![1, 2]).unwrap();
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(cat), &[2, 2]);
        let second = tape.gather_rows(cat, &[1]).unwrap();
        assert_eq!(tape.data(second), &[3.0, 4.0]);
    }

    #[test]
    fn bce_with_logits_matches_composed_form() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.3, -1.2, 2.0], vec![3]).unwrap();
        let target = tape.constant(vec![1.0, 0.0, 1.0], vec![3]).unwrap();
        let fused = tape.bce_with_logits(logits, target).unwrap();
        // composed: -mean(g ln p + (1-g) ln(1-p))
        let p = tape.sigmoid(logits);
        let lnp = tape.ln(p).unwrap();
        let t1 = tape.mul(target, lnp).unwrap();
        let one_minus_p = tape.scale(p, -1.0);
        let one_minus_p = tape.offset(one_minus_p, 1.0);
        let ln1mp = tape.ln(one_minus_p).unwrap();
        let one_minus_g = tape.scale(target, -1.0);
        let one_minus_g = tape.offset(one_minus_g, 1.0);
        let t2 = tape.mul(one_minus_g, ln1mp).unwrap();
        let s = tape.add(t1, t2).unwrap();
        let m = tape.mean_all(s);
        let composed = tape.scale(m, -1.0);
        assert!((tape.value(fused) - tape.value(composed)).abs() < 1e-12);
    }
}
