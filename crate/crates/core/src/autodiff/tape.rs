use std::rc::Rc;

use crate::error::{Result, SlapError};

use super::{fresh_tape_id, NormPolicy, Precision, Tensor};

/// Recorded operand: node index (if the operand was tracked) plus the values
/// the backward pass needs.
#[derive(Clone)]
struct Arg {
    node: Option<usize>,
    data: Rc<Vec<f64>>,
}

impl Arg {
    fn of(t: &Tensor) -> Arg {
        Arg { node: t.node_id(), data: t.data_rc() }
    }
}

enum Op {
    Leaf,
    Add { a: Arg, b: Arg },
    Sub { a: Arg, b: Arg },
    Mul { a: Arg, b: Arg },
    Div { a: Arg, b: Arg },
    AddScalar { x: Arg },
    Scale { x: Arg, c: f64 },
    Relu { x: Arg },
    Exp { x: Arg },
    Log { x: Arg },
    Sqrt { x: Arg },
    Recip { x: Arg },
    SumAll { x: Arg },
    MeanAll { x: Arg },
    SumLast { x: Arg, rows: usize, cols: usize },
    NormLast { x: Arg, rows: usize, cols: usize, clamped: Vec<bool> },
    SoftmaxRows { x: Arg, rows: usize, cols: usize },
    AddBias { x: Arg, b: Arg, rows: usize, cols: usize },
    MulFeatures { x: Arg, f: Arg, rows: usize, cols: usize },
    DivRows { x: Arg, r: Arg, rows: usize, cols: usize },
    MulScalarT { x: Arg, s: Arg },
    Matmul { a: Arg, b: Arg, m: usize, k: usize, n: usize },
    Transpose { x: Arg, rows: usize, cols: usize },
    Norm2d {
        x: Arg,
        gamma: Arg,
        beta_node: Option<usize>,
        xhat: Rc<Vec<f64>>,
        inv_std: Vec<f64>,
        rows: usize,
        cols: usize,
        batch_axis: bool,
    },
}

struct Node {
    op: Op,
    len: usize,
    value: Rc<Vec<f64>>,
}

/// Gradient map produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tensor, if it was tracked and reached.
    pub fn of(&self, t: &Tensor) -> Option<&[f64]> {
        t.node_id().and_then(|id| self.by_node(id))
    }

    pub fn by_node(&self, node: usize) -> Option<&[f64]> {
        self.slots.get(node).and_then(|s| s.as_deref())
    }
}

/// Wengert list recording one forward pass.
///
/// Build a fresh tape per step: leaves go in via [`Tape::leaf`], constants
/// via [`Tensor::from_vec`], and any operation touching at least one tracked
/// tensor appends a node. Nodes are in topological order by construction.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { id: fresh_tape_id(), nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn quantize(&self, v: &mut [f64]) {
        if self.precision == Precision::F32 {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Tracked leaf tensor (a trainable parameter or any input that needs a
    /// gradient).
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SlapError::Dimension(format!(
                "leaf shape {:?} implies {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        let mut data = data;
        self.quantize(&mut data);
        let rc = Rc::new(data);
        let node = self.push(Op::Leaf, Rc::clone(&rc));
        Ok(Tensor::new_internal(rc, shape.to_vec(), Some(node), self.id))
    }

    fn push(&mut self, op: Op, value: Rc<Vec<f64>>) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Node { op, len: value.len(), value });
        idx
    }

    fn check_attached(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.node_id().is_some() && t.tape_id() != self.id {
            return Err(SlapError::Contract(format!(
                "{what} is tracked on a different tape"
            )));
        }
        Ok(())
    }

    /// Emit the result of an op: recorded when any input was tracked,
    /// constant otherwise.
    fn emit(&mut self, tracked: bool, op: impl FnOnce() -> Op, mut value: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.quantize(&mut value);
        let rc = Rc::new(value);
        if tracked {
            let node = self.push(op(), Rc::clone(&rc));
            Tensor::new_internal(rc, shape, Some(node), self.id)
        } else {
            Tensor::new_internal(rc, shape, None, 0)
        }
    }

    fn binary_same_shape(&mut self, a: &Tensor, b: &Tensor, name: &str) -> Result<bool> {
        self.check_attached(a, name)?;
        self.check_attached(b, name)?;
        if a.shape() != b.shape() {
            return Err(SlapError::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok(a.requires_grad() || b.requires_grad())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.binary_same_shape(a, b, "add")?;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.emit(tracked, || Op::Add { a: Arg::of(a), b: Arg::of(b) }, v, a.shape().to_vec()))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.binary_same_shape(a, b, "sub")?;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.emit(tracked, || Op::Sub { a: Arg::of(a), b: Arg::of(b) }, v, a.shape().to_vec()))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.binary_same_shape(a, b, "mul")?;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.emit(tracked, || Op::Mul { a: Arg::of(a), b: Arg::of(b) }, v, a.shape().to_vec()))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.binary_same_shape(a, b, "div")?;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        Ok(self.emit(tracked, || Op::Div { a: Arg::of(a), b: Arg::of(b) }, v, a.shape().to_vec()))
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.check_attached(x, "add_scalar")?;
        let v = x.data().iter().map(|a| a + c).collect();
        Ok(self.emit(x.requires_grad(), || Op::AddScalar { x: Arg::of(x) }, v, x.shape().to_vec()))
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.check_attached(x, "scale")?;
        let v = x.data().iter().map(|a| a * c).collect();
        Ok(self.emit(x.requires_grad(), || Op::Scale { x: Arg::of(x), c }, v, x.shape().to_vec()))
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "relu")?;
        let v = x.data().iter().map(|a| a.max(0.0)).collect();
        Ok(self.emit(x.requires_grad(), || Op::Relu { x: Arg::of(x) }, v, x.shape().to_vec()))
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "exp")?;
        let v = x.data().iter().map(|a| a.exp()).collect();
        Ok(self.emit(x.requires_grad(), || Op::Exp { x: Arg::of(x) }, v, x.shape().to_vec()))
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "log")?;
        let v = x.data().iter().map(|a| a.ln()).collect();
        Ok(self.emit(x.requires_grad(), || Op::Log { x: Arg::of(x) }, v, x.shape().to_vec()))
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "sqrt")?;
        let v = x.data().iter().map(|a| a.sqrt()).collect();
        Ok(self.emit(x.requires_grad(), || Op::Sqrt { x: Arg::of(x) }, v, x.shape().to_vec()))
    }

    pub fn recip(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "recip")?;
        let v = x.data().iter().map(|a| 1.0 / a).collect();
        Ok(self.emit(x.requires_grad(), || Op::Recip { x: Arg::of(x) }, v, x.shape().to_vec()))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "sum_all")?;
        let s: f64 = x.data().iter().sum();
        Ok(self.emit(x.requires_grad(), || Op::SumAll { x: Arg::of(x) }, vec![s], Vec::new()))
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "mean_all")?;
        if x.is_empty() {
            return Err(SlapError::Dimension("mean_all of empty tensor".into()));
        }
        let s: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        Ok(self.emit(x.requires_grad(), || Op::MeanAll { x: Arg::of(x) }, vec![s], Vec::new()))
    }

    /// Row sums of a rank-2 tensor: `[r, c] -> [r]`.
    pub fn sum_last(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "sum_last")?;
        let (rows, cols) = x.dims2()?;
        let mut v = vec![0.0; rows];
        for i in 0..rows {
            v[i] = x.data()[i * cols..(i + 1) * cols].iter().sum();
        }
        Ok(self.emit(
            x.requires_grad(),
            || Op::SumLast { x: Arg::of(x), rows, cols },
            v,
            vec![rows],
        ))
    }

    /// L2 norm along the last axis: `[r, c] -> [r]`, or `[n] -> scalar`.
    ///
    /// Norms at or below the policy epsilon are clamped (`Clamp`) or rejected
    /// (`Strict`). A clamped row contributes zero gradient.
    pub fn norm_last(&mut self, x: &Tensor, policy: NormPolicy) -> Result<Tensor> {
        self.check_attached(x, "norm_last")?;
        let (rows, cols, out_shape) = match x.shape() {
            [n] => (1usize, *n, Vec::new()),
            [r, c] => (*r, *c, vec![*r]),
            other => {
                return Err(SlapError::Rank(format!(
                    "norm_last expects rank 1 or 2, got shape {:?}",
                    other
                )))
            }
        };
        let eps = policy.eps();
        let mut v = vec![0.0; rows];
        let mut clamped = vec![false; rows];
        for i in 0..rows {
            let row = &x.data()[i * cols..(i + 1) * cols];
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n <= eps {
                if let NormPolicy::Strict(_) = policy {
                    return Err(SlapError::DegenerateNorm(format!(
                        "row {i} has norm {n:.3e} <= {eps:.1e}"
                    )));
                }
                v[i] = eps;
                clamped[i] = true;
            } else {
                v[i] = n;
            }
        }
        Ok(self.emit(
            x.requires_grad(),
            || Op::NormLast { x: Arg::of(x), rows, cols, clamped },
            v,
            out_shape,
        ))
    }

    /// Row-wise softmax of a rank-2 tensor (max-shifted for stability).
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "softmax_rows")?;
        let (rows, cols) = x.dims2()?;
        let mut v = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &x.data()[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, a) in row.iter().enumerate() {
                let e = (a - m).exp();
                v[i * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                v[i * cols + j] /= denom;
            }
        }
        Ok(self.emit(
            x.requires_grad(),
            || Op::SoftmaxRows { x: Arg::of(x), rows, cols },
            v,
            x.shape().to_vec(),
        ))
    }

    // ── Broadcasting ────────────────────────────────────────────────

    /// `[r, c] + [c]` broadcast over rows.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "add_bias")?;
        self.check_attached(b, "add_bias")?;
        let (rows, cols) = x.dims2()?;
        if b.shape() != [cols] {
            return Err(SlapError::Dimension(format!(
                "add_bias: bias shape {:?} does not match {} columns",
                b.shape(),
                cols
            )));
        }
        let mut v = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                v[i * cols + j] = x.data()[i * cols + j] + b.data()[j];
            }
        }
        let tracked = x.requires_grad() || b.requires_grad();
        Ok(self.emit(
            tracked,
            || Op::AddBias { x: Arg::of(x), b: Arg::of(b), rows, cols },
            v,
            vec![rows, cols],
        ))
    }

    /// `[r, c] * [c]` broadcast over rows.
    pub fn mul_features(&mut self, x: &Tensor, f: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "mul_features")?;
        self.check_attached(f, "mul_features")?;
        let (rows, cols) = x.dims2()?;
        if f.shape() != [cols] {
            return Err(SlapError::Dimension(format!(
                "mul_features: factor shape {:?} does not match {} columns",
                f.shape(),
                cols
            )));
        }
        let mut v = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                v[i * cols + j] = x.data()[i * cols + j] * f.data()[j];
            }
        }
        let tracked = x.requires_grad() || f.requires_grad();
        Ok(self.emit(
            tracked,
            || Op::MulFeatures { x: Arg::of(x), f: Arg::of(f), rows, cols },
            v,
            vec![rows, cols],
        ))
    }

    /// `[r, c] / [r]` broadcast over columns (each row divided by its scalar).
    pub fn div_rows(&mut self, x: &Tensor, r: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "div_rows")?;
        self.check_attached(r, "div_rows")?;
        let (rows, cols) = x.dims2()?;
        if r.shape() != [rows] {
            return Err(SlapError::Dimension(format!(
                "div_rows: divisor shape {:?} does not match {} rows",
                r.shape(),
                rows
            )));
        }
        let mut v = vec![0.0; rows * cols];
        for i in 0..rows {
            let d = r.data()[i];
            for j in 0..cols {
                v[i * cols + j] = x.data()[i * cols + j] / d;
            }
        }
        let tracked = x.requires_grad() || r.requires_grad();
        Ok(self.emit(
            tracked,
            || Op::DivRows { x: Arg::of(x), r: Arg::of(r), rows, cols },
            v,
            vec![rows, cols],
        ))
    }

    /// Multiply every element by a scalar tensor.
    pub fn mul_scalar_t(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "mul_scalar_t")?;
        self.check_attached(s, "mul_scalar_t")?;
        if !s.is_scalar() {
            return Err(SlapError::Rank(format!(
                "mul_scalar_t: scale has shape {:?}, expected scalar",
                s.shape()
            )));
        }
        let c = s.data()[0];
        let v = x.data().iter().map(|a| a * c).collect();
        let tracked = x.requires_grad() || s.requires_grad();
        Ok(self.emit(
            tracked,
            || Op::MulScalarT { x: Arg::of(x), s: Arg::of(s) },
            v,
            x.shape().to_vec(),
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_attached(a, "matmul")?;
        self.check_attached(b, "matmul")?;
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(SlapError::Dimension(format!(
                "matmul: lhs {m}x{k} incompatible with rhs {k2}x{n}"
            )));
        }
        let v = matmul_raw(a.data(), b.data(), m, k, n);
        let tracked = a.requires_grad() || b.requires_grad();
        Ok(self.emit(
            tracked,
            || Op::Matmul { a: Arg::of(a), b: Arg::of(b), m, k, n },
            v,
            vec![m, n],
        ))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_attached(x, "transpose")?;
        let (rows, cols) = x.dims2()?;
        let v = transpose_raw(x.data(), rows, cols);
        Ok(self.emit(
            x.requires_grad(),
            || Op::Transpose { x: Arg::of(x), rows, cols },
            v,
            vec![cols, rows],
        ))
    }

    // ── Normalization layers ────────────────────────────────────────

    /// Batch normalization over the batch axis using batch statistics.
    ///
    /// Returns `(y, batch_mean, batch_var)`; the caller owns running-stat
    /// bookkeeping. Variance is the biased estimate, so the normalized output
    /// has per-feature mean 0 and variance 1 before the affine part.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        self.check_attached(x, "batch_norm")?;
        self.check_attached(gamma, "batch_norm")?;
        self.check_attached(beta, "batch_norm")?;
        let (rows, cols) = x.dims2()?;
        if rows < 2 {
            return Err(SlapError::BatchSize(format!(
                "batch normalization in training mode needs at least 2 rows, got {rows}"
            )));
        }
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(SlapError::Dimension(format!(
                "batch_norm: gamma {:?} / beta {:?} do not match {} features",
                gamma.shape(),
                beta.shape(),
                cols
            )));
        }
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for j in 0..cols {
            let mut s = 0.0;
            for i in 0..rows {
                s += x.data()[i * cols + j];
            }
            mean[j] = s / rows as f64;
            let mut v = 0.0;
            for i in 0..rows {
                let d = x.data()[i * cols + j] - mean[j];
                v += d * d;
            }
            var[j] = v / rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; rows * cols];
        let mut y = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let h = (x.data()[i * cols + j] - mean[j]) * inv_std[j];
                xhat[i * cols + j] = h;
                y[i * cols + j] = h * gamma.data()[j] + beta.data()[j];
            }
        }
        let xhat = Rc::new(xhat);
        let tracked = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = self.emit(
            tracked,
            || Op::Norm2d {
                x: Arg::of(x),
                gamma: Arg::of(gamma),
                beta_node: beta.node_id(),
                xhat: Rc::clone(&xhat),
                inv_std: inv_std.clone(),
                rows,
                cols,
                batch_axis: true,
            },
            y,
            vec![rows, cols],
        );
        Ok((out, mean, var))
    }

    /// Layer normalization over the feature axis of each row.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        self.check_attached(x, "layer_norm")?;
        self.check_attached(gamma, "layer_norm")?;
        self.check_attached(beta, "layer_norm")?;
        let (rows, cols) = x.dims2()?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(SlapError::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match {} features",
                gamma.shape(),
                beta.shape(),
                cols
            )));
        }
        let mut inv_std = vec![0.0; rows];
        let mut xhat = vec![0.0; rows * cols];
        let mut y = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &x.data()[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[i * cols + j] = h;
                y[i * cols + j] = h * gamma.data()[j] + beta.data()[j];
            }
        }
        let xhat = Rc::new(xhat);
        let tracked = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.emit(
            tracked,
            || Op::Norm2d {
                x: Arg::of(x),
                gamma: Arg::of(gamma),
                beta_node: beta.node_id(),
                xhat: Rc::clone(&xhat),
                inv_std: inv_std.clone(),
                rows,
                cols,
                batch_axis: false,
            },
            y,
            vec![rows, cols],
        ))
    }

    // ── Composites ──────────────────────────────────────────────────

    /// Cosine distance `1 - a·b / (|a||b|)` between two vectors.
    pub fn cosine_distance(&mut self, a: &Tensor, b: &Tensor, policy: NormPolicy) -> Result<Tensor> {
        if a.rank() != 1 || b.rank() != 1 || a.shape() != b.shape() {
            return Err(SlapError::Dimension(format!(
                "cosine_distance expects two equal-length vectors, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let prod = self.mul(a, b)?;
        let dot = self.sum_all(&prod)?;
        let na = self.norm_last(a, policy)?;
        let nb = self.norm_last(b, policy)?;
        let denom = self.mul(&na, &nb)?;
        let cos = self.div(&dot, &denom)?;
        let neg = self.scale(&cos, -1.0)?;
        self.add_scalar(&neg, 1.0)
    }

    /// Mean over rows of the per-row cosine distance between `[B, d]` inputs.
    pub fn cosine_distance_rows_mean(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        policy: NormPolicy,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(SlapError::Dimension(format!(
                "cosine rows: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        a.dims2()?;
        let prod = self.mul(a, b)?;
        let dots = self.sum_last(&prod)?;
        let na = self.norm_last(a, policy)?;
        let nb = self.norm_last(b, policy)?;
        let denom = self.mul(&na, &nb)?;
        let cos = self.div(&dots, &denom)?;
        let neg = self.scale(&cos, -1.0)?;
        let dist = self.add_scalar(&neg, 1.0)?;
        self.mean_all(&dist)
    }

    /// Row-wise L2 normalization of a `[B, d]` tensor.
    pub fn l2_normalize_rows(&mut self, x: &Tensor, policy: NormPolicy) -> Result<Tensor> {
        x.dims2()?;
        let norms = self.norm_last(x, policy)?;
        self.div_rows(x, &norms)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss. Each call starts from a
    /// fresh gradient buffer, so repeated calls on the same tape return
    /// identical results; cross-step accumulation is the optimizer's job.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(SlapError::Rank(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss.node_id().ok_or_else(|| {
            SlapError::Contract("backward: loss is not attached to a tape".into())
        })?;
        if loss.tape_id() != self.id {
            return Err(SlapError::Contract(
                "backward: loss belongs to a different tape".into(),
            ));
        }
        let mut slots: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let g = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Vec<f64>>], target: Option<usize>, len: usize, add: impl Fn(&mut [f64])) {
        let Some(idx) = target else { return };
        let slot = slots[idx].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
        self.quantize_slice(slot);
    }

    fn quantize_slice(&self, v: &mut [f64]) {
        if self.precision == Precision::F32 {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(slots, a.node, a.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                self.accumulate(slots, b.node, b.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(slots, a.node, a.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                self.accumulate(slots, b.node, b.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                self.accumulate(slots, a.node, a.data.len(), |s| {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(b.data.iter()) {
                        *si += gi * bi;
                    }
                });
                self.accumulate(slots, b.node, b.data.len(), |s| {
                    for ((si, gi), ai) in s.iter_mut().zip(g).zip(a.data.iter()) {
                        *si += gi * ai;
                    }
                });
            }
            Op::Div { a, b } => {
                self.accumulate(slots, a.node, a.data.len(), |s| {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(b.data.iter()) {
                        *si += gi / bi;
                    }
                });
                self.accumulate(slots, b.node, b.data.len(), |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * a.data[i] / (b.data[i] * b.data[i]);
                    }
                });
            }
            Op::AddScalar { x } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi * c;
                    }
                });
            }
            Op::Relu { x } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..s.len() {
                        if x.data[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp { x } => {
                let y = &node.value;
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log { x } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x.data[i];
                    }
                });
            }
            Op::Sqrt { x } => {
                let y = &node.value;
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Recip { x } => {
                let y = &node.value;
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::SumAll { x } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for si in s.iter_mut() {
                        *si += g[0];
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = x.data.len() as f64;
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for si in s.iter_mut() {
                        *si += g[0] / n;
                    }
                });
            }
            Op::SumLast { x, rows, cols } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[i * cols + j] += g[i];
                        }
                    }
                });
            }
            Op::NormLast { x, rows, cols, clamped } => {
                let y = &node.value;
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..*rows {
                        if clamped[i] {
                            continue;
                        }
                        for j in 0..*cols {
                            s[i * cols + j] += g[i] * x.data[i * cols + j] / y[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let y = &node.value;
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..*rows {
                        let base = i * cols;
                        let dot: f64 = (0..*cols).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..*cols {
                            s[base + j] += y[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }
            Op::AddBias { x, b, rows, cols } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                self.accumulate(slots, b.node, b.data.len(), |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::MulFeatures { x, f, rows, cols } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[i * cols + j] += g[i * cols + j] * f.data[j];
                        }
                    }
                });
                self.accumulate(slots, f.node, f.data.len(), |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[j] += g[i * cols + j] * x.data[i * cols + j];
                        }
                    }
                });
            }
            Op::DivRows { x, r, rows, cols } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[i * cols + j] += g[i * cols + j] / r.data[i];
                        }
                    }
                });
                self.accumulate(slots, r.node, r.data.len(), |s| {
                    for i in 0..*rows {
                        let mut acc = 0.0;
                        for j in 0..*cols {
                            acc += g[i * cols + j] * x.data[i * cols + j];
                        }
                        s[i] -= acc / (r.data[i] * r.data[i]);
                    }
                });
            }
            Op::MulScalarT { x, s: scl } => {
                let c = scl.data[0];
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi * c;
                    }
                });
                self.accumulate(slots, scl.node, 1, |s| {
                    let mut acc = 0.0;
                    for (gi, xi) in g.iter().zip(x.data.iter()) {
                        acc += gi * xi;
                    }
                    s[0] += acc;
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                self.accumulate(slots, a.node, a.data.len(), |s| {
                    // grad_a = g · bᵀ
                    for i in 0..*m {
                        for p in 0..*k {
                            let mut acc = 0.0;
                            for j in 0..*n {
                                acc += g[i * n + j] * b.data[p * n + j];
                            }
                            s[i * k + p] += acc;
                        }
                    }
                });
                self.accumulate(slots, b.node, b.data.len(), |s| {
                    // grad_b = aᵀ · g
                    for p in 0..*k {
                        for j in 0..*n {
                            let mut acc = 0.0;
                            for i in 0..*m {
                                acc += a.data[i * k + p] * g[i * n + j];
                            }
                            s[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::Norm2d { x, gamma, beta_node, xhat, inv_std, rows, cols, batch_axis } => {
                // dxhat = g * gamma (broadcast over rows)
                let mut dxhat = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        dxhat[i * cols + j] = g[i * cols + j] * gamma.data[j];
                    }
                }
                self.accumulate(slots, gamma.node, gamma.data.len(), |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                });
                self.accumulate(slots, *beta_node, *cols, |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[j] += g[i * cols + j];
                        }
                    }
                });
                self.accumulate(slots, x.node, x.data.len(), |s| {
                    if *batch_axis {
                        // normalize over rows, per feature column
                        let nf = *rows as f64;
                        for j in 0..*cols {
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for i in 0..*rows {
                                sum_d += dxhat[i * cols + j];
                                sum_dh += dxhat[i * cols + j] * xhat[i * cols + j];
                            }
                            for i in 0..*rows {
                                let t = nf * dxhat[i * cols + j]
                                    - sum_d
                                    - xhat[i * cols + j] * sum_dh;
                                s[i * cols + j] += inv_std[j] * t / nf;
                            }
                        }
                    } else {
                        // normalize over columns, per row
                        let nf = *cols as f64;
                        for i in 0..*rows {
                            let base = i * cols;
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..*cols {
                                sum_d += dxhat[base + j];
                                sum_dh += dxhat[base + j] * xhat[base + j];
                            }
                            for j in 0..*cols {
                                let t = nf * dxhat[base + j] - sum_d - xhat[base + j] * sum_dh;
                                s[base + j] += inv_std[i] * t / nf;
                            }
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}
