//! Dense row-major f64 tensors and the numeric kernels everything else is
//! built from. No views: slicing copies. All kernels accumulate into their
//! output so forward and gradient passes share the same code.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows in Tensor::from_rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![r, c], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Accumulation slot for reverse-mode results; same shape as data.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Rows of a 2-D tensor (or 1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        check_finite(context, &self.data)
    }
}

pub fn check_finite(context: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!(
            "{context} at flat index {i} (value {})",
            data[i]
        ))),
    }
}

// ---- raw kernels -----------------------------------------------------------
// All kernels ADD into `out`; callers zero the buffer when they need a plain
// product. Loop orders keep the inner loop contiguous so LLVM vectorizes.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ  (dot products of rows)
pub(crate) fn mm_bt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn mm_at_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Lower-triangular q·kᵀ: out[i,j] += dot(q_i, k_j) for j ≤ i only.
/// Entries above the diagonal are left untouched.
pub(crate) fn scores_lower_into(out: &mut [f64], q: &[f64], k: &[f64], t: usize, d: usize) {
    debug_assert_eq!(q.len(), t * d);
    debug_assert_eq!(k.len(), t * d);
    debug_assert_eq!(out.len(), t * t);
    for i in 0..t {
        let q_row = &q[i * d..(i + 1) * d];
        for j in 0..=i {
            out[i * t + j] += dot(q_row, &k[j * d..(j + 1) * d]);
        }
    }
}

/// Lower-triangular probs·v: out[i,:] += Σ_{j≤i} p[i,j] · v[j,:].
pub(crate) fn weighted_sum_lower_into(out: &mut [f64], p: &[f64], v: &[f64], t: usize, d: usize) {
    debug_assert_eq!(p.len(), t * t);
    debug_assert_eq!(v.len(), t * d);
    debug_assert_eq!(out.len(), t * d);
    for i in 0..t {
        let out_row = &mut out[i * d..(i + 1) * d];
        for j in 0..=i {
            let pij = p[i * t + j];
            if pij == 0.0 {
                continue;
            }
            let v_row = &v[j * d..(j + 1) * d];
            for (o, &vv) in out_row.iter_mut().zip(v_row) {
                *o += pij * vv;
            }
        }
    }
}

/// Transposed lower accumulation: out[j,:] += Σ_{i≥j} p[i,j] · src[i,:].
/// Backward pair of `weighted_sum_lower_into`.
pub(crate) fn weighted_sum_lower_t_into(
    out: &mut [f64],
    p: &[f64],
    src: &[f64],
    t: usize,
    d: usize,
) {
    debug_assert_eq!(p.len(), t * t);
    debug_assert_eq!(src.len(), t * d);
    debug_assert_eq!(out.len(), t * d);
    for i in 0..t {
        let s_row = &src[i * d..(i + 1) * d];
        for j in 0..=i {
            let pij = p[i * t + j];
            if pij == 0.0 {
                continue;
            }
            let out_row = &mut out[j * d..(j + 1) * d];
            for (o, &sv) in out_row.iter_mut().zip(s_row) {
                *o += pij * sv;
            }
        }
    }
}

/// Lower-triangular a·bᵀ restricted to j ≤ i: out[i,j] += dot(a_i, b_j).
pub(crate) fn bt_lower_into(out: &mut [f64], a: &[f64], b: &[f64], t: usize, d: usize) {
    scores_lower_into(out, a, b, t, d);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the reduction pipelines.
    let mut acc = [0.0f64; 4];
    let (a4, a_tail) = a.split_at(a.len() / 4 * 4);
    let (b4, b_tail) = b.split_at(b.len() / 4 * 4);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

// ---- public tensor ops -----------------------------------------------------

/// Standard matrix product a[m×k] · b[k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    mm_into(&mut out.data, &a.data, &b.data, m, k, n);
    Ok(out)
}

/// a[m×k] · b[n×k]ᵀ.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::Shape {
            op: "matmul_bt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = Tensor::zeros(vec![m, n]);
    mm_bt_into(&mut out.data, &a.data, &b.data, m, k, n);
    Ok(out)
}

/// Temperature softmax over the first `mask` entries of a logit row.
/// out[j] = exp(λ·z[j]) / Σ_{k<mask} exp(λ·z[k]) for j < mask, exactly 0 after.
/// Max subtraction before exponentiation is mandatory for stability.
pub fn softmax_temp(z: &Tensor, lambda: f64, mask: usize) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::Param {
            name: "lambda",
            why: format!("must be > 0, got {lambda}"),
        });
    }
    if mask == 0 {
        return Err(Error::Param {
            name: "mask",
            why: "empty mask".into(),
        });
    }
    if mask > z.len() {
        return Err(Error::Param {
            name: "mask",
            why: format!("mask {} exceeds row length {}", mask, z.len()),
        });
    }
    let mut out = vec![0.0; z.len()];
    softmax_temp_into(&mut out[..mask], &z.data[..mask], lambda);
    Tensor::new(z.shape.clone(), out)
}

/// Core row softmax: out and z are the unmasked prefix, same length.
pub(crate) fn softmax_temp_into(out: &mut [f64], z: &[f64], lambda: f64) {
    debug_assert_eq!(out.len(), z.len());
    debug_assert!(!z.is_empty());
    let mut mx = f64::NEG_INFINITY;
    for &v in z {
        mx = mx.max(lambda * v);
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        let e = (lambda * v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` [T×V]. Position t is scored against targets[t].
pub fn cross_entropy(logits: &Tensor, targets: &[u16]) -> Result<f64> {
    if logits.shape.len() != 2 || logits.shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let v = logits.shape[1];
    let mut total = 0.0;
    for (t, &tgt) in targets.iter().enumerate() {
        if tgt as usize >= v {
            return Err(Error::Index {
                what: "target id",
                got: tgt as usize,
                limit: v,
            });
        }
        total += nll_row(logits.row(t), tgt as usize);
    }
    Ok(total / targets.len() as f64)
}

/// Shannon entropy in nats of a probability row, with 0·ln 0 = 0.
/// Callers guarantee normalization; see probe::head_entropy for the checked
/// variant.
pub(crate) fn entropy_nats(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

/// −log softmax(row)[target], numerically stable.
pub fn nll_row(row: &[f64], target: usize) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - mx).exp();
    }
    (mx + sum.ln()) - row[target]
}
