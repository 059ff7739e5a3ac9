//! Dense linear algebra and the numerically careful kernels shared by the
//! rest of the crate.
//!
//! Everything here is `f64` and row-major. Products go through
//! [`matrixmultiply::dgemm`], which is deterministic for a fixed input on a
//! fixed machine.

use std::fmt;

use crate::error::{Error, Result};

/// A dense row-major matrix with at least one row and one column.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims("Matrix::new", "rows, cols >= 1", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::new", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dims("Matrix::from_rows", cols, bad.len()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Callers are responsible for keeping entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        out
    }

    /// `self · x`
    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "mat_vec dimension mismatch");
        self.data.chunks(self.cols).map(|row| dot(row, x)).collect()
    }

    /// `selfᵀ · x`
    pub fn t_mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "t_mat_vec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (row, &xi) in self.data.chunks(self.cols).zip(x) {
            axpy(xi, row, &mut out);
        }
        out
    }

    /// Rows `indices` of `self`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        assert!(!indices.is_empty(), "select_rows needs at least one index");
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    /// `self += alpha · x yᵀ`
    pub fn add_outer(&mut self, alpha: f64, x: &[f64], y: &[f64]) {
        assert_eq!((x.len(), y.len()), self.shape());
        for (row, &xi) in self.data.chunks_mut(self.cols).zip(x) {
            axpy(alpha * xi, y, row);
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((m, n), c.shape(), "gemm output shape mismatch");
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers of `a`,
    // `b` and `c`, whose lengths match the asserted shapes. `c` does not alias
    // `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `e^x − 1` for `|x| ≤ 45`, within a few ulps. Branch-free so that loops
/// over slices vectorise.
#[inline(always)]
fn expm1_bounded(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // Adding 1.5·2⁵² rounds to an integer and leaves it in the low mantissa
    // bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let shifted = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = shifted - SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor series of e^r − 1 for |r| ≤ ln2 / 2, truncated after r¹³.
    let mut p = 1.0 / 6_227_020_800.0;
    for d in [
        479_001_600.0,
        39_916_800.0,
        3_628_800.0,
        362_880.0,
        40_320.0,
        5_040.0,
        720.0,
        120.0,
        24.0,
        6.0,
        2.0,
        1.0,
    ] {
        p = p * r + 1.0 / d;
    }
    p *= r;
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    scale * p + (scale - 1.0)
}

/// Hyperbolic tangent, agreeing with `f64::tanh` to within a few ulps and
/// propagating NaN.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    // tanh(22) rounds to 1. The comparison is false for NaN.
    let a = if a > 22.0 { 22.0 } else { a };
    let em = expm1_bounded(2.0 * a);
    (em / (em + 2.0)).copysign(x)
}

/// [`tanh`] applied element-wise.
pub fn tanh_in_place(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

/// Softmax with max subtraction, so large logits do not overflow.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::dims("stable_softmax", "non-empty", 0));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stable_softmax"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Vector-Jacobian product of softmax: given `p = softmax(s)` and `∂L/∂p`,
/// returns `∂L/∂s`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_probs);
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - inner)).collect()
}

/// `log softmax(s)` computed through log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// `ln σ(z)` without overflow for large `|z|`.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pairwise cosine similarity of the rows of `features`, with negative
/// similarities clamped to zero so the graph degree stays positive.
pub fn cosine_similarity_graph(features: &Matrix) -> Result<Matrix> {
    let k = features.rows();
    let norms: Vec<f64> = (0..k).map(|i| dot(features.row(i), features.row(i)).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNormRow { row });
    }
    let gram = features.matmul_t(features);
    let mut sim = Matrix::identity(k);
    for i in 0..k {
        for j in 0..i {
            let c = (gram.get(i, j) / (norms[i] * norms[j])).clamp(0.0, 1.0);
            sim.set(i, j, c);
            sim.set(j, i, c);
        }
    }
    Ok(sim)
}

/// Symmetrically normalised adjacency with self loops:
/// `D^{-1/2} (S + I) D^{-1/2}` with `D_ii = Σ_j (S + I)_ij`.
pub fn normalize_adjacency(similarity: &Matrix) -> Result<Matrix> {
    let (k, cols) = similarity.shape();
    if k != cols {
        return Err(Error::dims("normalize_adjacency", "square matrix", format!("{k}x{cols}")));
    }
    let mut with_loops = similarity.clone();
    for i in 0..k {
        with_loops.set(i, i, similarity.get(i, i) + 1.0);
    }
    let degree: Vec<f64> = (0..k).map(|i| with_loops.row(i).iter().sum()).collect();
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v = with_loops.get(i, j) / (degree[i] * degree[j]).sqrt();
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Cholesky factor `L` of a symmetric positive-definite matrix, `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::dims("Cholesky::factor", "square matrix", format!("{n}x{}", a.cols())));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a.get(j, j);
            for p in 0..j {
                diag -= l.get(j, p) * l.get(j, p);
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::SingularGram { pivot: j, value: diag });
            }
            let d = diag.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut v = a.get(i, j);
                for p in 0..j {
                    v -= l.get(i, p) * l.get(j, p);
                }
                l.set(i, j, v / d);
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut v = y[i];
            for p in 0..i {
                v -= l.get(i, p) * y[p];
            }
            y[i] = v / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for p in i + 1..n {
                v -= l.get(p, i) * y[p];
            }
            y[i] = v / l.get(i, i);
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for (i, v) in col.into_iter().enumerate() {
                inv.set(i, j, v);
            }
        }
        inv
    }
}

/// `B B ᵀ + ridge · I` for a basis stored one vector per row.
pub fn ridged_gram(basis: &Matrix, ridge: f64) -> Matrix {
    let mut gram = basis.matmul_t(basis);
    for i in 0..gram.rows() {
        let v = gram.get(i, i) + ridge;
        gram.set(i, i, v);
    }
    gram
}

/// Projector onto the span of the rows of `basis` (b vectors of length r):
/// `Bᵀ (B Bᵀ + ridge · I)⁻¹ B`, an r×r matrix.
pub fn subspace_projector(basis: &Matrix, ridge: f64) -> Result<Matrix> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be non-negative, got {ridge}")));
    }
    let chol = Cholesky::factor(&ridged_gram(basis, ridge))?;
    let coeffs = chol.inverse().matmul(basis);
    let mut proj = basis.t_matmul(&coeffs);
    // Exact symmetry; the two triangles differ only by rounding.
    let r = proj.rows();
    for i in 0..r {
        for j in 0..i {
            let v = 0.5 * (proj.get(i, j) + proj.get(j, i));
            proj.set(i, j, v);
            proj.set(j, i, v);
        }
    }
    Ok(proj)
}

/// Central-difference gradient of `f` at `x0`.
pub fn central_difference<F>(mut f: F, x0: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let mut grad = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let plus = f(&x);
        x[i] = x0[i] - h;
        let minus = f(&x);
        x[i] = x0[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss(format!("probe around coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative gradient error used throughout the test suite:
/// `|numeric − analytic| / max(1, |analytic|)`.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

/// Largest relative error between `analytic_grad` and a central-difference
/// estimate of the gradient of `f` at `x0`.
pub fn finite_difference_check<F>(f: F, x0: &[f64], analytic_grad: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if x0.len() != analytic_grad.len() {
        return Err(Error::dims("finite_difference_check", x0.len(), analytic_grad.len()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let numeric = central_difference(f, x0, h)?;
    Ok(numeric
        .iter()
        .zip(analytic_grad)
        .map(|(&n, &a)| relative_error(n, a))
        .fold(0.0, f64::max))
}
