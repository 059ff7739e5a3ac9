//! Point-to-subspace distance between an image embedding and a truncated
//! bag of proposal embeddings.
//!
//! A bag's subspace is spanned by the rows of its `b × r` basis `B`. With
//! the ridged Gram matrix `G = B Bᵀ + εI`, the projection of `u` is
//! `Bᵀ G⁻¹ B u` and the distance is the squared residual norm.

use crate::error::{Error, Result};
use crate::numerics::{self, Cholesky, Matrix};

/// The top-`b` proposals of a bag by attention weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedBag {
    /// `b × r`, rows in ascending index order.
    pub basis: Matrix,
    /// Positions of the kept proposals in the original bag, ascending.
    pub indices: Vec<usize>,
}

/// Indices of the `b` largest weights. Ties go to the lower index; the
/// result is sorted ascending.
pub fn top_b_indices(weights: &[f64], b: usize) -> Result<Vec<usize>> {
    let k = weights.len();
    if b == 0 || b > k {
        return Err(Error::BadTruncation { b, k });
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]).then(i.cmp(&j)));
    let mut kept = order[..b].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

pub fn truncate_bag(projected: &Matrix, weights: &[f64], b: usize) -> Result<TruncatedBag> {
    if weights.len() != projected.rows() {
        return Err(Error::dims("truncate_bag", projected.rows(), weights.len()));
    }
    let indices = top_b_indices(weights, b)?;
    Ok(TruncatedBag {
        basis: projected.select_rows(&indices),
        indices,
    })
}

/// Gradient of the distance with respect to the point and the basis.
#[derive(Clone, Debug)]
pub struct DistanceGradient {
    pub distance: f64,
    pub wrt_point: Vec<f64>,
    /// Same shape as the basis, `b × r`.
    pub wrt_basis: Matrix,
}

/// A basis with its ridged Gram matrix already factored, for repeated
/// distance queries against the same bag.
#[derive(Clone, Debug)]
pub struct Subspace {
    basis: Matrix,
    gram: Cholesky,
}

impl Subspace {
    pub fn new(basis: Matrix, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) {
            return Err(Error::InvalidConfig(format!("ridge must be non-negative, got {ridge}")));
        }
        let gram = Cholesky::factor(&numerics::ridged_gram(&basis, ridge))?;
        Ok(Subspace { basis, gram })
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::dims("point_to_subspace_distance", self.dim(), u.len()));
        }
        Ok(())
    }

    /// Returns the coefficients `c = G⁻¹ B u` and residual `u − Bᵀ c`.
    fn residual(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let coeffs = self.gram.solve(&self.basis.mat_vec(u));
        let mut residual = u.to_vec();
        numerics::axpy(-1.0, &self.basis.t_mat_vec(&coeffs), &mut residual);
        (coeffs, residual)
    }

    pub fn distance(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        let (_, e) = self.residual(u);
        Ok(numerics::dot(&e, &e))
    }

    /// Distance of every row of `points`, in residual form.
    pub fn distances(&self, points: &Matrix) -> Result<Vec<f64>> {
        if points.cols() != self.dim() {
            return Err(Error::dims("point_to_subspace_distance", self.dim(), points.cols()));
        }
        let b = self.basis.rows();
        let mut projected = Matrix::zeros(points.rows(), b);
        numerics::gemm(1.0, points, false, &self.basis, true, 0.0, &mut projected);
        for i in 0..points.rows() {
            let c = self.gram.solve(projected.row(i));
            projected.row_mut(i).copy_from_slice(&c);
        }
        let mut residual = points.clone();
        numerics::gemm(-1.0, &projected, false, &self.basis, false, 1.0, &mut residual);
        Ok((0..residual.rows()).map(|i| numerics::dot(residual.row(i), residual.row(i))).collect())
    }

    pub fn distance_gradient(&self, u: &[f64]) -> Result<DistanceGradient> {
        self.check(u)?;
        let (c, e) = self.residual(u);
        // With w = G⁻¹ B e (zero when the ridge is zero):
        //   ∂d/∂u = 2e − 2Bᵀw
        //   ∂d/∂B = −2 c eᵀ − 2 w eᵀ + 2 c (Bᵀw)ᵀ
        let w = self.gram.solve(&self.basis.mat_vec(&e));
        let bw = self.basis.t_mat_vec(&w);
        let wrt_point: Vec<f64> = e.iter().zip(&bw).map(|(ei, bi)| 2.0 * (ei - bi)).collect();
        let mut wrt_basis = Matrix::zeros(self.basis.rows(), self.basis.cols());
        let cw: Vec<f64> = c.iter().zip(&w).map(|(ci, wi)| ci + wi).collect();
        wrt_basis.add_outer(-2.0, &cw, &e);
        wrt_basis.add_outer(2.0, &c, &bw);
        Ok(DistanceGradient {
            distance: numerics::dot(&e, &e),
            wrt_point,
            wrt_basis,
        })
    }
}

/// `‖u − Ṽu‖²` for the truncated bag's (ridged) projector `Ṽ`.
pub fn point_to_subspace_distance(u: &[f64], bag: &TruncatedBag, ridge: f64) -> Result<f64> {
    Subspace::new(bag.basis.clone(), ridge)?.distance(u)
}

pub fn distance_gradient(u: &[f64], bag: &TruncatedBag, ridge: f64) -> Result<DistanceGradient> {
    Subspace::new(bag.basis.clone(), ridge)?.distance_gradient(u)
}

/// `⟨vec(Ṽ), vec(u uᵀ)⟩ = uᵀ Ṽ u`; for an exact projector this is
/// `uᵀu − d(u, ·)`.
pub fn d_tilde(u: &[f64], projector: &Matrix) -> Result<f64> {
    let r = u.len();
    if projector.shape() != (r, r) {
        return Err(Error::dims(
            "d_tilde",
            format!("{r}x{r}"),
            format!("{}x{}", projector.rows(), projector.cols()),
        ));
    }
    Ok(numerics::dot(u, &projector.mat_vec(u)))
}
