//! Background-subspace removal for embeddings.
//!
//! Given `m` linearly independent background vectors stacked as the columns
//! of a `D x m` matrix `B`, every embedding `v` splits uniquely into
//! `v = v_W + v_Wperp`, where `v_W` lies in `W = Col(B)` and `v_Wperp` is
//! orthogonal to it. The complement is obtained with
//!
//! ```text
//! v_Wperp = (I - B (B^T B)^{-1} B^T) v
//! ```
//!
//! Two routes to the projector are provided:
//!
//! * [`ProjectionMethod::Gram`] (default) forms `B^T B`, factors it with
//!   Cholesky and evaluates the formula above as written.
//! * [`ProjectionMethod::Orthonormal`] uses the modified Gram–Schmidt basis
//!   `Q` built by [`build_basis`] and returns `I - Q Q^T`.
//!
//! Both give the same matrix whenever `B^T B` is reasonably conditioned; the
//! second route serves as a cross-check for the first.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

pub const DEFAULT_DROP_TOLERANCE: f64 = 1e-10;
pub const CONDITION_LIMIT: f64 = 1e8;

/// Relative tolerance for reconstructing each background vector from `Q`.
const RECONSTRUCTION_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    #[default]
    Gram,
    Orthonormal,
}

/// Background vectors `B` with their orthonormalization `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundBasis {
    dim: usize,
    /// Background vectors, one per entry (the columns of `B`).
    vectors: Vec<Vec<f64>>,
    /// Orthonormal vectors spanning the same subspace (the columns of `Q`).
    orthonormal: Vec<Vec<f64>>,
    condition_estimate: f64,
}

impl BackgroundBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of background vectors `m`.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn orthonormal(&self) -> &[Vec<f64>] {
        &self.orthonormal
    }

    /// 2-norm condition number of `B^T B`.
    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    /// `B` as a `D x m` matrix.
    pub fn matrix(&self) -> Matrix {
        Matrix::from_rows(&self.vectors).transpose()
    }
}

/// Orthonormalizes `vectors` with modified Gram–Schmidt.
///
/// A vector whose residual after orthogonalization falls below
/// `drop_tolerance` times its own norm is rejected with [`Error::Rank`];
/// dependent columns are never dropped silently.
pub fn build_basis(vectors: &[Vec<f64>], drop_tolerance: f64) -> Result<BackgroundBasis> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Data("at least one background vector is required".into()))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::Data("background vectors must have positive dimension".into()));
    }
    if !(drop_tolerance >= 0.0 && drop_tolerance.is_finite()) {
        return Err(Error::Config(format!("drop_tolerance {drop_tolerance} is invalid")));
    }

    let mut orthonormal: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for (k, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("background vector {k} is not finite")));
        }
        let original = norm(v);
        if original == 0.0 {
            return Err(Error::Data(format!("background vector {k} is zero")));
        }
        if k >= dim {
            return Err(Error::Rank { index: k });
        }
        let mut w = v.clone();
        for q in &orthonormal {
            let c = dot(q, &w);
            w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
        }
        let residual = norm(&w);
        if residual < drop_tolerance * original {
            return Err(Error::Rank { index: k });
        }
        w.iter_mut().for_each(|x| *x /= residual);
        orthonormal.push(w);
    }

    for (k, v) in vectors.iter().enumerate() {
        let mut recon = vec![0.0; dim];
        for q in &orthonormal {
            let c = dot(q, v);
            recon.iter_mut().zip(q).for_each(|(r, qi)| *r += c * qi);
        }
        let err: f64 = recon.iter().zip(v).map(|(r, x)| (r - x).powi(2)).sum::<f64>().sqrt();
        if err > RECONSTRUCTION_TOLERANCE * norm(v) {
            return Err(Error::Rank { index: k });
        }
    }

    let condition_estimate = gram_condition(vectors);
    Ok(BackgroundBasis {
        dim,
        vectors: vectors.to_vec(),
        orthonormal,
        condition_estimate,
    })
}

/// Convenience wrapper taking the first `k` rows of an embedding set (all
/// rows when `k` is `None`).
pub fn basis_from_set(set: &EmbeddingSet, k: Option<usize>, drop_tolerance: f64) -> Result<BackgroundBasis> {
    let take = k.unwrap_or(set.len());
    if take == 0 || take > set.len() {
        return Err(Error::Config(format!(
            "requested {take} background vectors but the set has {}",
            set.len()
        )));
    }
    let vectors: Vec<Vec<f64>> = (0..take).map(|i| set.row(i).to_vec()).collect();
    build_basis(&vectors, drop_tolerance)
}

fn gram(vectors: &[Vec<f64>]) -> Matrix {
    let m = vectors.len();
    let mut g = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let x = dot(&vectors[i], &vectors[j]);
            g[(i, j)] = x;
            g[(j, i)] = x;
        }
    }
    g
}

fn gram_condition(vectors: &[Vec<f64>]) -> f64 {
    let g = gram(vectors);
    let m = g.rows();
    let eig = DMatrix::from_row_slice(m, m, g.as_slice()).symmetric_eigenvalues();
    let max = eig.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Solves `L L^T x = b` in place.
fn cholesky_solve(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// The orthogonal-complement projector `P` onto `W^perp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    matrix: Matrix,
}

impl Projector {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// `P v`, the component of `v` orthogonal to the background subspace.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self.matrix.mul_vec(v))
    }

    /// `(v_W, v_Wperp)` with `v = v_W + v_Wperp`.
    pub fn decompose(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let perp = self.apply(v)?;
        let inside = v.iter().zip(&perp).map(|(a, b)| a - b).collect();
        Ok((inside, perp))
    }

    /// Projects every row; labels, attributes and groups are untouched.
    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: set.dim(),
            });
        }
        // Rows as a right-hand matrix: X P^T.
        let projected = set.rows().matmul(&self.matrix.transpose());
        set.with_rows(projected)
    }
}

/// Builds `P = I - B (B^T B)^{-1} B^T` via a Cholesky solve on the Gram matrix.
pub fn projector_matrix(basis: &BackgroundBasis) -> Result<Projector> {
    projector_with(basis, ProjectionMethod::Gram)
}

pub fn projector_with(basis: &BackgroundBasis, method: ProjectionMethod) -> Result<Projector> {
    match method {
        ProjectionMethod::Gram => gram_projector(basis),
        ProjectionMethod::Orthonormal => Ok(orthonormal_projector(basis)),
    }
}

fn gram_projector(basis: &BackgroundBasis) -> Result<Projector> {
    let estimate = basis.condition_estimate;
    if !(estimate <= CONDITION_LIMIT) {
        return Err(Error::Conditioning {
            estimate,
            limit: CONDITION_LIMIT,
        });
    }
    let g = gram(&basis.vectors);
    let l = cholesky(&g).ok_or(Error::Conditioning {
        estimate: f64::INFINITY,
        limit: CONDITION_LIMIT,
    })?;

    let d = basis.dim;
    let m = basis.len();
    // Column i of X = (B^T B)^{-1} B^T is the solve against row i of B.
    let mut x = Matrix::zeros(m, d);
    let mut rhs = vec![0.0; m];
    for i in 0..d {
        for (k, v) in basis.vectors.iter().enumerate() {
            rhs[k] = v[i];
        }
        cholesky_solve(&l, &mut rhs);
        for k in 0..m {
            x[(k, i)] = rhs[k];
        }
    }
    let bx = basis.matrix().matmul(&x);
    Ok(Projector {
        matrix: Matrix::identity(d).sub(&bx),
    })
}

fn orthonormal_projector(basis: &BackgroundBasis) -> Projector {
    let d = basis.dim;
    let mut p = Matrix::identity(d);
    for q in &basis.orthonormal {
        for i in 0..d {
            for j in 0..d {
                p[(i, j)] -= q[i] * q[j];
            }
        }
    }
    Projector { matrix: p }
}

/// `v_Wperp` for a single vector, using the Gram route.
pub fn project_out(v: &[f64], basis: &BackgroundBasis) -> Result<Vec<f64>> {
    projector_matrix(basis)?.apply(v)
}

/// Projects every row of `set`, using the Gram route.
pub fn project_set(set: &EmbeddingSet, basis: &BackgroundBasis) -> Result<EmbeddingSet> {
    projector_matrix(basis)?.apply_set(set)
}
