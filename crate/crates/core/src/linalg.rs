//! Ridge-regularized least squares and truncated SVD.
//!
//! `linear_solve_ridge` implements W = B A^T (A A^T + lambda I)^-1, the
//! minimizer of 1/2 ||B - W A||_F^2 + lambda/2 ||W||_F^2, through a Cholesky
//! factorization of the Gram matrix. lambda = 0 is accepted only when the
//! Gram matrix is positive definite; a failed factorization is reported as a
//! singularity error rather than silently falling back to a pseudo-inverse.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("expected matrix, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_vec(&[r, c], data).expect("consistent dims")
}

/// Solve min_W 1/2||B - W A||_F^2 + lambda/2 ||W||_F^2 for A: [da, n],
/// B: [db, n], returning W: [db, da].
pub fn linear_solve_ridge(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    let am = to_dmatrix(a)?;
    let bm = to_dmatrix(b)?;
    if am.ncols() != bm.ncols() {
        return Err(Error::Shape(format!(
            "A has {} columns, B has {}",
            am.ncols(),
            bm.ncols()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let da = am.nrows();
    let mut gram = &am * am.transpose();
    for i in 0..da {
        gram[(i, i)] += lambda;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "A A^T + lambda I is not positive definite (da={da}, lambda={lambda})"
        ))
    })?;
    // W (A A^T + lambda I) = B A^T  =>  (A A^T + lambda I) W^T = A B^T.
    let rhs = &am * bm.transpose();
    let wt = chol.solve(&rhs);
    Ok(from_dmatrix(&wt.transpose()))
}

/// Relative Frobenius residual of the normal equations
/// ||W(A A^T + lambda I) - B A^T||_F / max(||B A^T||_F, eps).
pub fn normal_equation_residual(a: &Tensor, b: &Tensor, lambda: f64, w: &Tensor) -> Result<f64> {
    let am = to_dmatrix(a)?;
    let bm = to_dmatrix(b)?;
    let wm = to_dmatrix(w)?;
    let mut gram = &am * am.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = &bm * am.transpose();
    let lhs = &wm * gram;
    let num = (lhs - &rhs).norm();
    Ok(num / rhs.norm().max(1e-300))
}

/// Best rank-r factorization of `w` as (left: [rows, r], right: [r, cols])
/// via truncated SVD, with the singular values split evenly between the two
/// factors. Returns the factors and ||w - left*right||_F.
pub fn truncated_factorize(w: &Tensor, r: usize) -> Result<(Tensor, Tensor, f64)> {
    let wm = to_dmatrix(w)?;
    let (rows, cols) = wm.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(Error::Invalid(format!(
            "rank {r} outside [1, {}]",
            rows.min(cols)
        )));
    }
    let svd = wm.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    // Order singular values descending; nalgebra documents this but we pin it.
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("finite singular values")
    });

    let mut left = Tensor::zeros(&[rows, r]);
    let mut right = Tensor::zeros(&[r, cols]);
    for (out_k, &k) in idx.iter().take(r).enumerate() {
        let s = svd.singular_values[k].max(0.0);
        let sq = s.sqrt();
        for i in 0..rows {
            left.data_mut()[i * r + out_k] = u[(i, k)] * sq;
        }
        for j in 0..cols {
            right.data_mut()[out_k * cols + j] = sq * vt[(k, j)];
        }
    }
    // Residual: sum of squares of the dropped singular values.
    let err: f64 = idx
        .iter()
        .skip(r)
        .map(|&k| svd.singular_values[k] * svd.singular_values[k])
        .sum::<f64>()
        .sqrt();
    Ok((left, right, err))
}
