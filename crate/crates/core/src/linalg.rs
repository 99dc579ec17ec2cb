//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorization with a jitter ladder.
///
/// Tries the matrix as given first. On failure adds `j * I` with `j`
/// starting at `1e-10 * mean(diag)` and growing tenfold up to
/// `1e-4 * mean(diag)`. Returns the factor and the jitter that was needed.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
            return Ok((c, 0.0));
        }
    }
    let n = m.nrows();
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-10 * mean_diag;
    let max_jitter = 1e-4 * mean_diag;
    while jitter <= max_jitter * (1.0 + 1e-9) {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning { max_jitter })
}

/// `sum(log(diag(L)))`, i.e. half the log-determinant of `L L^T`.
pub fn half_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum()
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("Cholesky factors have a positive diagonal")
}

/// Inverse of a lower-triangular matrix with positive diagonal.
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::<f64>::identity(n, n);
    assert!(l.solve_lower_triangular_mut(&mut inv));
    inv
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
