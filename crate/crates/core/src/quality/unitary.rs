//! Distance preservation under orthonormal transforms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest tolerated entry of `U^T U - I`.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Max over pairs of `| |U x1 - U x2| - |x1 - x2| | / |x1 - x2|`.
/// Pairs with coincident vectors are skipped.
pub fn unitary_preservation_check(u: &DMatrix<f64>, pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<f64> {
    if !u.is_square() {
        return Err(Error::Precondition(format!("{}x{} matrix is not square", u.nrows(), u.ncols())));
    }
    let n = u.nrows();
    let deviation = (u.transpose() * u - DMatrix::<f64>::identity(n, n)).amax();
    if deviation > ORTHONORMAL_TOL {
        return Err(Error::Precondition(format!("matrix is not orthonormal: max |U^T U - I| = {deviation:e}")));
    }
    let mut worst = 0.0f64;
    for (a, b) in pairs {
        if a.len() != n || b.len() != n {
            return Err(Error::Dimension(format!("vectors of length {} for a {n}x{n} transform", a.len())));
        }
        let d = (a - b).norm();
        if d == 0.0 {
            continue;
        }
        let du = (u * a - u * b).norm();
        worst = worst.max((du - d).abs() / d);
    }
    Ok(worst)
}

/// Orthonormal `Q` from the QR factorization of `m`, with column signs fixed
/// so the factorization is unique.
pub fn orthonormal_from(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
