//! Small dense symmetric-matrix helpers.
//!
//! Everything here works through the symmetric eigendecomposition with
//! eigenvalue clipping; Cholesky is never attempted on blocks that may be
//! near singular (early solver iterates routinely have singular `q`).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this (relative to the spectral scale) are treated as zero.
pub const CLIP_TOL: f64 = 1e-12;
/// Eigenvalues below `-NEG_TOL` signal an indefinite matrix.
pub const NEG_TOL: f64 = 1e-8;
/// Symmetry tolerance on inputs.
pub const SYM_TOL: f64 = 1e-10;

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn scale_of(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0)
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    let asym = max_asymmetry(a);
    if asym > SYM_TOL * scale_of(a) {
        return Err(Error::NonSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Eigendecomposition of the symmetric part of `a`.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(symmetrize(a));
    (e.eigenvalues, e.eigenvectors)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(a).0.min()
}

fn rebuild(vecs: &DMatrix<f64>, vals: impl Fn(f64) -> f64, eig: &DVector<f64>) -> DMatrix<f64> {
    let n = eig.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let s = vals(eig[j]);
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    let out = &scaled * vecs.transpose();
    symmetrize(&out)
}

/// Principal square root of a symmetric PSD matrix.
///
/// Eigenvalues in `[-1e-8, 0)` are clipped to zero, anything more negative is
/// an error (it means the order parameters are corrupted).
pub fn sym_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let (vals, vecs) = sym_eigen(a);
    let tol = NEG_TOL * scale_of(a);
    if let Some(&worst) = vals.iter().find(|&&v| v < -tol) {
        return Err(Error::NegativeEigenvalue { eigenvalue: worst });
    }
    Ok(rebuild(&vecs, |v| v.max(0.0).sqrt(), &vals))
}

/// Pseudo-inverse square root: zero (or clipped) eigenvalues map to zero.
pub fn sym_pinv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let (vals, vecs) = sym_eigen(a);
    let cut = CLIP_TOL * vals.amax().max(1.0);
    Ok(rebuild(
        &vecs,
        |v| if v > cut { 1.0 / v.sqrt() } else { 0.0 },
        &vals,
    ))
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
pub fn sym_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let cut = CLIP_TOL * vals.amax().max(1.0);
    rebuild(&vecs, |v| if v.abs() > cut { 1.0 / v } else { 0.0 }, &vals)
}

/// Orthogonal projector onto the range of a symmetric PSD matrix.
pub fn range_projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let cut = CLIP_TOL * vals.amax().max(1.0);
    rebuild(&vecs, |v| if v > cut { 1.0 } else { 0.0 }, &vals)
}

/// True when every eigenvalue exceeds the clipping cutoff.
pub fn is_invertible_psd(a: &DMatrix<f64>) -> bool {
    if a.nrows() == 0 {
        return true;
    }
    let (vals, _) = sym_eigen(a);
    vals.min() > CLIP_TOL * vals.amax().max(1.0)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn sym_inv(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(a);
    if vals.min() <= CLIP_TOL * vals.amax().max(1.0) {
        return None;
    }
    Some(rebuild(&vecs, |v| 1.0 / v, &vals))
}

/// General inverse with the smallest singular value, for error reporting.
pub fn inverse_with_sv(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, f64> {
    let svd = a.clone().svd(false, false);
    let smin = svd.singular_values.min();
    let smax = svd.singular_values.max().max(1e-300);
    if !(smin > 1e-13 * smax) {
        return Err(smin);
    }
    a.clone().try_inverse().ok_or(smin)
}

/// Clip the spectrum of a symmetric matrix at zero.
pub fn clip_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    rebuild(&vecs, |v| v.max(0.0), &vals)
}

/// Pairwise (tree) summation of equal-length vectors, fixed association order.
pub fn pairwise_sum(parts: &[Vec<f64>], width: usize) -> Vec<f64> {
    match parts.len() {
        0 => vec![0.0; width],
        1 => parts[0].clone(),
        n => {
            let (lo, hi) = parts.split_at(n / 2);
            let mut a = pairwise_sum(lo, width);
            let b = pairwise_sum(hi, width);
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        }
    }
}

pub fn frob(a: &DMatrix<f64>) -> f64 {
    a.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sqrt_of_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let b = sym_sqrt(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert!((b - expected).norm() < 1e-14);
    }

    #[test]
    fn sqrt_of_identity() {
        let a = DMatrix::<f64>::identity(3, 3);
        assert!((sym_sqrt(&a).unwrap() - &a).norm() < 1e-14);
    }

    #[test]
    fn sqrt_round_trip_random_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let a = m.transpose() * &m;
            let b = sym_sqrt(&a).unwrap();
            let rel = (&b * &b - &a).norm() / a.norm();
            assert!(rel < 1e-9, "relative error {rel}");
            assert!((&b * &a - &a * &b).norm() < 1e-9);
        }
    }

    #[test]
    fn sqrt_rejects_indefinite_and_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(matches!(sym_sqrt(&a), Err(Error::NegativeEigenvalue { .. })));
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sym_sqrt(&b), Err(Error::NonSymmetric { .. })));
    }

    #[test]
    fn sqrt_clips_tiny_negative() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-10]);
        let b = sym_sqrt(&a).unwrap();
        assert_eq!(b[(1, 1)], 0.0);
    }

    #[test]
    fn pinv_sqrt_zeroes_null_space() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let b = sym_pinv_sqrt(&a).unwrap();
        assert!((b[(0, 0)] - 0.5).abs() < 1e-14);
        assert_eq!(b[(1, 1)], 0.0);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let parts: Vec<Vec<f64>> = (0..37).map(|i| vec![i as f64, 1.0]).collect();
        let s = pairwise_sum(&parts, 2);
        assert_eq!(s, vec![666.0, 37.0]);
    }
}
