//! Dense linear-algebra helpers shared across the crate.
//!
//! Everything is built on dynamically sized `nalgebra` matrices; system
//! dimensions stay tiny (n of a handful, a few regimes), so no sparse or
//! fixed-size paths are needed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Multiplier applied on top of `sigma_max * max(dims) * eps` when deciding
/// whether a singular value counts as zero.
pub const RANK_TOL_FACTOR: f64 = 64.0;

/// Sorted (descending) singular values of `m`.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let svd = m.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

fn rank_threshold(sv: &[f64], nrows: usize, ncols: usize) -> f64 {
    let smax = sv.first().copied().unwrap_or(0.0);
    smax * (nrows.max(ncols) as f64) * f64::EPSILON * RANK_TOL_FACTOR
}

/// Numerical rank via singular values with threshold
/// `sigma_max * max(dims) * eps * 64`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = singular_values(m);
    let tol = rank_threshold(&sv, m.nrows(), m.ncols());
    sv.iter().filter(|&&s| s > tol).count()
}

/// Reciprocal condition number `sigma_min / sigma_max` (0 for empty/singular).
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&smax), Some(&smin)) if smax > 0.0 => smin / smax,
        _ => 0.0,
    }
}

/// Orthonormal basis of the null space of `m` (columns), via SVD.
///
/// Returns an `ncols x d` matrix where `d = ncols - rank(m)`; `d = ncols`
/// (identity-free basis) when `m` has no rows.
pub fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let ncols = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(ncols, ncols);
    }
    // nalgebra's SVD is economy-size; pad with zero rows so V comes back
    // square and the null rows are present.
    let work = if m.nrows() < ncols {
        let mut padded = DMatrix::zeros(ncols, ncols);
        padded.view_mut((0, 0), (m.nrows(), ncols)).copy_from(m);
        padded
    } else {
        m.clone()
    };
    let svd = work.clone().svd(false, true);
    let v_t = svd.v_t.expect("SVD with V requested");
    let mut pairs: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let sv: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let tol = rank_threshold(&sv, m.nrows(), m.ncols());
    let r = sv.iter().filter(|&&s| s > tol).count();

    let mut keep: Vec<usize> = pairs.iter().skip(r).map(|p| p.1).collect();
    keep.sort_unstable();
    let mut basis = DMatrix::zeros(ncols, keep.len());
    for (c, &row) in keep.iter().enumerate() {
        for j in 0..ncols {
            basis[(j, c)] = v_t[(row, j)];
        }
    }
    basis
}

/// Null-space basis of `m` in the free-variable convention: run a
/// Gauss-Jordan elimination with partial pivoting, then emit one basis
/// column per non-pivot column, ordered by increasing column index, with a
/// unit entry at the free coordinate.
///
/// For restriction matrices with small integer coefficients this reproduces
/// the usual "pattern" bases exactly (entries 0 and +-1), which keeps the
/// downstream rank-check matrices sparse and human-readable.
pub fn rref_null_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (nr, nc) = (m.nrows(), m.ncols());
    if nr == 0 {
        return DMatrix::identity(nc, nc);
    }
    let mut a = m.clone();
    let scale = max_abs(&a).max(1.0);
    let tol = scale * 1e-12;
    let mut pivot_of_col: Vec<Option<usize>> = vec![None; nc];
    let mut row = 0usize;
    for col in 0..nc {
        if row >= nr {
            break;
        }
        // partial pivot
        let (mut best_r, mut best_v) = (row, a[(row, col)].abs());
        for r in row + 1..nr {
            let v = a[(r, col)].abs();
            if v > best_v {
                best_r = r;
                best_v = v;
            }
        }
        if best_v <= tol {
            continue;
        }
        a.swap_rows(row, best_r);
        let piv = a[(row, col)];
        for c in col..nc {
            a[(row, c)] /= piv;
        }
        for r in 0..nr {
            if r != row {
                let factor = a[(r, col)];
                if factor != 0.0 {
                    for c in col..nc {
                        a[(r, c)] -= factor * a[(row, c)];
                    }
                }
            }
        }
        pivot_of_col[col] = Some(row);
        row += 1;
    }
    let free_cols: Vec<usize> = (0..nc).filter(|&c| pivot_of_col[c].is_none()).collect();
    let mut basis = DMatrix::zeros(nc, free_cols.len());
    for (k, &fc) in free_cols.iter().enumerate() {
        basis[(fc, k)] = 1.0;
        for pc in 0..nc {
            if let Some(pr) = pivot_of_col[pc] {
                basis[(pc, k)] = -a[(pr, fc)];
            }
        }
    }
    basis
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()))
}

/// Largest absolute entry of the difference `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_abs_diff");
    let mut d = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        d = d.max((x - y).abs());
    }
    d
}

/// `|| Q'Q - I ||_max`.
pub fn orthogonality_defect(q: &DMatrix<f64>) -> f64 {
    let n = q.ncols();
    let g = q.transpose() * q;
    max_abs_diff(&g, &DMatrix::identity(n, n))
}

/// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix with
/// the signs of the R diagonal fixed to be positive.
pub fn haar_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| -> f64 { StandardNormal.sample(rng) });
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Spectral radius of the VAR companion matrix built from `lag_coeffs`.
pub fn companion_spectral_radius(lag_coeffs: &[DMatrix<f64>]) -> f64 {
    let l = lag_coeffs.len();
    if l == 0 {
        return 0.0;
    }
    let n = lag_coeffs[0].nrows();
    let dim = n * l;
    let mut comp = DMatrix::zeros(dim, dim);
    for (i, b) in lag_coeffs.iter().enumerate() {
        comp.view_mut((0, i * n), (n, n)).copy_from(b);
    }
    for i in 0..(l - 1) * n {
        comp[(n + i, i)] = 1.0;
    }
    comp.complex_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, z| acc.max(z.norm()))
}

/// Least-squares solution of `A x = b` via SVD; also returns the residual
/// infinity norm.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let svd = a.clone().svd(true, true);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let tol = smax * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON * RANK_TOL_FACTOR;
    let x = svd
        .solve(b, tol)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()));
    let resid = (a * &x - b).amax();
    (x, resid)
}

/// Inverse of a square matrix, `None` when the reciprocal condition number
/// falls below `rcond_floor`.
pub fn checked_inverse(m: &DMatrix<f64>, rcond_floor: f64) -> Option<DMatrix<f64>> {
    if rcond(m) < rcond_floor {
        return None;
    }
    m.clone().try_inverse()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>, regime: usize) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    let chol = sym
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { regime })?;
    Ok(chol.l())
}

/// (m + m') / 2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalue-based positive-definiteness gate: smallest eigenvalue must
/// exceed `1e-12` times the largest.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let sym = symmetrize(m);
    if sym.clone().cholesky().is_none() {
        return false;
    }
    let eig = sym.symmetric_eigen();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    max > 0.0 && min > 1e-12 * max
}

/// Draw a standard normal vector of length `n`.
pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) })
}
