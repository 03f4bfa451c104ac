//! Model objects for a structural VAR with exogenously dated breaks and the
//! deterministic matrix transformations every other module consumes:
//! reduced-form mapping, VMA coefficients, impulse responses, long-run
//! cumulative responses and forecast-error-variance kernels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for the orthogonality defect `||Q'Q - I||_max` of rotation
/// blocks.
pub const ORTHO_TOL: f64 = 1e-10;

/// Reciprocal-condition floor below which a contemporaneous matrix is
/// treated as singular.
pub const A0_RCOND_FLOOR: f64 = 1e-12;

/// Problem dimensions: `n` variables, `l` lags, `s` regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n: usize,
    pub l: usize,
    pub s: usize,
}

impl ModelDims {
    pub fn new(n: usize, l: usize, s: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Dims(format!("need at least 2 variables, got {n}")));
        }
        if l < 1 {
            return Err(Error::Dims(format!("need at least 1 lag, got {l}")));
        }
        if s < 1 {
            return Err(Error::Dims(format!("need at least 1 regime, got {s}")));
        }
        Ok(Self { n, l, s })
    }

    /// Columns of the stacked coefficient matrix: `m = n*l + 1`.
    pub fn m(&self) -> usize {
        self.n * self.l + 1
    }

    /// Free skew-symmetric parameters per regime: `n(n-1)/2`.
    pub fn n_tilde(&self) -> usize {
        self.n * (self.n - 1) / 2
    }
}

/// Reduced-form parameters of one regime: intercept, lag coefficients and
/// the innovation covariance, with the lower Cholesky factor cached.
#[derive(Clone, Debug)]
pub struct ReducedFormRegime {
    intercept: DVector<f64>,
    lag_coeffs: Vec<DMatrix<f64>>,
    sigma: DMatrix<f64>,
    sigma_tr: DMatrix<f64>,
    stationary: bool,
}

impl ReducedFormRegime {
    /// Build and validate a regime. The covariance must be symmetric
    /// positive definite (Cholesky succeeds and the smallest eigenvalue
    /// exceeds `1e-12` times the largest). Stationarity is recorded as a
    /// flag, not enforced.
    pub fn new(
        intercept: DVector<f64>,
        lag_coeffs: Vec<DMatrix<f64>>,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new_in_regime(intercept, lag_coeffs, sigma, 0)
    }

    pub(crate) fn new_in_regime(
        intercept: DVector<f64>,
        lag_coeffs: Vec<DMatrix<f64>>,
        sigma: DMatrix<f64>,
        regime: usize,
    ) -> Result<Self> {
        let n = intercept.len();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::Dims(format!(
                "covariance is {}x{}, expected {n}x{n}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        for (i, b) in lag_coeffs.iter().enumerate() {
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::Dims(format!(
                    "lag matrix {} is {}x{}, expected {n}x{n}",
                    i + 1,
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        let sigma = linalg::symmetrize(&sigma);
        if !linalg::is_positive_definite(&sigma) {
            return Err(Error::NotPositiveDefinite { regime });
        }
        let sigma_tr = linalg::cholesky_lower(&sigma, regime)?;
        let stationary = linalg::companion_spectral_radius(&lag_coeffs) < 1.0;
        Ok(Self {
            intercept,
            lag_coeffs,
            sigma,
            sigma_tr,
            stationary,
        })
    }

    /// Assemble a regime from the stacked coefficient matrix
    /// `B+ = (b, B_1, ..., B_l)` of shape `n x (n*l + 1)`.
    pub fn from_b_plus(b_plus: &DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = b_plus.nrows();
        if n == 0 || b_plus.ncols() < 1 || (b_plus.ncols() - 1) % n != 0 {
            return Err(Error::Dims(format!(
                "stacked coefficients are {}x{}, not n x (n*l+1)",
                b_plus.nrows(),
                b_plus.ncols()
            )));
        }
        let l = (b_plus.ncols() - 1) / n;
        let intercept = b_plus.column(0).into_owned();
        let lag_coeffs = (0..l)
            .map(|i| b_plus.view((0, 1 + i * n), (n, n)).into_owned())
            .collect();
        Self::new(intercept, lag_coeffs, sigma)
    }

    pub fn n(&self) -> usize {
        self.intercept.len()
    }

    pub fn l(&self) -> usize {
        self.lag_coeffs.len()
    }

    pub fn intercept(&self) -> &DVector<f64> {
        &self.intercept
    }

    pub fn lag_coeffs(&self) -> &[DMatrix<f64>] {
        &self.lag_coeffs
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower Cholesky factor of the covariance.
    pub fn sigma_tr(&self) -> &DMatrix<f64> {
        &self.sigma_tr
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// Stacked `(b, B_1, ..., B_l)`.
    pub fn b_plus(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n * self.l() + 1);
        out.set_column(0, &self.intercept);
        for (i, b) in self.lag_coeffs.iter().enumerate() {
            out.view_mut((0, 1 + i * n), (n, n)).copy_from(b);
        }
        out
    }

    /// `I - sum_i B_i`, the long-run lag polynomial evaluated at one.
    pub fn long_run_polynomial(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut acc = DMatrix::identity(n, n);
        for b in &self.lag_coeffs {
            acc -= b;
        }
        acc
    }
}

/// Structural parameters of one regime.
#[derive(Clone, Debug)]
pub struct StructuralRegime {
    a0: DMatrix<f64>,
    a_plus: DMatrix<f64>,
}

impl StructuralRegime {
    pub fn new(a0: DMatrix<f64>, a_plus: DMatrix<f64>) -> Result<Self> {
        Self::new_in_regime(a0, a_plus, 0)
    }

    pub(crate) fn new_in_regime(
        a0: DMatrix<f64>,
        a_plus: DMatrix<f64>,
        regime: usize,
    ) -> Result<Self> {
        let n = a0.nrows();
        if a0.ncols() != n {
            return Err(Error::Dims("contemporaneous matrix must be square".into()));
        }
        if a_plus.nrows() != n {
            return Err(Error::Dims(
                "structural coefficient rows must match the variable count".into(),
            ));
        }
        let rc = linalg::rcond(&a0);
        if rc < A0_RCOND_FLOOR {
            return Err(Error::SingularA0 { regime, rcond: rc });
        }
        Ok(Self { a0, a_plus })
    }

    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }

    pub fn a_plus(&self) -> &DMatrix<f64> {
        &self.a_plus
    }

    /// Map to the reduced form of the same regime:
    /// `B+ = A0^{-1} A+`, `Sigma = A0^{-1} A0^{-T}`.
    pub fn to_reduced(&self) -> Result<ReducedFormRegime> {
        let inv = linalg::checked_inverse(&self.a0, A0_RCOND_FLOOR).ok_or(Error::SingularA0 {
            regime: 0,
            rcond: linalg::rcond(&self.a0),
        })?;
        let b_plus = &inv * &self.a_plus;
        let sigma = &inv * inv.transpose();
        ReducedFormRegime::from_b_plus(&b_plus, sigma)
    }
}

/// Map a full set of per-regime structural parameters to reduced-form
/// regimes.
pub fn structural_to_reduced(structural: &[StructuralRegime]) -> Result<Vec<ReducedFormRegime>> {
    structural
        .iter()
        .enumerate()
        .map(|(p, st)| {
            let inv = linalg::checked_inverse(&st.a0, A0_RCOND_FLOOR).ok_or(Error::SingularA0 {
                regime: p,
                rcond: linalg::rcond(&st.a0),
            })?;
            let b_plus = &inv * &st.a_plus;
            let sigma = &inv * inv.transpose();
            ReducedFormRegime::from_b_plus(&b_plus, sigma)
        })
        .collect()
}

/// The full model: dimensions, one reduced-form parameter block per regime
/// and the exogenous break dates (first sample row of each regime after the
/// first).
#[derive(Clone, Debug)]
pub struct RegimeModel {
    pub dims: ModelDims,
    regimes: Vec<ReducedFormRegime>,
    break_dates: Vec<usize>,
}

impl RegimeModel {
    pub fn new(regimes: Vec<ReducedFormRegime>, break_dates: Vec<usize>) -> Result<Self> {
        if regimes.is_empty() {
            return Err(Error::Dims("need at least one regime".into()));
        }
        let n = regimes[0].n();
        let l = regimes[0].l();
        for (p, r) in regimes.iter().enumerate() {
            if r.n() != n || r.l() != l {
                return Err(Error::Dims(format!(
                    "regime {} has dimensions ({}, {}), expected ({n}, {l})",
                    p + 1,
                    r.n(),
                    r.l()
                )));
            }
        }
        let dims = ModelDims::new(n, l, regimes.len())?;
        if break_dates.len() != regimes.len() - 1 {
            return Err(Error::Dims(format!(
                "{} regimes need {} break dates, got {}",
                regimes.len(),
                regimes.len() - 1,
                break_dates.len()
            )));
        }
        if break_dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Dims("break dates must be strictly increasing".into()));
        }
        Ok(Self {
            dims,
            regimes,
            break_dates,
        })
    }

    /// A model without an attached sample; break dates are synthetic
    /// placeholders spaced one apart.
    pub fn synthetic(regimes: Vec<ReducedFormRegime>) -> Result<Self> {
        let breaks = (1..regimes.len()).collect();
        Self::new(regimes, breaks)
    }

    pub fn regimes(&self) -> &[ReducedFormRegime] {
        &self.regimes
    }

    pub fn regime(&self, p: usize) -> &ReducedFormRegime {
        &self.regimes[p]
    }

    pub fn break_dates(&self) -> &[usize] {
        &self.break_dates
    }
}

/// One `n x n` orthogonal rotation per regime.
#[derive(Clone, Debug)]
pub struct OrthogonalBlock {
    blocks: Vec<DMatrix<f64>>,
}

impl OrthogonalBlock {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Dims("need at least one rotation block".into()));
        }
        for (p, q) in blocks.iter().enumerate() {
            if q.nrows() != q.ncols() {
                return Err(Error::Dims("rotation blocks must be square".into()));
            }
            let defect = linalg::orthogonality_defect(q);
            if defect > ORTHO_TOL {
                return Err(Error::Invalid(format!(
                    "block {} fails orthogonality: defect {defect:.3e}",
                    p + 1
                )));
            }
        }
        Ok(Self { blocks })
    }

    pub fn identity(n: usize, s: usize) -> Self {
        Self {
            blocks: vec![DMatrix::identity(n, n); s],
        }
    }

    pub fn s(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn block(&self, p: usize) -> &DMatrix<f64> {
        &self.blocks[p]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Largest orthogonality defect across regimes.
    pub fn defect(&self) -> f64 {
        self.blocks
            .iter()
            .map(linalg::orthogonality_defect)
            .fold(0.0, f64::max)
    }

    /// Entrywise max-norm distance to another block set.
    pub fn distance(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .zip(other.blocks.iter())
            .map(|(a, b)| linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }
}

/// VMA coefficients `C_0, ..., C_maxh` from the recursion
/// `C_0 = I`, `C_h = sum_{i=1..min(h,l)} B_i C_{h-i}`.
pub fn vma_coefficients(regime: &ReducedFormRegime, max_h: usize) -> Vec<DMatrix<f64>> {
    let n = regime.n();
    let l = regime.l();
    let mut coeffs = Vec::with_capacity(max_h + 1);
    coeffs.push(DMatrix::identity(n, n));
    for h in 1..=max_h {
        let mut c = DMatrix::zeros(n, n);
        for i in 1..=h.min(l) {
            c += &regime.lag_coeffs()[i - 1] * &coeffs[h - i];
        }
        coeffs.push(c);
    }
    coeffs
}

/// Impulse response at horizon `h`: `C_h Sigma_tr Q`.
pub fn impulse_response(regime: &ReducedFormRegime, q: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let c = vma_coefficients(regime, h).pop().expect("nonempty");
    c * regime.sigma_tr() * q
}

/// Impulse responses for all horizons `0..=max_h`, sharing one VMA pass.
pub fn impulse_responses(
    regime: &ReducedFormRegime,
    q: &DMatrix<f64>,
    max_h: usize,
) -> Vec<DMatrix<f64>> {
    let rot = regime.sigma_tr() * q;
    vma_coefficients(regime, max_h)
        .into_iter()
        .map(|c| c * &rot)
        .collect()
}

/// Long-run cumulative response `(I - sum_i B_i)^{-1} Sigma_tr Q`.
///
/// Fails with `NonStationary` when the long-run polynomial is numerically
/// singular.
pub fn cumulative_long_run(regime: &ReducedFormRegime, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lr = regime.long_run_polynomial();
    let inv = linalg::checked_inverse(&lr, 1e-12).ok_or(Error::NonStationary { regime: 0 })?;
    Ok(inv * regime.sigma_tr() * q)
}

/// Forecast-error-variance kernel for variable `i` at horizon `h_bar`: the
/// accumulated outer products of `e_i' C_h Sigma_tr` divided by the
/// accumulated total variance, so that `q_j' Y q_j` is the share of shock
/// `j`.
pub fn fev_kernel(regime: &ReducedFormRegime, variable: usize, h_bar: usize) -> Result<DMatrix<f64>> {
    let n = regime.n();
    assert!(variable < n, "variable index out of range");
    let coeffs = vma_coefficients(regime, h_bar);
    let mut numer = DMatrix::zeros(n, n);
    let mut denom = 0.0;
    for c in &coeffs {
        let row = c.row(variable) * regime.sigma_tr();
        numer += row.transpose() * &row;
        denom += row.dot(&row);
    }
    if denom <= f64::MIN_POSITIVE * 1e4 {
        return Err(Error::ZeroVariance {
            regime: 0,
            variable,
        });
    }
    Ok(numer / denom)
}

/// Contribution of shock `j` to the forecast-error variance of variable `i`
/// at horizon `h_bar`, in `[0, 1]`.
pub fn fev_contribution(
    regime: &ReducedFormRegime,
    q: &DMatrix<f64>,
    variable: usize,
    shock: usize,
    h_bar: usize,
) -> Result<f64> {
    let kernel = fev_kernel(regime, variable, h_bar)?;
    let qj = q.column(shock);
    Ok((qj.transpose() * &kernel * qj)[(0, 0)])
}
