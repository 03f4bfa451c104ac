//! Rank conditions for local identification.
//!
//! The checks act on the compiled restriction program alone: the necessary
//! order condition, the per-shock sufficient rank condition for recursive
//! patterns, partial identification, and the necessary-and-sufficient rank
//! condition built on the skew-symmetric parameterization of infinitesimal
//! rotations. Randomized draws of the free parameters decide ranks; a single
//! full-rank draw certifies identification almost everywhere, while repeated
//! failures over `N` draws support a non-identification conclusion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{OrthogonalBlock, RegimeModel};
use crate::restrictions::RestrictionProgram;

/// Draw budget used before concluding non-identification.
pub const DEFAULT_MAX_DRAWS: usize = 10_000;

/// Outcome of an identification check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Identified,
    NotIdentifiedAfter(usize),
    PartiallyIdentified(Vec<usize>),
}

/// Which rank condition produced the verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckRoute {
    Recursive,
    General,
}

/// Full report of an identification check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentificationVerdict {
    pub order_ok: bool,
    pub f_total: usize,
    pub order_required: usize,
    pub recursive_applicable: bool,
    /// Rank outcomes per internal shock slot (recursive route) or a single
    /// entry (general route).
    pub per_shock_rank_ok: Vec<bool>,
    pub verdict: Verdict,
    pub draws_used: usize,
    pub route: CheckRoute,
}

/// `V_{j,p,k} = R*_{p,j} S*_{p,k}`, an `f_j x tau_k` block.
pub fn v_block(program: &RestrictionProgram, j: usize, p: usize, k: usize) -> DMatrix<f64> {
    program.r_star(j, p) * program.s_star(k, p)
}

/// Draw free parameters `theta_j ~ N(0, I_{tau_j})` for every shock.
pub fn draw_theta<R: Rng + ?Sized>(program: &RestrictionProgram, rng: &mut R) -> Vec<DVector<f64>> {
    (0..program.dims.n)
        .map(|j| linalg::standard_normal_vector(program.tau(j), rng))
        .collect()
}

/// Free parameters implied by an actual admissible point: solve
/// `S_j theta_j = G e_j` by least squares (the basis has full column rank).
pub fn theta_at(
    program: &RestrictionProgram,
    model: &RegimeModel,
    q: &OrthogonalBlock,
) -> Result<Vec<DVector<f64>>> {
    let gq = program.evaluate_g(model, q)?;
    let mut out = Vec::with_capacity(program.dims.n);
    for j in 0..program.dims.n {
        let col = gq.column(program.original_shock(j)).into_owned();
        let (theta, resid) = linalg::lstsq(program.s_matrix(j), &col);
        if resid > 1e-6 {
            return Err(Error::Invalid(format!(
                "point does not satisfy the shock-{j} restrictions (residual {resid:.3e})"
            )));
        }
        out.push(theta);
    }
    Ok(out)
}

/// `V_j(theta)`: `f_j x s(n-j-1)` with columns `V_{j,p,k} theta_k` laid out
/// regime-major, `k` running over the later shocks within each regime.
pub fn build_vj(program: &RestrictionProgram, j: usize, theta: &[DVector<f64>]) -> DMatrix<f64> {
    let n = program.dims.n;
    let s = program.dims.s;
    let fj = program.f(j);
    let ncols = s * (n - 1 - j);
    let mut out = DMatrix::zeros(fj, ncols);
    let mut c = 0;
    for p in 0..s {
        for k in (j + 1)..n {
            let col = v_block(program, j, p, k) * &theta[k];
            out.set_column(c, &col);
            c += 1;
        }
    }
    out
}

/// `Vtilde_j(theta)`: like `V_j` but including every shock column `k`.
pub fn build_vtilde_j(
    program: &RestrictionProgram,
    j: usize,
    theta: &[DVector<f64>],
) -> DMatrix<f64> {
    let n = program.dims.n;
    let s = program.dims.s;
    let fj = program.f(j);
    let mut out = DMatrix::zeros(fj, s * n);
    let mut c = 0;
    for p in 0..s {
        for k in 0..n {
            let col = v_block(program, j, p, k) * &theta[k];
            out.set_column(c, &col);
            c += 1;
        }
    }
    out
}

/// Block-diagonal collection of all `Vtilde_j(theta)` (an `f x s n^2`
/// matrix).
pub fn build_vtilde(program: &RestrictionProgram, theta: &[DVector<f64>]) -> DMatrix<f64> {
    let n = program.dims.n;
    let s = program.dims.s;
    let f = program.f_total();
    let mut out = DMatrix::zeros(f, s * n * n);
    let mut row = 0;
    for j in 0..n {
        let block = build_vtilde_j(program, j, theta);
        out.view_mut((row, j * s * n), (block.nrows(), s * n))
            .copy_from(&block);
        row += block.nrows();
    }
    out
}

/// The skew-symmetric selection machinery: `Dtilde_n`, `Ttilde_{n,s}` and
/// their product `Tapprox` mapping stacked skew parameters
/// `(h_1; ...; h_s)` to `vec` of the vertically stacked `(H_1; ...; H_s)`.
#[derive(Clone, Debug)]
pub struct SkewBasis {
    pub n: usize,
    pub s: usize,
    pub d_tilde: DMatrix<f64>,
    pub t_tilde: DMatrix<f64>,
    pub t_approx: DMatrix<f64>,
}

impl SkewBasis {
    pub fn new(n: usize, s: usize) -> Self {
        let n_tilde = n * (n - 1) / 2;
        // Dtilde: column per strictly-lower pair (i, j), j-major, with +1 at
        // vec index of (i, j) and -1 at (j, i).
        let mut d_tilde = DMatrix::zeros(n * n, n_tilde);
        let mut col = 0;
        for j in 0..n {
            for i in (j + 1)..n {
                d_tilde[(j * n + i, col)] = 1.0;
                d_tilde[(i * n + j, col)] = -1.0;
                col += 1;
            }
        }
        // Ttilde_{n,s}: rows are I_s (x) e_j'.
        let mut t_tilde = DMatrix::zeros(s * n, s * n);
        for j in 0..n {
            for p in 0..s {
                t_tilde[(j * s + p, p * n + j)] = 1.0;
            }
        }
        let t_approx = kron(&t_tilde, &DMatrix::identity(n, n))
            * kron(&DMatrix::identity(s, s), &d_tilde);
        Self {
            n,
            s,
            d_tilde,
            t_tilde,
            t_approx,
        }
    }

    /// Reshape a skew parameter vector into the `n x n` skew matrix `H`.
    pub fn skew_from_params(&self, h: &DVector<f64>) -> DMatrix<f64> {
        let v = &self.d_tilde * h;
        DMatrix::from_fn(self.n, self.n, |r, c| v[c * self.n + r])
    }
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let v = a[(i, j)];
            if v != 0.0 {
                for r in 0..br {
                    for c in 0..bc {
                        out[(i * br + r, j * bc + c)] = v * b[(r, c)];
                    }
                }
            }
        }
    }
    out
}

/// `Vapprox(theta) = Vtilde(theta) Tapprox`, the `f x s n(n-1)/2` matrix of
/// the necessary-and-sufficient condition.
pub fn build_v_approx(
    program: &RestrictionProgram,
    theta: &[DVector<f64>],
    skew: &SkewBasis,
) -> DMatrix<f64> {
    build_vtilde(program, theta) * &skew.t_approx
}

/// Necessary order condition: `f >= s n(n-1)/2`.
pub fn order_condition(program: &RestrictionProgram) -> (bool, usize, usize) {
    let f = program.f_total();
    let required = program.dims.s * program.dims.n_tilde();
    (f >= required, f, required)
}

/// Per-shock order flags `f_j >= s(n-j)` for `j = 1..n-1`; when all hold the
/// recursive sufficient rank condition is applicable.
pub fn recursive_order_check(program: &RestrictionProgram) -> Vec<bool> {
    let n = program.dims.n;
    let s = program.dims.s;
    (0..n - 1).map(|j| program.f(j) >= s * (n - 1 - j)).collect()
}

enum ThetaSource<'a, R: Rng> {
    Random(&'a mut R),
    Fixed(Vec<DVector<f64>>),
}

impl<R: Rng> ThetaSource<'_, R> {
    fn draw(&mut self, program: &RestrictionProgram) -> Vec<DVector<f64>> {
        match self {
            ThetaSource::Random(rng) => draw_theta(program, rng),
            ThetaSource::Fixed(theta) => theta.clone(),
        }
    }
    fn budget(&self, requested: usize) -> usize {
        match self {
            ThetaSource::Random(_) => requested,
            ThetaSource::Fixed(_) => 1,
        }
    }
}

fn sufficient_rank_impl<R: Rng>(
    program: &RestrictionProgram,
    max_draws: usize,
    mut source: ThetaSource<'_, R>,
) -> Result<IdentificationVerdict> {
    let (order_ok, f, required) = order_condition(program);
    let rec = recursive_order_check(program);
    if let Some(j) = rec.iter().position(|ok| !ok) {
        return Err(Error::RecursiveSchemeUnavailable {
            shock: j,
            found: program.f(j),
            needed: program.dims.s * (program.dims.n - 1 - j),
        });
    }
    let n = program.dims.n;
    let s = program.dims.s;
    let budget = source.budget(max_draws);
    let mut per_shock = vec![false; n - 1];
    for draw in 1..=budget {
        let theta = source.draw(program);
        per_shock = (0..n - 1)
            .map(|j| {
                let vj = build_vj(program, j, &theta);
                linalg::rank(&vj) == s * (n - 1 - j)
            })
            .collect();
        if per_shock.iter().all(|&ok| ok) {
            return Ok(IdentificationVerdict {
                order_ok,
                f_total: f,
                order_required: required,
                recursive_applicable: true,
                per_shock_rank_ok: per_shock,
                verdict: Verdict::Identified,
                draws_used: draw,
                route: CheckRoute::Recursive,
            });
        }
    }
    Ok(IdentificationVerdict {
        order_ok,
        f_total: f,
        order_required: required,
        recursive_applicable: true,
        per_shock_rank_ok: per_shock,
        verdict: Verdict::NotIdentifiedAfter(budget),
        draws_used: budget,
        route: CheckRoute::Recursive,
    })
}

/// Sufficient rank condition via random free-parameter draws: identified as
/// soon as one draw gives `rank(V_j) = s(n-j)` for every `j <= n-1`.
pub fn sufficient_rank_check<R: Rng>(
    program: &RestrictionProgram,
    max_draws: usize,
    rng: &mut R,
) -> Result<IdentificationVerdict> {
    sufficient_rank_impl(program, max_draws, ThetaSource::Random(rng))
}

/// Sufficient rank condition evaluated at the free parameters implied by an
/// actual admissible parameter point.
pub fn sufficient_rank_check_at(
    program: &RestrictionProgram,
    model: &RegimeModel,
    q: &OrthogonalBlock,
) -> Result<IdentificationVerdict> {
    let theta = theta_at(program, model, q)?;
    sufficient_rank_impl::<rand_chacha::ChaCha8Rng>(program, 1, ThetaSource::Fixed(theta))
}

/// Partial identification of shock `j` (zero-based internal slot): requires
/// full rank of `V_i(theta)` for all `i <= j`.
pub fn partial_identification_check<R: Rng>(
    program: &RestrictionProgram,
    shock: usize,
    max_draws: usize,
    rng: &mut R,
) -> Result<Verdict> {
    let n = program.dims.n;
    let s = program.dims.s;
    if shock >= n {
        return Err(Error::IndexOutOfRange(format!("shock {shock} of {n}")));
    }
    let upto = shock.min(n.saturating_sub(2));
    for draw in 1..=max_draws {
        let theta = draw_theta(program, rng);
        let ok = (0..=upto).all(|i| {
            let vi = build_vj(program, i, &theta);
            linalg::rank(&vi) == s * (n - 1 - i)
        });
        if ok {
            let _ = draw;
            return Ok(Verdict::Identified);
        }
    }
    Ok(Verdict::NotIdentifiedAfter(max_draws))
}

/// Necessary and sufficient rank condition: full column rank of
/// `Vapprox(theta)` certifies local identification; failure over the whole
/// draw budget supports non-identification.
pub fn necessary_sufficient_check<R: Rng>(
    program: &RestrictionProgram,
    max_draws: usize,
    rng: &mut R,
) -> IdentificationVerdict {
    let (order_ok, f, required) = order_condition(program);
    let skew = SkewBasis::new(program.dims.n, program.dims.s);
    let target = program.dims.s * program.dims.n_tilde();
    let mut draws_used = 0;
    let mut rank_ok = false;
    if order_ok {
        for draw in 1..=max_draws {
            draws_used = draw;
            let theta = draw_theta(program, rng);
            let va = build_v_approx(program, &theta, &skew);
            if linalg::rank(&va) == target {
                rank_ok = true;
                break;
            }
        }
    }
    IdentificationVerdict {
        order_ok,
        f_total: f,
        order_required: required,
        recursive_applicable: recursive_order_check(program).iter().all(|&b| b),
        per_shock_rank_ok: vec![rank_ok],
        verdict: if rank_ok {
            Verdict::Identified
        } else {
            Verdict::NotIdentifiedAfter(draws_used)
        },
        draws_used,
        route: CheckRoute::General,
    }
}

/// Necessary and sufficient condition at the free parameters of an actual
/// point.
pub fn necessary_sufficient_check_at(
    program: &RestrictionProgram,
    model: &RegimeModel,
    q: &OrthogonalBlock,
) -> Result<IdentificationVerdict> {
    let theta = theta_at(program, model, q)?;
    let (order_ok, f, required) = order_condition(program);
    let skew = SkewBasis::new(program.dims.n, program.dims.s);
    let target = program.dims.s * program.dims.n_tilde();
    let va = build_v_approx(program, &theta, &skew);
    let rank_ok = order_ok && linalg::rank(&va) == target;
    Ok(IdentificationVerdict {
        order_ok,
        f_total: f,
        order_required: required,
        recursive_applicable: recursive_order_check(program).iter().all(|&b| b),
        per_shock_rank_ok: vec![rank_ok],
        verdict: if rank_ok {
            Verdict::Identified
        } else {
            Verdict::NotIdentifiedAfter(1)
        },
        draws_used: 1,
        route: CheckRoute::General,
    })
}
