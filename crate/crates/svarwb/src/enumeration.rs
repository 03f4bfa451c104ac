//! Enumeration of admissible rotation blocks.
//!
//! Three routes produce the finite solution set for just-identified models:
//! a general multi-start damped Newton on the square polynomial system
//! (equality restrictions plus orthogonality), a recursive column-by-column
//! route for recursively just-identified patterns, and a sequential variant
//! that reduces each column/regime step to a scalar quadratic. Every
//! returned block re-passes the equality, orthogonality, normalization and
//! inequality checks, so the output is self-verifying.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    cumulative_long_run, fev_contribution, impulse_response, OrthogonalBlock, RegimeModel,
};
use crate::restrictions::{apply_normalization, RestrictionProgram, EQUALITY_TOL};

/// Which algorithm produced a rotation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    GeneralSolver,
    Recursive,
    SequentialRecursive,
}

/// Whether the set is known to be complete.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Completeness {
    /// Closed-form column-wise enumeration: complete up to numerics.
    Exact,
    /// Multi-start search: complete only heuristically.
    Heuristic,
    /// Heuristic route confirmed against an exact route or oracle.
    CrossValidated,
}

/// Solver knobs for the general route.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Newton starts per unknown; total starts = `starts_per_unknown * s * n`.
    pub starts_per_unknown: usize,
    pub max_newton_iters: usize,
    /// Convergence threshold on the residual infinity norm.
    pub residual_tol: f64,
    /// Max-norm tolerance under which two solutions are duplicates.
    pub dedup_tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            starts_per_unknown: 500,
            max_newton_iters: 80,
            residual_tol: 1e-11,
            dedup_tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EnumDiagnostics {
    pub starts: usize,
    pub converged: usize,
    /// Distinct roots of the polynomial system before admissibility filters.
    pub raw_roots: usize,
    /// Roots dropped because a diagonal entry of the implied contemporaneous
    /// matrix was numerically zero, leaving the sign normalization
    /// undecidable.
    pub normalization_undefined: usize,
}

/// The finite set of admissible rotation blocks at one reduced-form point.
#[derive(Clone, Debug)]
pub struct RotationSet {
    pub solutions: Vec<OrthogonalBlock>,
    pub provenance: Provenance,
    pub completeness: Completeness,
    pub diagnostics: EnumDiagnostics,
}

impl RotationSet {
    pub fn len(&self) -> usize {
        self.solutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }
}

/// Scalar functionals of `(phi_p, Q_p)` whose identified sets are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetFunctional {
    Irf { variable: usize, shock: usize },
    Cir { variable: usize, shock: usize },
    FevShare { variable: usize, shock: usize },
}

impl TargetFunctional {
    pub fn evaluate(
        &self,
        model: &RegimeModel,
        p: usize,
        q_p: &DMatrix<f64>,
        horizon: usize,
    ) -> Result<f64> {
        let regime = model.regime(p);
        Ok(match *self {
            TargetFunctional::Irf { variable, shock } => {
                impulse_response(regime, q_p, horizon)[(variable, shock)]
            }
            TargetFunctional::Cir { variable, shock } => {
                cumulative_long_run(regime, q_p).map_err(|_| Error::NonStationary { regime: p })?
                    [(variable, shock)]
            }
            TargetFunctional::FevShare { variable, shock } => {
                fev_contribution(regime, q_p, variable, shock, horizon)?
            }
        })
    }
}

/// Values of a target functional over a rotation set: per regime and
/// horizon, the sorted distinct values.
#[derive(Clone, Debug)]
pub struct IdentifiedSet {
    pub per_regime: Vec<Vec<Vec<f64>>>,
    pub horizons: Vec<usize>,
}

/// Tolerance for collapsing numerically equal identified-set values.
pub const VALUE_DEDUP_TOL: f64 = 1e-9;

pub fn identified_set(
    rotations: &RotationSet,
    model: &RegimeModel,
    target: TargetFunctional,
    horizons: &[usize],
) -> Result<IdentifiedSet> {
    let s = model.dims.s;
    let mut per_regime = vec![vec![Vec::new(); horizons.len()]; s];
    for q in &rotations.solutions {
        for p in 0..s {
            for (hi, &h) in horizons.iter().enumerate() {
                let v = target.evaluate(model, p, q.block(p), h)?;
                per_regime[p][hi].push(v);
            }
        }
    }
    for regime_vals in &mut per_regime {
        for vals in regime_vals.iter_mut() {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup_by(|a, b| (*a - *b).abs() <= VALUE_DEDUP_TOL);
        }
    }
    Ok(IdentifiedSet {
        per_regime,
        horizons: horizons.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// shared filtering
// ---------------------------------------------------------------------------

/// Normalize, re-validate the equality rows, deduplicate and apply the
/// inequality filter; the survivors are sorted canonically so output order
/// is deterministic. Returns the kept solutions and the count of candidates
/// whose normalization was undecidable (a structurally zero diagonal).
fn filter_candidates(
    program: &RestrictionProgram,
    model: &RegimeModel,
    raw: Vec<OrthogonalBlock>,
    dedup_tol: f64,
) -> Result<(Vec<OrthogonalBlock>, usize)> {
    let mut kept: Vec<OrthogonalBlock> = Vec::new();
    let mut undefined = 0usize;
    for q in raw {
        if q.defect() > crate::model::ORTHO_TOL {
            continue;
        }
        if program.max_equality_residual(model, &q)? > EQUALITY_TOL {
            continue;
        }
        let flipped = match apply_normalization(model, &q) {
            Ok(f) => f,
            Err(Error::NormalizationUndefined { .. }) => {
                undefined += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        // a flip that breaks a cross-regime equality row means the candidate
        // family has no normalized member
        if program.max_equality_residual(model, &flipped)? > EQUALITY_TOL {
            continue;
        }
        if !program.inequality_satisfied(model, &flipped)? {
            continue;
        }
        if kept.iter().all(|k| k.distance(&flipped) > dedup_tol) {
            kept.push(flipped);
        }
    }
    kept.sort_by(|a, b| canonical_key(a).partial_cmp(&canonical_key(b)).unwrap());
    Ok((kept, undefined))
}

fn canonical_key(q: &OrthogonalBlock) -> Vec<f64> {
    let mut key = Vec::new();
    for b in q.blocks() {
        for v in b.iter() {
            key.push((v * 1e9).round() / 1e9);
        }
    }
    key
}

/// Rebuild the original-column-order rotation from internally ordered
/// columns (`cols[p][j]` is the column for internal shock slot `j`).
fn assemble_block(
    program: &RestrictionProgram,
    cols: &[Vec<DVector<f64>>],
) -> Result<OrthogonalBlock> {
    let n = program.dims.n;
    let blocks = cols
        .iter()
        .map(|regime_cols| {
            let mut q = DMatrix::zeros(n, n);
            for j in 0..n {
                let orig = program.original_shock(j);
                q.set_column(orig, &regime_cols[j]);
            }
            q
        })
        .collect();
    OrthogonalBlock::new(blocks)
}

/// Early per-column filters: the normalization sign of the new column and
/// any single-term sign restrictions on its shock. Both are re-checked at
/// the leaves; pruning here just keeps the tree small.
fn column_passes_early_filters(
    program: &RestrictionProgram,
    model: &RegimeModel,
    f_stacks: &[DMatrix<f64>],
    orig_shock: usize,
    p: usize,
    col: &DVector<f64>,
) -> bool {
    let regime = model.regime(p);
    let n = regime.n();
    // normalization: diag entry of A0 for this column
    let e = DVector::from_fn(n, |i, _| if i == orig_shock { 1.0 } else { 0.0 });
    let inv_col = regime
        .sigma_tr()
        .solve_lower_triangular(&e)
        .expect("Cholesky factor invertible");
    if col.dot(&inv_col) < -crate::restrictions::INEQ_TOL {
        return false;
    }
    // declared single-term sign restrictions on this shock and regime
    for row in program.inequalities() {
        if row.terms.len() == 1 {
            let (tp, grow, shock, coeff) = row.terms[0];
            if tp == p && shock == orig_shock {
                let margin = coeff * f_stacks[p].row(grow).transpose().dot(col);
                if margin < -crate::restrictions::INEQ_TOL {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// recursive route
// ---------------------------------------------------------------------------

enum QuadSolutions {
    Finite(Vec<DVector<f64>>),
    Continuum,
}

/// All real solutions of `lambda' B_p lambda = 1` for `p = 1..s`.
fn solve_unit_norm_system(bts: &[DMatrix<f64>]) -> QuadSolutions {
    let s = bts.len();
    match s {
        1 => {
            let b = bts[0][(0, 0)];
            if b <= 1e-14 {
                return QuadSolutions::Finite(Vec::new());
            }
            let lam = 1.0 / b.sqrt();
            QuadSolutions::Finite(vec![
                DVector::from_element(1, lam),
                DVector::from_element(1, -lam),
            ])
        }
        2 => solve_two_regime_quadratics(&bts[0], &bts[1]),
        _ => solve_quadratics_newton(bts),
    }
}

/// Two-regime case: subtracting the equations gives a homogeneous quadratic
/// whose zero directions come from the eigen-decomposition of the
/// difference; each direction is rescaled to unit quadratic norm.
fn solve_two_regime_quadratics(b1: &DMatrix<f64>, b2: &DMatrix<f64>) -> QuadSolutions {
    let delta = linalg::symmetrize(&(b1 - b2));
    let scale = linalg::max_abs(b1).max(linalg::max_abs(b2)).max(1.0);
    let eig = delta.clone().symmetric_eigen();
    let (d0, d1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
    let (v0, v1) = (
        eig.eigenvectors.column(0).into_owned(),
        eig.eigenvectors.column(1).into_owned(),
    );
    let zero_tol = 1e-12 * scale;
    let mut directions: Vec<DVector<f64>> = Vec::new();
    if d0.abs() <= zero_tol && d1.abs() <= zero_tol {
        // the two ellipses coincide: a continuum of solutions
        return QuadSolutions::Continuum;
    }
    // order so that |hi| >= |lo|
    let (hi_val, hi_vec, lo_val, lo_vec) = if d0.abs() >= d1.abs() {
        (d0, v0, d1, v1)
    } else {
        (d1, v1, d0, v0)
    };
    if lo_val.abs() <= zero_tol {
        // rank-one difference: a single zero direction (tangency), the
        // near-double-root collapse
        directions.push(lo_vec);
    } else if hi_val * lo_val < 0.0 {
        // mixed signature: two distinct zero lines
        let a = (-lo_val / hi_val).sqrt();
        let d_plus = &hi_vec * a + &lo_vec;
        let d_minus = &hi_vec * a - &lo_vec;
        directions.push(d_plus);
        directions.push(d_minus);
    } // same signature: only the trivial zero, no real solutions

    let mut out = Vec::new();
    for d in directions {
        let norm1 = (d.transpose() * b1 * &d)[(0, 0)];
        if norm1 <= 1e-14 * scale {
            continue;
        }
        let lam = &d / norm1.sqrt();
        // guard: the rescaled vector must satisfy the second equation too
        let check = (lam.transpose() * b2 * &lam)[(0, 0)];
        if (check - 1.0).abs() > 1e-6 {
            continue;
        }
        out.push(-&lam);
        out.push(lam);
    }
    QuadSolutions::Finite(out)
}

/// Multi-start Newton fallback for three or more regimes.
fn solve_quadratics_newton(bts: &[DMatrix<f64>]) -> QuadSolutions {
    let s = bts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut roots: Vec<DVector<f64>> = Vec::new();
    let starts = 200 * s;
    for _ in 0..starts {
        let mut x = linalg::standard_normal_vector(s, &mut rng);
        let mut ok = false;
        for _ in 0..60 {
            let mut f = DVector::zeros(s);
            let mut jac = DMatrix::zeros(s, s);
            for p in 0..s {
                f[p] = (x.transpose() * &bts[p] * &x)[(0, 0)] - 1.0;
                let grad = (&bts[p] * &x) * 2.0;
                for c in 0..s {
                    jac[(p, c)] = grad[c];
                }
            }
            if f.amax() < 1e-12 {
                ok = true;
                break;
            }
            let Some(step) = jac.lu().solve(&(-&f)) else { break };
            if !step.iter().all(|v| v.is_finite()) {
                break;
            }
            x += step;
        }
        if ok && roots.iter().all(|r| (r - &x).amax() > 1e-8) {
            roots.push(x);
        }
    }
    QuadSolutions::Finite(roots)
}

/// Column-by-column enumeration for recursively just-identified programs.
///
/// At each column the stacked candidate must be orthogonal to the shock's
/// restriction rows (projected through the transform stacks) and to the
/// previously fixed columns of every regime, leaving an `s`-dimensional
/// space; the per-regime unit-length conditions then form a small quadratic
/// system whose real solutions branch the tree.
pub fn enumerate_recursive(
    program: &RestrictionProgram,
    model: &RegimeModel,
) -> Result<RotationSet> {
    if !program.is_recursively_just_identified() {
        return Err(Error::RecursivePatternViolated(format!(
            "per-shock counts {:?} do not match the recursive pattern",
            (0..program.dims.n).map(|j| program.f(j)).collect::<Vec<_>>()
        )));
    }
    let n = program.dims.n;
    let s = program.dims.s;
    let f_stacks = program.f_stacks(model)?;
    // precomputed restriction row blocks [R*_{1,j} G_1 | ... | R*_{s,j} G_s]
    let restr_rows: Vec<DMatrix<f64>> = (0..n)
        .map(|j| {
            let fj = program.f(j);
            let mut rows = DMatrix::zeros(fj, n * s);
            for p in 0..s {
                let block = program.r_star(j, p) * &f_stacks[p];
                rows.view_mut((0, p * n), (fj, n)).copy_from(&block);
            }
            rows
        })
        .collect();

    let max_leaves = 1usize << (s * n).min(30);
    let mut branches: Vec<Vec<Vec<DVector<f64>>>> = vec![vec![Vec::new(); s]];
    for j in 0..n {
        let orig = program.original_shock(j);
        let mut next: Vec<Vec<Vec<DVector<f64>>>> = Vec::new();
        for branch in &branches {
            let fj = program.f(j);
            let mut gamma = DMatrix::zeros(fj + s * j, n * s);
            gamma.view_mut((0, 0), (fj, n * s)).copy_from(&restr_rows[j]);
            for k in 0..j {
                for p in 0..s {
                    let row = fj + k * s + p;
                    for i in 0..n {
                        gamma[(row, p * n + i)] = branch[p][k][i];
                    }
                }
            }
            let basis = linalg::null_space(&gamma);
            if basis.ncols() != s {
                return Err(Error::DegenerateNullSpace {
                    column: j,
                    found: basis.ncols(),
                    expected: s,
                });
            }
            let b_blocks: Vec<DMatrix<f64>> = (0..s)
                .map(|p| basis.view((p * n, 0), (n, s)).into_owned())
                .collect();
            let bts: Vec<DMatrix<f64>> =
                b_blocks.iter().map(|b| b.transpose() * b).collect();
            let lambdas = match solve_unit_norm_system(&bts) {
                QuadSolutions::Finite(l) => l,
                QuadSolutions::Continuum => {
                    return Err(Error::DegenerateNullSpace {
                        column: j,
                        found: s + 1,
                        expected: s,
                    })
                }
            };
            'lambda: for lam in lambdas {
                let cols: Vec<DVector<f64>> =
                    b_blocks.iter().map(|b| b * &lam).collect();
                for (p, col) in cols.iter().enumerate() {
                    if !column_passes_early_filters(program, model, &f_stacks, orig, p, col) {
                        continue 'lambda;
                    }
                }
                let mut nb = branch.clone();
                for (p, col) in cols.into_iter().enumerate() {
                    nb[p].push(col);
                }
                next.push(nb);
                if next.len() > max_leaves {
                    return Err(Error::Invalid(format!(
                        "branch count exceeded the 2^(s*n) guard at column {j}"
                    )));
                }
            }
        }
        branches = next;
        if branches.is_empty() {
            break;
        }
    }

    let raw: Vec<OrthogonalBlock> = branches
        .iter()
        .filter_map(|b| assemble_block(program, b).ok())
        .collect();
    let raw_roots = raw.len();
    let (solutions, normalization_undefined) =
        filter_candidates(program, model, raw, SolverConfig::default().dedup_tol)?;
    Ok(RotationSet {
        solutions,
        provenance: Provenance::Recursive,
        completeness: Completeness::Exact,
        diagnostics: EnumDiagnostics {
            starts: 0,
            converged: raw_roots,
            raw_roots,
            normalization_undefined,
        },
    })
}

// ---------------------------------------------------------------------------
// sequential route
// ---------------------------------------------------------------------------

/// Sequential variant: for each column, regimes are processed in a
/// dependency order under which every cross-regime restriction only refers
/// to regimes already fixed, so each step solves a scalar quadratic
/// `A'A + 2 A'a z + a'a z^2 - 1 = 0` along the one-dimensional left-over
/// direction.
pub fn enumerate_sequential(
    program: &RestrictionProgram,
    model: &RegimeModel,
) -> Result<RotationSet> {
    if !program.is_recursively_just_identified() {
        return Err(Error::RecursivePatternViolated(
            "sequential route requires the recursive pattern".into(),
        ));
    }
    let n = program.dims.n;
    let s = program.dims.s;
    let orderings: Vec<Vec<usize>> = (0..n)
        .map(|j| program.sequential_ordering(j).ok_or(Error::OrderingNotFound { column: j }))
        .collect::<Result<_>>()?;
    let f_stacks = program.f_stacks(model)?;
    let g = program.g();

    let max_leaves = 1usize << (s * n).min(30);
    let mut branches: Vec<Vec<Vec<DVector<f64>>>> = vec![vec![Vec::new(); s]];
    for j in 0..n {
        let orig = program.original_shock(j);
        let assignment = program
            .recursive_assignment(j)
            .expect("checked by the recursive pattern gate");
        let rj = program.r_matrix(j);
        let quota = n - 1 - j;
        for &p in &orderings[j] {
            // rows of R_j owned by regime p at this column
            let owned: Vec<usize> = (0..program.f(j)).filter(|&r| assignment[r] == p).collect();
            debug_assert_eq!(owned.len(), quota);
            let mut next: Vec<Vec<Vec<DVector<f64>>>> = Vec::new();
            for branch in &branches {
                // F rows: owned restriction rows restricted to regime p,
                // then the previously fixed columns of regime p
                let mut f_mat = DMatrix::zeros(quota + j, n);
                let mut rhs = DVector::zeros(quota + j);
                for (ri, &row) in owned.iter().enumerate() {
                    let mut frow = DVector::zeros(n);
                    for grow in 0..g {
                        let c = rj[(row, p * g + grow)];
                        if c != 0.0 {
                            for i in 0..n {
                                frow[i] += c * f_stacks[p][(grow, i)];
                            }
                        }
                    }
                    for i in 0..n {
                        f_mat[(ri, i)] = frow[i];
                    }
                    // cross terms against already-fixed regimes
                    let mut cross = 0.0;
                    for &w in &orderings[j] {
                        if w == p {
                            break;
                        }
                        let qw = &branch[w][j];
                        for grow in 0..g {
                            let c = rj[(row, w * g + grow)];
                            if c != 0.0 {
                                cross += c * f_stacks[w].row(grow).transpose().dot(qw);
                            }
                        }
                    }
                    rhs[ri] = -cross;
                }
                for k in 0..j {
                    for i in 0..n {
                        f_mat[(quota + k, i)] = branch[p][k][i];
                    }
                }
                // particular solution and the one-dimensional null direction
                let fft = &f_mat * f_mat.transpose();
                let Some(fft_inv) = linalg::checked_inverse(&fft, 1e-10) else {
                    return Err(Error::DegenerateNullSpace {
                        column: j,
                        found: 0,
                        expected: 1,
                    });
                };
                let a_part = f_mat.transpose() * &fft_inv * &rhs;
                let proj = DMatrix::identity(n, n) - f_mat.transpose() * &fft_inv * &f_mat;
                let alpha = {
                    let basis = linalg::null_space(&f_mat);
                    if basis.ncols() != 1 {
                        return Err(Error::DegenerateNullSpace {
                            column: j,
                            found: basis.ncols(),
                            expected: 1,
                        });
                    }
                    let _ = proj;
                    basis.column(0).into_owned()
                };
                // A'A + 2 A'a z + a'a z^2 = 1
                let aa = alpha.dot(&alpha);
                let b_lin = 2.0 * a_part.dot(&alpha);
                let c_const = a_part.dot(&a_part) - 1.0;
                let disc = b_lin * b_lin - 4.0 * aa * c_const;
                let scale = (a_part.dot(&a_part)).max(1.0);
                let roots: Vec<f64> = if disc < -1e-12 * scale {
                    Vec::new()
                } else if disc.abs() <= 1e-12 * scale {
                    vec![-b_lin / (2.0 * aa)]
                } else {
                    let sq = disc.sqrt();
                    vec![(-b_lin + sq) / (2.0 * aa), (-b_lin - sq) / (2.0 * aa)]
                };
                for z in roots {
                    let col = &a_part + &alpha * z;
                    if !column_passes_early_filters(program, model, &f_stacks, orig, p, &col) {
                        continue;
                    }
                    let mut nb = branch.clone();
                    // column j of regime p is being decided now; regimes later
                    // in the ordering have not pushed theirs yet
                    while nb[p].len() < j {
                        unreachable!("columns are decided in order");
                    }
                    nb[p].push(col);
                    next.push(nb);
                    if next.len() > max_leaves {
                        return Err(Error::Invalid(format!(
                            "branch count exceeded the 2^(s*n) guard at column {j}"
                        )));
                    }
                }
            }
            branches = next;
            if branches.is_empty() {
                break;
            }
        }
        if branches.is_empty() {
            break;
        }
        // within this column, regimes were pushed in ordering order; the
        // per-regime column lists all have length j+1 now
        debug_assert!(branches.iter().all(|b| b.iter().all(|r| r.len() == j + 1)));
    }

    let raw: Vec<OrthogonalBlock> = branches
        .iter()
        .filter_map(|b| assemble_block(program, b).ok())
        .collect();
    let raw_roots = raw.len();
    let (solutions, normalization_undefined) =
        filter_candidates(program, model, raw, SolverConfig::default().dedup_tol)?;
    Ok(RotationSet {
        solutions,
        provenance: Provenance::SequentialRecursive,
        completeness: Completeness::Exact,
        diagnostics: EnumDiagnostics {
            starts: 0,
            converged: raw_roots,
            raw_roots,
            normalization_undefined,
        },
    })
}

// ---------------------------------------------------------------------------
// general route
// ---------------------------------------------------------------------------

/// Multi-start damped Newton on the square system of equality restrictions
/// plus per-regime orthogonality. Starts are Haar-distributed per regime
/// with one RNG stream per start, so results do not depend on thread count.
pub fn enumerate_general(
    program: &RestrictionProgram,
    model: &RegimeModel,
    cfg: &SolverConfig,
) -> Result<RotationSet> {
    let n = program.dims.n;
    let s = program.dims.s;
    let unknowns = s * n * n;
    let equations = program.f_total() + s * n * (n + 1) / 2;
    if equations != unknowns {
        return Err(Error::NotSquareSystem {
            equations,
            unknowns,
        });
    }
    let f_stacks = program.f_stacks(model)?;
    // constant coefficient blocks M_{p,j} = R*_{p,j} F_p
    let m_blocks: Vec<Vec<DMatrix<f64>>> = (0..n)
        .map(|j| (0..s).map(|p| program.r_star(j, p) * &f_stacks[p]).collect())
        .collect();

    let starts = cfg.starts_per_unknown * s * n;
    let sys = GeneralSystem {
        n,
        s,
        program,
        m_blocks: &m_blocks,
    };

    let candidates: Vec<(Option<DVector<f64>>, f64)> = (0..starts)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(idx as u64 + 1);
            let mut x = DVector::zeros(s * n * n);
            for p in 0..s {
                let q = linalg::haar_orthogonal(n, &mut rng);
                for c in 0..n {
                    for r in 0..n {
                        x[p * n * n + c * n + r] = q[(r, c)];
                    }
                }
            }
            sys.newton(x, cfg)
        })
        .collect();

    let mut converged = 0usize;
    let mut raw: Vec<OrthogonalBlock> = Vec::new();
    let mut best_residual = f64::INFINITY;
    for (x, final_res) in &candidates {
        best_residual = best_residual.min(*final_res);
        let Some(x) = x else { continue };
        converged += 1;
        let blocks: Vec<DMatrix<f64>> = (0..s)
            .map(|p| DMatrix::from_fn(n, n, |r, c| x[p * n * n + c * n + r]))
            .collect();
        if let Ok(q) = OrthogonalBlock::new(blocks) {
            raw.push(q);
        }
    }
    if converged == 0 {
        // An empty real solution set is a legitimate outcome ("no admissible
        // structural parameters"). Near-misses, though, indicate the budget
        // or tolerance was too tight to resolve an existing root.
        if best_residual < 1e-6 {
            return Err(Error::SolverBudgetExhausted {
                starts,
                converged: 0,
                best_residual,
            });
        }
        return Ok(RotationSet {
            solutions: Vec::new(),
            provenance: Provenance::GeneralSolver,
            completeness: Completeness::Heuristic,
            diagnostics: EnumDiagnostics {
                starts,
                converged: 0,
                raw_roots: 0,
                normalization_undefined: 0,
            },
        });
    }
    // dedup raw roots before the admissibility filter so diagnostics count
    // distinct polynomial-system roots
    let mut distinct: Vec<OrthogonalBlock> = Vec::new();
    for q in raw {
        if distinct.iter().all(|k| k.distance(&q) > cfg.dedup_tol) {
            distinct.push(q);
        }
    }
    let raw_roots = distinct.len();
    let (solutions, normalization_undefined) =
        filter_candidates(program, model, distinct, cfg.dedup_tol)?;
    Ok(RotationSet {
        solutions,
        provenance: Provenance::GeneralSolver,
        completeness: Completeness::Heuristic,
        diagnostics: EnumDiagnostics {
            starts,
            converged,
            raw_roots,
            normalization_undefined,
        },
    })
}

struct GeneralSystem<'a> {
    n: usize,
    s: usize,
    program: &'a RestrictionProgram,
    m_blocks: &'a [Vec<DMatrix<f64>>],
}

impl GeneralSystem<'_> {
    fn column<'x>(&self, x: &'x DVector<f64>, p: usize, c: usize) -> nalgebra::DVectorView<'x, f64> {
        x.rows(p * self.n * self.n + c * self.n, self.n)
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, s) = (self.n, self.s);
        let f_total = self.program.f_total();
        let mut out = DVector::zeros(f_total + s * n * (n + 1) / 2);
        let mut row = 0;
        for j in 0..n {
            let orig = self.program.original_shock(j);
            let fj = self.program.f(j);
            if fj > 0 {
                let mut acc = DVector::zeros(fj);
                for p in 0..s {
                    acc += &self.m_blocks[j][p] * self.column(x, p, orig);
                }
                out.rows_mut(row, fj).copy_from(&acc);
            }
            row += fj;
        }
        for p in 0..s {
            for a in 0..n {
                for b in a..n {
                    let dot = self.column(x, p, a).dot(&self.column(x, p, b));
                    out[row] = dot - if a == b { 1.0 } else { 0.0 };
                    row += 1;
                }
            }
        }
        out
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (n, s) = (self.n, self.s);
        let dim = s * n * n;
        let mut jac = DMatrix::zeros(dim, dim);
        let mut row = 0;
        for j in 0..n {
            let orig = self.program.original_shock(j);
            let fj = self.program.f(j);
            for p in 0..s {
                let block = &self.m_blocks[j][p];
                for r in 0..fj {
                    for i in 0..n {
                        jac[(row + r, p * n * n + orig * n + i)] = block[(r, i)];
                    }
                }
            }
            row += fj;
        }
        for p in 0..s {
            for a in 0..n {
                for b in a..n {
                    let qa = self.column(x, p, a);
                    let qb = self.column(x, p, b);
                    for i in 0..n {
                        jac[(row, p * n * n + a * n + i)] += qb[i];
                        jac[(row, p * n * n + b * n + i)] += qa[i];
                    }
                    row += 1;
                }
            }
        }
        jac
    }

    /// Damped Newton iteration; returns the converged point (if any) and the
    /// final residual infinity norm.
    fn newton(&self, mut x: DVector<f64>, cfg: &SolverConfig) -> (Option<DVector<f64>>, f64) {
        let mut f = self.residual(&x);
        for _ in 0..cfg.max_newton_iters {
            let norm = f.amax();
            if norm < cfg.residual_tol {
                return (Some(x), norm);
            }
            let jac = self.jacobian(&x);
            let Some(step) = jac.lu().solve(&(-&f)) else {
                return (None, f.amax());
            };
            if !step.iter().all(|v| v.is_finite()) {
                return (None, f.amax());
            }
            // backtracking on the residual norm
            let mut t = 1.0;
            let base = f.norm();
            loop {
                let trial = &x + &step * t;
                let ft = self.residual(&trial);
                if ft.norm() < (1.0 - 1e-4 * t) * base || t < 1e-4 {
                    x = trial;
                    f = ft;
                    break;
                }
                t *= 0.5;
            }
        }
        let norm = f.amax();
        if norm < cfg.residual_tol {
            (Some(x), norm)
        } else {
            (None, norm)
        }
    }
}
