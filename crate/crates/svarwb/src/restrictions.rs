//! Declarative restrictions and their compiled matrix form.
//!
//! User declarations (zero, equal-across-regimes, sign, ranking, FEV bounds)
//! are compiled into per-shock implicit matrices `R_j`, explicit null-space
//! bases `S_j`, inequality evaluators and a normalization rule. Restrictions
//! act on rows of a per-regime transform stack `F(phi_p) Q_p` whose row
//! blocks are drawn from the contemporaneous matrix (transposed), impulse
//! responses at chosen horizons, or the long-run cumulative response.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    cumulative_long_run, fev_kernel, impulse_response, ModelDims, OrthogonalBlock, RegimeModel,
};

/// Default tolerance on equality residuals when classifying a rotation as
/// admissible.
pub const EQUALITY_TOL: f64 = 1e-8;

/// Slack allowed on inequality margins and FEV bounds.
pub const INEQ_TOL: f64 = 1e-10;

/// One row block of the transform stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    /// `A0' = Sigma_tr^{-T} Q`: restrictions on structural coefficients.
    A0Transpose,
    /// `IR_h = C_h Sigma_tr Q`: impulse response at horizon `h`.
    Ir(usize),
    /// `CIR_inf = (I - sum B_i)^{-1} Sigma_tr Q`: long-run response.
    CirInfinity,
}

/// Ordered list of transform row blocks, identical across regimes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSpec {
    kinds: Vec<TransformKind>,
}

impl TransformSpec {
    pub fn new(kinds: Vec<TransformKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Invalid("transform must have at least one row block".into()));
        }
        let mut seen = Vec::new();
        for k in &kinds {
            if seen.contains(k) {
                return Err(Error::Invalid("duplicate transform row block".into()));
            }
            seen.push(*k);
        }
        Ok(Self { kinds })
    }

    pub fn kinds(&self) -> &[TransformKind] {
        &self.kinds
    }

    /// Rows contributed per regime: `g = kinds * n`.
    pub fn g(&self, n: usize) -> usize {
        self.kinds.len() * n
    }

    fn block_offset(&self, kind: TransformKind, n: usize) -> Option<usize> {
        self.kinds.iter().position(|k| *k == kind).map(|i| i * n)
    }

    /// Evaluate the transform stack `F(phi_p)` (a `g x n` matrix) so that
    /// the restricted object is `F(phi_p) Q_p`.
    pub fn evaluate_f(&self, model: &RegimeModel, p: usize) -> Result<DMatrix<f64>> {
        let regime = model.regime(p);
        let n = regime.n();
        let mut out = DMatrix::zeros(self.g(n), n);
        for (i, kind) in self.kinds.iter().enumerate() {
            let block = match kind {
                TransformKind::A0Transpose => {
                    // Sigma_tr^{-T}: solve Sigma_tr' X = I
                    let lt = regime.sigma_tr().transpose();
                    lt.solve_upper_triangular(&DMatrix::identity(n, n))
                        .ok_or(Error::NotPositiveDefinite { regime: p })?
                }
                TransformKind::Ir(h) => impulse_response(regime, &DMatrix::identity(n, n), *h),
                TransformKind::CirInfinity => cumulative_long_run(regime, &DMatrix::identity(n, n))
                    .map_err(|_| Error::NonStationary { regime: p })?,
            };
            out.view_mut((i * n, 0), (n, n)).copy_from(&block);
        }
        Ok(out)
    }
}

/// Direction of an inequality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    NonNegative,
    NonPositive,
}

/// Address of a single entry of a restricted object in one regime, in the
/// object's natural (row, column) orientation. For the contemporaneous
/// matrix the row is the equation and the column the variable; for impulse
/// responses the row is the responding variable and the column the shock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryRef {
    pub target: TargetKind,
    /// Horizon; only meaningful for impulse responses.
    #[serde(default)]
    pub horizon: usize,
    /// Regime index, zero-based.
    pub regime: usize,
    pub row: usize,
    pub column: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    A0,
    Irf,
    Cir,
}

impl EntryRef {
    fn transform_kind(&self) -> TransformKind {
        match self.target {
            TargetKind::A0 => TransformKind::A0Transpose,
            TargetKind::Irf => TransformKind::Ir(self.horizon),
            TargetKind::Cir => TransformKind::CirInfinity,
        }
    }

    /// Map to (shock column, row within the per-regime transform stack).
    ///
    /// `A0[i, k]` is entry `(k, i)` of the transposed block, so the shock is
    /// the equation index and the stack row the variable index.
    fn locate(&self, spec: &TransformSpec, dims: &ModelDims) -> Result<(usize, usize)> {
        let n = dims.n;
        if self.regime >= dims.s || self.row >= n || self.column >= n {
            return Err(Error::IndexOutOfRange(format!("{self:?}")));
        }
        let offset = spec
            .block_offset(self.transform_kind(), n)
            .ok_or_else(|| Error::InadmissibleTransform(format!("{self:?}")))?;
        let (shock, row_in_block) = match self.target {
            TargetKind::A0 => (self.row, self.column),
            TargetKind::Irf | TargetKind::Cir => (self.column, self.row),
        };
        Ok((shock, offset + row_in_block))
    }
}

/// A user-declared restriction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RestrictionDecl {
    /// A single entry equals zero.
    Zero { entry: EntryRef },
    /// The same entry is equal in `entry.regime` and `other_regime`
    /// (a stability restriction).
    EqualAcrossRegimes { entry: EntryRef, other_regime: usize },
    /// A single entry is weakly positive or negative.
    Sign { entry: EntryRef, direction: Direction },
    /// A signed combination of entries (all on the same shock column or
    /// across shocks is allowed for rankings) compared against zero.
    Ranking {
        terms: Vec<RankingTerm>,
        direction: Direction,
    },
    /// Bounds on (differences of) forecast-error-variance contributions.
    FevBound(FevRestriction),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankingTerm {
    pub entry: EntryRef,
    pub weight: f64,
}

/// `lower <= sum_p w1_p CFEV_{p,i j}(h) - sum_p w2_p CFEV_{p,i r}(h) <= upper`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FevRestriction {
    pub variable: usize,
    pub horizon: usize,
    pub shock: usize,
    /// Per-regime selection weights for the left quadratic form.
    pub weights: Vec<f64>,
    /// Optional right-hand side: another shock with its own weights.
    #[serde(default)]
    pub right: Option<FevSide>,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FevSide {
    pub shock: usize,
    pub weights: Vec<f64>,
}

/// One compiled equality row: a linear combination of transform-stack
/// entries on a single shock column, summed across regimes.
#[derive(Clone, Debug)]
pub struct EqualityRow {
    pub shock: usize,
    /// (regime, row within the per-regime stack, coefficient)
    pub terms: Vec<(usize, usize, f64)>,
}

/// One compiled inequality row: `sum coeff * [F_p Q_p]_{row, shock} >= 0`.
#[derive(Clone, Debug)]
pub struct IneqRow {
    /// (regime, stack row, shock, coefficient)
    pub terms: Vec<(usize, usize, usize, f64)>,
    pub label: String,
}

/// Compiled restriction program.
#[derive(Clone, Debug)]
pub struct RestrictionProgram {
    pub dims: ModelDims,
    pub transform: TransformSpec,
    /// Internal shock order: `shock_perm[j]` is the original shock index in
    /// slot `j` after sorting by descending restriction count.
    shock_perm: Vec<usize>,
    /// Per internal shock: implicit matrix `R_j` (`f_j x s*g`).
    r: Vec<DMatrix<f64>>,
    /// Per internal shock: explicit basis `S_j` (`s*g x tau_j`) in the
    /// free-variable convention, annihilated by `R_j`.
    s: Vec<DMatrix<f64>>,
    /// Per internal shock, per row: the set of regimes the row references.
    row_regimes: Vec<Vec<Vec<usize>>>,
    /// Per internal shock: a row-to-regime assignment realizing the
    /// recursive pattern `f_{p,j} = n - j - 1` (zero-based j), when one
    /// exists.
    recursive_assignment: Vec<Option<Vec<usize>>>,
    ineq: Vec<IneqRow>,
    fev: Vec<FevRestriction>,
}

impl RestrictionProgram {
    /// Compile declarations into the matrix program.
    pub fn compile(
        dims: ModelDims,
        transform: TransformSpec,
        decls: &[RestrictionDecl],
    ) -> Result<Self> {
        let n = dims.n;
        let s = dims.s;
        let g = transform.g(n);

        let mut eq_rows: Vec<Vec<EqualityRow>> = vec![Vec::new(); n];
        let mut ineq = Vec::new();
        let mut fev = Vec::new();

        for (idx, decl) in decls.iter().enumerate() {
            match decl {
                RestrictionDecl::Zero { entry } => {
                    let (shock, row) = entry.locate(&transform, &dims)?;
                    eq_rows[shock].push(EqualityRow {
                        shock,
                        terms: vec![(entry.regime, row, 1.0)],
                    });
                }
                RestrictionDecl::EqualAcrossRegimes { entry, other_regime } => {
                    if *other_regime >= s || *other_regime == entry.regime {
                        return Err(Error::IndexOutOfRange(format!(
                            "restriction {idx}: invalid regime pair ({}, {})",
                            entry.regime, other_regime
                        )));
                    }
                    let (shock, row) = entry.locate(&transform, &dims)?;
                    eq_rows[shock].push(EqualityRow {
                        shock,
                        terms: vec![(entry.regime, row, 1.0), (*other_regime, row, -1.0)],
                    });
                }
                RestrictionDecl::Sign { entry, direction } => {
                    let (shock, row) = entry.locate(&transform, &dims)?;
                    let coeff = match direction {
                        Direction::NonNegative => 1.0,
                        Direction::NonPositive => -1.0,
                    };
                    ineq.push(IneqRow {
                        terms: vec![(entry.regime, row, shock, coeff)],
                        label: format!("sign[{idx}]"),
                    });
                }
                RestrictionDecl::Ranking { terms, direction } => {
                    if terms.is_empty() {
                        return Err(Error::Invalid(format!("restriction {idx}: empty ranking")));
                    }
                    let sgn = match direction {
                        Direction::NonNegative => 1.0,
                        Direction::NonPositive => -1.0,
                    };
                    let mut compiled = Vec::new();
                    for t in terms {
                        let (shock, row) = t.entry.locate(&transform, &dims)?;
                        compiled.push((t.entry.regime, row, shock, sgn * t.weight));
                    }
                    ineq.push(IneqRow {
                        terms: compiled,
                        label: format!("ranking[{idx}]"),
                    });
                }
                RestrictionDecl::FevBound(f) => {
                    if f.variable >= n || f.shock >= n {
                        return Err(Error::IndexOutOfRange(format!("restriction {idx}: {f:?}")));
                    }
                    if f.weights.len() != s {
                        return Err(Error::Invalid(format!(
                            "restriction {idx}: need {s} regime weights, got {}",
                            f.weights.len()
                        )));
                    }
                    if let Some(r) = &f.right {
                        if r.shock >= n {
                            return Err(Error::IndexOutOfRange(format!("restriction {idx}: {f:?}")));
                        }
                        if r.weights.len() != s {
                            return Err(Error::Invalid(format!(
                                "restriction {idx}: right side needs {s} weights",
                                )));
                        }
                    }
                    if f.lower.is_none() && f.upper.is_none() {
                        return Err(Error::Invalid(format!(
                            "restriction {idx}: FEV bound without bounds"
                        )));
                    }
                    fev.push(f.clone());
                }
            }
        }

        // Order shocks by descending restriction count (stable, so ties keep
        // the original order); record the permutation.
        let mut shock_perm: Vec<usize> = (0..n).collect();
        shock_perm.sort_by_key(|&j| std::cmp::Reverse(eq_rows[j].len()));

        let mut r_mats = Vec::with_capacity(n);
        let mut s_mats = Vec::with_capacity(n);
        let mut row_regimes = Vec::with_capacity(n);
        let mut recursive_assignment = Vec::with_capacity(n);

        for (internal_j, &orig) in shock_perm.iter().enumerate() {
            let rows = &eq_rows[orig];
            let fj = rows.len();
            let mut rj = DMatrix::zeros(fj, s * g);
            let mut regs: Vec<Vec<usize>> = Vec::with_capacity(fj);
            for (ri, row) in rows.iter().enumerate() {
                let mut touched = Vec::new();
                for &(p, grow, c) in &row.terms {
                    rj[(ri, p * g + grow)] += c;
                    if !touched.contains(&p) {
                        touched.push(p);
                    }
                }
                touched.sort_unstable();
                regs.push(touched);
            }
            if fj > 0 {
                let rk = linalg::rank(&rj);
                if rk < fj {
                    return Err(Error::RankDeficientR {
                        shock: orig,
                        rows: fj,
                        rank: rk,
                    });
                }
            }
            let sj = linalg::rref_null_basis(&rj);
            let needed_per_regime = n - 1 - internal_j.min(n - 1);
            recursive_assignment.push(assign_rows_to_regimes(&regs, s, needed_per_regime));
            r_mats.push(rj);
            s_mats.push(sj);
            row_regimes.push(regs);
        }

        Ok(Self {
            dims,
            transform,
            shock_perm,
            r: r_mats,
            s: s_mats,
            row_regimes,
            recursive_assignment,
            ineq,
            fev,
        })
    }

    pub fn g(&self) -> usize {
        self.transform.g(self.dims.n)
    }

    /// Restriction count for internal shock slot `j`.
    pub fn f(&self, j: usize) -> usize {
        self.r[j].nrows()
    }

    /// Total restriction count.
    pub fn f_total(&self) -> usize {
        (0..self.dims.n).map(|j| self.f(j)).sum()
    }

    /// Free-parameter count `tau_j = s*g - f_j`.
    pub fn tau(&self, j: usize) -> usize {
        self.s[j].ncols()
    }

    /// Original shock index occupying internal slot `j`.
    pub fn original_shock(&self, j: usize) -> usize {
        self.shock_perm[j]
    }

    /// Internal slot of an original shock.
    pub fn internal_slot(&self, original: usize) -> usize {
        self.shock_perm
            .iter()
            .position(|&o| o == original)
            .expect("permutation covers all shocks")
    }

    pub fn r_matrix(&self, j: usize) -> &DMatrix<f64> {
        &self.r[j]
    }

    pub fn s_matrix(&self, j: usize) -> &DMatrix<f64> {
        &self.s[j]
    }

    /// Column block of `R_j` for regime `p` (`f_j x g`).
    pub fn r_star(&self, j: usize, p: usize) -> DMatrix<f64> {
        let g = self.g();
        self.r[j].view((0, p * g), (self.r[j].nrows(), g)).into_owned()
    }

    /// Row block of `S_k` for regime `p` (`g x tau_k`).
    pub fn s_star(&self, k: usize, p: usize) -> DMatrix<f64> {
        let g = self.g();
        self.s[k].view((p * g, 0), (g, self.s[k].ncols())).into_owned()
    }

    /// Regimes referenced by each equality row of internal shock `j`.
    pub fn row_regimes(&self, j: usize) -> &[Vec<usize>] {
        &self.row_regimes[j]
    }

    /// Row-to-regime assignment realizing `f_{p,j} = n - j` (one-based j),
    /// when the pattern admits one.
    pub fn recursive_assignment(&self, j: usize) -> Option<&[usize]> {
        self.recursive_assignment[j].as_deref()
    }

    pub fn inequalities(&self) -> &[IneqRow] {
        &self.ineq
    }

    pub fn fev_restrictions(&self) -> &[FevRestriction] {
        &self.fev
    }

    pub fn has_inequalities(&self) -> bool {
        !self.ineq.is_empty() || !self.fev.is_empty()
    }

    /// True when every internal shock satisfies `f_j = s (n - j)` and a
    /// per-regime row assignment with `f_{p,j} = n - j` exists
    /// (recursive just identification).
    pub fn is_recursively_just_identified(&self) -> bool {
        let (n, s) = (self.dims.n, self.dims.s);
        (0..n).all(|j| self.f(j) == s * (n - 1 - j) && self.recursive_assignment[j].is_some())
    }

    /// True when the total count equals `s * n(n-1)/2` (just identification
    /// by count).
    pub fn is_count_just_identified(&self) -> bool {
        self.f_total() == self.dims.s * self.dims.n_tilde()
    }

    /// Set identification: some shock column carries fewer restrictions
    /// than the recursive pattern, and none carries more.
    pub fn is_set_identified(&self) -> bool {
        let (n, s) = (self.dims.n, self.dims.s);
        let mut some_below = false;
        for j in 0..n {
            let quota = s * (n - 1 - j);
            if self.f(j) > quota {
                return false;
            }
            if self.f(j) < quota {
                some_below = true;
            }
        }
        some_below
    }

    /// For internal shock `j`, a regime processing order such that every
    /// equality row (under the recursive assignment) references only its own
    /// regime or regimes processed earlier. `None` when no such order exists
    /// or the recursive assignment is missing.
    pub fn sequential_ordering(&self, j: usize) -> Option<Vec<usize>> {
        let assignment = self.recursive_assignment[j].as_deref()?;
        let s = self.dims.s;
        // deps[p] = set of regimes that must precede p
        let mut deps: Vec<Vec<usize>> = vec![Vec::new(); s];
        for (row, &owner) in assignment.iter().enumerate() {
            for &touched in &self.row_regimes[j][row] {
                if touched != owner && !deps[owner].contains(&touched) {
                    deps[owner].push(touched);
                }
            }
        }
        // Kahn's algorithm, lexicographically smallest order.
        let mut order = Vec::with_capacity(s);
        let mut placed = vec![false; s];
        while order.len() < s {
            let next = (0..s).find(|&p| {
                !placed[p] && deps[p].iter().all(|&d| placed[d])
            })?;
            placed[next] = true;
            order.push(next);
        }
        Some(order)
    }

    /// The stacked transform `F(phi_p)` blocks for every regime.
    pub fn f_stacks(&self, model: &RegimeModel) -> Result<Vec<DMatrix<f64>>> {
        (0..self.dims.s)
            .map(|p| self.transform.evaluate_f(model, p))
            .collect()
    }

    /// The `s*g x n` stacked restricted object `G = [F(phi_p) Q_p]_p` with
    /// shocks in original column order.
    pub fn evaluate_g(&self, model: &RegimeModel, q: &OrthogonalBlock) -> Result<DMatrix<f64>> {
        let g = self.g();
        let s = self.dims.s;
        let n = self.dims.n;
        let mut out = DMatrix::zeros(s * g, n);
        for p in 0..s {
            let f = self.transform.evaluate_f(model, p)?;
            out.view_mut((p * g, 0), (g, n)).copy_from(&(f * q.block(p)));
        }
        Ok(out)
    }

    /// Equality residuals `R_j G e_j` per internal shock.
    pub fn equality_residual(
        &self,
        model: &RegimeModel,
        q: &OrthogonalBlock,
    ) -> Result<Vec<DVector<f64>>> {
        let gq = self.evaluate_g(model, q)?;
        Ok((0..self.dims.n)
            .map(|j| {
                let col = gq.column(self.shock_perm[j]).into_owned();
                &self.r[j] * col
            })
            .collect())
    }

    /// Largest absolute equality residual.
    pub fn max_equality_residual(&self, model: &RegimeModel, q: &OrthogonalBlock) -> Result<f64> {
        Ok(self
            .equality_residual(model, q)?
            .iter()
            .map(|v| v.amax())
            .fold(0.0, f64::max))
    }

    /// Sign/ranking margins evaluated at `Q` (all should be `>= -tol`).
    pub fn inequality_margins(
        &self,
        model: &RegimeModel,
        q: &OrthogonalBlock,
    ) -> Result<Vec<(String, f64)>> {
        let gq = self.evaluate_g(model, q)?;
        let g = self.g();
        Ok(self
            .ineq
            .iter()
            .map(|row| {
                let margin: f64 = row
                    .terms
                    .iter()
                    .map(|&(p, grow, shock, c)| c * gq[(p * g + grow, shock)])
                    .sum();
                (row.label.clone(), margin)
            })
            .collect())
    }

    /// FEV restriction values with their bounds.
    pub fn fev_values(
        &self,
        model: &RegimeModel,
        q: &OrthogonalBlock,
    ) -> Result<Vec<(String, f64, Option<f64>, Option<f64>)>> {
        let mut out = Vec::new();
        for (idx, f) in self.fev.iter().enumerate() {
            let mut value = 0.0;
            for p in 0..self.dims.s {
                if f.weights[p] != 0.0 {
                    let kernel = fev_kernel(model.regime(p), f.variable, f.horizon)?;
                    let qj = q.block(p).column(f.shock);
                    value += f.weights[p] * (qj.transpose() * &kernel * qj)[(0, 0)];
                }
            }
            if let Some(right) = &f.right {
                for p in 0..self.dims.s {
                    if right.weights[p] != 0.0 {
                        let kernel = fev_kernel(model.regime(p), f.variable, f.horizon)?;
                        let qr = q.block(p).column(right.shock);
                        value -= right.weights[p] * (qr.transpose() * &kernel * qr)[(0, 0)];
                    }
                }
            }
            out.push((format!("fev[{idx}]"), value, f.lower, f.upper));
        }
        Ok(out)
    }

    /// All inequality-type conditions: sign/ranking margins, FEV bounds and
    /// the normalization rule.
    pub fn inequality_satisfied(&self, model: &RegimeModel, q: &OrthogonalBlock) -> Result<bool> {
        for (_, margin) in self.inequality_margins(model, q)? {
            if margin < -INEQ_TOL {
                return Ok(false);
            }
        }
        for (_, value, lo, hi) in self.fev_values(model, q)? {
            if let Some(lo) = lo {
                if value < lo - INEQ_TOL {
                    return Ok(false);
                }
            }
            if let Some(hi) = hi {
                if value > hi + INEQ_TOL {
                    return Ok(false);
                }
            }
        }
        Ok(is_normalized(model, q))
    }

    /// Whether internal shock slot `j` appears in any declared sign or
    /// ranking restriction.
    pub fn shock_has_declared_sign(&self, original_shock: usize) -> bool {
        self.ineq
            .iter()
            .any(|row| row.terms.iter().any(|&(_, _, s, _)| s == original_shock))
    }
}

/// Search for an assignment of equality rows to regimes such that each
/// regime owns exactly `quota` rows and every row is owned by a regime it
/// references (rows referencing no regime can go anywhere; they do not occur
/// in practice). Small backtracking search; row counts stay tiny.
fn assign_rows_to_regimes(
    row_regimes: &[Vec<usize>],
    s: usize,
    quota: usize,
) -> Option<Vec<usize>> {
    if row_regimes.len() != s * quota {
        return None;
    }
    let mut counts = vec![0usize; s];
    let mut assignment = vec![usize::MAX; row_regimes.len()];
    fn backtrack(
        row_regimes: &[Vec<usize>],
        quota: usize,
        row: usize,
        counts: &mut [usize],
        assignment: &mut [usize],
    ) -> bool {
        if row == row_regimes.len() {
            return true;
        }
        let candidates: Vec<usize> = if row_regimes[row].is_empty() {
            (0..counts.len()).collect()
        } else {
            row_regimes[row].clone()
        };
        for p in candidates {
            if counts[p] < quota {
                counts[p] += 1;
                assignment[row] = p;
                if backtrack(row_regimes, quota, row + 1, counts, assignment) {
                    return true;
                }
                counts[p] -= 1;
                assignment[row] = usize::MAX;
            }
        }
        false
    }
    if backtrack(row_regimes, quota, 0, &mut counts, &mut assignment) {
        Some(assignment)
    } else {
        None
    }
}

/// Diagonal of the contemporaneous matrix `A0 = Q' Sigma_tr^{-1}` in one
/// regime.
fn a0_diagonal(model: &RegimeModel, q: &DMatrix<f64>, p: usize) -> Vec<f64> {
    let regime = model.regime(p);
    let n = regime.n();
    // A0 = Q' Sigma_tr^{-1}; diag entry i = q_i' (Sigma_tr^{-1} e_i).
    let inv = regime
        .sigma_tr()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cached Cholesky factor is invertible");
    (0..n).map(|i| q.column(i).dot(&inv.column(i))).collect()
}

/// The normalization rule: the diagonal of `A0 = Q' Sigma_tr^{-1}` is
/// weakly positive in every regime (ties at zero pass).
pub fn is_normalized(model: &RegimeModel, q: &OrthogonalBlock) -> bool {
    (0..q.s()).all(|p| a0_diagonal(model, q.block(p), p).iter().all(|&d| d >= -INEQ_TOL))
}

/// Flip rotation columns so the normalization rule holds; errors when a
/// diagonal entry is numerically zero and the sign cannot be decided.
pub fn apply_normalization(model: &RegimeModel, q: &OrthogonalBlock) -> Result<OrthogonalBlock> {
    let mut blocks = Vec::with_capacity(q.s());
    for p in 0..q.s() {
        let mut b = q.block(p).clone();
        let diag = a0_diagonal(model, &b, p);
        for (i, d) in diag.iter().enumerate() {
            if d.abs() < 1e-14 {
                return Err(Error::NormalizationUndefined { regime: p, entry: i });
            }
            if *d < 0.0 {
                for r in 0..b.nrows() {
                    b[(r, i)] = -b[(r, i)];
                }
            }
        }
        blocks.push(b);
    }
    OrthogonalBlock::new(blocks)
}

/// Normalize-then-revalidate: flips columns by the rule and keeps the result
/// only when the equality restrictions still hold (a flip can break a
/// cross-regime stability restriction, in which case the candidate family
/// has no normalized member and is discarded).
pub fn normalize_candidate(
    program: &RestrictionProgram,
    model: &RegimeModel,
    q: &OrthogonalBlock,
) -> Result<Option<OrthogonalBlock>> {
    let flipped = match apply_normalization(model, q) {
        Ok(f) => f,
        Err(Error::NormalizationUndefined { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    if program.max_equality_residual(model, &flipped)? <= EQUALITY_TOL {
        Ok(Some(flipped))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReducedFormRegime;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn zero(target: TargetKind, horizon: usize, regime: usize, row: usize, column: usize) -> RestrictionDecl {
        RestrictionDecl::Zero {
            entry: EntryRef { target, horizon, regime, row, column },
        }
    }

    pub(crate) fn stability(
        target: TargetKind,
        horizon: usize,
        regime: usize,
        other: usize,
        row: usize,
        column: usize,
    ) -> RestrictionDecl {
        RestrictionDecl::EqualAcrossRegimes {
            entry: EntryRef { target, horizon, regime, row, column },
            other_regime: other,
        }
    }

    /// Appendix-style trivariate two-regime program: first regime lower
    /// triangular, shared (1,1) coefficient, extra zeros at (1,3) and (2,3)
    /// in the second regime.
    pub(crate) fn trivariate_two_regime_decls() -> Vec<RestrictionDecl> {
        vec![
            // shock 1 rows, in print order
            zero(TargetKind::A0, 0, 0, 0, 1),
            zero(TargetKind::A0, 0, 0, 0, 2),
            stability(TargetKind::A0, 0, 0, 1, 0, 0),
            zero(TargetKind::A0, 0, 1, 0, 2),
            // shock 2 rows
            zero(TargetKind::A0, 0, 0, 1, 2),
            zero(TargetKind::A0, 0, 1, 1, 2),
        ]
    }

    fn dims32() -> ModelDims {
        ModelDims::new(3, 1, 2).unwrap()
    }

    #[test]
    fn trivariate_fixture_compiles_to_printed_matrices() {
        let program = RestrictionProgram::compile(
            dims32(),
            TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap(),
            &trivariate_two_regime_decls(),
        )
        .unwrap();

        assert_eq!(program.f(0), 4);
        assert_eq!(program.f(1), 2);
        assert_eq!(program.f(2), 0);
        assert_eq!(program.original_shock(0), 0);

        let r1_expected = DMatrix::from_row_slice(
            4,
            6,
            &[
                0.0, 1.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, -1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(program.r_matrix(0), &r1_expected);

        let s1_expected = DMatrix::from_row_slice(
            6,
            2,
            &[
                1.0, 0.0, //
                0.0, 0.0, //
                0.0, 0.0, //
                1.0, 0.0, //
                0.0, 1.0, //
                0.0, 0.0,
            ],
        );
        assert_eq!(program.s_matrix(0), &s1_expected);

        let r2_expected =
            DMatrix::from_row_slice(2, 6, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(program.r_matrix(1), &r2_expected);
        assert_eq!(program.s_matrix(2), &DMatrix::identity(6, 6));

        assert!(program.is_recursively_just_identified());
        assert_eq!(program.sequential_ordering(0), Some(vec![0, 1]));
    }

    #[test]
    fn empty_program_has_identity_bases() {
        let program = RestrictionProgram::compile(
            dims32(),
            TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap(),
            &[],
        )
        .unwrap();
        for j in 0..3 {
            assert_eq!(program.f(j), 0);
            assert_eq!(program.s_matrix(j), &DMatrix::identity(6, 6));
        }
        assert!(!program.is_recursively_just_identified());
        assert!(program.is_set_identified());
    }

    #[test]
    fn duplicate_restriction_is_rank_deficient() {
        let decls = vec![
            zero(TargetKind::A0, 0, 0, 0, 1),
            zero(TargetKind::A0, 0, 0, 0, 1),
        ];
        let err = RestrictionProgram::compile(
            dims32(),
            TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap(),
            &decls,
        )
        .unwrap_err();
        assert!(matches!(err, Error::RankDeficientR { .. }));
    }

    #[test]
    fn unlisted_transform_target_is_rejected() {
        let decls = vec![zero(TargetKind::Irf, 2, 0, 0, 1)];
        let err = RestrictionProgram::compile(
            dims32(),
            TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap(),
            &decls,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InadmissibleTransform(_)));
    }

    fn identity_model(n: usize, s: usize) -> RegimeModel {
        let regimes = (0..s)
            .map(|_| {
                ReducedFormRegime::new(
                    DVector::zeros(n),
                    vec![DMatrix::zeros(n, n)],
                    DMatrix::identity(n, n),
                )
                .unwrap()
            })
            .collect();
        RegimeModel::synthetic(regimes).unwrap()
    }

    fn random_model(n: usize, s: usize, seed: u64) -> RegimeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regimes = (0..s)
            .map(|_| {
                let raw = DMatrix::from_fn(n, n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
                let lags = vec![raw * 0.3];
                let gmat = DMatrix::from_fn(n, n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
                let sigma = &gmat * gmat.transpose() + DMatrix::identity(n, n) * 0.5;
                ReducedFormRegime::new(DVector::zeros(n), lags, sigma).unwrap()
            })
            .collect();
        RegimeModel::synthetic(regimes).unwrap()
    }

    #[test]
    fn evaluate_g_identity_cases() {
        let model = identity_model(3, 2);
        let spec = TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap();
        let program = RestrictionProgram::compile(dims32(), spec, &[]).unwrap();
        let q = OrthogonalBlock::identity(3, 2);
        let gq = program.evaluate_g(&model, &q).unwrap();
        assert!(linalg::max_abs_diff(&gq.view((0, 0), (3, 3)).into_owned(), &DMatrix::identity(3, 3)) < 1e-12);

        let spec_ir = TransformSpec::new(vec![TransformKind::Ir(0)]).unwrap();
        let model_r = random_model(3, 2, 77);
        let program_ir = RestrictionProgram::compile(dims32(), spec_ir, &[]).unwrap();
        let gq_ir = program_ir.evaluate_g(&model_r, &q).unwrap();
        for p in 0..2 {
            assert!(
                linalg::max_abs_diff(
                    &gq_ir.view((3 * p, 0), (3, 3)).into_owned(),
                    model_r.regime(p).sigma_tr()
                ) < 1e-12
            );
        }
    }

    #[test]
    fn evaluate_g_commutes_with_right_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = random_model(3, 2, 4);
        let spec = TransformSpec::new(vec![
            TransformKind::A0Transpose,
            TransformKind::Ir(0),
            TransformKind::Ir(2),
            TransformKind::CirInfinity,
        ])
        .unwrap();
        let program = RestrictionProgram::compile(dims32(), spec, &[]).unwrap();
        let q = OrthogonalBlock::new(vec![
            linalg::haar_orthogonal(3, &mut rng),
            linalg::haar_orthogonal(3, &mut rng),
        ])
        .unwrap();
        let qt = OrthogonalBlock::new(vec![
            linalg::haar_orthogonal(3, &mut rng),
            linalg::haar_orthogonal(3, &mut rng),
        ])
        .unwrap();
        let combined = OrthogonalBlock::new(
            (0..2).map(|p| q.block(p) * qt.block(p)).collect(),
        )
        .unwrap();
        let lhs = program.evaluate_g(&model, &combined).unwrap();
        let base = program.evaluate_g(&model, &q).unwrap();
        let g = program.g();
        for p in 0..2 {
            let expected = base.view((p * g, 0), (g, 3)).into_owned() * qt.block(p);
            assert!(linalg::max_abs_diff(&lhs.view((p * g, 0), (g, 3)).into_owned(), &expected) < 1e-12);
        }
    }

    #[test]
    fn residuals_zero_on_admissible_triangular_rotation() {
        // With identity covariance the identity rotation satisfies the
        // within-regime triangular rows of the fixture.
        let model = identity_model(3, 2);
        let program = RestrictionProgram::compile(
            dims32(),
            TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap(),
            &trivariate_two_regime_decls(),
        )
        .unwrap();
        let q = OrthogonalBlock::identity(3, 2);
        let res = program.max_equality_residual(&model, &q).unwrap();
        assert!(res < 1e-12);
    }

    #[test]
    fn residuals_generically_nonzero_for_random_rotation() {
        let model = random_model(3, 2, 8);
        let program = RestrictionProgram::compile(
            dims32(),
            TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap(),
            &trivariate_two_regime_decls(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hits = 0;
        for _ in 0..20 {
            let q = OrthogonalBlock::new(vec![
                linalg::haar_orthogonal(3, &mut rng),
                linalg::haar_orthogonal(3, &mut rng),
            ])
            .unwrap();
            if program.max_equality_residual(&model, &q).unwrap() > 1e-4 {
                hits += 1;
            }
        }
        assert_eq!(hits, 20, "random rotations should generically violate restrictions");
    }

    #[test]
    fn sign_margin_flips_with_column_sign() {
        let model = random_model(2, 1, 15);
        let dims = ModelDims::new(2, 1, 1).unwrap();
        let decls = vec![RestrictionDecl::Sign {
            entry: EntryRef {
                target: TargetKind::Irf,
                horizon: 0,
                regime: 0,
                row: 0,
                column: 0,
            },
            direction: Direction::NonNegative,
        }];
        let program = RestrictionProgram::compile(
            dims,
            TransformSpec::new(vec![TransformKind::Ir(0)]).unwrap(),
            &decls,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qmat = linalg::haar_orthogonal(2, &mut rng);
        let q = OrthogonalBlock::new(vec![qmat.clone()]).unwrap();
        let mut flipped_mat = qmat.clone();
        for r in 0..2 {
            flipped_mat[(r, 0)] = -flipped_mat[(r, 0)];
        }
        let flipped = OrthogonalBlock::new(vec![flipped_mat]).unwrap();
        let m1 = program.inequality_margins(&model, &q).unwrap()[0].1;
        let m2 = program.inequality_margins(&model, &flipped).unwrap()[0].1;
        assert!((m1 + m2).abs() < 1e-12);
    }

    #[test]
    fn no_inequalities_means_margins_always_pass_after_normalization() {
        let model = random_model(2, 2, 23);
        let dims = ModelDims::new(2, 1, 2).unwrap();
        let program = RestrictionProgram::compile(
            dims,
            TransformSpec::new(vec![TransformKind::Ir(0)]).unwrap(),
            &[],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = OrthogonalBlock::new(vec![
                linalg::haar_orthogonal(2, &mut rng),
                linalg::haar_orthogonal(2, &mut rng),
            ])
            .unwrap();
            let nq = apply_normalization(&model, &q).unwrap();
            assert!(program.inequality_satisfied(&model, &nq).unwrap());
        }
    }

    #[test]
    fn normalization_restores_flipped_column_and_is_idempotent() {
        let model = random_model(3, 2, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = OrthogonalBlock::new(vec![
            linalg::haar_orthogonal(3, &mut rng),
            linalg::haar_orthogonal(3, &mut rng),
        ])
        .unwrap();
        let normalized = apply_normalization(&model, &q).unwrap();
        assert!(is_normalized(&model, &normalized));
        let again = apply_normalization(&model, &normalized).unwrap();
        assert!(normalized.distance(&again) < 1e-15);

        // negate one column and check it is restored
        let mut blocks: Vec<DMatrix<f64>> = normalized.blocks().to_vec();
        for r in 0..3 {
            blocks[1][(r, 2)] = -blocks[1][(r, 2)];
        }
        let tampered = OrthogonalBlock::new(blocks).unwrap();
        let restored = apply_normalization(&model, &tampered).unwrap();
        assert!(restored.distance(&normalized) < 1e-12);
    }

    #[test]
    fn fev_restriction_consistent_with_direct_contribution() {
        use crate::model::fev_contribution;
        let model = random_model(2, 2, 55);
        let dims = ModelDims::new(2, 1, 2).unwrap();
        let decls = vec![RestrictionDecl::FevBound(FevRestriction {
            variable: 0,
            horizon: 3,
            shock: 0,
            weights: vec![1.0, 0.0],
            right: Some(FevSide {
                shock: 0,
                weights: vec![0.0, 1.0],
            }),
            lower: Some(0.0),
            upper: None,
        })];
        let program = RestrictionProgram::compile(
            dims,
            TransformSpec::new(vec![TransformKind::Ir(0)]).unwrap(),
            &decls,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let q = OrthogonalBlock::new(vec![
            linalg::haar_orthogonal(2, &mut rng),
            linalg::haar_orthogonal(2, &mut rng),
        ])
        .unwrap();
        let vals = program.fev_values(&model, &q).unwrap();
        let direct = fev_contribution(model.regime(0), q.block(0), 0, 0, 3).unwrap()
            - fev_contribution(model.regime(1), q.block(1), 0, 0, 3).unwrap();
        assert!((vals[0].1 - direct).abs() < 1e-12);
    }

    #[test]
    fn compile_is_permutation_stable() {
        let base = trivariate_two_regime_decls();
        let mut shuffled = base.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 4);
        let spec = TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap();
        let p1 = RestrictionProgram::compile(dims32(), spec.clone(), &base).unwrap();
        let p2 = RestrictionProgram::compile(dims32(), spec, &shuffled).unwrap();
        for j in 0..3 {
            assert_eq!(p1.f(j), p2.f(j));
            if p1.f(j) == 0 {
                continue;
            }
            // same row space: stacking both must not increase the rank
            let stacked = DMatrix::from_fn(p1.f(j) + p2.f(j), 6, |r, c| {
                if r < p1.f(j) {
                    p1.r_matrix(j)[(r, c)]
                } else {
                    p2.r_matrix(j)[(r - p1.f(j), c)]
                }
            });
            assert_eq!(linalg::rank(&stacked), p1.f(j));
        }
    }

    #[test]
    fn r_annihilates_s_and_spans_complement() {
        let program = RestrictionProgram::compile(
            dims32(),
            TransformSpec::new(vec![TransformKind::A0Transpose]).unwrap(),
            &trivariate_two_regime_decls(),
        )
        .unwrap();
        for j in 0..3 {
            let r = program.r_matrix(j);
            let s = program.s_matrix(j);
            if r.nrows() > 0 {
                assert!(linalg::max_abs(&(r * s)) < 1e-12);
            }
            // [R' | S] spans the whole space
            let mut stacked = DMatrix::zeros(6, r.nrows() + s.ncols());
            stacked.view_mut((0, 0), (6, r.nrows())).copy_from(&r.transpose());
            stacked.view_mut((0, r.nrows()), (6, s.ncols())).copy_from(s);
            assert_eq!(linalg::rank(&stacked), 6);
        }
    }
}
