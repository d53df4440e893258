//! The non-learned UFD-penalty method and the KKT residual used as the
//! stationarity check everywhere.
//!
//! Each outer step solves the penalized direction subproblem with projected
//! subgradient iterations, then moves by `α ∈ (0, 1/M]` chosen by a line
//! search on `f`. The step is additionally capped by the largest feasible step
//! along `d`, so an inexact direction can never leave the feasible set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::net::STEP_DENOM_FLOOR;
use crate::penalty::{build_subproblem, pgm_solve, PenaltyConfig, StepRule, SubproblemData};
use crate::problem::{ObjectiveSpec, ProblemInstance, FEAS_TOL};
use crate::projection::{build_projector, ProjectorCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// Best of a halving grid of 32 points in `(0, ᾱ]`, refined by golden section.
    #[default]
    Grid,
    /// Armijo backtracking from `ᾱ`.
    Backtracking,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalConfig {
    pub penalty: PenaltyConfig,
    pub inner_iters: usize,
    pub max_outer: usize,
    pub kkt_tol: f64,
    pub active_tol: f64,
    #[serde(default)]
    pub line_search: LineSearch,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            // M = 1 jams against nearly active rows on convex QPs; 100 does not
            penalty: PenaltyConfig { m: 100.0, ..PenaltyConfig::default() },
            inner_iters: 300,
            max_outer: 20_000,
            kkt_tol: 1e-4,
            active_tol: 1e-6,
            line_search: LineSearch::Grid,
        }
    }
}

impl ClassicalConfig {
    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        if self.inner_iters == 0 || self.max_outer == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        if !(self.kkt_tol > 0.0 && self.active_tol >= 0.0) {
            return Err(Error::Config("kkt_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `min ‖∇f + Gₐᵀλ + Aᵀμ‖₂` over `λ ≥ 0`, `μ` free.
    pub stationarity: f64,
    /// `maxⱼ |λⱼ gⱼ|`.
    pub comp_slack: f64,
    /// `max(0, −minⱼ λⱼ)`.
    pub dual_feas: f64,
    pub eq_violation: f64,
    pub ineq_violation: f64,
    pub active: Vec<usize>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// Whether the active gradients together with the equality rows are linearly independent.
    pub licq: bool,
}

/// KKT residual at `y` using a prebuilt projector for `A`.
pub fn kkt_residual_with(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    active_tol: f64,
    cache: &ProjectorCache,
) -> KktReport {
    let cons = &inst.constraints;
    let grad = inst.objective.gradient(y);
    let g_vals = cons.ineq_values(y);
    let active: Vec<usize> = (0..g_vals.len())
        .filter(|&j| g_vals[j] >= -active_tol)
        .collect();
    let ga = cons.g.select_rows(&active);

    // eliminate μ by working in null(A)
    let basis = cache.basis();
    let mut pg = grad.clone();
    pg.gemv(-1.0, basis, &basis.tr_mul(&grad), 1.0);
    let mut pga = ga.transpose();
    if !active.is_empty() {
        cache.null_space_part_columns(&mut pga);
    }
    let lam_active = linalg::nnls(&pga, &(-&pg));
    let resid_null = &pg + &pga * &lam_active;

    let mut full = grad;
    if !active.is_empty() {
        full.gemv_tr(1.0, &ga, &lam_active, 1.0);
    }
    let mu = -(cons.a_pinv().transpose() * &full);

    let mut lambda = vec![0.0; g_vals.len()];
    for (pos, &j) in active.iter().enumerate() {
        lambda[j] = lam_active[pos];
    }
    let comp_slack = lambda
        .iter()
        .zip(g_vals.iter())
        .map(|(l, g)| (l * g).abs())
        .fold(0.0, f64::max);
    let dual_feas = lambda.iter().copied().fold(0.0, |m: f64, l| m.max(-l));

    let licq = if active.is_empty() {
        true
    } else {
        let mut stacked = DMatrix::zeros(cons.n_eq() + active.len(), cons.n());
        stacked.rows_mut(0, cons.n_eq()).copy_from(&*cons.a);
        stacked.rows_mut(cons.n_eq(), active.len()).copy_from(&ga);
        linalg::rank(&stacked) == stacked.nrows()
    };

    KktReport {
        stationarity: resid_null.norm(),
        comp_slack,
        dual_feas,
        eq_violation: linalg::max_abs(&cons.eq_residual(y)),
        ineq_violation: linalg::max_or_neg_inf(&g_vals).max(0.0),
        active,
        lambda,
        mu: mu.iter().copied().collect(),
        licq,
    }
}

pub fn kkt_residual(inst: &ProblemInstance, y: &DVector<f64>, active_tol: f64) -> Result<KktReport> {
    inst.ensure_feasible(y, 1e-6)?;
    let cache = build_projector(&inst.constraints.a)?;
    Ok(kkt_residual_with(inst, y, active_tol, &cache))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxOuter,
    /// No usable descent direction although the KKT residual is above tolerance.
    Stalled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub f: f64,
    pub stationarity: f64,
    /// Step taken after this point; `0` for the final entry.
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct ClassicalOutcome {
    pub y: DVector<f64>,
    pub trace: Vec<TraceEntry>,
    pub status: SolveStatus,
    pub outer_steps: usize,
    pub kkt: KktReport,
}

/// Runs the UFD-penalty method from a feasible `y0`.
pub fn ufd_penalty_solve(
    inst: &ProblemInstance,
    y0: &DVector<f64>,
    cfg: &ClassicalConfig,
) -> Result<ClassicalOutcome> {
    cfg.validate()?;
    inst.ensure_feasible(y0, FEAS_TOL)?;
    let cache = build_projector(&inst.constraints.a)?;
    let obj = &inst.objective;
    let step_cap = 1.0 / cfg.penalty.m;
    let row_norms: Vec<f64> = inst.constraints.g.row_iter().map(|r| r.norm()).collect();
    let rule = StepRule::Normalized { scale: 1.0 };

    let mut y = y0.clone();
    let mut f = obj.value(&y);
    let mut trace = Vec::new();
    let mut warm: Option<DVector<f64>> = None;

    for k in 0..cfg.max_outer {
        let kkt = kkt_residual_with(inst, &y, cfg.active_tol, &cache);
        if kkt.stationarity <= cfg.kkt_tol {
            trace.push(TraceEntry { f, stationarity: kkt.stationarity, alpha: 0.0 });
            return Ok(ClassicalOutcome { y, trace, status: SolveStatus::Converged, outer_steps: k, kkt });
        }
        let sub = build_subproblem(inst, &y, &cache, &cfg.penalty)?;
        let d0 = warm.take().unwrap_or_else(|| -&sub.grad_f);
        let pgm = pgm_solve(&sub, &d0, cfg.inner_iters, &rule);
        let refined = refine_direction(&sub, &pgm.d);
        let d = refined.unwrap_or(pgm.d);

        let stalled = |trace: &mut Vec<TraceEntry>, y: DVector<f64>, kkt: KktReport| {
            trace.push(TraceEntry { f, stationarity: kkt.stationarity, alpha: 0.0 });
            Ok(ClassicalOutcome { y, trace: std::mem::take(trace), status: SolveStatus::Stalled, outer_steps: k, kkt })
        };
        if d.norm() < 1e-12 || sub.grad_f.dot(&d) >= 0.0 {
            return stalled(&mut trace, y, kkt);
        }
        let amax = step_bound(&inst.constraints.g, &row_norms, &sub.g_vals, &d, step_cap);
        let mut alpha = line_search(obj, &y, &d, amax, cfg.line_search);
        let mut y_next = &y + &d * alpha;
        let mut halvings = 0;
        while alpha > 0.0 && inst.max_violation(&y_next) > GUARD_TOL {
            halvings += 1;
            alpha = if halvings > 60 { 0.0 } else { alpha * 0.5 };
            y_next = &y + &d * alpha;
        }
        let mut f_next = obj.value(&y_next);
        if !(alpha > 0.0 && f_next <= f) {
            return stalled(&mut trace, y, kkt);
        }
        if let Some((y_land, f_land)) = try_landing(inst, &y_next, f_next, cfg.penalty.delta_g) {
            y_next = y_land;
            f_next = f_land;
        }
        trace.push(TraceEntry { f, stationarity: kkt.stationarity, alpha });
        y = y_next;
        f = f_next;
        warm = Some(d);
    }
    let kkt = kkt_residual_with(inst, &y, cfg.active_tol, &cache);
    trace.push(TraceEntry { f, stationarity: kkt.stationarity, alpha: 0.0 });
    let status = if kkt.stationarity <= cfg.kkt_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxOuter
    };
    Ok(ClassicalOutcome { y, trace, status, outer_steps: cfg.max_outer, kkt })
}

/// Violation allowed after a step; well inside the feasibility tolerance so
/// rounding cannot accumulate past it.
const GUARD_TOL: f64 = 1e-10;

/// Inequalities this close to the boundary are candidates for a landing step.
const LANDING_WINDOW: f64 = 1e-3;

/// Largest step keeping every inequality satisfied. Slopes at rounding level
/// relative to `‖aⱼ‖‖d‖` are ignored; the caller guards the result.
fn step_bound(g_mat: &DMatrix<f64>, row_norms: &[f64], g_vals: &DVector<f64>, d: &DVector<f64>, cap: f64) -> f64 {
    let s = g_mat * d;
    let dn = d.norm();
    let mut best = cap;
    for j in 0..s.len() {
        if s[j] > STEP_DENOM_FLOOR.max(1e-12 * row_norms[j] * dn) {
            best = best.min((-g_vals[j]).max(0.0) / s[j]);
        }
    }
    best
}

/// Moves a point that ended just short of an inequality onto it, when that
/// keeps feasibility and does not raise `f`. The move is the minimum-norm
/// correction that also leaves `A y` and every already active row unchanged.
///
/// Feasible-direction steps approach a constraint with a positive multiplier
/// only geometrically (the hinge offset shrinks with `gⱼ`), which stalls
/// progress once `gⱼ` is small but still outside the active margin.
fn try_landing(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    f: f64,
    delta_g: f64,
) -> Option<(DVector<f64>, f64)> {
    let cons = &inst.constraints;
    let g = cons.ineq_values(y);
    let active: Vec<usize> = (0..g.len()).filter(|&j| g[j] >= -delta_g).collect();
    let mut near: Vec<usize> = (0..g.len())
        .filter(|&j| g[j] < -delta_g && g[j] >= -LANDING_WINDOW)
        .collect();
    near.sort_by(|&a, &b| g[b].total_cmp(&g[a]));
    let (m, n) = (cons.n_eq(), cons.n());
    for j in near {
        let rows = m + active.len() + 1;
        if rows > n {
            continue;
        }
        let mut lhs = DMatrix::zeros(rows, n);
        lhs.rows_mut(0, m).copy_from(&*cons.a);
        for (pos, &k) in active.iter().enumerate() {
            lhs.row_mut(m + pos).copy_from(&cons.g.row(k));
        }
        lhs.row_mut(rows - 1).copy_from(&cons.g.row(j));
        let mut e = DVector::zeros(rows);
        e[rows - 1] = -g[j];
        let Ok(pinv) = linalg::pseudo_inverse(&lhs) else { continue };
        let delta = &pinv * &e;
        if (&lhs * &delta - &e).amax() > 1e-9 * g[j].abs().max(1e-12) + 1e-14 {
            continue;
        }
        let cand = y + delta;
        if inst.max_violation(&cand) > GUARD_TOL {
            continue;
        }
        let fc = inst.objective.value(&cand);
        if fc <= f {
            return Some((cand, fc));
        }
    }
    None
}

/// Exact solution of the direction subproblem restricted to `F`, warm-started
/// from an approximate direction.
///
/// For a guessed set `J` of tight hinges the minimizer of `⟨p, d⟩` over
/// `{A d = 0, ⟨aⱼ, d⟩ = bⱼ (j ∈ J), ‖d‖ ≤ 1}` is `d_J − ρ N p / ‖N p‖`, with
/// `d_J` the minimum-norm point of the affine slice, `N` the projector onto its
/// null space and `ρ = √(1 − ‖d_J‖²)`. `J` is updated primal-dual style until
/// the candidate satisfies every hinge and all multipliers are nonnegative.
/// Returns `None` when the iteration fails to settle; the caller then keeps
/// the approximate direction.
pub fn refine_direction(sub: &SubproblemData<'_>, d_approx: &DVector<f64>) -> Option<DVector<f64>> {
    let n = sub.n();
    let l = sub.b.len();
    let h = sub.cache.h();
    let m = h.ncols();
    let p = &sub.grad_f;
    if p.norm() == 0.0 {
        return Some(DVector::zeros(n));
    }
    // well below the rounding-level slopes that the step bound ignores
    let tol: Vec<f64> = (0..l).map(|j| 1e-13 * sub.grad_g.row(j).norm()).collect();

    let s0 = sub.grad_g * d_approx;
    let mut tight: Vec<bool> = (0..l).map(|j| s0[j] - sub.b[j] >= -1e-6 * (1.0 + sub.b[j].abs())).collect();

    for _ in 0..(4 * l + 10) {
        let idx: Vec<usize> = (0..l).filter(|&j| tight[j]).collect();
        let rows = m + idx.len();
        let mut lhs = DMatrix::zeros(rows, n);
        lhs.rows_mut(0, m).copy_from(&h.transpose());
        let mut rhs = DVector::zeros(rows);
        for (pos, &j) in idx.iter().enumerate() {
            lhs.row_mut(m + pos).copy_from(&sub.grad_g.row(j));
            rhs[m + pos] = sub.b[j];
        }
        let pinv = linalg::pseudo_inverse(&lhs).ok()?;
        let dj = &pinv * &rhs;
        let dj_norm2 = dj.norm_squared();
        if dj_norm2 > 1.0 + 1e-12 {
            // slice misses the ball: release the tight row farthest from the origin
            let (pos, _) = idx.iter().enumerate().max_by(|a, b| sub.b[*a.1].total_cmp(&sub.b[*b.1]))?;
            tight[idx[pos]] = false;
            continue;
        }
        let mut np = p - &pinv * (&lhs * p);
        // second pass: the first loses accuracy when p is nearly in the row space
        np -= &pinv * (&lhs * &np);
        let np_norm = np.norm();
        let (mut d, nu) = if np_norm > 1e-14 * p.norm() {
            let rho = (1.0 - dj_norm2).max(0.0).sqrt();
            (&dj - &np * (rho / np_norm), if rho > 0.0 { np_norm / rho } else { f64::INFINITY })
        } else {
            (dj.clone(), 0.0)
        };
        d -= &pinv * (&lhs * &d - &rhs);
        if !nu.is_finite() {
            return None;
        }
        // multipliers of p + ν d + Lᵀ [μ; λ] = 0
        let mult = -(pinv.transpose() * (p + &d * nu));
        let s = sub.grad_g * &d;
        let lam_scale = 1.0 + mult.amax();
        let most_negative = idx
            .iter()
            .enumerate()
            .map(|(pos, &j)| (j, mult[m + pos]))
            .filter(|&(_, lam)| lam < -1e-10 * lam_scale)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let most_violated = (0..l)
            .filter(|&j| !tight[j] && s[j] - sub.b[j] > tol[j])
            .max_by(|&a, &b| (s[a] - sub.b[a]).total_cmp(&(s[b] - sub.b[b])));
        match (most_negative, most_violated) {
            (None, None) => return Some(d),
            (neg, viol) => {
                if let Some((j, _)) = neg {
                    tight[j] = false;
                }
                if let Some(j) = viol {
                    tight[j] = true;
                }
            }
        }
    }
    None
}

/// Approximate `argmin f(y + αd)` over `α ∈ (0, amax]`.
pub fn line_search(obj: &ObjectiveSpec, y: &DVector<f64>, d: &DVector<f64>, amax: f64, rule: LineSearch) -> f64 {
    if amax <= 0.0 || !amax.is_finite() {
        return 0.0;
    }
    let eval = |a: f64| obj.value(&(y + d * a));
    match rule {
        LineSearch::Grid => {
            const POINTS: usize = 32;
            let grid: Vec<f64> = (0..POINTS).map(|i| amax * 0.5f64.powi(i as i32)).collect();
            let vals: Vec<f64> = grid.iter().map(|&a| eval(a)).collect();
            let (ibest, _) = vals
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            let lo = if ibest + 1 < POINTS { grid[ibest + 1] } else { 0.0 };
            let hi = if ibest > 0 { grid[ibest - 1] } else { amax };
            let (a_ref, f_ref) = golden_section(&eval, lo, hi, 80);
            if f_ref < vals[ibest] && a_ref > 0.0 {
                a_ref
            } else {
                grid[ibest]
            }
        }
        LineSearch::Backtracking => {
            let f0 = eval(0.0);
            let slope = obj.gradient(y).dot(d);
            let mut a = amax;
            for _ in 0..60 {
                if eval(a) <= f0 + 1e-4 * a * slope {
                    return a;
                }
                a *= 0.5;
            }
            a
        }
    }
}

fn golden_section(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{LinearConstraints, ObjectiveKind};
    use approx::assert_relative_eq;

    fn half_norm_on_simplex_line() -> ProblemInstance {
        let cons = LinearConstraints::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let obj = ObjectiveSpec::new(ObjectiveKind::Quadratic, DMatrix::identity(2, 2), DVector::zeros(2))
            .unwrap();
        ProblemInstance::new(0, obj, cons).unwrap()
    }

    #[test]
    fn kkt_at_analytic_optimum() {
        let inst = half_norm_on_simplex_line();
        let r = kkt_residual(&inst, &DVector::from_vec(vec![0.5, 0.5]), 1e-6).unwrap();
        assert!(r.stationarity <= 1e-10);
        assert_relative_eq!(r.mu[0], -0.5, epsilon = 1e-12);
        assert!(r.licq);
    }

    #[test]
    fn kkt_at_feasible_non_optimum() {
        let inst = half_norm_on_simplex_line();
        let r = kkt_residual(&inst, &DVector::from_vec(vec![1.0, 0.0]), 1e-6).unwrap();
        assert!(r.stationarity > 0.5);
    }

    #[test]
    fn kkt_with_active_inequality() {
        // min ½‖y‖² − 2y₁ s.t. y₃ = 0, y₁ ≤ 1; optimum at the bound with λ = 1
        let cons = LinearConstraints::new(
            DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]),
            DVector::from_vec(vec![0.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let obj = ObjectiveSpec::new(
            ObjectiveKind::Quadratic,
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![-2.0, 0.0, 0.0]),
        )
        .unwrap();
        let inst = ProblemInstance::new(0, obj, cons).unwrap();
        let r = kkt_residual(&inst, &DVector::from_vec(vec![1.0, 0.0, 0.0]), 1e-6).unwrap();
        assert_eq!(r.active, vec![0]);
        assert!(r.stationarity < 1e-12);
        assert_relative_eq!(r.lambda[0], 1.0, epsilon = 1e-12);
        assert_eq!(r.dual_feas, 0.0);
    }

    #[test]
    fn licq_failure_is_flagged() {
        let cons = LinearConstraints::new(
            DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]),
            DVector::from_vec(vec![0.0]),
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            DVector::from_vec(vec![0.0, 0.0]),
        )
        .unwrap();
        let obj = ObjectiveSpec::new(ObjectiveKind::Quadratic, DMatrix::identity(3, 3), DVector::zeros(3))
            .unwrap();
        let inst = ProblemInstance::new(0, obj, cons).unwrap();
        let r = kkt_residual(&inst, &DVector::zeros(3), 1e-6).unwrap();
        assert!(!r.licq);
    }

    #[test]
    fn starting_at_kkt_point_takes_no_steps() {
        let inst = half_norm_on_simplex_line();
        let out = ufd_penalty_solve(&inst, &DVector::from_vec(vec![0.5, 0.5]), &ClassicalConfig::default()).unwrap();
        assert_eq!(out.outer_steps, 0);
        assert_eq!(out.status, SolveStatus::Converged);
    }

    #[test]
    fn converges_on_simple_problem() {
        let inst = half_norm_on_simplex_line();
        let out = ufd_penalty_solve(&inst, &DVector::from_vec(vec![1.0, 0.0]), &ClassicalConfig::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        assert_relative_eq!(out.y[0], 0.5, epsilon = 1e-4);
        assert!(out.trace.windows(2).all(|w| w[1].f <= w[0].f + 1e-12));
    }

    #[test]
    fn first_direction_is_projected_steepest_descent_when_unconstrained() {
        let (inst, y) = crate::problem::random_instance_with_point(8, 2, 0, 5).unwrap();
        let cache = build_projector(&inst.constraints.a).unwrap();
        let sub = build_subproblem(&inst, &y, &cache, &PenaltyConfig::default()).unwrap();
        let pgm = pgm_solve(&sub, &(-&sub.grad_f), 300, &StepRule::Normalized { scale: 1.0 });
        let d = refine_direction(&sub, &pgm.d).unwrap();
        let pg = cache.null_space_part(&sub.grad_f);
        let expected = -&pg / pg.norm();
        assert!((&d - &expected).norm() < 1e-8);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let inst = half_norm_on_simplex_line();
        assert!(matches!(
            ufd_penalty_solve(&inst, &DVector::from_vec(vec![1.0, 1.0]), &ClassicalConfig::default()),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn line_search_finds_quadratic_minimizer() {
        let obj = ObjectiveSpec::new(ObjectiveKind::Quadratic, DMatrix::identity(1, 1), DVector::from_vec(vec![-0.3]))
            .unwrap();
        let a = line_search(&obj, &DVector::zeros(1), &DVector::from_element(1, 1.0), 1.0, LineSearch::Grid);
        // golden section on a flat minimum resolves α to about √ε
        assert_relative_eq!(a, 0.3, epsilon = 1e-7);
        let a = line_search(&obj, &DVector::zeros(1), &DVector::from_element(1, 1.0), 0.1, LineSearch::Grid);
        assert_relative_eq!(a, 0.1);
    }
}
