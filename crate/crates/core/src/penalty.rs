//! The hinge-penalty direction subproblem
//!
//! ```text
//!     minimize  Φ(d) = ⟨p, d⟩ + Σⱼ cⱼ max(⟨aⱼ, d⟩, bⱼ)   over d ∈ D
//! ```
//!
//! with `p = ∇f(y)`, `aⱼ = ∇gⱼ(y)`, `bⱼ = −M gⱼ(y)`, and its projected subgradient
//! solver.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ProblemInstance, FEAS_TOL};
use crate::projection::ProjectorCache;

/// How the per-constraint weights `cⱼ` are formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum WeightRule {
    /// `cⱼ = ‖∇f‖ / (ε − ½ M gⱼ)`
    #[default]
    InverseSlack,
    /// `cⱼ = exp(−δ gⱼ)`
    Exponential { delta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Uniform-feasibility constant; steps up to `1/M` keep UFD directions feasible.
    pub m: f64,
    /// Stabilizer in the weight denominator.
    pub epsilon: f64,
    /// Constraints with `−δ_g < gⱼ ≤ 0` are treated as active.
    pub delta_g: f64,
    #[serde(default)]
    pub weight_rule: WeightRule,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            m: 1.0,
            epsilon: 5e-4,
            delta_g: 1e-6,
            weight_rule: WeightRule::InverseSlack,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !(ok(self.m) && ok(self.epsilon) && ok(self.delta_g)) {
            return Err(Error::Config(format!(
                "penalty parameters must be positive: M = {}, ε = {}, δ_g = {}",
                self.m, self.epsilon, self.delta_g
            )));
        }
        if let WeightRule::Exponential { delta } = self.weight_rule {
            if !delta.is_finite() {
                return Err(Error::Config("exponential weight rate must be finite".into()));
            }
        }
        Ok(())
    }

    /// Inequality value with the active-set margin applied.
    #[inline]
    pub fn snap(&self, g: f64) -> f64 {
        if g > -self.delta_g {
            0.0
        } else {
            g
        }
    }

    /// Weight for one constraint given `‖∇f‖` and the snapped value of `gⱼ`.
    #[inline]
    pub fn weight(&self, grad_norm: f64, g_snapped: f64) -> f64 {
        match self.weight_rule {
            WeightRule::InverseSlack => grad_norm / (self.epsilon - 0.5 * self.m * g_snapped),
            WeightRule::Exponential { delta } => (-delta * g_snapped).exp(),
        }
    }

    /// Partial derivatives of [`Self::weight`] with respect to `‖∇f‖` and `gⱼ`.
    #[inline]
    pub fn weight_partials(&self, grad_norm: f64, g_snapped: f64) -> (f64, f64) {
        match self.weight_rule {
            WeightRule::InverseSlack => {
                let den = self.epsilon - 0.5 * self.m * g_snapped;
                (1.0 / den, grad_norm * 0.5 * self.m / (den * den))
            }
            WeightRule::Exponential { delta } => (0.0, -delta * (-delta * g_snapped).exp()),
        }
    }
}

fn ensure_nonpositive(g_vals: &DVector<f64>) -> Result<()> {
    let worst = g_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if worst > FEAS_TOL || worst.is_nan() {
        return Err(Error::Infeasible {
            max_violation: worst,
        });
    }
    Ok(())
}

/// `cⱼ` for every inequality; `g_vals` must be `≤ 0` up to `1e-9`.
pub fn penalty_weights(
    grad_f: &DVector<f64>,
    g_vals: &DVector<f64>,
    cfg: &PenaltyConfig,
) -> Result<DVector<f64>> {
    ensure_nonpositive(g_vals)?;
    let norm = grad_f.norm();
    Ok(g_vals.map(|g| cfg.weight(norm, cfg.snap(g))))
}

/// Data of the penalized direction subproblem at one feasible point.
#[derive(Clone, Debug)]
pub struct SubproblemData<'a> {
    pub grad_f: DVector<f64>,
    /// Rows are `∇gⱼᵀ`.
    pub grad_g: &'a DMatrix<f64>,
    /// Inequality values `gⱼ(y)`.
    pub g_vals: DVector<f64>,
    /// `bⱼ = −M gⱼ` with the active-set margin applied to `gⱼ`.
    pub b: DVector<f64>,
    pub weights: DVector<f64>,
    pub cache: &'a ProjectorCache,
}

impl<'a> SubproblemData<'a> {
    pub fn new(
        grad_f: DVector<f64>,
        grad_g: &'a DMatrix<f64>,
        g_vals: &DVector<f64>,
        cache: &'a ProjectorCache,
        cfg: &PenaltyConfig,
    ) -> Result<Self> {
        let weights = penalty_weights(&grad_f, g_vals, cfg)?;
        let b = g_vals.map(|g| -cfg.m * cfg.snap(g));
        Ok(Self {
            grad_f,
            grad_g,
            g_vals: g_vals.clone(),
            b,
            weights,
            cache,
        })
    }

    pub fn n(&self) -> usize {
        self.grad_f.len()
    }

    pub fn phi(&self, d: &DVector<f64>) -> f64 {
        let s = self.grad_g * d;
        let hinge: f64 = s
            .iter()
            .zip(self.b.iter())
            .zip(self.weights.iter())
            .map(|((s, b), c)| c * s.max(*b))
            .sum();
        self.grad_f.dot(d) + hinge
    }

    /// `u = p + Σ cⱼ 1{⟨d, aⱼ⟩ ≥ bⱼ} aⱼ`.
    pub fn subgradient(&self, d: &DVector<f64>) -> DVector<f64> {
        let s = self.grad_g * d;
        self.subgradient_from_slacks(&s)
    }

    pub(crate) fn subgradient_from_slacks(&self, s: &DVector<f64>) -> DVector<f64> {
        let coef = DVector::from_iterator(
            s.len(),
            s.iter()
                .zip(self.b.iter())
                .zip(self.weights.iter())
                .map(|((s, b), c)| if s >= b { *c } else { 0.0 }),
        );
        let mut u = self.grad_f.clone();
        u.gemv_tr(1.0, self.grad_g, &coef, 1.0);
        u
    }
}

/// Assembles the subproblem at a feasible `y` of `inst`.
pub fn build_subproblem<'a>(
    inst: &'a ProblemInstance,
    y: &DVector<f64>,
    cache: &'a ProjectorCache,
    cfg: &PenaltyConfig,
) -> Result<SubproblemData<'a>> {
    inst.ensure_feasible(y, FEAS_TOL)?;
    let grad_f = inst.objective.gradient(y);
    let g_vals = inst.constraints.ineq_values(y);
    SubproblemData::new(grad_f, &inst.constraints.g, &g_vals, cache, cfg)
}

/// Step sizes for the projected subgradient iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum StepRule {
    /// `γₖ = 1/√K` for a budget of `K` iterations.
    InvSqrtBudget,
    Constant(f64),
    /// Explicit `γₖ`; the last entry repeats if the sequence is short.
    Sequence(Vec<f64>),
    /// `γₖ = scale / (√(k+1) ‖(I − P_H) uₖ‖)`, so each step moves `d` by at most `scale/√(k+1)`.
    Normalized { scale: f64 },
}

impl StepRule {
    fn gamma(&self, k: usize, budget: usize, u_norm: f64) -> f64 {
        match self {
            StepRule::InvSqrtBudget => 1.0 / (budget as f64).sqrt(),
            StepRule::Constant(g) => *g,
            StepRule::Sequence(seq) => seq
                .get(k)
                .or(seq.last())
                .copied()
                .unwrap_or(0.0),
            StepRule::Normalized { scale } => {
                if u_norm > 0.0 {
                    scale / (((k + 1) as f64).sqrt() * u_norm)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PgmOutcome {
    /// Best iterate seen (lowest Φ).
    pub d: DVector<f64>,
    pub phi: f64,
    /// Best Φ over the prefix `d₀..dₖ`, one entry per iterate.
    pub trace: Vec<f64>,
}

/// Raw iterates `d₁..d_K` of `dₖ₊₁ = P(dₖ − γₖ uₖ)` starting from `d₀` as given.
pub fn pgm_iterates(sub: &SubproblemData<'_>, d0: &DVector<f64>, gammas: &[f64]) -> Vec<DVector<f64>> {
    let mut d = d0.clone();
    gammas
        .iter()
        .map(|&gamma| {
            let u = sub.subgradient(&d);
            d = sub.cache.project_with_branch(&(&d - u * gamma)).0;
            d.clone()
        })
        .collect()
}

/// Projected subgradient method; returns the best iterate.
pub fn pgm_solve(
    sub: &SubproblemData<'_>,
    d0: &DVector<f64>,
    iters: usize,
    rule: &StepRule,
) -> PgmOutcome {
    let iters = iters.max(1);
    let mut d = sub.cache.project_with_branch(d0).0;
    let mut best = d.clone();
    let mut best_phi = sub.phi(&d);
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(best_phi);
    let mut step = DVector::zeros(d.len());
    for k in 0..iters {
        let s = sub.grad_g * &d;
        let u = sub.subgradient_from_slacks(&s);
        let u_norm = match rule {
            StepRule::Normalized { .. } => sub.cache.null_space_part(&u).norm(),
            _ => 0.0,
        };
        let gamma = rule.gamma(k, iters, u_norm);
        step.copy_from(&d);
        step.axpy(-gamma, &u, 1.0);
        d = sub.cache.project_with_branch(&step).0;
        let phi = sub.phi(&d);
        if phi < best_phi {
            best_phi = phi;
            best.copy_from(&d);
        }
        trace.push(best_phi);
    }
    PgmOutcome {
        d: best,
        phi: best_phi,
        trace,
    }
}

/// Long-run PGM from `restarts` random starts plus `d = 0`; the best result is
/// the reference subproblem solution used by tests and diagnostics.
pub fn pgm_reference(
    sub: &SubproblemData<'_>,
    iters: usize,
    restarts: usize,
    seed: u64,
) -> PgmOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sub.n();
    let rule = StepRule::Normalized { scale: 1.0 };
    let mut best = pgm_solve(sub, &DVector::zeros(n), iters, &rule);
    for _ in 0..restarts {
        let d0 = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let out = pgm_solve(sub, &d0, iters, &rule);
        if out.phi < best.phi {
            best = out;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactPenaltyReport {
    /// `maxⱼ (⟨aⱼ, d⟩ − bⱼ)`; `−∞` when there are no inequalities.
    pub max_margin: f64,
    pub feasible: bool,
}

/// Checks membership of `d` in `F = {d ∈ D : ⟨aⱼ, d⟩ ≤ bⱼ}`.
pub fn check_exact_penalty(sub: &SubproblemData<'_>, d: &DVector<f64>, tol: f64) -> ExactPenaltyReport {
    let s = sub.grad_g * d;
    let max_margin = s
        .iter()
        .zip(sub.b.iter())
        .map(|(s, b)| s - b)
        .fold(f64::NEG_INFINITY, f64::max);
    ExactPenaltyReport {
        max_margin,
        feasible: max_margin <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::build_projector;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn weight_examples() {
        let cfg = PenaltyConfig::default();
        let c = penalty_weights(&v(&[1.0, 0.0]), &v(&[-1.0]), &cfg).unwrap();
        assert_relative_eq!(c[0], 1.0 / 0.5005, epsilon = 1e-15);
        assert_relative_eq!(c[0], 1.998002, epsilon = 1e-6);

        let c = penalty_weights(&v(&[0.0, 3.0]), &v(&[0.0]), &cfg).unwrap();
        assert_relative_eq!(c[0], 2000.0 * 3.0, max_relative = 1e-14);

        let c = penalty_weights(&v(&[0.0, 0.0]), &v(&[-1.0, -0.3]), &cfg).unwrap();
        assert_eq!(c, v(&[0.0, 0.0]));
    }

    #[test]
    fn weights_reject_infeasible_points() {
        let cfg = PenaltyConfig::default();
        match penalty_weights(&v(&[1.0]), &v(&[-1.0, 1e-3]), &cfg) {
            Err(Error::Infeasible { max_violation }) => assert_eq!(max_violation, 1e-3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(penalty_weights(&v(&[1.0]), &v(&[5e-10]), &cfg).is_ok());
    }

    #[test]
    fn margin_snaps_nearly_active_constraints() {
        let cfg = PenaltyConfig::default();
        assert_eq!(cfg.snap(-5e-7), 0.0);
        assert_eq!(cfg.snap(-2e-6), -2e-6);
        assert_eq!(cfg.snap(1e-10), 0.0);
    }

    #[test]
    fn exponential_rule() {
        let cfg = PenaltyConfig {
            weight_rule: WeightRule::Exponential { delta: 2.0 },
            ..Default::default()
        };
        let c = penalty_weights(&v(&[1.0]), &v(&[-0.5]), &cfg).unwrap();
        assert_relative_eq!(c[0], 1f64.exp());
    }

    fn one_constraint_case() -> (DMatrix<f64>, ProjectorCache) {
        // n = 3 with equality e₃ so D contains the (x, y) plane
        let cache = build_projector(&DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0])).unwrap();
        (DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]), cache)
    }

    #[test]
    fn phi_examples() {
        let (gg, cache) = one_constraint_case();
        let sub = SubproblemData {
            grad_f: v(&[0.0, -1.0, 0.0]),
            grad_g: &gg,
            g_vals: v(&[-0.5]),
            b: v(&[0.5]),
            weights: v(&[2.0]),
            cache: &cache,
        };
        assert_relative_eq!(sub.phi(&v(&[1.0, 0.0, 0.0])), 2.0);
        assert_relative_eq!(sub.phi(&DVector::zeros(3)), 2.0 * 0.5);
    }

    #[test]
    fn subgradient_examples() {
        let (gg, cache) = one_constraint_case();
        let sub = SubproblemData {
            grad_f: v(&[0.0, -1.0, 0.0]),
            grad_g: &gg,
            g_vals: v(&[-0.5]),
            b: v(&[0.5]),
            weights: v(&[2.0]),
            cache: &cache,
        };
        assert_eq!(sub.subgradient(&v(&[0.2, 0.0, 0.0])), sub.grad_f);
        assert_eq!(sub.subgradient(&v(&[0.9, 0.0, 0.0])), v(&[2.0, -1.0, 0.0]));
        // ties include the hinge gradient
        assert_eq!(sub.subgradient(&v(&[0.5, 0.0, 0.0])), v(&[2.0, -1.0, 0.0]));
    }

    #[test]
    fn pgm_linear_objective_on_disk_slice() {
        let cache = build_projector(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let gg = DMatrix::zeros(0, 2);
        let cfg = PenaltyConfig::default();
        let sub = SubproblemData::new(v(&[0.0, 1.0]), &gg, &DVector::zeros(0), &cache, &cfg).unwrap();
        let out = pgm_solve(&sub, &DVector::zeros(2), 10_000, &StepRule::InvSqrtBudget);
        assert_relative_eq!(out.d, v(&[0.0, -1.0]), epsilon = 1e-12);
        assert_relative_eq!(out.phi, -1.0, epsilon = 1e-12);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn pgm_zero_step_returns_projected_start() {
        let cache = build_projector(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let gg = DMatrix::zeros(0, 2);
        let sub = SubproblemData::new(v(&[0.0, 1.0]), &gg, &DVector::zeros(0), &cache, &PenaltyConfig::default())
            .unwrap();
        let out = pgm_solve(&sub, &v(&[3.0, 4.0]), 1, &StepRule::Constant(0.0));
        assert_eq!(out.d, v(&[0.0, 1.0]));
    }

    #[test]
    fn exact_penalty_report() {
        let (gg, cache) = one_constraint_case();
        let sub = SubproblemData {
            grad_f: v(&[0.0, -1.0, 0.0]),
            grad_g: &gg,
            g_vals: v(&[-0.5]),
            b: v(&[0.5]),
            weights: v(&[2.0]),
            cache: &cache,
        };
        let r = check_exact_penalty(&sub, &DVector::zeros(3), 1e-6);
        assert_relative_eq!(r.max_margin, -0.5);
        assert!(r.feasible);
        let r = check_exact_penalty(&sub, &v(&[0.8, 0.0, 0.0]), 1e-6);
        assert_relative_eq!(r.max_margin, 0.3, epsilon = 1e-15);
        assert!(!r.feasible);
    }
}
