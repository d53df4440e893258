//! Reference solvers used for error metrics.
//!
//! Convex problems go through an operator-splitting QP solver followed by an
//! active-set polish; the sine family falls back to a long classical run.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classical::{ufd_penalty_solve, ClassicalConfig, KktReport, SolveStatus};
use crate::error::{Error, Result};
use crate::problem::{ObjectiveKind, ProblemInstance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub max_iters: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub rho: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { max_iters: 20_000, eps_abs: 1e-8, eps_rel: 1e-8, rho: 0.1 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("oracle max_iters must be at least 1".into()));
        }
        if !(self.eps_abs > 0.0 && self.eps_rel >= 0.0 && self.rho > 0.0) {
            return Err(Error::Config("oracle tolerances and rho must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleStatus {
    Solved,
    Inaccurate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub y: Vec<f64>,
    pub status: OracleStatus,
    pub iterations: usize,
    pub prim_res: f64,
    pub dual_res: f64,
    pub polished: bool,
}

const EQ_RHO_SCALE: f64 = 1e3;
const SIGMA: f64 = 1e-6;
const RELAX: f64 = 1.6;
const CHECK_EVERY: usize = 25;

/// Hessian and linear term of the quadratic objective.
fn quadratic_data(inst: &ProblemInstance) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let obj = &inst.objective;
    match obj.kind {
        ObjectiveKind::Quadratic => Ok(((*obj.q).clone(), (*obj.p).clone())),
        ObjectiveKind::PortfolioRisk => Ok((&*obj.q * 2.0, DVector::zeros(obj.dim()))),
        ObjectiveKind::SinQuadratic => Err(Error::Config("qp_solve needs a quadratic objective".into())),
    }
}

struct Admm {
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    m_eq: usize,
}

impl Admm {
    fn rho_vec(&self, rho: f64) -> DVector<f64> {
        DVector::from_fn(self.c.nrows(), |i, _| if i < self.m_eq { rho * EQ_RHO_SCALE } else { rho })
    }

    fn factor(&self, rho_v: &DVector<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let n = self.p.nrows();
        let mut k = &self.p + DMatrix::identity(n, n) * SIGMA;
        let mut rc = self.c.clone();
        for (mut row, r) in rc.row_iter_mut().zip(rho_v.iter()) {
            row *= *r;
        }
        k.gemm_tr(1.0, &self.c, &rc, 1.0);
        k.cholesky().ok_or_else(|| Error::Numerical("QP system is not positive definite".into()))
    }

    fn project(&self, v: &mut DVector<f64>) {
        for i in 0..v.len() {
            v[i] = v[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (f64, f64, f64, f64) {
        let cx = &self.c * x;
        let px = &self.p * x;
        let cty = self.c.tr_mul(y);
        let prim = (&cx - z).amax();
        let dual = (&px + &self.q + &cty).amax();
        let prim_scale = cx.amax().max(z.amax());
        let dual_scale = px.amax().max(cty.amax()).max(self.q.amax());
        (prim, dual, prim_scale, dual_scale)
    }
}

/// Solves a convex quadratic instance; sine objectives are rejected.
pub fn qp_solve(inst: &ProblemInstance, cfg: &OracleConfig) -> Result<OracleSolution> {
    cfg.validate()?;
    let (p, q) = quadratic_data(inst)?;
    let cons = &inst.constraints;
    let (n, m_eq, l) = (cons.n(), cons.n_eq(), cons.n_ineq());
    let mut c = DMatrix::zeros(m_eq + l, n);
    c.rows_mut(0, m_eq).copy_from(&*cons.a);
    c.rows_mut(m_eq, l).copy_from(&*cons.g);
    let mut lo = DVector::from_element(m_eq + l, f64::NEG_INFINITY);
    let mut hi = DVector::zeros(m_eq + l);
    lo.rows_mut(0, m_eq).copy_from(&cons.b_eq);
    hi.rows_mut(0, m_eq).copy_from(&cons.b_eq);
    hi.rows_mut(m_eq, l).copy_from(&cons.h);
    let admm = Admm { p, q, c, lo, hi, m_eq };

    let mut rho = cfg.rho;
    let mut rho_v = admm.rho_vec(rho);
    let mut chol = admm.factor(&rho_v)?;
    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m_eq + l);
    let mut y = DVector::zeros(m_eq + l);
    let mut iterations = cfg.max_iters;
    let mut converged = false;

    for it in 1..=cfg.max_iters {
        let rhs_dual = rho_v.component_mul(&z) - &y;
        let mut rhs = &x * SIGMA - &admm.q;
        rhs.gemv_tr(1.0, &admm.c, &rhs_dual, 1.0);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &admm.c * &x_tilde;
        x = &x_tilde * RELAX + &x * (1.0 - RELAX);
        let z_relaxed = &z_tilde * RELAX + &z * (1.0 - RELAX);
        let mut z_new = &z_relaxed + y.component_div(&rho_v);
        admm.project(&mut z_new);
        y += rho_v.component_mul(&(&z_relaxed - &z_new));
        z = z_new;

        if it % CHECK_EVERY == 0 || it == cfg.max_iters {
            let (prim, dual, ps, ds) = admm.residuals(&x, &z, &y);
            if !(prim.is_finite() && dual.is_finite()) {
                return Err(Error::Numerical("QP iteration diverged".into()));
            }
            if prim <= cfg.eps_abs + cfg.eps_rel * ps && dual <= cfg.eps_abs + cfg.eps_rel * ds {
                iterations = it;
                converged = true;
                break;
            }
            let ratio = ((prim / ps.max(1e-30)) / (dual / ds.max(1e-30)).max(1e-30)).sqrt();
            let new_rho = (rho * ratio).clamp(1e-6, 1e6);
            if !(0.2..=5.0).contains(&(new_rho / rho)) {
                rho = new_rho;
                rho_v = admm.rho_vec(rho);
                chol = admm.factor(&rho_v)?;
            }
        }
    }

    let (mut prim, mut dual, _, _) = admm.residuals(&x, &z, &y);
    let mut polished = false;
    if let Some((xp, yp)) = polish(&admm, &x, &y) {
        let zp = {
            let mut v = &admm.c * &xp;
            admm.project(&mut v);
            v
        };
        let (pp, dp, _, _) = admm.residuals(&xp, &zp, &yp);
        if pp <= prim.max(1e-9) && dp <= dual.max(1e-9) {
            x = xp;
            prim = pp;
            dual = dp;
            polished = true;
        }
    }
    let status = if converged || polished { OracleStatus::Solved } else { OracleStatus::Inaccurate };
    Ok(OracleSolution { y: x.iter().copied().collect(), status, iterations, prim_res: prim, dual_res: dual, polished })
}

/// Primal-dual active-set refinement started from the ADMM multipliers.
///
/// Returns a point that satisfies the KKT conditions of the guessed active set
/// exactly, with every inequality satisfied and every multiplier nonnegative.
fn polish(admm: &Admm, x: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = admm.p.nrows();
    let rows = admm.c.nrows();
    let cx = &admm.c * x;
    let tol = 1e-7 * (1.0 + cx.amax());
    let mut active: Vec<bool> = (0..rows)
        .map(|i| i < admm.m_eq || y[i] > 1e-9 || admm.hi[i] - cx[i] < tol)
        .collect();

    for _ in 0..50 {
        let idx: Vec<usize> = (0..rows).filter(|&i| active[i]).collect();
        let k = idx.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&admm.p);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&admm.q));
        for (pos, &i) in idx.iter().enumerate() {
            let row = admm.c.row(i);
            kkt.view_mut((n + pos, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + pos), (n, 1)).copy_from(&row.transpose());
            rhs[n + pos] = admm.hi[i];
        }
        let sol = kkt.svd(true, true).solve(&rhs, 1e-13).ok()?;
        let xs = sol.rows(0, n).into_owned();
        let mut ys = DVector::zeros(rows);
        for (pos, &i) in idx.iter().enumerate() {
            ys[i] = sol[n + pos];
        }
        let cxs = &admm.c * &xs;
        let scale = 1.0 + cxs.amax();
        let mut changed = false;
        // drop the most negative multiplier, then add the most violated row
        if let Some((i, _)) = (admm.m_eq..rows)
            .filter(|&i| active[i] && ys[i] < -1e-10 * scale)
            .map(|i| (i, ys[i]))
            .min_by(|a, b| a.1.total_cmp(&b.1))
        {
            active[i] = false;
            changed = true;
        }
        if let Some((i, _)) = (admm.m_eq..rows)
            .filter(|&i| !active[i] && cxs[i] - admm.hi[i] > 1e-10 * scale)
            .map(|i| (i, cxs[i] - admm.hi[i]))
            .max_by(|a, b| a.1.total_cmp(&b.1))
        {
            active[i] = true;
            changed = true;
        }
        if !changed {
            return Some((xs, ys));
        }
    }
    None
}

#[derive(Clone, Debug)]
pub struct NonconvexReference {
    pub y: DVector<f64>,
    pub kkt: KktReport,
    pub outer_steps: usize,
}

/// Budget used for the sine family reference.
pub fn reference_classical_config() -> ClassicalConfig {
    ClassicalConfig {
        inner_iters: 1_000,
        kkt_tol: 1e-6,
        ..ClassicalConfig::default()
    }
}

/// Local reference optimum for the sine family by a long classical run from `y0`.
pub fn nonconvex_reference(inst: &ProblemInstance, y0: &DVector<f64>) -> Result<NonconvexReference> {
    nonconvex_reference_with(inst, y0, &reference_classical_config())
}

pub fn nonconvex_reference_with(
    inst: &ProblemInstance,
    y0: &DVector<f64>,
    cfg: &ClassicalConfig,
) -> Result<NonconvexReference> {
    if inst.kind() != ObjectiveKind::SinQuadratic {
        return Err(Error::Config("nonconvex_reference expects the sine objective".into()));
    }
    let out = ufd_penalty_solve(inst, y0, cfg)?;
    if out.status == SolveStatus::Stalled {
        return Err(Error::Numerical(format!(
            "reference solve stalled with stationarity {:e}",
            out.kkt.stationarity
        )));
    }
    Ok(NonconvexReference { y: out.y, kkt: out.kkt, outer_steps: out.outer_steps })
}

/// Reference solution for any family: [`qp_solve`] for convex objectives,
/// [`nonconvex_reference_with`] from the default start for the sine family.
///
/// For the sine family `iterations` counts outer steps, `prim_res` is the
/// largest constraint violation and `dual_res` the KKT stationarity residual.
pub fn reference_solution(
    inst: &ProblemInstance,
    cfg: &OracleConfig,
    classical: &ClassicalConfig,
) -> Result<OracleSolution> {
    match inst.kind() {
        ObjectiveKind::Quadratic | ObjectiveKind::PortfolioRisk => qp_solve(inst, cfg),
        ObjectiveKind::SinQuadratic => {
            let r = nonconvex_reference_with(inst, &inst.feasible_init()?, classical)?;
            let status = if r.kkt.stationarity <= classical.kkt_tol {
                OracleStatus::Solved
            } else {
                OracleStatus::Inaccurate
            };
            Ok(OracleSolution {
                prim_res: inst.max_violation(&r.y),
                y: r.y.as_slice().to_vec(),
                status,
                iterations: r.outer_steps,
                dual_res: r.kkt.stationarity,
                polished: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::kkt_residual;
    use crate::problem::{generate_dataset, DatasetSpec, LinearConstraints, ObjectiveSpec};
    use approx::assert_relative_eq;

    fn identity_objective(n: usize) -> ObjectiveSpec {
        ObjectiveSpec::new(ObjectiveKind::Quadratic, DMatrix::identity(n, n), DVector::zeros(n)).unwrap()
    }

    #[test]
    fn equality_only() {
        let cons = LinearConstraints::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let inst = ProblemInstance::new(0, identity_objective(2), cons).unwrap();
        let sol = qp_solve(&inst, &OracleConfig::default()).unwrap();
        assert_eq!(sol.status, OracleStatus::Solved);
        assert_relative_eq!(sol.y[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sol.y[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn lower_bound_projection() {
        let cons = LinearConstraints::new(
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
            DVector::from_vec(vec![-1.0]),
        )
        .unwrap();
        let inst = ProblemInstance::new(0, identity_objective(2), cons).unwrap();
        let sol = qp_solve(&inst, &OracleConfig::default()).unwrap();
        assert_relative_eq!(sol.y[0], 1.0, epsilon = 1e-9);
        assert!(sol.y[1].abs() < 1e-9);
    }

    #[test]
    fn random_qps_are_kkt_points() {
        let data = generate_dataset(&DatasetSpec::qp(20, 10, 10, 5, 3)).unwrap();
        for inst in data.instances().unwrap() {
            let sol = qp_solve(&inst, &OracleConfig::default()).unwrap();
            assert_eq!(sol.status, OracleStatus::Solved);
            let y = DVector::from_vec(sol.y);
            assert!(inst.max_violation(&y) <= 1e-7);
            let r = kkt_residual(&inst, &y, 1e-6).unwrap();
            assert!(r.stationarity <= 1e-6, "{}", r.stationarity);
        }
    }

    #[test]
    fn sine_objective_is_rejected() {
        let data = generate_dataset(&DatasetSpec::nonconvex(6, 2, 2, 1, 0)).unwrap();
        let inst = data.instance(0).unwrap();
        assert!(matches!(qp_solve(&inst, &OracleConfig::default()), Err(Error::Config(_))));
        assert!(nonconvex_reference(&data.instance(0).unwrap(), &inst.feasible_init().unwrap()).is_ok());
    }
}
