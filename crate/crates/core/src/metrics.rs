//! Feasibility and optimality metrics of a set of predictions.
//!
//! Relative errors are means of per-instance ratios. Instances whose reference
//! denominator (`‖y*‖₁` or `|f(y*)|`) is below [`DENOM_GUARD`] are left out of
//! the relative means and counted in the `*_guarded` fields instead; their
//! absolute errors are still included.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::problem::ProblemInstance;

pub const DENOM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Wall time of one batch through the model, averaged over batches.
    pub per_batch_ms: f64,
    pub batch_size: usize,
    /// Wall time divided by the number of instances.
    pub per_instance_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub count: usize,
    /// Mean of `ReLU(gⱼ(yᵢ))` over constraints and instances.
    pub ineq_vio: f64,
    /// Mean of `|hⱼ(yᵢ)|` over equalities and instances.
    pub eq_vio: f64,
    pub max_ineq_vio: f64,
    pub max_eq_vio: f64,
    /// `None` when no reference solutions were supplied.
    pub sol_rel_err: Option<f64>,
    pub obj_rel_err: Option<f64>,
    pub sol_abs_err: Option<f64>,
    pub obj_abs_err: Option<f64>,
    pub max_obj_rel_err: Option<f64>,
    pub sol_rel_guarded: usize,
    pub obj_rel_guarded: usize,
    pub mean_objective: f64,
    #[serde(default)]
    pub timing: Option<Timing>,
}

/// Scores `pred` against `truth` (when given) on `insts`.
pub fn evaluate(
    pred: &[DVector<f64>],
    truth: Option<&[DVector<f64>]>,
    insts: &[ProblemInstance],
) -> Result<RunReport> {
    check_dim("predictions", insts.len(), pred.len())?;
    if let Some(t) = truth {
        check_dim("reference solutions", insts.len(), t.len())?;
    }
    if insts.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut r = RunReport { count: insts.len(), ..RunReport::default() };
    let (mut n_ineq, mut n_eq) = (0usize, 0usize);
    let (mut sol_rel, mut obj_rel, mut sol_abs, mut obj_abs) = (0.0, 0.0, 0.0, 0.0);
    let (mut sol_rel_n, mut obj_rel_n) = (0usize, 0usize);
    let mut max_obj_rel: f64 = 0.0;
    for (i, inst) in insts.iter().enumerate() {
        let y = &pred[i];
        let (eq, ineq) = inst.constraint_values(y)?;
        for g in ineq.iter() {
            r.ineq_vio += g.max(0.0);
            r.max_ineq_vio = r.max_ineq_vio.max(g.max(0.0));
        }
        for h in eq.iter() {
            r.eq_vio += h.abs();
            r.max_eq_vio = r.max_eq_vio.max(h.abs());
        }
        n_ineq += ineq.len();
        n_eq += eq.len();
        let f = inst.eval_objective(y)?;
        r.mean_objective += f;
        if let Some(t) = truth {
            let ys = &t[i];
            check_dim("reference solution", inst.n(), ys.len())?;
            let fs = inst.eval_objective(ys)?;
            let diff = (y - ys).lp_norm(1);
            let fdiff = (f - fs).abs();
            sol_abs += diff;
            obj_abs += fdiff;
            let ys_norm = ys.lp_norm(1);
            if ys_norm < DENOM_GUARD {
                r.sol_rel_guarded += 1;
            } else {
                sol_rel += diff / ys_norm;
                sol_rel_n += 1;
            }
            if fs.abs() < DENOM_GUARD {
                r.obj_rel_guarded += 1;
            } else {
                let rel = fdiff / fs.abs();
                obj_rel += rel;
                obj_rel_n += 1;
                max_obj_rel = max_obj_rel.max(rel);
            }
        }
    }
    let nf = insts.len() as f64;
    r.ineq_vio /= n_ineq.max(1) as f64;
    r.eq_vio /= n_eq.max(1) as f64;
    r.mean_objective /= nf;
    if truth.is_some() {
        r.sol_abs_err = Some(sol_abs / nf);
        r.obj_abs_err = Some(obj_abs / nf);
        r.sol_rel_err = (sol_rel_n > 0).then(|| sol_rel / sol_rel_n as f64);
        r.obj_rel_err = (obj_rel_n > 0).then(|| obj_rel / obj_rel_n as f64);
        r.max_obj_rel_err = (obj_rel_n > 0).then_some(max_obj_rel);
    }
    Ok(r)
}

impl RunReport {
    pub fn with_timing(mut self, total_ms: f64, batches: usize, batch_size: usize) -> Self {
        self.timing = Some(Timing {
            per_batch_ms: total_ms / batches.max(1) as f64,
            batch_size,
            per_instance_ms: total_ms / self.count.max(1) as f64,
        });
        self
    }

    /// Column layout used by [`render_table`].
    pub fn columns() -> [&'static str; 9] {
        ["method", "obj", "ineq_vio", "eq_vio", "sol_rel", "obj_rel", "sol_abs", "obj_abs", "ms/batch"]
    }

    fn cells(&self, label: &str) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2e}"));
        vec![
            label.to_string(),
            format!("{:.4e}", self.mean_objective),
            format!("{:.2e}", self.ineq_vio),
            format!("{:.2e}", self.eq_vio),
            opt(self.sol_rel_err),
            opt(self.obj_rel_err),
            opt(self.sol_abs_err),
            opt(self.obj_abs_err),
            self.timing.as_ref().map_or("-".into(), |t| format!("{:.2}", t.per_batch_ms)),
        ]
    }
}

/// Aligned plain-text table, one row per labeled report.
pub fn render_table(rows: &[(String, RunReport)]) -> String {
    let mut table: Vec<Vec<String>> = vec![RunReport::columns().iter().map(|s| s.to_string()).collect()];
    table.extend(rows.iter().map(|(label, r)| r.cells(label)));
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    let guarded: usize = rows.iter().map(|(_, r)| r.sol_rel_guarded + r.obj_rel_guarded).sum();
    if guarded > 0 {
        out.push_str(&format!("note: {guarded} relative error(s) skipped for near-zero reference values\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{generate_dataset, DatasetSpec};
    use approx::assert_relative_eq;

    fn insts(count: usize) -> Vec<ProblemInstance> {
        generate_dataset(&DatasetSpec::qp(6, 2, 3, count, 4)).unwrap().instances().unwrap()
    }

    #[test]
    fn identical_predictions_have_zero_error() {
        let is = insts(4);
        let y: Vec<_> = is.iter().map(|i| i.feasible_init().unwrap()).collect();
        let r = evaluate(&y, Some(&y), &is).unwrap();
        assert_eq!(r.sol_rel_err, Some(0.0));
        assert_eq!(r.obj_rel_err, Some(0.0));
        assert_eq!(r.obj_abs_err, Some(0.0));
        assert!(r.ineq_vio <= 1e-12 && r.eq_vio <= 1e-12);
    }

    #[test]
    fn objective_relative_error_example() {
        let is = insts(1);
        let ys = is[0].feasible_init().unwrap();
        let fs = is[0].objective.value(&ys);
        // move along the gradient until f changes by 10% of |f*|
        let grad = is[0].objective.gradient(&ys);
        let mut t = 0.0;
        let mut step = 1e-3;
        let target = fs + 0.1 * fs.abs();
        for _ in 0..200 {
            let f = is[0].objective.value(&(&ys + &grad * (t + step)));
            if f <= target {
                t += step;
            } else {
                step *= 0.5;
            }
        }
        let y = &ys + &grad * t;
        let r = evaluate(&[y], Some(&[ys]), &is).unwrap();
        assert_relative_eq!(r.obj_rel_err.unwrap(), 0.1, epsilon = 1e-9);
    }

    #[test]
    fn permutation_invariant() {
        let is = insts(5);
        let y: Vec<_> = is.iter().map(|i| i.feasible_init().unwrap() * 1.01).collect();
        let ys: Vec<_> = is.iter().map(|i| i.feasible_init().unwrap()).collect();
        let a = evaluate(&y, Some(&ys), &is).unwrap();
        let order = [3, 0, 4, 1, 2];
        let pick = |v: &[DVector<f64>]| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let is2: Vec<_> = order.iter().map(|&i| is[i].clone()).collect();
        let b = evaluate(&pick(&y), Some(&pick(&ys)), &is2).unwrap();
        assert_relative_eq!(a.obj_rel_err.unwrap(), b.obj_rel_err.unwrap(), epsilon = 1e-14);
        assert_relative_eq!(a.eq_vio, b.eq_vio, epsilon = 1e-14);
    }

    #[test]
    fn zero_reference_is_guarded() {
        let is = insts(1);
        let zero = DVector::zeros(6);
        let r = evaluate(&[is[0].feasible_init().unwrap()], Some(&[zero]), &is).unwrap();
        assert_eq!(r.sol_rel_guarded, 1);
        assert_eq!(r.sol_rel_err, None);
        assert!(r.sol_abs_err.unwrap() > 0.0);
    }

    #[test]
    fn missing_reference_leaves_errors_empty() {
        let is = insts(2);
        let y: Vec<_> = is.iter().map(|i| i.feasible_init().unwrap()).collect();
        let r = evaluate(&y, None, &is).unwrap();
        assert!(r.obj_rel_err.is_none() && r.sol_abs_err.is_none());
        let table = render_table(&[("net".into(), r)]);
        assert!(table.lines().nth(1).unwrap().contains('-'));
    }
}
