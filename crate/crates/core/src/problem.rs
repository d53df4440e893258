//! Linearly constrained problem instances and the benchmark generators.
//!
//! Every instance has the form
//!
//! ```text
//!     minimize    f(y)
//!     subject to  A y = b_eq
//!                 G y <= h
//! ```
//!
//! with `f` one of three objective families. Generated datasets share `Q`, `p`,
//! `A`, `G` (and `h` for the QP families) across instances behind `Arc`s; only
//! the per-instance data varies.
//!
//! Randomness comes from `ChaCha20Rng` (rand_chacha), which is portable and
//! value-stable. Shared matrices are drawn from stream 0 of the dataset seed
//! and per-instance data from stream 1 (train split) or 2 (test split), so a
//! train/test pair generated from one seed shares its constraint geometry.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Absolute tolerance under which a point counts as feasible.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `½ yᵀQy + pᵀy`
    Quadratic,
    /// `½ yᵀQy + pᵀ sin(y)`
    SinQuadratic,
    /// `wᵀ Σ w` with Σ stored in `q`
    PortfolioRisk,
}

#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub q: Arc<DMatrix<f64>>,
    pub p: Arc<DVector<f64>>,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, q: DMatrix<f64>, p: DVector<f64>) -> Result<Self> {
        let n = q.nrows();
        check_dim("objective Q columns", n, q.ncols())?;
        check_dim("objective p", n, p.len())?;
        let scale = q.norm().max(1e-300);
        let asym = (&q - q.transpose()).norm();
        if asym > 1e-12 * scale {
            return Err(Error::Config(format!(
                "objective matrix is not symmetric (‖Q − Qᵀ‖ = {asym:e})"
            )));
        }
        if kind != ObjectiveKind::SinQuadratic && n > 0 {
            let min_eig = q.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-10 * scale {
                return Err(Error::Config(format!(
                    "objective matrix is not positive semidefinite (λ_min = {min_eig:e})"
                )));
            }
        }
        Ok(Self {
            kind,
            q: Arc::new(q),
            p: Arc::new(p),
        })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        let qy = &*self.q * y;
        match self.kind {
            ObjectiveKind::Quadratic => 0.5 * y.dot(&qy) + self.p.dot(y),
            ObjectiveKind::SinQuadratic => {
                0.5 * y.dot(&qy) + self.p.iter().zip(y.iter()).map(|(p, v)| p * v.sin()).sum::<f64>()
            }
            ObjectiveKind::PortfolioRisk => y.dot(&qy),
        }
    }

    pub fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut g = &*self.q * y;
        match self.kind {
            ObjectiveKind::Quadratic => g += &*self.p,
            ObjectiveKind::SinQuadratic => {
                for ((gi, pi), yi) in g.iter_mut().zip(self.p.iter()).zip(y.iter()) {
                    *gi += pi * yi.cos();
                }
            }
            ObjectiveKind::PortfolioRisk => g *= 2.0,
        }
        g
    }
}

/// `A y = b_eq`, `G y <= h`.
#[derive(Clone, Debug)]
pub struct LinearConstraints {
    pub a: Arc<DMatrix<f64>>,
    pub b_eq: DVector<f64>,
    pub g: Arc<DMatrix<f64>>,
    pub h: DVector<f64>,
    a_pinv: Arc<DMatrix<f64>>,
}

impl LinearConstraints {
    /// Validates dimensions and `rank A = n_eq < n`.
    pub fn new(
        a: DMatrix<f64>,
        b_eq: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self> {
        let a = Arc::new(a);
        let a_pinv = Arc::new(checked_pinv(&a)?);
        Self::with_shared(a, a_pinv, b_eq, Arc::new(g), h)
    }

    /// Builds from shared, already validated equality geometry.
    pub(crate) fn with_shared(
        a: Arc<DMatrix<f64>>,
        a_pinv: Arc<DMatrix<f64>>,
        b_eq: DVector<f64>,
        g: Arc<DMatrix<f64>>,
        h: DVector<f64>,
    ) -> Result<Self> {
        let (n_eq, n) = a.shape();
        check_dim("b_eq", n_eq, b_eq.len())?;
        check_dim("G columns", n, g.ncols())?;
        check_dim("h", g.nrows(), h.len())?;
        Ok(Self {
            a,
            b_eq,
            g,
            h,
            a_pinv,
        })
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }
    pub fn n_eq(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_ineq(&self) -> usize {
        self.g.nrows()
    }

    pub fn a_pinv(&self) -> &DMatrix<f64> {
        &self.a_pinv
    }

    pub fn eq_residual(&self, y: &DVector<f64>) -> DVector<f64> {
        &*self.a * y - &self.b_eq
    }

    pub fn ineq_values(&self, y: &DVector<f64>) -> DVector<f64> {
        &*self.g * y - &self.h
    }

    /// `max(‖Ay − b‖∞, max_j (Gy − h)_j⁺)`.
    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        let eq = linalg::max_abs(&self.eq_residual(y));
        let ineq = linalg::max_or_neg_inf(&self.ineq_values(y)).max(0.0);
        eq.max(ineq)
    }
}

fn checked_pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n_eq, n) = a.shape();
    if n_eq >= n {
        return Err(Error::Dimension {
            what: "equality rows (must be fewer than variables)",
            expected: n.saturating_sub(1),
            got: n_eq,
        });
    }
    let r = linalg::rank(a);
    if r < n_eq {
        return Err(Error::RankDeficient {
            rank: r,
            expected: n_eq,
        });
    }
    linalg::pseudo_inverse(a)
}

#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub id: usize,
    pub objective: ObjectiveSpec,
    pub constraints: LinearConstraints,
}

impl ProblemInstance {
    pub fn new(id: usize, objective: ObjectiveSpec, constraints: LinearConstraints) -> Result<Self> {
        check_dim("objective dimension", constraints.n(), objective.dim())?;
        Ok(Self {
            id,
            objective,
            constraints,
        })
    }

    pub fn n(&self) -> usize {
        self.constraints.n()
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.objective.kind
    }

    pub fn eval_objective(&self, y: &DVector<f64>) -> Result<f64> {
        check_dim("y", self.n(), y.len())?;
        Ok(self.objective.value(y))
    }

    pub fn eval_gradient(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("y", self.n(), y.len())?;
        Ok(self.objective.gradient(y))
    }

    /// `(A y − b_eq, G y − h)`.
    pub fn constraint_values(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("y", self.n(), y.len())?;
        Ok((self.constraints.eq_residual(y), self.constraints.ineq_values(y)))
    }

    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        self.constraints.max_violation(y)
    }

    pub fn ensure_feasible(&self, y: &DVector<f64>, tol: f64) -> Result<()> {
        check_dim("y", self.n(), y.len())?;
        let v = self.max_violation(y);
        if v > tol || !v.is_finite() {
            return Err(Error::Infeasible { max_violation: v });
        }
        Ok(())
    }

    /// Analytic feasible starting point: `A†b_eq` for the QP families and the
    /// equal-weight portfolio for the risk objective.
    pub fn feasible_init(&self) -> Result<DVector<f64>> {
        let y = match self.kind() {
            ObjectiveKind::PortfolioRisk => {
                let n = self.n();
                DVector::from_element(n, 1.0 / n as f64)
            }
            _ => self.constraints.a_pinv() * &self.constraints.b_eq,
        };
        self.ensure_feasible(&y, FEAS_TOL)?;
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Qp,
    Nonconvex,
    Portfolio,
}

impl Family {
    pub fn tag(self) -> u8 {
        match self {
            Family::Qp => 1,
            Family::Nonconvex => 2,
            Family::Portfolio => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Family::Qp),
            2 => Some(Family::Nonconvex),
            3 => Some(Family::Portfolio),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: Family,
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_r_min_range")]
    pub r_min_range: (f64, f64),
    #[serde(default)]
    pub split: Split,
}

fn default_r_min_range() -> (f64, f64) {
    (0.05, 0.4)
}

impl DatasetSpec {
    pub fn qp(n: usize, n_eq: usize, n_ineq: usize, count: usize, seed: u64) -> Self {
        Self {
            family: Family::Qp,
            n,
            n_eq,
            n_ineq,
            count,
            seed,
            r_min_range: default_r_min_range(),
            split: Split::Train,
        }
    }

    pub fn nonconvex(n: usize, n_eq: usize, n_ineq: usize, count: usize, seed: u64) -> Self {
        Self {
            family: Family::Nonconvex,
            ..Self::qp(n, n_eq, n_ineq, count, seed)
        }
    }

    pub fn portfolio(n: usize, count: usize, seed: u64) -> Self {
        Self {
            family: Family::Portfolio,
            ..Self::qp(n, 1, n + 1, count, seed)
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be positive".into()));
        }
        if self.n == 0 || self.n_eq == 0 || self.n_eq >= self.n {
            return Err(Error::Config(format!(
                "need 0 < n_eq < n, got n = {}, n_eq = {}",
                self.n, self.n_eq
            )));
        }
        if self.family == Family::Portfolio && (self.n_eq != 1 || self.n_ineq != self.n + 1) {
            return Err(Error::Config(format!(
                "portfolio datasets have n_eq = 1 and n_ineq = n + 1, got n_eq = {}, n_ineq = {}",
                self.n_eq, self.n_ineq
            )));
        }
        let (lo, hi) = self.r_min_range;
        if self.family == Family::Portfolio && !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid r_min range ({lo}, {hi})")));
        }
        Ok(())
    }

    fn instance_stream(&self) -> u64 {
        match self.split {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Per-instance data that distinguishes the members of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum InstanceData {
    /// Equality right-hand side.
    Rhs(DVector<f64>),
    /// Expected returns and minimum-return threshold.
    Portfolio { mu: DVector<f64>, r_min: f64 },
}

/// Shared structure of a dataset together with its per-instance data.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub q: Arc<DMatrix<f64>>,
    pub p: Arc<DVector<f64>>,
    pub a: Arc<DMatrix<f64>>,
    /// Shared inequality block; for portfolios only the `−I` rows.
    pub g: Arc<DMatrix<f64>>,
    pub h: DVector<f64>,
    pub data: Vec<InstanceData>,
    a_pinv: Arc<DMatrix<f64>>,
    objective: ObjectiveSpec,
}

impl Dataset {
    /// Assembles a dataset from its parts, validating shapes and rank.
    pub fn from_parts(
        spec: DatasetSpec,
        q: DMatrix<f64>,
        p: DVector<f64>,
        a: DMatrix<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        data: Vec<InstanceData>,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.n;
        check_dim("Q rows", n, q.nrows())?;
        check_dim("A rows", spec.n_eq, a.nrows())?;
        check_dim("A columns", n, a.ncols())?;
        check_dim("instances", spec.count, data.len())?;
        let shared_rows = match spec.family {
            Family::Portfolio => n,
            _ => spec.n_ineq,
        };
        check_dim("G rows", shared_rows, g.nrows())?;
        check_dim("G columns", n, g.ncols())?;
        check_dim("h", shared_rows, h.len())?;
        for d in &data {
            match (spec.family, d) {
                (Family::Portfolio, InstanceData::Portfolio { mu, .. }) => {
                    check_dim("mu", n, mu.len())?
                }
                (Family::Qp | Family::Nonconvex, InstanceData::Rhs(x)) => {
                    check_dim("x", spec.n_eq, x.len())?
                }
                _ => {
                    return Err(Error::Format(
                        "instance data does not match dataset family".into(),
                    ))
                }
            }
        }
        let kind = match spec.family {
            Family::Qp => ObjectiveKind::Quadratic,
            Family::Nonconvex => ObjectiveKind::SinQuadratic,
            Family::Portfolio => ObjectiveKind::PortfolioRisk,
        };
        let objective = ObjectiveSpec::new(kind, q, p)?;
        let a_pinv = Arc::new(checked_pinv(&a)?);
        Ok(Self {
            q: Arc::clone(&objective.q),
            p: Arc::clone(&objective.p),
            a: Arc::new(a),
            g: Arc::new(g),
            h,
            data,
            a_pinv,
            objective,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn instance(&self, i: usize) -> Result<ProblemInstance> {
        let cons = match &self.data[i] {
            InstanceData::Rhs(x) => LinearConstraints::with_shared(
                Arc::clone(&self.a),
                Arc::clone(&self.a_pinv),
                x.clone(),
                Arc::clone(&self.g),
                self.h.clone(),
            )?,
            InstanceData::Portfolio { mu, r_min } => {
                let n = self.spec.n;
                let mut g = DMatrix::zeros(n + 1, n);
                g.rows_mut(0, n).copy_from(&self.g);
                for j in 0..n {
                    g[(n, j)] = -mu[j];
                }
                let mut h = DVector::zeros(n + 1);
                h.rows_mut(0, n).copy_from(&self.h);
                h[n] = -r_min;
                LinearConstraints::with_shared(
                    Arc::clone(&self.a),
                    Arc::clone(&self.a_pinv),
                    DVector::from_element(1, 1.0),
                    Arc::new(g),
                    h,
                )?
            }
        };
        ProblemInstance::new(i, self.objective.clone(), cons)
    }

    pub fn instances(&self) -> Result<Vec<ProblemInstance>> {
        (0..self.len()).map(|i| self.instance(i)).collect()
    }
}

/// Draws a dataset; a pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n;
    let mut shared = ChaCha20Rng::seed_from_u64(spec.seed);
    shared.set_stream(0);
    let mut per_inst = ChaCha20Rng::seed_from_u64(spec.seed);
    per_inst.set_stream(spec.instance_stream());

    let r = gaussian_matrix(&mut shared, n, n);
    let q = r.tr_mul(&r);
    let q = (&q + q.transpose()) * 0.5;

    match spec.family {
        Family::Qp | Family::Nonconvex => {
            let p = DVector::from_fn(n, |_, _| shared.random::<f64>());
            let a = gaussian_matrix(&mut shared, spec.n_eq, n);
            let g = gaussian_matrix(&mut shared, spec.n_ineq, n);
            let a_pinv = checked_pinv(&a)?;
            let ga = &g * &a_pinv;
            let h = DVector::from_fn(spec.n_ineq, |i, _| ga.row(i).iter().map(|v| v.abs()).sum());
            let data = (0..spec.count)
                .map(|_| {
                    InstanceData::Rhs(DVector::from_fn(spec.n_eq, |_, _| {
                        per_inst.random_range(-1.0..=1.0)
                    }))
                })
                .collect();
            Dataset::from_parts(spec.clone(), q, p, a, g, h, data)
        }
        Family::Portfolio => {
            let p = DVector::zeros(n);
            let a = DMatrix::from_element(1, n, 1.0);
            let g = -DMatrix::<f64>::identity(n, n);
            let h = DVector::zeros(n);
            let (lo, hi) = spec.r_min_range;
            let mut data = Vec::with_capacity(spec.count);
            for i in 0..spec.count {
                let mut attempts = 0;
                loop {
                    let mu = DVector::from_fn(n, |_, _| per_inst.random::<f64>());
                    let r_min = match spec.split {
                        Split::Train => {
                            if hi > lo {
                                per_inst.random_range(lo..hi)
                            } else {
                                lo
                            }
                        }
                        Split::Test if spec.count > 1 => {
                            lo + (hi - lo) * i as f64 / (spec.count - 1) as f64
                        }
                        Split::Test => lo,
                    };
                    // equal weights must satisfy the return floor
                    if r_min - mu.mean() <= FEAS_TOL {
                        data.push(InstanceData::Portfolio { mu, r_min });
                        break;
                    }
                    attempts += 1;
                    if attempts >= 100 {
                        return Err(Error::Generation(format!(
                            "portfolio instance {i}: equal-weight point infeasible after 100 resamples"
                        )));
                    }
                }
            }
            Dataset::from_parts(spec.clone(), q, p, a, g, h, data)
        }
    }
}

/// A random quadratic instance together with a strictly feasible point.
///
/// `A`, `G`, `R` have standard normal entries, `Q = RᵀR / n`, and the slacks
/// `h − Gy` are uniform on `[0.01, 1]`.
pub fn random_instance_with_point(
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    seed: u64,
) -> Result<(ProblemInstance, DVector<f64>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let r = gaussian_matrix(&mut rng, n, n);
    let q = r.tr_mul(&r) / n as f64;
    let q = (&q + q.transpose()) * 0.5;
    let p = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let a = gaussian_matrix(&mut rng, n_eq, n);
    let g = gaussian_matrix(&mut rng, n_ineq, n);
    let y = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let slack = DVector::from_fn(n_ineq, |_, _| rng.random_range(0.01..1.0));
    let b_eq = &a * &y;
    let h = &g * &y + slack;
    let cons = LinearConstraints::new(a, b_eq, g, h)?;
    let obj = ObjectiveSpec::new(ObjectiveKind::Quadratic, q, p)?;
    Ok((ProblemInstance::new(0, obj, cons)?, y))
}

fn gaussian_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // row-major draw order
    let vals: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simple_constraints() -> LinearConstraints {
        LinearConstraints::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![2.0]),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap()
    }

    fn instance(kind: ObjectiveKind, q: DMatrix<f64>, p: DVector<f64>) -> ProblemInstance {
        ProblemInstance::new(0, ObjectiveSpec::new(kind, q, p).unwrap(), simple_constraints()).unwrap()
    }

    #[test]
    fn objective_values_on_trivial_cases() {
        let i2 = DMatrix::identity(2, 2);
        let inst = instance(ObjectiveKind::Quadratic, i2.clone(), DVector::zeros(2));
        assert_relative_eq!(inst.eval_objective(&DVector::from_vec(vec![1.0, 1.0])).unwrap(), 1.0);

        let inst = instance(
            ObjectiveKind::SinQuadratic,
            DMatrix::zeros(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
        );
        let y = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 7.0]);
        assert_relative_eq!(inst.eval_objective(&y).unwrap(), 1.0);

        let inst = instance(ObjectiveKind::PortfolioRisk, i2 * 2.0, DVector::zeros(2));
        assert_relative_eq!(
            inst.eval_objective(&DVector::from_vec(vec![0.5, 0.5])).unwrap(),
            1.0
        );
    }

    #[test]
    fn gradients_on_trivial_cases() {
        let inst = instance(
            ObjectiveKind::Quadratic,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
        );
        assert_eq!(
            inst.eval_gradient(&DVector::zeros(2)).unwrap(),
            DVector::from_vec(vec![1.0, 0.0])
        );
        let inst = instance(
            ObjectiveKind::SinQuadratic,
            DMatrix::zeros(2, 2),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        assert_eq!(
            inst.eval_gradient(&DVector::zeros(2)).unwrap(),
            DVector::from_vec(vec![1.0, 1.0])
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let inst = instance(ObjectiveKind::Quadratic, DMatrix::identity(2, 2), DVector::zeros(2));
        assert!(matches!(
            inst.eval_objective(&DVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
        assert!(inst.eval_gradient(&DVector::zeros(1)).is_err());
        assert!(inst.constraint_values(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn constraint_values_on_trivial_cases() {
        let inst = instance(ObjectiveKind::Quadratic, DMatrix::identity(2, 2), DVector::zeros(2));
        let (eq, ineq) = inst.constraint_values(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(eq, DVector::from_vec(vec![0.0]));
        assert_eq!(ineq, DVector::from_vec(vec![0.0, 0.0]));
        let (eq, ineq) = inst.constraint_values(&DVector::from_vec(vec![2.0, 0.0])).unwrap();
        assert_eq!(eq, DVector::from_vec(vec![0.0]));
        assert_eq!(ineq, DVector::from_vec(vec![1.0, -1.0]));
    }

    #[test]
    fn rejects_asymmetric_and_indefinite_objectives() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(ObjectiveSpec::new(ObjectiveKind::Quadratic, asym, DVector::zeros(2)).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(
            ObjectiveSpec::new(ObjectiveKind::Quadratic, indef.clone(), DVector::zeros(2)).is_err()
        );
        // the sine family does not require convexity
        assert!(ObjectiveSpec::new(ObjectiveKind::SinQuadratic, indef, DVector::zeros(2)).is_ok());
    }

    #[test]
    fn rejects_rank_deficient_equalities() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        let err = LinearConstraints::new(
            a,
            DVector::zeros(2),
            DMatrix::zeros(0, 3),
            DVector::zeros(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 1, expected: 2 }));
    }

    #[test]
    fn feasible_init_identity_equalities() {
        let cons = LinearConstraints::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            DVector::from_vec(vec![0.3, -0.2]),
            DMatrix::zeros(0, 3),
            DVector::zeros(0),
        )
        .unwrap();
        let obj = ObjectiveSpec::new(ObjectiveKind::Quadratic, DMatrix::identity(3, 3), DVector::zeros(3))
            .unwrap();
        let inst = ProblemInstance::new(0, obj, cons).unwrap();
        let y = inst.feasible_init().unwrap();
        assert_relative_eq!(y[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(y[1], -0.2, epsilon = 1e-15);
        assert_relative_eq!(y[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn feasible_init_reports_malformed_instance() {
        let cons = LinearConstraints::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let obj = ObjectiveSpec::new(ObjectiveKind::Quadratic, DMatrix::identity(2, 2), DVector::zeros(2))
            .unwrap();
        let inst = ProblemInstance::new(0, obj, cons).unwrap();
        assert!(matches!(inst.feasible_init(), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn generated_qp_is_feasible_at_pinv_point() {
        let ds = generate_dataset(&DatasetSpec::qp(4, 2, 2, 20, 7)).unwrap();
        for inst in ds.instances().unwrap() {
            let y0 = inst.feasible_init().unwrap();
            let (eq, ineq) = inst.constraint_values(&y0).unwrap();
            assert!(linalg::max_abs(&eq) <= 1e-9);
            assert!(linalg::max_or_neg_inf(&ineq) <= 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic_and_split_aware() {
        let spec = DatasetSpec::qp(6, 2, 3, 5, 7);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(*a.q, *b.q);
        assert_eq!(a.h, b.h);
        assert_eq!(a.data, b.data);

        let test = generate_dataset(&spec.clone().with_split(Split::Test)).unwrap();
        assert_eq!(*a.q, *test.q);
        assert_eq!(*a.g, *test.g);
        assert_ne!(a.data, test.data);
    }

    #[test]
    fn portfolio_encoding() {
        let ds = generate_dataset(&DatasetSpec::portfolio(4, 10, 3)).unwrap();
        for inst in ds.instances().unwrap() {
            assert_eq!(inst.constraints.n_eq(), 1);
            assert_eq!(inst.constraints.n_ineq(), 5);
            let w = inst.feasible_init().unwrap();
            assert_eq!(w, DVector::from_element(4, 0.25));
            assert_eq!(w.sum(), 1.0);
        }
        let test = generate_dataset(&DatasetSpec::portfolio(3, 8, 3).with_split(Split::Test)).unwrap();
        let r: Vec<f64> = test
            .data
            .iter()
            .map(|d| match d {
                InstanceData::Portfolio { r_min, .. } => *r_min,
                _ => unreachable!(),
            })
            .collect();
        assert_relative_eq!(r[0], 0.05);
        assert_relative_eq!(r[7], 0.4);
        let third = 1.0 / 3.0;
        for inst in test.instances().unwrap() {
            let w = inst.feasible_init().unwrap();
            assert!(w.iter().all(|&v| v == third));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(DatasetSpec::qp(4, 2, 2, 0, 1).validate().is_err());
        assert!(DatasetSpec::qp(4, 4, 2, 1, 1).validate().is_err());
        let mut p = DatasetSpec::portfolio(4, 1, 1);
        p.n_ineq = 3;
        assert!(p.validate().is_err());
    }
}
