//! Projection onto `D = {d : ‖d‖₂ ≤ 1, Hᵀd = 0}`.
//!
//! The null-space part `d̂ = d − H(HᵀH)⁻¹Hᵀd` is applied through an orthonormal
//! basis `U` of `range(H)`, i.e. `d̂ = d − U(Uᵀd)`, which costs `O(nm)` per call.
//! The ball part then rescales `d̂` onto the unit sphere when `‖d̂‖ > 1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Norms below this are treated as the zero direction.
pub const ZERO_DIRECTION: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct ProjectorCache {
    h: DMatrix<f64>,
    basis: DMatrix<f64>,
}

/// Which branch of the projection fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `‖d̂‖ ≤ 1`, output is `d̂`.
    Linear,
    /// `‖d̂‖ > 1`, output is `d̂ / ‖d̂‖`.
    Sphere,
    /// `‖d̂‖ < ZERO_DIRECTION`, output is `0`.
    Zero,
}

impl ProjectorCache {
    pub fn n(&self) -> usize {
        self.basis.nrows()
    }

    pub fn m(&self) -> usize {
        self.basis.ncols()
    }

    /// Columns are the equality-constraint gradients.
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Orthonormal basis of `range(H)`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `d̂ = (I − P_H) d`.
    pub fn null_space_part(&self, d: &DVector<f64>) -> DVector<f64> {
        let coeffs = self.basis.tr_mul(d);
        let mut out = d.clone();
        out.gemv(-1.0, &self.basis, &coeffs, 1.0);
        out
    }

    /// Applies `(I − P_H)` to every column in place.
    pub fn null_space_part_columns(&self, d: &mut DMatrix<f64>) {
        let coeffs = self.basis.tr_mul(d);
        d.gemm(-1.0, &self.basis, &coeffs, 1.0);
    }

    pub fn project(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("direction", self.n(), d.len())?;
        Ok(self.project_with_branch(d).0)
    }

    pub fn project_with_branch(&self, d: &DVector<f64>) -> (DVector<f64>, Branch) {
        let mut dh = self.null_space_part(d);
        let norm = dh.norm();
        let branch = classify(norm);
        match branch {
            Branch::Linear => {}
            Branch::Sphere => dh /= norm,
            Branch::Zero => dh.fill(0.0),
        }
        (dh, branch)
    }
}

pub(crate) fn classify(norm: f64) -> Branch {
    if norm < ZERO_DIRECTION {
        Branch::Zero
    } else if norm <= 1.0 {
        Branch::Linear
    } else {
        Branch::Sphere
    }
}

/// Factorizes the equality geometry of `a` (m × n, rows are `∇hᵢᵀ`).
///
/// Requires `m < n` and `rank a = m`.
pub fn build_projector(a: &DMatrix<f64>) -> Result<ProjectorCache> {
    let (m, n) = a.shape();
    if m >= n {
        return Err(Error::Dimension {
            what: "equality rows (projection needs m < n)",
            expected: n.saturating_sub(1),
            got: m,
        });
    }
    let basis = if m == 0 {
        DMatrix::zeros(n, 0)
    } else {
        linalg::row_space_basis(a)?
    };
    Ok(ProjectorCache {
        h: a.transpose(),
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn single_row_examples() {
        let cache = build_projector(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let dh = cache.null_space_part(&v(&[3.0, 4.0]));
        assert_relative_eq!(dh, v(&[0.0, 4.0]), epsilon = 1e-15);
        assert_relative_eq!(cache.project(&v(&[3.0, 4.0])).unwrap(), v(&[0.0, 1.0]), epsilon = 1e-15);
        assert_eq!(cache.project(&v(&[0.0, 0.5])).unwrap(), v(&[0.0, 0.5]));
    }

    #[test]
    fn square_full_rank_is_rejected() {
        let err = build_projector(&DMatrix::identity(3, 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 2.0, 0.0, 2.0]);
        assert!(matches!(
            build_projector(&a),
            Err(Error::RankDeficient { rank: 1, expected: 2 })
        ));
    }

    #[test]
    fn zero_direction_maps_to_zero() {
        let cache = build_projector(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let (d, branch) = cache.project_with_branch(&v(&[5.0, 1e-16]));
        assert_eq!(branch, Branch::Zero);
        assert_eq!(d, v(&[0.0, 0.0]));
    }

    #[test]
    fn unit_norm_tie_takes_linear_branch() {
        let cache = build_projector(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let (d, branch) = cache.project_with_branch(&v(&[2.0, 1.0]));
        assert_eq!(branch, Branch::Linear);
        assert_eq!(d, v(&[0.0, 1.0]));
    }

    #[test]
    fn dimension_mismatch() {
        let cache = build_projector(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert!(cache.project(&v(&[1.0, 2.0, 3.0])).is_err());
    }

    fn random_case(seed: u64) -> (DMatrix<f64>, ProjectorCache) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(5, 20, |_, _| StandardNormal.sample(&mut rng));
        let cache = build_projector(&a).unwrap();
        (a, cache)
    }

    proptest! {
        #[test]
        fn projection_invariants(seed in 0u64..50, d in proptest::collection::vec(-10.0f64..10.0, 20)) {
            let (a, cache) = random_case(seed);
            let d = DVector::from_vec(d);
            let out = cache.project(&d).unwrap();
            let scale = d.norm().max(1.0);
            prop_assert!(linalg::max_abs(&(&a * &out)) <= 1e-10 * scale);
            prop_assert!(out.norm() <= 1.0 + 1e-12);
            let again = cache.project(&out).unwrap();
            prop_assert!((&again - &out).norm() <= 1e-12);
            let dh = cache.null_space_part(&d);
            prop_assert!(dh.norm() <= d.norm() + 1e-12);
            let twice = cache.null_space_part(&dh);
            prop_assert!((&twice - &dh).norm() <= 1e-12 * scale);
        }

        #[test]
        fn homogeneous_on_ball_branch(seed in 0u64..50, d in proptest::collection::vec(-0.2f64..0.2, 20), t in 0.0f64..1.0) {
            let (_, cache) = random_case(seed);
            let d = DVector::from_vec(d);
            prop_assume!(cache.null_space_part(&d).norm() <= 1.0);
            let lhs = cache.project(&(&d * t)).unwrap();
            let rhs = cache.project(&d).unwrap() * t;
            prop_assert!((&lhs - &rhs).norm() <= 1e-12);
        }
    }
}
