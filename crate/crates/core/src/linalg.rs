//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value threshold used for rank decisions.
pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    sigma_max * (rows.max(cols) as f64) * f64::EPSILON * 16.0
}

/// Numerical rank of `m` from its singular values.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let tol = rank_tolerance(smax, m.nrows(), m.ncols());
    sv.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis (n × m) of the row space of a full-row-rank `a` (m × n).
pub fn row_space_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let svd = a.transpose().svd(true, false);
    let sv = &svd.singular_values;
    let smax = if sv.is_empty() { 0.0 } else { sv.max() };
    let tol = rank_tolerance(smax, m, n);
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank < m || smax == 0.0 {
        return Err(Error::RankDeficient { rank, expected: m });
    }
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    Ok(u.columns(0, m).into_owned())
}

/// Moore-Penrose pseudoinverse.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(DMatrix::zeros(a.ncols(), a.nrows()));
    }
    let smax = a.clone().svd(false, false).singular_values.max();
    let tol = rank_tolerance(smax, a.nrows(), a.ncols());
    a.clone()
        .pseudo_inverse(tol)
        .map_err(|e| Error::Numerical(e.to_string()))
}

/// Nonnegative least squares (Lawson-Hanson): `min ‖a x − b‖₂` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (_, k) = a.shape();
    let mut x = DVector::zeros(k);
    if k == 0 {
        return x;
    }
    let scale = a.norm().max(1.0) * b.norm().max(1.0);
    let tol = 1e-13 * scale;
    let mut passive = vec![false; k];
    let mut w = a.tr_mul(&(b - a * &x));

    for _ in 0..(3 * k + 10) {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..k {
            if !passive[j] && w[j] > tol && best.is_none_or(|(_, v)| w[j] > v) {
                best = Some((j, w[j]));
            }
        }
        let Some((j, _)) = best else { break };
        passive[j] = true;

        loop {
            let s = passive_lstsq(a, b, &passive);
            let mut alpha = f64::INFINITY;
            for i in 0..k {
                if passive[i] && s[i] <= 0.0 {
                    let denom = x[i] - s[i];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            if !alpha.is_finite() {
                x = s;
                break;
            }
            x += (s - &x) * alpha;
            for i in 0..k {
                if passive[i] && x[i] <= 1e-15 * scale {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = a.tr_mul(&(b - a * &x));
    }
    x
}

fn passive_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let sub = a.select_columns(&idx);
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = rank_tolerance(smax, a.nrows(), idx.len());
    let sol = svd
        .solve(b, tol)
        .unwrap_or_else(|_| DVector::zeros(idx.len()));
    let mut full = DVector::zeros(passive.len());
    for (pos, &i) in idx.iter().enumerate() {
        full[i] = sol[pos];
    }
    full
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn max_or_neg_inf(v: &DVector<f64>) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = nnls(&a, &b);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_component() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![-1.0, 0.5]);
        let x = nnls(&a, &b);
        assert_eq!(x[0], 0.0);
        assert_relative_eq!(x[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn nnls_kkt_conditions_hold_on_random_problem() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = DMatrix::from_fn(8, 5, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let x = nnls(&a, &b);
            let grad = a.tr_mul(&(&a * &x - &b));
            for j in 0..5 {
                assert!(x[j] >= 0.0);
                if x[j] > 0.0 {
                    assert!(grad[j].abs() < 1e-10, "grad {}", grad[j]);
                } else {
                    assert!(grad[j] > -1e-10, "grad {}", grad[j]);
                }
            }
        }
    }

    #[test]
    fn row_space_basis_rejects_rank_deficient() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        match row_space_basis(&a) {
            Err(Error::RankDeficient { rank, expected }) => {
                assert_eq!((rank, expected), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_relative_eq!(sigmoid(0.0), 0.5);
    }
}
