//! The weighted metric `‖x‖_H = sqrt(xᵀHx)` with `QᵀHQ − H = −I`.
//!
//! For M×d arrays the norm is `sqrt(trace(GᵀHG))`, i.e. the H-norm applied
//! column by column. Since `Q1 = 0` the solution satisfies `H1 = 1`, so
//! `λ_min(H) = 1` and the induced norm of `Q` is `sqrt(1 − 1/λ_max)`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gossip::GossipModel;

const RESIDUAL_TOL: f64 = 1e-12;
const MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct HMetric {
    h: DMatrix<f64>,
    h_sqrt: DMatrix<f64>,
    h_inv_sqrt: DMatrix<f64>,
    alpha: f64,
    lambda_min: f64,
    lambda_max: f64,
    pi_h_norm: f64,
    iterations: usize,
    residual: f64,
}

/// Fixed-point iteration `H ← QᵀHQ + I` from `H = I`.
///
/// Returns the solution together with the iteration count and the final
/// Frobenius residual `‖QᵀHQ − H + I‖_F`.
pub fn solve_discrete_lyapunov(q: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize, f64)> {
    let m = q.nrows();
    if q.ncols() != m {
        return Err(Error::NotSquare {
            rows: m,
            cols: q.ncols(),
        });
    }
    let eye = DMatrix::<f64>::identity(m, m);
    let qt = q.transpose();
    let mut h = eye.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let next = &qt * &h * q + &eye;
        residual = (&next - &h).norm();
        h = next;
        if residual <= RESIDUAL_TOL {
            let h = (&h + h.transpose()) * 0.5;
            let residual = lyapunov_residual(q, &h);
            return Ok((h, it, residual));
        }
        if !residual.is_finite() {
            return Err(Error::NoConvergence {
                what: "discrete Lyapunov iteration",
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "discrete Lyapunov iteration",
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// `‖QᵀHQ − H + I‖_F`.
pub fn lyapunov_residual(q: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let m = q.nrows();
    (q.transpose() * h * q - h + DMatrix::<f64>::identity(m, m)).norm()
}

/// `sqrt(1 − 1/λ_max(H))`.
pub fn contraction_factor(h: &DMatrix<f64>) -> f64 {
    let lambda_max = SymmetricEigen::new(h.clone()).eigenvalues.max();
    (1.0 - 1.0 / lambda_max).max(0.0).sqrt()
}

/// `sqrt(trace(GᵀHG))`.
pub fn h_norm(g: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64> {
    if g.nrows() != h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "array has {} rows, metric expects {}",
            g.nrows(),
            h.nrows()
        )));
    }
    Ok(h_norm_unchecked(g, h))
}

fn h_norm_unchecked(g: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let hg = h * g;
    g.dot(&hg).max(0.0).sqrt()
}

/// Left and right sides of `‖G‖_H ≤ sqrt(Λ(H)·M·d)·max|G_ij|`, with the
/// intermediate `sqrt(Λ(H))·‖G‖_F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryBound {
    pub h_norm: f64,
    pub frobenius_bound: f64,
    pub entry_bound: f64,
}

impl HMetric {
    pub fn solve(gossip: &GossipModel) -> Result<Self> {
        let (h, iterations, residual) = solve_discrete_lyapunov(gossip.q())?;
        Self::from_solution(h, gossip.pi_matrix(), iterations, residual)
    }

    fn from_solution(
        h: DMatrix<f64>,
        pi_mat: &DMatrix<f64>,
        iterations: usize,
        residual: f64,
    ) -> Result<Self> {
        let eig = SymmetricEigen::new(h.clone());
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        if lambda_min <= 0.0 {
            return Err(Error::NoConvergence {
                what: "positive definite Lyapunov solution",
                iterations,
                residual,
            });
        }
        let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
        let inv_sqrt_vals = sqrt_vals.map(|v| 1.0 / v);
        let vecs = &eig.eigenvectors;
        let h_sqrt = vecs * DMatrix::from_diagonal(&sqrt_vals) * vecs.transpose();
        let h_inv_sqrt = vecs * DMatrix::from_diagonal(&inv_sqrt_vals) * vecs.transpose();
        let alpha = (1.0 - 1.0 / lambda_max).max(0.0).sqrt();
        let mut metric = Self {
            h,
            h_sqrt,
            h_inv_sqrt,
            alpha,
            lambda_min,
            lambda_max,
            pi_h_norm: 0.0,
            iterations,
            residual,
        };
        metric.pi_h_norm = metric.induced_norm(pi_mat);
        Ok(metric)
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// `Λ(H) = λ_max/λ_min`.
    pub fn lambda_ratio(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }

    /// `‖Π‖_H`.
    pub fn pi_h_norm(&self) -> f64 {
        self.pi_h_norm
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn nodes(&self) -> usize {
        self.h.nrows()
    }

    /// Panics if `g` does not have `M` rows; use [`h_norm`] for a checked call.
    pub fn norm(&self, g: &DMatrix<f64>) -> f64 {
        assert_eq!(g.nrows(), self.h.nrows(), "array/metric row mismatch");
        h_norm_unchecked(g, &self.h)
    }

    /// Induced norm `‖A‖_H = ‖H^{1/2} A H^{−1/2}‖₂`.
    pub fn induced_norm(&self, a: &DMatrix<f64>) -> f64 {
        let similar = &self.h_sqrt * a * &self.h_inv_sqrt;
        similar.singular_values().max()
    }

    pub fn entry_bound(&self, g: &DMatrix<f64>) -> EntryBound {
        let (m, d) = g.shape();
        let lambda = self.lambda_ratio();
        let h_norm = self.norm(g);
        let frobenius_bound = lambda.sqrt() * g.norm();
        let entry_bound = (lambda * (m * d) as f64).sqrt() * g.amax();
        debug_assert!(h_norm <= entry_bound * (1.0 + 1e-12) + 1e-300);
        EntryBound {
            h_norm,
            frobenius_bound,
            entry_bound,
        }
    }
}

/// Returns `(‖G‖_H, sqrt(Λ(H)·M·d)·max|G_ij|)`.
pub fn frobenius_entry_bound(g: &DMatrix<f64>, metric: &HMetric) -> Result<(f64, f64)> {
    if g.nrows() != metric.nodes() {
        return Err(Error::DimensionMismatch(format!(
            "array has {} rows, metric expects {}",
            g.nrows(),
            metric.nodes()
        )));
    }
    let b = metric.entry_bound(g);
    Ok((b.h_norm, b.entry_bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::{self, GossipModel};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_q_gives_identity() {
        let (h, _, res) = solve_discrete_lyapunov(&DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(h, DMatrix::identity(4, 4));
        assert_eq!(res, 0.0);
        assert_eq!(contraction_factor(&h), 0.0);
    }

    #[test]
    fn nilpotent_q_closed_form() {
        // Q² = 0 so H = I + QᵀQ = diag(1, 1.25)
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.0, 0.0]);
        let (h, _, res) = solve_discrete_lyapunov(&q).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.25]);
        assert!((&h - &expected).amax() < 1e-15);
        assert!(res < 1e-15);
        assert!((contraction_factor(&h) - 0.2_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn lazy_cycle_residual_checked_by_multiplication() {
        let g = GossipModel::new(gossip::lazy_ring(3, 0.5)).unwrap();
        let metric = HMetric::solve(&g).unwrap();
        let q = g.q();
        let direct = q.transpose() * metric.h() * q - metric.h() + DMatrix::identity(3, 3);
        assert!(direct.norm() <= 1e-10);
        assert!(metric.lambda_min() >= 1.0 - 1e-10);
        assert!((&metric.h().transpose() - metric.h()).amax() <= 1e-12);
    }

    #[test]
    fn identity_metric_is_frobenius() {
        let g = GossipModel::new(gossip::complete(3)).unwrap();
        let metric = HMetric::solve(&g).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        assert!((metric.norm(&x) - x.norm()).abs() < 1e-14);
    }

    #[test]
    fn single_column_reduces_to_vector_norm() {
        let g = GossipModel::new(gossip::lazy_ring(4, 0.3)).unwrap();
        let metric = HMetric::solve(&g).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.7]);
        let mut arr = DMatrix::zeros(4, 3);
        arr.set_column(1, &x);
        let direct = (x.transpose() * metric.h() * &x)[(0, 0)].sqrt();
        assert!((metric.norm(&arr) - direct).abs() < 1e-13);
    }

    #[test]
    fn dimension_mismatch() {
        let h = DMatrix::identity(3, 3);
        assert!(matches!(
            h_norm(&DMatrix::zeros(2, 2), &h),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn entry_bound_cases() {
        let g = GossipModel::new(gossip::complete(3)).unwrap();
        let metric = HMetric::solve(&g).unwrap();
        assert_eq!(
            frobenius_entry_bound(&DMatrix::zeros(3, 2), &metric).unwrap(),
            (0.0, 0.0)
        );
        let ones = DMatrix::from_element(3, 2, 1.0);
        let (l, r) = frobenius_entry_bound(&ones, &metric).unwrap();
        assert!((l - 6f64.sqrt()).abs() < 1e-14);
        assert!((r - 6f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn random_arrays_contract_under_q() {
        let g = GossipModel::new(gossip::random_primitive(5, 0.3, 2)).unwrap();
        let metric = HMetric::solve(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
            let qx = g.q() * &x;
            assert!(metric.norm(&qx) <= metric.alpha() * metric.norm(&x) + 1e-12);
            let (l, r) = frobenius_entry_bound(&x, &metric).unwrap();
            assert!(l < r);
        }
    }

    #[test]
    fn h_fixes_consensus_direction() {
        let g = GossipModel::new(gossip::random_primitive(6, 0.5, 4)).unwrap();
        let metric = HMetric::solve(&g).unwrap();
        let ones = DVector::from_element(6, 1.0);
        assert!((metric.h() * &ones - &ones).amax() < 1e-9);
        assert!((metric.lambda_min() - 1.0).abs() < 1e-9);
    }
}
