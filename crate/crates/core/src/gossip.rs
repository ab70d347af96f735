//! Gossip weights and their consensus decomposition.
//!
//! A row-stochastic `P` compatible with a strongly connected graph has a
//! unique stationary distribution `π`. With `Π = 1πᵀ` and `Q = P − Π`,
//! every downstream bound needs `ρ(Q) < 1`, which holds exactly when the
//! chain is also aperiodic. That spectral condition is checked directly.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const SPECTRAL_MARGIN: f64 = 1e-10;
const STATIONARY_RESIDUAL: f64 = 1e-12;
const DIRECT_SOLVE_MAX_NODES: usize = 64;

#[derive(Debug, Clone)]
pub struct GossipModel {
    p: DMatrix<f64>,
    pi: DVector<f64>,
    pi_mat: DMatrix<f64>,
    q: DMatrix<f64>,
    q_spectral_radius: f64,
}

impl GossipModel {
    /// Validates `p` and builds the decomposition.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        check_stochastic(&p)?;
        check_irreducible(&p)?;
        let pi = stationary_distribution(&p)?;
        let m = p.nrows();
        let ones = DVector::from_element(m, 1.0);
        let pi_mat = &ones * pi.transpose();
        let q = &p - &pi_mat;
        let q_spectral_radius = spectral_check(&q)?;
        Ok(Self {
            p,
            pi,
            pi_mat,
            q,
            q_spectral_radius,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }

    pub fn nodes(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    /// `Π = 1πᵀ`.
    pub fn pi_matrix(&self) -> &DMatrix<f64> {
        &self.pi_mat
    }

    /// `Q = P − Π`.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn q_spectral_radius(&self) -> f64 {
        self.q_spectral_radius
    }

    /// π-weighted average of the rows of `x`.
    pub fn average_row(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x.transpose() * &self.pi
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::Empty);
    }
    for r in rows {
        if r.len() != m {
            return Err(Error::NotSquare {
                rows: m,
                cols: r.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

fn check_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() == 0 {
        return Err(Error::Empty);
    }
    if p.nrows() != p.ncols() {
        return Err(Error::NotSquare {
            rows: p.nrows(),
            cols: p.ncols(),
        });
    }
    for (i, row) in p.row_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NotStochastic {
                row: i,
                reason: format!("entry {v} is negative or non-finite"),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::NotStochastic {
                row: i,
                reason: format!("row sum {s:.17} differs from 1"),
            });
        }
    }
    Ok(())
}

fn reachable(p: &DMatrix<f64>, start: usize, transpose: bool) -> Vec<bool> {
    let m = p.nrows();
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..m {
            let w = if transpose { p[(j, i)] } else { p[(i, j)] };
            if w > 0.0 && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

/// Strong connectivity of the support graph: every node reaches node 0 and is
/// reached from it.
fn check_irreducible(p: &DMatrix<f64>) -> Result<()> {
    let fwd = reachable(p, 0, false);
    if let Some(j) = fwd.iter().position(|s| !s) {
        return Err(Error::Reducible {
            from: 0,
            unreachable: j,
        });
    }
    let back = reachable(p, 0, true);
    if let Some(j) = back.iter().position(|s| !s) {
        return Err(Error::Reducible {
            from: j,
            unreachable: 0,
        });
    }
    Ok(())
}

/// Largest eigenvalue modulus of `q`; fails when it reaches `1 − 1e−10`.
fn spectral_check(q: &DMatrix<f64>) -> Result<f64> {
    let eig = q.complex_eigenvalues();
    let mut radius = 0.0_f64;
    for z in eig.iter() {
        let modulus = z.norm();
        if !modulus.is_finite() || modulus >= 1.0 - SPECTRAL_MARGIN {
            return Err(Error::SpectralViolation {
                re: z.re,
                im: z.im,
                modulus,
            });
        }
        radius = radius.max(modulus);
    }
    Ok(radius)
}

fn stationary_residual(p: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    (p.transpose() * pi - pi).amax()
}

/// Stationary distribution of a stochastic irreducible `p`.
///
/// Direct null-space solve of `(Pᵀ − I)π = 0` with the last equation replaced
/// by `Σπ = 1` for up to 64 nodes (plus one refinement step); power iteration
/// on the lazy chain `(P + I)/2` above that.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = p.nrows();
    if m == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    let mut pi = if m <= DIRECT_SOLVE_MAX_NODES {
        let mut a = p.transpose() - DMatrix::identity(m, m);
        for j in 0..m {
            a[(m - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(m);
        rhs[m - 1] = 1.0;
        let lu = a.clone().lu();
        let mut x = lu.solve(&rhs).ok_or(Error::NoConvergence {
            what: "stationary distribution solve",
            iterations: 1,
            residual: f64::INFINITY,
        })?;
        let r = &rhs - &a * &x;
        if let Some(dx) = lu.solve(&r) {
            x += dx;
        }
        x
    } else {
        power_iteration(p)?
    };
    let s = pi.sum();
    pi /= s;
    let residual = stationary_residual(p, &pi);
    if !(residual <= STATIONARY_RESIDUAL) || pi.iter().any(|v| *v <= 0.0) {
        return Err(Error::NoConvergence {
            what: "stationary distribution",
            iterations: 1,
            residual,
        });
    }
    Ok(pi)
}

fn power_iteration(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = p.nrows();
    let lazy_t = (p.transpose() + DMatrix::<f64>::identity(m, m)) * 0.5;
    let mut pi = DVector::from_element(m, 1.0 / m as f64);
    let max_iter = 1_000_000;
    for it in 0..max_iter {
        let next = &lazy_t * &pi;
        let next = &next / next.sum();
        let change = (&next - &pi).amax();
        pi = next;
        if change < 1e-15 && stationary_residual(p, &pi) <= STATIONARY_RESIDUAL {
            return Ok(pi);
        }
        if it + 1 == max_iter {
            break;
        }
    }
    Err(Error::NoConvergence {
        what: "stationary power iteration",
        iterations: max_iter,
        residual: stationary_residual(p, &pi),
    })
}

/// Uniform weights `1/M` everywhere.
pub fn complete(m: usize) -> DMatrix<f64> {
    DMatrix::from_element(m, m, 1.0 / m as f64)
}

/// Directed ring `i → i+1` with self-weight `laziness`.
pub fn lazy_ring(m: usize, laziness: f64) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(m, m);
    if m == 1 {
        p[(0, 0)] = 1.0;
        return p;
    }
    for i in 0..m {
        p[(i, i)] = laziness;
        p[(i, (i + 1) % m)] += 1.0 - laziness;
    }
    p
}

/// Random primitive matrix: self-loops and a directed ring guarantee
/// aperiodicity and strong connectivity; other edges appear with
/// probability `density`. Weights are uniform in `[0.1, 1]` before row
/// normalisation.
pub fn random_primitive(m: usize, density: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let forced = i == j || j == (i + 1) % m;
            if forced || rng.gen::<f64>() < density {
                p[(i, j)] = rng.gen_range(0.1..1.0);
            }
        }
        let s: f64 = p.row(i).sum();
        for j in 0..m {
            p[(i, j)] /= s;
        }
        // force exact unit row sums after floating-point normalisation
        let s: f64 = p.row(i).sum();
        p[(i, i)] += 1.0 - s;
    }
    p
}
