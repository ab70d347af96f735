//! Bound machinery: perturbation sums, tracking errors against the reference
//! ODE, the pathwise tracking bound, the growth bound, martingale tails, the
//! trapping-probability lower bound and its Monte Carlo counterpart.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{self, RunRecord, Simulator};
use crate::error::{Error, Result};
use crate::hnorm::HMetric;
use crate::ode::{self, AveragedOde, ReferenceSegment};
use crate::problem::{lift, ProblemInstance};
use crate::schedule::{StepSchedule, TimeGrid};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Minimum number of replicas satisfying the start condition.
pub const MIN_CONDITIONED: usize = 30;

/// Relative slack for the tracking comparison.
pub const TRACKING_SLACK: f64 = 1e-9;

/// `δ_{n,m} = Σ_{i=1}^{m−1} a(n+i) P^{m−1−i} M̃(n+i+1)`, evaluated directly.
pub fn perturbation_sum(
    p: &DMatrix<f64>,
    grid: &TimeGrid,
    record: &RunRecord,
    n: usize,
    m: usize,
) -> Result<DMatrix<f64>> {
    check_noise_range(record, n, m)?;
    let shape = record.states[0].shape();
    let mut acc = DMatrix::zeros(shape.0, shape.1);
    for i in 1..m {
        let mut term = &record.noise[n + i] * grid.step(n + i);
        for _ in 0..(m - 1 - i) {
            term = p * term;
        }
        acc += term;
    }
    Ok(acc)
}

fn check_noise_range(record: &RunRecord, n: usize, m: usize) -> Result<()> {
    // the last draw used is M̃(n+m), stored at noise[n+m−1]
    if m >= 2 && n + m > record.len() {
        return Err(Error::IndexOutOfRange(format!(
            "delta_(n={n}, m={m}) needs noise up to step {}, record has {}",
            n + m,
            record.len()
        )));
    }
    Ok(())
}

/// `δ_{n,0}, …, δ_{n,len}` from `δ_{n,m+1} = P δ_{n,m} + a(n+m) M̃(n+m+1)`.
pub fn perturbation_series(
    p: &DMatrix<f64>,
    grid: &TimeGrid,
    record: &RunRecord,
    n: usize,
    len: usize,
) -> Result<Vec<DMatrix<f64>>> {
    check_noise_range(record, n, len)?;
    let shape = record.states[0].shape();
    let zero = DMatrix::zeros(shape.0, shape.1);
    let mut out = Vec::with_capacity(len + 1);
    out.push(zero.clone());
    if len >= 1 {
        out.push(zero);
    }
    for m in 1..len {
        let next = p * &out[m] + &record.noise[n + m] * grid.step(n + m);
        out.push(next);
    }
    Ok(out)
}

/// `ρ_k` and the knot series `z_m`: H-distances between the interpolated
/// iterates and the lifted reference segment, sampled at knots and midpoints.
pub fn tracking_error(
    record: &RunRecord,
    segment: &ReferenceSegment,
    metric: &HMetric,
) -> (f64, Vec<f64>) {
    let m = metric.nodes();
    let start = segment.start_step;
    let mut z = Vec::with_capacity(segment.knots.len());
    for (i, x) in segment.knots.iter().enumerate() {
        z.push(metric.norm(&(&record.states[start + i] - lift(x, m))));
    }
    let mut rho = z.iter().cloned().fold(0.0, f64::max);
    for (i, mid) in segment.midpoints.iter().enumerate() {
        let xbar = (&record.states[start + i] + &record.states[start + i + 1]) * 0.5;
        rho = rho.max(metric.norm(&(xbar - lift(mid, m))));
    }
    (rho, z)
}

/// Constants shared by the tracking, growth, tail and trapping bounds.
#[derive(Debug, Clone, Serialize)]
pub struct BoundConstants {
    pub nodes: usize,
    pub dim: usize,
    /// `L`, H-norm Lipschitz constant.
    pub lipschitz: f64,
    pub c_t: f64,
    pub pi_h_norm: f64,
    pub alpha: f64,
    /// `Λ(H)`
    pub lambda: f64,
    /// `T = T′ + c·a(0)`
    pub window: f64,
    /// Quasi-monotonicity constant `c`.
    pub c: f64,
    pub c_star: f64,
    /// `K_T = exp(L·T·(1 + ‖Π‖_H) + 1)`
    pub k_t: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
    pub k_prime: f64,
    /// Tube radius `δ`.
    pub delta: f64,
    pub kappa: f64,
    pub mgf_bound: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Tail exponent constant `D` (default `1/(2γ₁γ₂)` unless overridden).
    pub d_const: f64,
    pub d_overridden: bool,
    pub delta_tilde: f64,
    /// Spectral norm of `P`; the growth argument assumes it is at most 1.
    pub p_two_norm: f64,
}

/// `K_T = exp(L·T·(1 + ‖Π‖_H) + 1)`.
pub fn k_t(lipschitz: f64, window: f64, pi_h_norm: f64) -> f64 {
    (lipschitz * window * (1.0 + pi_h_norm) + 1.0).exp()
}

/// `K3 = (1 + K′T)·exp(K′T)`.
pub fn k3(k_prime: f64, window: f64) -> f64 {
    (1.0 + k_prime * window) * (k_prime * window).exp()
}

/// `K4 = K2(1 + K3(1 + K5))`.
pub fn k4(k2: f64, k3: f64, k5: f64) -> f64 {
    k2 * (1.0 + k3 * (1.0 + k5))
}

/// `δ̃ = δ / (2 K_T sqrt(Λ M³ d))`.
pub fn delta_tilde(delta: f64, k_t: f64, lambda: f64, nodes: usize, dim: usize) -> f64 {
    delta / (2.0 * k_t * (lambda * (nodes as f64).powi(3) * dim as f64).sqrt())
}

impl BoundConstants {
    pub fn new(
        problem: &ProblemInstance,
        grid: &TimeGrid,
        c_star: f64,
        d_override: Option<f64>,
    ) -> Self {
        let metric = &problem.metric;
        let window = grid.window();
        let c = grid.schedule().c;
        let lipschitz = problem.lipschitz;
        let pi_h_norm = metric.pi_h_norm();
        let kt = k_t(lipschitz, window, pi_h_norm);
        let k1 = problem.k1;
        let k2 = problem.noise.k2;
        let k5 = problem.attractor.k5;
        let k_prime = k1 + k2;
        let k3v = k3(k_prime, window);
        let k4v = k4(k2, k3v, k5);
        let nodes = problem.nodes();
        let dim = problem.dim();
        let gamma1 = window;
        let gamma2 = c * k4v * dim as f64;
        let default_d = if gamma2 > 0.0 {
            1.0 / (2.0 * gamma1 * gamma2)
        } else {
            f64::INFINITY
        };
        let lambda = metric.lambda_ratio();
        let delta = problem.attractor.delta;
        let p_two_norm = problem
            .gossip
            .p()
            .clone()
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        Self {
            nodes,
            dim,
            lipschitz,
            c_t: problem.c_t,
            pi_h_norm,
            alpha: metric.alpha(),
            lambda,
            window,
            c,
            c_star,
            k_t: kt,
            k1,
            k2,
            k3: k3v,
            k4: k4v,
            k5,
            k_prime,
            delta,
            kappa: problem.noise.kappa,
            mgf_bound: problem.noise.mgf_bound,
            gamma1,
            gamma2,
            d_const: d_override.unwrap_or(default_d),
            d_overridden: d_override.is_some(),
            delta_tilde: delta_tilde(delta, kt, lambda, nodes, dim),
            p_two_norm,
        }
    }

    /// Deterministic part of `K_{T,k}`: `L C_T ‖Π‖_H b + C_T sqrt(b/(1−α²))`.
    pub fn precursor(&self, b: f64) -> f64 {
        self.lipschitz * self.c_t * self.pi_h_norm * b
            + self.c_t * (b / (1.0 - self.alpha * self.alpha)).sqrt()
    }

    /// `K*_{T,k}` from `b(n_k)` and `a(n_k)`.
    pub fn k_star(&self, b: f64, a: f64) -> f64 {
        self.precursor(b) * self.k_t + self.c_t * self.c * a
    }

    /// Branch threshold `C·T/κ` on `δ̃`.
    pub fn branch_threshold(&self) -> f64 {
        self.mgf_bound * self.window / self.kappa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackingConstants {
    pub k_star: f64,
    pub k_t: f64,
    pub b: f64,
    pub a: f64,
}

/// `(K*_{T,k}, K_T)` for epoch `k`.
pub fn tracking_constants(constants: &BoundConstants, grid: &TimeGrid, k: usize) -> TrackingConstants {
    let n = grid.epoch(k).start;
    let b = grid.tail_square_sum(n);
    let a = grid.step(n);
    TrackingConstants {
        k_star: constants.k_star(b, a),
        k_t: constants.k_t,
        b,
        a,
    }
}

/// First epoch from which `(deterministic part of K_{T,k}) < δ/2` holds on
/// every remaining epoch of the grid.
pub fn burn_in_epoch(constants: &BoundConstants, grid: &TimeGrid) -> Option<usize> {
    let half = constants.delta / 2.0;
    let mut first = None;
    for e in grid.epochs() {
        let ok = constants.precursor(grid.tail_square_sum(e.start)) < half;
        match (ok, first) {
            (true, None) => first = Some(e.index),
            (false, Some(_)) => first = None,
            _ => {}
        }
    }
    first
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochTracking {
    pub k: usize,
    pub n_k: usize,
    pub upsilon: usize,
    pub rho: f64,
    pub k_star: f64,
    pub k_t: f64,
    /// `max_{l<υ_k} ‖δ_{n_k,l}‖_H`
    pub noise_term: f64,
    pub bound: f64,
    pub violated: bool,
    /// Whether the π-average at `n_k` lies in the closure of `B′`.
    pub start_in_basin: bool,
    /// Whether the epoch is at or past the burn-in epoch.
    pub past_burn_in: bool,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrackingReport {
    pub seed: u64,
    pub epochs: Vec<EpochTracking>,
    pub burn_in_epoch: Option<usize>,
    pub violations: usize,
    pub violations_past_burn_in: usize,
    pub max_rho: f64,
}

impl TrackingReport {
    pub fn violated_epochs(&self) -> Vec<usize> {
        self.epochs.iter().filter(|e| e.violated).map(|e| e.k).collect()
    }
}

/// Compares `ρ_k` with `K*_{T,k} + K_T·max_{l<υ_k}‖δ_{n_k,l}‖_H` on every
/// epoch fully covered by the record.
pub fn verify_tracking(
    problem: &ProblemInstance,
    grid: &TimeGrid,
    record: &RunRecord,
    constants: &BoundConstants,
) -> Result<TrackingReport> {
    let metric = &problem.metric;
    let ode = AveragedOde::new(&problem.drift, problem.gossip.pi(), ode::MAX_STEP);
    let burn_in = burn_in_epoch(constants, grid);
    let closure = problem.attractor.b_prime.radius * (1.0 + 1e-12);
    let mut epochs = Vec::new();
    for e in grid.epochs() {
        if e.end > record.len() {
            break;
        }
        let x0 = record.average(e.start, &problem.gossip);
        let segment = ode::reference_segment(&ode, grid, e.index, &x0)?;
        let (rho, z) = tracking_error(record, &segment, metric);
        let series = perturbation_series(problem.gossip.p(), grid, record, e.start, e.len())?;
        let noise_term = series[..e.len()]
            .iter()
            .map(|d| metric.norm(d))
            .fold(0.0, f64::max);
        let lc = tracking_constants(constants, grid, e.index);
        let bound = lc.k_star + constants.k_t * noise_term;
        let violated = rho > bound + TRACKING_SLACK * (1.0 + bound);
        epochs.push(EpochTracking {
            k: e.index,
            n_k: e.start,
            upsilon: e.len(),
            rho,
            k_star: lc.k_star,
            k_t: constants.k_t,
            noise_term,
            bound,
            violated,
            start_in_basin: (&x0 - &problem.attractor.b_prime.center).norm() <= closure,
            past_burn_in: burn_in.is_some_and(|c| e.index >= c),
            z,
        });
    }
    let violations = epochs.iter().filter(|e| e.violated).count();
    let violations_past_burn_in = epochs
        .iter()
        .filter(|e| e.violated && e.past_burn_in)
        .count();
    let max_rho = epochs.iter().map(|e| e.rho).fold(0.0, f64::max);
    Ok(TrackingReport {
        seed: record.seed,
        epochs,
        burn_in_epoch: burn_in,
        violations,
        violations_past_burn_in,
        max_rho,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub k3: f64,
    pub checked: usize,
    pub failures: usize,
    pub failed_epochs: Vec<usize>,
    /// Largest `‖X(j)‖₂ / (K3(1 + ‖X(n_k)‖₂))` seen.
    pub worst_ratio: f64,
}

/// `‖X(j)‖₂ ≤ K3(1 + ‖X(n_k)‖₂)` at every knot of every covered epoch.
pub fn growth_check(record: &RunRecord, grid: &TimeGrid, constants: &BoundConstants) -> GrowthReport {
    let mut report = GrowthReport {
        k3: constants.k3,
        checked: 0,
        failures: 0,
        failed_epochs: Vec::new(),
        worst_ratio: 0.0,
    };
    for e in grid.epochs() {
        if e.end >= record.states.len() {
            break;
        }
        let cap = constants.k3 * (1.0 + record.states[e.start].norm());
        let mut failed = false;
        for j in e.start..=e.end {
            let r = record.states[j].norm() / cap;
            report.worst_ratio = report.worst_ratio.max(r);
            report.checked += 1;
            if r > 1.0 {
                failed = true;
            }
        }
        if failed {
            report.failures += 1;
            report.failed_epochs.push(e.index);
        }
    }
    report
}

/// `min(1, 2 exp(−ε² / (2 Σ A²)))` for increments bounded by `weights`.
pub fn azuma_tail(epsilon: f64, weights: &[f64]) -> f64 {
    let s2: f64 = weights.iter().map(|a| a * a).sum();
    if s2 == 0.0 {
        return if epsilon > 0.0 { 0.0 } else { 1.0 };
    }
    (2.0 * (-epsilon * epsilon / (2.0 * s2)).exp()).min(1.0)
}

/// `(2e^{−Dε²/ω}, 2e^{−Dε/ω})`, each clamped to 1.
pub fn exponential_tails(epsilon: f64, d_const: f64, omega: f64) -> (f64, f64) {
    (
        (2.0 * (-d_const * epsilon * epsilon / omega).exp()).min(1.0),
        (2.0 * (-d_const * epsilon / omega).exp()).min(1.0),
    )
}

/// Bounding constants of a weighted martingale array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleBoundParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub omega: f64,
    pub kappa: f64,
    pub mgf_bound: f64,
    pub d_const: f64,
    pub k4: f64,
    pub k5: f64,
    pub c_star: f64,
}

impl MartingaleBoundParams {
    pub fn from_constants(constants: &BoundConstants, omega: f64) -> Self {
        Self {
            gamma1: constants.gamma1,
            gamma2: constants.gamma2,
            omega,
            kappa: constants.kappa,
            mgf_bound: constants.mgf_bound,
            d_const: constants.d_const,
            k4: constants.k4,
            k5: constants.k5,
            c_star: constants.c_star,
        }
    }
}

/// Weights `a(n+i)|[P^{l−1−i}]_{row,col}|`, `i = 0..l`, of the sum
/// `S_l = Σ_i a(n+i) [P^{l−1−i}]_{row,col} M_{col,·}(n+i+1)`.
pub fn weighted_sum_coefficients(
    p: &DMatrix<f64>,
    grid: &TimeGrid,
    n: usize,
    l: usize,
    row: usize,
    col: usize,
) -> Vec<f64> {
    let m = p.nrows();
    let mut powers = Vec::with_capacity(l);
    let mut pk = DMatrix::<f64>::identity(m, m);
    for _ in 0..l {
        powers.push(pk[(row, col)]);
        pk = p * pk;
    }
    (0..l)
        .map(|i| grid.step(n + i) * powers[l - 1 - i])
        .collect()
}

/// Draws of `Σ_i w_i U_i` with `U_i` uniform on `[−amplitude, amplitude]`.
pub fn simulate_weighted_sums<R: Rng + ?Sized>(
    coefficients: &[f64],
    amplitude: f64,
    draws: usize,
    rng: &mut R,
) -> Vec<f64> {
    (0..draws)
        .map(|_| {
            coefficients
                .iter()
                .map(|w| w * rng.gen_range(-amplitude..=amplitude))
                .sum()
        })
        .collect()
}

/// Fraction of `samples` with `|s| > epsilon`.
pub fn empirical_tail(samples: &[f64], epsilon: f64) -> f64 {
    samples.iter().filter(|s| s.abs() > epsilon).count() as f64 / samples.len().max(1) as f64
}

/// Largest realized `|Y_i| / (K4·d·a(n_k+i))` over the covered epochs and all
/// index triples.
pub fn increment_ratio(
    grid: &TimeGrid,
    record: &RunRecord,
    constants: &BoundConstants,
) -> f64 {
    if constants.k4 == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0_f64;
    for e in grid.epochs() {
        if e.end > record.len() {
            break;
        }
        // entries of P^j lie in [0, 1], so |Y_i| ≤ a(n_k+i)·max|M̃(n_k+i+1)|
        for i in 0..e.len() {
            let y = record.noise[e.start + i].amax();
            worst = worst.max(y / (constants.k4 * constants.dim as f64));
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `e^{−Dδ̃²/a(n)}` terms.
    Quadratic,
    /// `e^{−Dδ̃/a(n)}` terms.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremBound {
    pub branch: Branch,
    /// Series `Σ_{n≥n0} n e^{−E/a(n)}` (a lower bound of it when vacuous).
    pub series: f64,
    /// `1 − 2M²dC*·series` before clamping.
    pub raw: f64,
    pub value: f64,
    pub vacuous: bool,
    pub terms: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremInputs {
    pub n0: usize,
    pub nodes: usize,
    pub dim: usize,
    pub c_star: f64,
    pub d_const: f64,
    pub delta_tilde: f64,
    pub kappa: f64,
    pub mgf_bound: f64,
    pub window: f64,
}

/// Upper limit on evaluated series terms.
const MAX_SERIES_TERMS: usize = 200_000_000;

/// `1 − 2M²dC* Σ_{n≥n0} n e^{−E/a(n)}` with `E = Dδ̃²` if `δ̃ ≤ C·T/κ` and
/// `E = Dδ̃` otherwise, clamped to `[0, 1]`.
pub fn theorem_bound(schedule: &StepSchedule, inputs: &TheoremInputs) -> Result<TheoremBound> {
    let dt = inputs.delta_tilde;
    let branch = if dt <= inputs.mgf_bound * inputs.window / inputs.kappa {
        Branch::Quadratic
    } else {
        Branch::Linear
    };
    let exponent = match branch {
        Branch::Quadratic => inputs.d_const * dt * dt,
        Branch::Linear => inputs.d_const * dt,
    };
    let prefactor = 2.0 * (inputs.nodes * inputs.nodes * inputs.dim) as f64 * inputs.c_star;
    let finite_len = schedule.len();
    if finite_len.is_none() && !schedule.vanishes() {
        return Err(Error::Divergent(
            "step sizes do not vanish, so the terms n·exp(-E/a(n)) do not decay".into(),
        ));
    }
    let vacuous_at = if prefactor > 0.0 { 1.0 / prefactor } else { f64::INFINITY };
    let mut sum = 0.0_f64;
    let mut prev = 0.0_f64;
    let mut terms = 0usize;
    let mut n = inputs.n0;
    let mut tail = 0.0;
    let mut vacuous_early = false;
    loop {
        if finite_len.is_some_and(|len| n >= len) {
            break;
        }
        let a = schedule.step(n).unwrap_or(0.0);
        let term = if a > 0.0 {
            n as f64 * (-exponent / a).exp()
        } else {
            0.0
        };
        sum += term;
        terms += 1;
        if sum >= vacuous_at {
            vacuous_early = true;
            break;
        }
        if n >= 1 && term < f64::MIN_POSITIVE {
            break;
        }
        if term < prev && term <= 1e-16 * sum {
            let r = term / prev;
            tail = term * r / (1.0 - r);
            break;
        }
        if terms >= MAX_SERIES_TERMS {
            return Err(Error::Divergent(format!(
                "series not settled after {MAX_SERIES_TERMS} terms (last term {term:e})"
            )));
        }
        prev = term;
        n += 1;
    }
    let series = sum + tail;
    let raw = 1.0 - prefactor * series;
    let vacuous = vacuous_early || raw <= 0.0;
    Ok(TheoremBound {
        branch,
        series,
        raw,
        value: raw.clamp(0.0, 1.0),
        vacuous,
        terms,
    })
}

/// Wilson score interval for `successes / trials`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// How `X(0)` is drawn for each replica: `1cᵀ` plus entrywise uniform
/// perturbations on `[−spread, spread]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub center: DVector<f64>,
    pub spread: f64,
}

impl InitialState {
    pub fn draw<R: Rng + ?Sized>(&self, nodes: usize, rng: &mut R) -> DMatrix<f64> {
        let base = lift(&self.center, nodes);
        if self.spread == 0.0 {
            return base;
        }
        base + DMatrix::from_fn(nodes, self.center.len(), |_, _| {
            rng.gen_range(-self.spread..=self.spread)
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrapSettings {
    pub replicas: usize,
    pub master_seed: u64,
    pub cap: f64,
    pub initial: InitialState,
    pub c_star: f64,
    pub d_override: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaOutcome {
    NotConditioned,
    Capped,
    Trapped,
    Escaped,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub schema_version: u32,
    pub n0: usize,
    pub horizon: usize,
    /// `[T_0 + τ, t(horizon)]`, the window on which the event is checked.
    pub check_window: (f64, f64),
    pub tau: f64,
    pub epsilon: f64,
    pub margin: f64,
    pub delta: f64,
    pub trap_level: f64,
    pub delta_tilde: f64,
    pub d_const: f64,
    pub d_overridden: bool,
    pub k_t: f64,
    pub c_star: f64,
    pub branch: Branch,
    pub theoretical_bound: f64,
    pub theoretical_raw: f64,
    pub vacuous: bool,
    pub burn_in_holds: bool,
    pub empirical_frequency: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_half_width: f64,
    pub replicas_total: usize,
    pub conditioned: usize,
    pub capped: usize,
    pub not_conditioned: usize,
    pub trapped: usize,
}

impl ConcentrationReport {
    /// `frequency + half-width ≥ bound`, trivially true when vacuous.
    pub fn ordering_holds(&self) -> bool {
        self.vacuous || self.empirical_frequency + self.ci_half_width >= self.theoretical_bound
    }
}

/// Simulates one replica to `horizon` and classifies it.
pub fn trap_replica(
    problem: &ProblemInstance,
    grid: &TimeGrid,
    settings: &TrapSettings,
    replica: u64,
) -> Result<ReplicaOutcome> {
    let mut rng = engine::replica_rng(settings.master_seed, replica);
    let x0 = settings.initial.draw(problem.nodes(), &mut rng);
    let seed: u64 = rng.gen();
    let mut sim = Simulator::new(problem, grid, x0, seed)?;
    let n0 = grid.boundaries()[0];
    let horizon = grid.horizon();
    while sim.index() < n0 {
        sim.step_update()?;
        if sim.state().norm() > settings.cap {
            return Ok(ReplicaOutcome::Capped);
        }
    }
    if !problem.start_condition(sim.state()) {
        return Ok(ReplicaOutcome::NotConditioned);
    }
    let att = &problem.attractor;
    let level = att.trap_level();
    let check_from = grid.time(n0) + att.tau;
    let inside = |x: &DMatrix<f64>| {
        att.lyapunov.lifted_distance(x, level, &problem.metric) < att.delta
    };
    let mut prev = sim.state().clone();
    if grid.time(n0) >= check_from && !inside(&prev) {
        return Ok(ReplicaOutcome::Escaped);
    }
    while sim.index() < horizon {
        let n = sim.index();
        sim.step_update()?;
        let x = sim.state();
        if x.norm() > settings.cap {
            return Ok(ReplicaOutcome::Capped);
        }
        let (t0, t1) = (grid.time(n), grid.time(n + 1));
        if t1 >= check_from {
            if t0 < check_from {
                // entry point of the window on the interpolated path
                let u = (check_from - t0) / (t1 - t0);
                let xe = &prev * (1.0 - u) + x * u;
                if !inside(&xe) {
                    return Ok(ReplicaOutcome::Escaped);
                }
            }
            if !inside(x) {
                return Ok(ReplicaOutcome::Escaped);
            }
        }
        prev.copy_from(x);
    }
    Ok(ReplicaOutcome::Trapped)
}

/// Monte Carlo estimate of the conditional trapping probability together with
/// the theoretical lower bound. Runs replicas on the current rayon pool.
pub fn trap_probability_mc(
    problem: &ProblemInstance,
    grid: &TimeGrid,
    settings: &TrapSettings,
) -> Result<ConcentrationReport> {
    let n0 = grid.boundaries()[0];
    let att = &problem.attractor;
    let check_from = grid.time(n0) + att.tau;
    let t_end = grid.time(grid.horizon());
    if t_end < check_from {
        return Err(Error::HorizonExceeded(format!(
            "t(horizon) = {t_end} is before T_0 + tau = {check_from}"
        )));
    }
    let outcomes: Vec<ReplicaOutcome> = (0..settings.replicas as u64)
        .into_par_iter()
        .map(|r| trap_replica(problem, grid, settings, r))
        .collect::<Result<_>>()?;
    let count = |o: ReplicaOutcome| outcomes.iter().filter(|x| **x == o).count();
    let trapped = count(ReplicaOutcome::Trapped);
    let conditioned = trapped + count(ReplicaOutcome::Escaped);
    if conditioned < MIN_CONDITIONED {
        return Err(Error::InsufficientConditioning {
            conditioned,
            required: MIN_CONDITIONED,
        });
    }
    let constants = BoundConstants::new(problem, grid, settings.c_star, settings.d_override);
    let bound = theorem_bound(
        grid.schedule(),
        &TheoremInputs {
            n0,
            nodes: problem.nodes(),
            dim: problem.dim(),
            c_star: constants.c_star,
            d_const: constants.d_const,
            delta_tilde: constants.delta_tilde,
            kappa: constants.kappa,
            mgf_bound: constants.mgf_bound,
            window: constants.window,
        },
    )?;
    let freq = trapped as f64 / conditioned as f64;
    let (lo, hi) = wilson_interval(trapped, conditioned, Z_95);
    Ok(ConcentrationReport {
        schema_version: 1,
        n0,
        horizon: grid.horizon(),
        check_window: (check_from, t_end),
        tau: att.tau,
        epsilon: att.epsilon,
        margin: att.margin,
        delta: att.delta,
        trap_level: att.trap_level(),
        delta_tilde: constants.delta_tilde,
        d_const: constants.d_const,
        d_overridden: constants.d_overridden,
        k_t: constants.k_t,
        c_star: constants.c_star,
        branch: bound.branch,
        theoretical_bound: bound.value,
        theoretical_raw: bound.raw,
        vacuous: bound.vacuous,
        burn_in_holds: burn_in_epoch(&constants, grid) == Some(0),
        empirical_frequency: freq,
        ci_low: lo,
        ci_high: hi,
        ci_half_width: (hi - freq).max(freq - lo),
        replicas_total: settings.replicas,
        conditioned,
        capped: count(ReplicaOutcome::Capped),
        not_conditioned: count(ReplicaOutcome::NotConditioned),
        trapped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::{self, GossipModel};
    use crate::problem::{DriftField, ProblemSetup};
    use crate::schedule::{build_time_grid, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record_from_noise(noise: Vec<DMatrix<f64>>) -> RunRecord {
        let shape = noise[0].shape();
        RunRecord {
            seed: 0,
            states: vec![DMatrix::zeros(shape.0, shape.1); noise.len() + 1],
            noise,
            bounded: true,
        }
    }

    fn table_grid(values: Vec<f64>) -> TimeGrid {
        let len = values.len();
        let s = StepSchedule::new(ScheduleKind::Table { values });
        build_time_grid(&s, 0.5, 0, len - 1, None).unwrap()
    }

    #[test]
    fn perturbation_sum_small_cases() {
        let p = DMatrix::from_element(2, 2, 0.5);
        let grid = table_grid(vec![1.0, 0.5, 0.25, 0.2, 0.1]);
        let noise = vec![
            DMatrix::from_row_slice(2, 1, &[9.0, 9.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DMatrix::from_row_slice(2, 1, &[2.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 4.0]),
        ];
        let rec = record_from_noise(noise);
        assert_eq!(perturbation_sum(&p, &grid, &rec, 0, 1).unwrap(), DMatrix::zeros(2, 1));
        // m = 3: a(1) P M̃(2) + a(2) M̃(3) = 0.5·P(1,−1) + 0.25·(2,0) = (0.5, 0)
        let d3 = perturbation_sum(&p, &grid, &rec, 0, 3).unwrap();
        assert!((d3 - DMatrix::from_row_slice(2, 1, &[0.5, 0.0])).amax() < 1e-15);
        let series = perturbation_series(&p, &grid, &rec, 0, 4).unwrap();
        for (m, s) in series.iter().enumerate() {
            let direct = perturbation_sum(&p, &grid, &rec, 0, m).unwrap();
            assert!((s - direct).amax() < 1e-14);
        }
        assert!(matches!(
            perturbation_sum(&p, &grid, &rec, 1, 5),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn azuma_examples() {
        assert_eq!(azuma_tail(0.0, &[0.1]), 1.0);
        let v = azuma_tail(0.2, &[0.1]);
        assert!((v - 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.27067).abs() < 1e-5);
    }

    #[test]
    fn delta_tilde_examples() {
        assert!((delta_tilde(2.0 * 3.0 * (2.0f64 * 27.0 * 2.0).sqrt(), 3.0, 2.0, 3, 2) - 1.0).abs() < 1e-15);
        assert!((delta_tilde(0.3, 2.0, 1.0, 1, 1) - 0.075).abs() < 1e-15);
        let v = delta_tilde(0.1, 5.0, 2.0, 3, 2);
        assert!((v - 0.1 / (10.0 * 108f64.sqrt())).abs() < 1e-18);
        assert!((v - 9.6225e-4).abs() < 1e-7);
    }

    #[test]
    fn k_constants_degenerate() {
        assert!((k_t(0.0, 3.0, 1.7) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(k3(0.0, 2.0), 1.0);
    }

    fn inputs(n0: usize, exponent: f64) -> TheoremInputs {
        TheoremInputs {
            n0,
            nodes: 2,
            dim: 1,
            c_star: 2.0,
            d_const: exponent,
            delta_tilde: 1.0,
            kappa: 1.0,
            mgf_bound: 10.0,
            window: 1.0,
        }
    }

    #[test]
    fn theorem_bound_matches_long_summation() {
        let s = StepSchedule::harmonic();
        let b = theorem_bound(&s, &inputs(20, 1.0)).unwrap();
        assert_eq!(b.branch, Branch::Quadratic);
        // oracle: 10⁶ direct terms of n e^{−(n+1)}
        let direct: f64 = (20..1_000_020u64).map(|n| n as f64 * (-(n as f64 + 1.0)).exp()).sum();
        let expected = 1.0 - 16.0 * direct;
        assert!((b.value - expected).abs() < 1e-15);
        assert!(!b.vacuous);
    }

    #[test]
    fn theorem_bound_clamps_and_diverges() {
        let s = StepSchedule::harmonic();
        let b = theorem_bound(&s, &inputs(1, 1e-6)).unwrap();
        assert!(b.vacuous);
        assert_eq!(b.value, 0.0);
        let c = StepSchedule::new(ScheduleKind::Constant { value: 0.1 });
        assert!(matches!(theorem_bound(&c, &inputs(1, 1.0)), Err(Error::Divergent(_))));
        let mut big = inputs(1, 1.0);
        big.delta_tilde = 1e6;
        let b = theorem_bound(&s, &big).unwrap();
        assert_eq!(b.branch, Branch::Linear);
        assert!((b.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wilson_interval_brackets() {
        let (lo, hi) = wilson_interval(200, 200, Z_95);
        assert!(hi == 1.0 && lo > 0.98 && lo < 0.99);
        let (lo, hi) = wilson_interval(50, 100, Z_95);
        assert!((lo + hi - 1.0).abs() < 1e-12);
        assert!((hi - lo) > 0.19 && (hi - lo) < 0.2);
    }

    fn linear_problem(beta: f64) -> ProblemInstance {
        let g = GossipModel::new(gossip::complete(3)).unwrap();
        let setup = ProblemSetup {
            drift: DriftField::linear(DMatrix::from_row_slice(3, 1, &[0.5, -0.5, 0.0])),
            equilibrium_guess: 0.0,
            b_prime_radius: 1.1,
            b_breve_radius: 1.6,
            epsilon: 1.0,
            beta,
            grid_resolution: 17,
            max_step: 1e-3,
        };
        ProblemInstance::build(g, &setup, 2.0).unwrap()
    }

    #[test]
    fn zero_drift_constants() {
        let p = linear_problem(0.0);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 100, None).unwrap();
        let mut c = BoundConstants::new(&p, &grid, 4.0, None);
        c.lipschitz = 0.0;
        c.c_t = 0.0;
        c.k_t = k_t(0.0, c.window, c.pi_h_norm);
        let lc = tracking_constants(&c, &grid, 2);
        assert_eq!(lc.k_star, 0.0);
        assert!((lc.k_t - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn tracking_zero_noise_holds_and_shrunk_constant_fails() {
        let p = linear_problem(0.0);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 3000, None).unwrap();
        let x0 = DMatrix::from_row_slice(3, 1, &[0.4, -0.2, 0.1]);
        let rec = engine::run(&p, &grid, &x0, 3000, 1, None).unwrap();
        let c = BoundConstants::new(&p, &grid, 4.0, None);
        let rep = verify_tracking(&p, &grid, &rec, &c).unwrap();
        assert!(rep.epochs.len() >= 5);
        assert_eq!(rep.violations, 0);
        assert!(rep.epochs.iter().all(|e| e.noise_term == 0.0));
        let mut shrunk = c.clone();
        shrunk.k_t = 0.0;
        shrunk.c_t = 0.0;
        let rep = verify_tracking(&p, &grid, &rec, &shrunk).unwrap();
        assert!(rep.violations > 0);
    }

    #[test]
    fn tracking_at_consensus_equilibrium_is_tiny() {
        let p = linear_problem(0.0);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 500, None).unwrap();
        let x0 = DMatrix::from_element(3, 1, 0.0);
        let rec = engine::run(&p, &grid, &x0, 500, 1, None).unwrap();
        // rows differ from the average after one step because targets differ,
        // yet the average itself stays at the equilibrium
        let c = BoundConstants::new(&p, &grid, 4.0, None);
        let rep = verify_tracking(&p, &grid, &rec, &c).unwrap();
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn growth_holds_with_noise() {
        let p = linear_problem(0.2);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 2000, None).unwrap();
        let rec = engine::run(&p, &grid, &DMatrix::zeros(3, 1), 2000, 9, None).unwrap();
        let c = BoundConstants::new(&p, &grid, 4.0, None);
        let g = growth_check(&rec, &grid, &c);
        assert_eq!(g.failures, 0);
        assert!(g.checked > 0);
        assert!(increment_ratio(&grid, &rec, &c) <= 1.0);
    }

    #[test]
    fn weighted_sums_respect_azuma() {
        let p = DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.5, 0.5]);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 200, None).unwrap();
        let w = weighted_sum_coefficients(&p, &grid, 10, 8, 0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = simulate_weighted_sums(&w, 0.5, 100_000, &mut rng);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64).sqrt();
        let bounds: Vec<f64> = w.iter().map(|x| x.abs() * 0.5).collect();
        for k in [0.5, 1.0, 2.0, 3.0] {
            assert!(empirical_tail(&samples, k * sd) <= azuma_tail(k * sd, &bounds));
        }
    }

    #[test]
    fn trap_zero_noise_inside_attractor() {
        let p = linear_problem(0.0);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 20, 1500, None).unwrap();
        let settings = TrapSettings {
            replicas: 40,
            master_seed: 3,
            cap: 1e6,
            initial: InitialState {
                center: DVector::zeros(1),
                spread: 0.0,
            },
            c_star: 4.0,
            d_override: None,
        };
        let rep = trap_probability_mc(&p, &grid, &settings).unwrap();
        assert_eq!(rep.empirical_frequency, 1.0);
        assert_eq!(rep.conditioned, 40);
        // no noise: D is unbounded and the lower bound is exactly 1
        assert!(!rep.vacuous);
        assert_eq!(rep.theoretical_bound, 1.0);
        assert!(rep.ordering_holds());
    }

    #[test]
    fn trap_needs_enough_replicas() {
        let p = linear_problem(0.0);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 20, 1500, None).unwrap();
        let settings = TrapSettings {
            replicas: 1,
            master_seed: 3,
            cap: 1e6,
            initial: InitialState {
                center: DVector::zeros(1),
                spread: 0.0,
            },
            c_star: 4.0,
            d_override: None,
        };
        assert!(matches!(
            trap_probability_mc(&p, &grid, &settings),
            Err(Error::InsufficientConditioning { conditioned: 1, required: 30 })
        ));
    }
}
