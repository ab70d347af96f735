//! Test problems: per-node drifts, bounded martingale-difference noise and the
//! attractor data used by the trapping argument.
//!
//! Both shipped problems use a quadratic Lyapunov function
//! `V(x) = ‖x − x*‖²` centred at the attracting equilibrium, so sublevel sets
//! are Euclidean balls and the δ-conditions can be evaluated exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::gossip::GossipModel;
use crate::hnorm::HMetric;
use crate::ode;

/// Fraction of the grid minimum kept as the descent margin `Δ`.
pub const MARGIN_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub enum DriftKind {
    /// `h^i(x) = −(x − θ_i)`; rows of `targets` are the `θ_i`.
    Linear { targets: DMatrix<f64> },
    /// `h^i(x) = x − x³ + c_i` in one dimension.
    DoubleWell { offsets: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct DriftField {
    kind: DriftKind,
    nodes: usize,
    dim: usize,
}

impl DriftField {
    pub fn linear(targets: DMatrix<f64>) -> Self {
        let (nodes, dim) = targets.shape();
        Self {
            kind: DriftKind::Linear { targets },
            nodes,
            dim,
        }
    }

    pub fn double_well(offsets: DVector<f64>) -> Self {
        let nodes = offsets.len();
        Self {
            kind: DriftKind::DoubleWell { offsets },
            nodes,
            dim: 1,
        }
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `h^i(x)` written into `out`.
    pub fn node_drift(&self, i: usize, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Linear { targets } => {
                for j in 0..self.dim {
                    out[j] = targets[(i, j)] - x[j];
                }
            }
            DriftKind::DoubleWell { offsets } => {
                let v = x[0];
                out[0] = v - v * v * v + offsets[i];
            }
        }
    }

    /// `h(X)`: row `i` is `h^i(x^i)`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nodes, self.dim);
        let mut row_in = vec![0.0; self.dim];
        let mut row_out = vec![0.0; self.dim];
        for i in 0..self.nodes {
            for j in 0..self.dim {
                row_in[j] = x[(i, j)];
            }
            self.node_drift(i, &row_in, &mut row_out);
            for j in 0..self.dim {
                out[(i, j)] = row_out[j];
            }
        }
        out
    }

    /// `h(1xᵀ)`: every node evaluated at the common point `x`.
    pub fn apply_lifted(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.apply(&lift(x, self.nodes))
    }

    /// `h̄(x) = Σ_j π(j) h^j(x)`.
    pub fn averaged(&self, x: &DVector<f64>, pi: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        let mut row = vec![0.0; self.dim];
        for i in 0..self.nodes {
            self.node_drift(i, x.as_slice(), &mut row);
            for j in 0..self.dim {
                acc[j] += pi[i] * row[j];
            }
        }
        acc
    }

    /// Derivative bound `max |∂h^i/∂x|` over the closed ball, in the
    /// Euclidean sense per node.
    fn euclidean_lipschitz(&self, region: &Ball) -> f64 {
        match &self.kind {
            DriftKind::Linear { .. } => 1.0,
            DriftKind::DoubleWell { .. } => {
                let (lo, hi) = region.interval();
                let mut l = (1.0 - 3.0 * lo * lo).abs().max((1.0 - 3.0 * hi * hi).abs());
                if lo <= 0.0 && hi >= 0.0 {
                    l = l.max(1.0);
                }
                l
            }
        }
    }

    /// Lipschitz constant of `X ↦ h(X)` in the H-norm on `region^M`.
    ///
    /// The linear field is `−I` on arrays and has constant 1 in every norm.
    /// Otherwise `h(X) − h(Y)` is a row-wise map bounded by the Euclidean
    /// constant `L₂`, and `‖·‖_H` distorts by at most `sqrt(Λ(H))`.
    pub fn lipschitz(&self, region: &Ball, metric: &HMetric) -> f64 {
        match &self.kind {
            DriftKind::Linear { .. } => 1.0,
            DriftKind::DoubleWell { .. } => {
                self.euclidean_lipschitz(region) * metric.lambda_ratio().sqrt()
            }
        }
    }

    /// `K1` with `‖h(X)‖₂ ≤ K1(1 + ‖X‖₂)`; global for the linear field,
    /// valid on `region^M` for the double well.
    pub fn linear_growth(&self, region: &Ball) -> f64 {
        match &self.kind {
            DriftKind::Linear { targets } => 1.0 + targets.norm(),
            DriftKind::DoubleWell { offsets } => {
                let (lo, hi) = region.interval();
                let cubic = |v: f64| (v - v * v * v).abs();
                let crit = 1.0 / 3f64.sqrt();
                let mut peak = cubic(lo).max(cubic(hi));
                for c in [crit, -crit] {
                    if c > lo && c < hi {
                        peak = peak.max(cubic(c));
                    }
                }
                offsets
                    .iter()
                    .map(|ci| (peak + ci.abs()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    /// Equilibrium of the averaged field nearest `guess`.
    pub fn equilibrium(&self, pi: &DVector<f64>, guess: f64) -> Result<DVector<f64>> {
        match &self.kind {
            DriftKind::Linear { targets } => Ok(targets.transpose() * pi),
            DriftKind::DoubleWell { offsets } => {
                let cbar = offsets.dot(pi);
                let mut x = guess;
                for _ in 0..100 {
                    let f = x - x * x * x + cbar;
                    let df = 1.0 - 3.0 * x * x;
                    let step = f / df;
                    x -= step;
                    if step.abs() < 1e-15 {
                        break;
                    }
                }
                let residual = x - x * x * x + cbar;
                if !(residual.abs() < 1e-12) || (1.0 - 3.0 * x * x) >= 0.0 {
                    return Err(Error::InvalidProblem(format!(
                        "no stable averaged equilibrium near {guess}"
                    )));
                }
                Ok(DVector::from_element(1, x))
            }
        }
    }
}

/// `1xᵀ` with `nodes` rows.
pub fn lift(x: &DVector<f64>, nodes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nodes, x.len(), |_, j| x[j])
}

/// Open Euclidean ball in `ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: DVector<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (x - &self.center).norm() < self.radius
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn interval(&self) -> (f64, f64) {
        (self.center[0] - self.radius, self.center[0] + self.radius)
    }

    /// Points of a `resolution`-per-axis grid on the bounding box that lie in
    /// the closed ball.
    pub fn grid(&self, resolution: usize) -> Vec<DVector<f64>> {
        let d = self.dim();
        let res = resolution.max(2);
        let mut out = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            let p = DVector::from_fn(d, |j, _| {
                self.center[j] - self.radius + 2.0 * self.radius * idx[j] as f64 / (res - 1) as f64
            });
            if (&p - &self.center).norm() <= self.radius * (1.0 + 1e-12) {
                out.push(p);
            }
            let mut j = 0;
            loop {
                if j == d {
                    return out;
                }
                idx[j] += 1;
                if idx[j] < res {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }

    /// Points on the sphere of radius `r` around the centre.
    pub fn sphere(&self, r: f64, count: usize) -> Vec<DVector<f64>> {
        sphere_points(&self.center, r, count)
    }
}

/// Deterministic direction set: axes in every dimension, a uniform circle in
/// two dimensions, seeded random directions above.
fn sphere_points(center: &DVector<f64>, r: f64, count: usize) -> Vec<DVector<f64>> {
    let d = center.len();
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    for j in 0..d {
        for s in [1.0, -1.0] {
            let mut u = DVector::zeros(d);
            u[j] = s;
            dirs.push(u);
        }
    }
    if d == 2 {
        for k in 0..count {
            let a = std::f64::consts::TAU * k as f64 / count as f64;
            dirs.push(DVector::from_vec(vec![a.cos(), a.sin()]));
        }
    } else if d > 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..count {
            let u = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let n = u.norm();
            if n > 1e-9 {
                dirs.push(u / n);
            }
        }
    }
    dirs.into_iter().map(|u| center + u * r).collect()
}

/// Entrywise uniform noise on `[−β, β]` scaled by `1 + ‖X(n)‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub beta: f64,
    /// `‖M̃‖_H ≤ K2(1 + ‖X‖)`, with `K2 = β·sqrt(Λ(H)·M·d)`.
    pub k2: f64,
    /// Exponential-moment exponent.
    pub kappa: f64,
    /// `E[exp(κ|M_ij|)] ≤ C` while `‖X‖₂ ≤ K5`.
    pub mgf_bound: f64,
}

impl NoiseModel {
    pub fn uniform(beta: f64, metric: &HMetric, nodes: usize, dim: usize, k5: f64) -> Self {
        let kappa = 1.0;
        Self {
            beta,
            k2: beta * (metric.lambda_ratio() * (nodes * dim) as f64).sqrt(),
            kappa,
            mgf_bound: (kappa * beta * (1.0 + k5)).exp(),
        }
    }

    /// Per-entry amplitude at `state`.
    pub fn amplitude(&self, state: &DMatrix<f64>) -> f64 {
        self.beta * (1.0 + state.norm())
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
        let scale = self.amplitude(state);
        DMatrix::from_fn(state.nrows(), state.ncols(), |_, _| {
            rng.gen_range(-1.0..=1.0) * scale
        })
    }
}

pub fn sample_noise<R: Rng + ?Sized>(
    noise: &NoiseModel,
    state: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    noise.sample(state, rng)
}

/// `V(x) = ‖x − x*‖²` with its sublevel sets `A^η` (balls of radius `sqrt η`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLyapunov {
    pub center: DVector<f64>,
}

impl QuadraticLyapunov {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (x - &self.center).norm_squared()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center) * 2.0
    }

    /// Euclidean distance from `x` to `A^η`.
    pub fn distance_to_sublevel(&self, x: &DVector<f64>, eta: f64) -> f64 {
        ((x - &self.center).norm() - eta.max(0.0).sqrt()).max(0.0)
    }

    /// H-distance from the array `X` to the lifted set `{1yᵀ : V(y) ≤ η}`.
    ///
    /// Because `H1 = 1`, `‖X − 1yᵀ‖²_H = ‖X − 1x̂ᵀ‖²_H + M‖y − x̂‖²` with `x̂`
    /// the plain row mean, so the minimisation reduces to the row mean.
    pub fn lifted_distance(&self, x: &DMatrix<f64>, eta: f64, metric: &HMetric) -> f64 {
        let m = x.nrows();
        let mean = x.row_mean().transpose();
        let spread = metric.norm(&(x - lift(&mean, m)));
        let dist = self.distance_to_sublevel(&mean, eta);
        (spread * spread + m as f64 * dist * dist).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct AttractorSpec {
    pub lyapunov: QuadraticLyapunov,
    /// `A^ε = {V ≤ ε}`.
    pub epsilon: f64,
    /// `B′`
    pub b_prime: Ball,
    /// `B̆`
    pub b_breve: Ball,
    /// Descent margin `Δ`.
    pub margin: f64,
    /// Tube radius `δ`.
    pub delta: f64,
    /// `T` used for `Δ` and `τ`.
    pub window: f64,
    pub tau: f64,
    /// `sup_{X ∈ B̂} ‖X‖₂`.
    pub k5: f64,
    /// `max_{x ∈ closure B′} V(x)`.
    pub max_v: f64,
}

impl AttractorSpec {
    /// Whether `x` lies in `B′`.
    pub fn in_basin(&self, x: &DVector<f64>) -> bool {
        self.b_prime.contains(x)
    }

    /// `ε + 2Δ/3`, the level of the trapping tube.
    pub fn trap_level(&self) -> f64 {
        self.epsilon + 2.0 * self.margin / 3.0
    }
}

/// Grid over `B̆ \ A^ε` together with points on the level set `V = ε` (where
/// the infimum of the one-window decrease is approached).
fn margin_points(
    lyapunov: &QuadraticLyapunov,
    epsilon: f64,
    region: &Ball,
    resolution: usize,
) -> Vec<DVector<f64>> {
    let mut pts: Vec<DVector<f64>> = region
        .grid(resolution)
        .into_iter()
        .filter(|x| lyapunov.value(x) > epsilon)
        .collect();
    if !pts.is_empty() && epsilon.sqrt() < region.radius {
        let ring = sphere_points(&lyapunov.center, epsilon.sqrt() * (1.0 + 1e-9), 64);
        pts.extend(ring.into_iter().filter(|x| {
            (x - &region.center).norm() <= region.radius
        }));
    }
    pts
}

/// `Δ = 0.9 × min over B̆ \ A^ε of [V(x) − V(Φ_T(x))]`.
pub fn descent_margin(
    lyapunov: &QuadraticLyapunov,
    epsilon: f64,
    region: &Ball,
    flow: &ode::AveragedOde<'_>,
    window: f64,
    resolution: usize,
) -> Result<f64> {
    let pts = margin_points(lyapunov, epsilon, region, resolution);
    if pts.is_empty() {
        return Err(Error::NonPositiveMargin(
            "B̆ \\ A^ε contains no grid points (region lies inside the ε-level set)".into(),
        ));
    }
    let mut min_drop = f64::INFINITY;
    for x in &pts {
        let end = flow.flow(x, window)?;
        min_drop = min_drop.min(lyapunov.value(x) - lyapunov.value(&end));
    }
    if !(min_drop > 0.0) {
        return Err(Error::NonPositiveMargin(format!(
            "grid minimum of V(x) - V(Phi_T(x)) is {min_drop:e}"
        )));
    }
    Ok(MARGIN_SAFETY * min_drop)
}

/// `τ = 3(max V − ε)/Δ · (T + 1)`.
pub fn trapping_time(max_v: f64, epsilon: f64, margin: f64, window: f64) -> f64 {
    3.0 * (max_v - epsilon) / margin * (window + 1.0)
}

/// Largest dyadic `δ = r′·2^{−j}` such that
/// - `|V(x) − V(y)| < Δ/3` whenever `x ∈ B′`, `‖x − y‖ < δ`
///   (exactly `2r′δ + δ² ≤ Δ/3` for the quadratic `V`),
/// - `N^(δ)(A^ε) ⊂ B′`, i.e. `sqrt ε + δ ≤ r′`,
/// - the δ-fattening of `B′` stays inside `B̆`,
/// - `Φ_T` maps the closure of `B′` at least `δ` inside `B′`.
pub fn choose_delta(
    lyapunov: &QuadraticLyapunov,
    epsilon: f64,
    b_prime: &Ball,
    b_breve: &Ball,
    margin: f64,
    flow_inset: f64,
) -> Result<f64> {
    let r = b_prime.radius;
    let offset = (&b_prime.center - &lyapunov.center).norm();
    let outer_gap = b_breve.radius - (&b_breve.center - &b_prime.center).norm() - r;
    let mut delta = r;
    for _ in 0..64 {
        let oscillation = 2.0 * (r + offset) * delta + delta * delta;
        let ok = oscillation <= margin / 3.0
            && epsilon.sqrt() + offset + delta <= r
            && delta < outer_gap
            && delta <= flow_inset;
        if ok {
            return Ok(delta);
        }
        delta *= 0.5;
    }
    Err(Error::InvalidProblem(
        "no positive tube radius satisfies the δ conditions".into(),
    ))
}

/// Result of sampled assumption checks for a problem instance.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Certificate {
    pub lipschitz_ok: bool,
    pub worst_lipschitz_ratio: f64,
    pub growth_ok: bool,
    pub worst_growth_ratio: f64,
    pub lyapunov_descent_ok: bool,
    pub noise_mean_ok: bool,
    pub noise_growth_ok: bool,
    pub noise_mgf_ok: bool,
    pub empirical_mgf: f64,
}

impl Certificate {
    pub fn all_ok(&self) -> bool {
        self.lipschitz_ok
            && self.growth_ok
            && self.lyapunov_descent_ok
            && self.noise_mean_ok
            && self.noise_growth_ok
            && self.noise_mgf_ok
    }
}

/// Everything the bounds need about one test problem.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub gossip: GossipModel,
    pub metric: HMetric,
    pub drift: DriftField,
    pub noise: NoiseModel,
    pub attractor: AttractorSpec,
    /// H-norm Lipschitz constant on `B̂`.
    pub lipschitz: f64,
    /// Linear-growth constant `K1`.
    pub k1: f64,
    /// Sup of `‖h(1Φ_t(x)ᵀ)‖_H` over `t ∈ [0, T]`, `x ∈ closure B′`, inflated 10%.
    pub c_t: f64,
}

#[derive(Debug, Clone)]
pub struct ProblemSetup {
    pub drift: DriftField,
    /// Branch of the equilibrium used as the attractor (double well only).
    pub equilibrium_guess: f64,
    pub b_prime_radius: f64,
    pub b_breve_radius: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub grid_resolution: usize,
    /// Integrator step cap.
    pub max_step: f64,
}

impl ProblemInstance {
    /// Certifies constants and derives `Δ`, `δ`, `τ`, `C_T` for window `T`.
    pub fn build(gossip: GossipModel, setup: &ProblemSetup, window: f64) -> Result<Self> {
        let drift = setup.drift.clone();
        if drift.nodes() != gossip.nodes() {
            return Err(Error::DimensionMismatch(format!(
                "drift has {} nodes, gossip matrix {}",
                drift.nodes(),
                gossip.nodes()
            )));
        }
        if !(setup.epsilon > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "epsilon = {} must be strictly positive",
                setup.epsilon
            )));
        }
        if !(setup.b_prime_radius > 0.0 && setup.b_breve_radius > setup.b_prime_radius) {
            return Err(Error::InvalidProblem(
                "need 0 < radius(B') < radius(B̆)".into(),
            ));
        }
        if !(setup.beta >= 0.0) {
            return Err(Error::InvalidProblem(format!("beta = {} must be >= 0", setup.beta)));
        }
        let metric = HMetric::solve(&gossip)?;
        let center = drift.equilibrium(gossip.pi(), setup.equilibrium_guess)?;
        let lyapunov = QuadraticLyapunov {
            center: center.clone(),
        };
        let b_prime = Ball::new(center.clone(), setup.b_prime_radius);
        let b_breve = Ball::new(center.clone(), setup.b_breve_radius);
        if setup.epsilon.sqrt() >= setup.b_prime_radius {
            return Err(Error::InvalidProblem(
                "closure of A^epsilon must lie inside B'".into(),
            ));
        }
        let sqrt_m = (gossip.nodes() as f64).sqrt();
        let k5 = sqrt_m * (center.norm() + b_breve.radius);
        let noise = NoiseModel::uniform(setup.beta, &metric, drift.nodes(), drift.dim(), k5);
        let lipschitz = drift.lipschitz(&b_breve, &metric);
        let k1 = drift.linear_growth(&b_breve);

        let region = Ball::new(center.clone(), 10.0 * b_breve.radius + 1.0);
        let ode = ode::AveragedOde::new(&drift, gossip.pi(), setup.max_step).with_region(region);
        let margin = descent_margin(
            &lyapunov,
            setup.epsilon,
            &b_breve,
            &ode,
            window,
            setup.grid_resolution,
        )?;
        let closure_pts = closure_points(&b_prime, setup.grid_resolution);
        let mut flow_inset = f64::INFINITY;
        for x in &closure_pts {
            let end = ode.flow(x, window)?;
            flow_inset = flow_inset.min(b_prime.radius - (&end - &b_prime.center).norm());
        }
        let delta = choose_delta(
            &lyapunov,
            setup.epsilon,
            &b_prime,
            &b_breve,
            margin,
            flow_inset,
        )?;
        let max_v = closure_pts
            .iter()
            .map(|x| lyapunov.value(x))
            .fold(0.0, f64::max)
            .max(setup.b_prime_radius.powi(2));
        let tau = trapping_time(max_v, setup.epsilon, margin, window);
        let c_t = ode::estimate_c_t(&ode, &drift, &metric, window, &closure_pts, 21)?;
        Ok(Self {
            gossip,
            metric,
            drift,
            noise,
            attractor: AttractorSpec {
                lyapunov,
                epsilon: setup.epsilon,
                b_prime,
                b_breve,
                margin,
                delta,
                window,
                tau,
                k5,
                max_v,
            },
            lipschitz,
            k1,
            c_t,
        })
    }

    pub fn nodes(&self) -> usize {
        self.drift.nodes()
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    /// `K′ = K1 + K2`.
    pub fn k_prime(&self) -> f64 {
        self.k1 + self.noise.k2
    }

    /// `B_{−1}`: small disagreement and π-average inside `B′`.
    pub fn start_condition(&self, x: &DMatrix<f64>) -> bool {
        crate::engine::disagreement(x, &self.gossip) < self.attractor.delta
            && self.attractor.in_basin(&self.gossip.average_row(x))
    }

    /// Sampled checks of Lipschitz, growth, Lyapunov descent and the noise
    /// model, seeded for reproducibility.
    pub fn certify(&self, samples: usize, noise_draws: usize, seed: u64) -> Certificate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.nodes();
        let d = self.dim();
        let ball = &self.attractor.b_breve;
        let draw_point = |rng: &mut ChaCha8Rng| -> DVector<f64> {
            loop {
                let u = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                if u.norm() < 1.0 {
                    return &ball.center + u * ball.radius;
                }
            }
        };
        let draw_array = |rng: &mut ChaCha8Rng| -> DMatrix<f64> {
            let mut x = DMatrix::zeros(m, d);
            for i in 0..m {
                x.set_row(i, &draw_point(rng).transpose());
            }
            x
        };
        let mut worst_l = 0.0_f64;
        let mut worst_g = 0.0_f64;
        for _ in 0..samples {
            let x = draw_array(&mut rng);
            let y = draw_array(&mut rng);
            let num = self.metric.norm(&(self.drift.apply(&x) - self.drift.apply(&y)));
            let den = self.metric.norm(&(&x - &y));
            if den > 0.0 {
                worst_l = worst_l.max(num / (self.lipschitz * den));
            }
            let g = self.drift.apply(&x).norm() / (self.k1 * (1.0 + x.norm()));
            worst_g = worst_g.max(g);
        }

        let pi = self.gossip.pi();
        let lyap = &self.attractor.lyapunov;
        let lyapunov_descent_ok = ball.grid(33).iter().all(|x| {
            let v = lyap.value(x);
            let vdot = lyap.gradient(x).dot(&self.drift.averaged(x, pi));
            if v > 1e-12 {
                vdot < 0.0
            } else {
                vdot.abs() <= 1e-9
            }
        });

        let state = lift(&self.attractor.b_prime.center, m);
        let mut sum = DMatrix::<f64>::zeros(m, d);
        let mut sum_sq = DMatrix::<f64>::zeros(m, d);
        let mut mgf = 0.0;
        let mut growth_ok = true;
        let cap = self.noise.k2 * (1.0 + state.norm());
        for _ in 0..noise_draws {
            let z = self.noise.sample(&state, &mut rng);
            if self.metric.norm(&z) > cap * (1.0 + 1e-12) {
                growth_ok = false;
            }
            mgf += z.iter().map(|v| (self.noise.kappa * v.abs()).exp()).sum::<f64>();
            sum += &z;
            sum_sq += z.component_mul(&z);
        }
        let nd = noise_draws.max(1) as f64;
        let mean_ok = sum.iter().zip(sum_sq.iter()).all(|(s, s2)| {
            let mean = s / nd;
            let var = (s2 / nd - mean * mean).max(0.0);
            mean.abs() <= 3.0 * (var / nd).sqrt() + 1e-300
        });
        let empirical_mgf = mgf / (nd * (m * d) as f64);
        Certificate {
            lipschitz_ok: worst_l <= 1.0 + 1e-9,
            worst_lipschitz_ratio: worst_l,
            growth_ok: worst_g <= 1.0 + 1e-12,
            worst_growth_ratio: worst_g,
            lyapunov_descent_ok,
            noise_mean_ok: mean_ok,
            noise_growth_ok: growth_ok,
            noise_mgf_ok: empirical_mgf <= self.noise.mgf_bound * (1.0 + 1e-12),
            empirical_mgf,
        }
    }
}

/// Grid of the closed ball plus its boundary sphere.
fn closure_points(ball: &Ball, resolution: usize) -> Vec<DVector<f64>> {
    let mut pts = ball.grid(resolution);
    pts.extend(ball.sphere(ball.radius, 64));
    pts
}
