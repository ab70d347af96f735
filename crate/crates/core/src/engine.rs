//! The iteration `X(n+1) = P X(n) + a(n)(h(X(n)) + M̃(n+1))`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gossip::GossipModel;
use crate::problem::ProblemInstance;
use crate::schedule::TimeGrid;

/// Seed of replica `r` under `master`.
pub fn replica_seed(master: u64, replica: u64) -> u64 {
    master ^ replica
}

pub fn replica_rng(master: u64, replica: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(replica_seed(master, replica))
}

/// One step of the update from its ingredients. Used both by the simulator
/// and when recomputing a stored trajectory.
pub fn transition(
    p: &DMatrix<f64>,
    x: &DMatrix<f64>,
    a: f64,
    drift: &DMatrix<f64>,
    noise: &DMatrix<f64>,
) -> DMatrix<f64> {
    p * x + (drift + noise) * a
}

/// `(I − Π)X` measured in Frobenius norm.
pub fn disagreement(x: &DMatrix<f64>, gossip: &GossipModel) -> f64 {
    (x - gossip.pi_matrix() * x).norm()
}

/// Stored trajectory: `states[n] = X(n)` and `noise[n] = M̃(n+1)`.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub states: Vec<DMatrix<f64>>,
    pub noise: Vec<DMatrix<f64>>,
    /// False when the run stopped early because `‖X‖₂` exceeded the cap.
    pub bounded: bool,
}

impl RunRecord {
    /// Number of completed steps.
    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }

    /// `x̄(n) = X(n)ᵀπ`.
    pub fn average(&self, n: usize, gossip: &GossipModel) -> DVector<f64> {
        gossip.average_row(&self.states[n])
    }
}

/// Incremental simulator; owns its RNG stream.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    problem: &'a ProblemInstance,
    grid: &'a TimeGrid,
    rng: ChaCha8Rng,
    state: DMatrix<f64>,
    n: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(
        problem: &'a ProblemInstance,
        grid: &'a TimeGrid,
        x0: DMatrix<f64>,
        seed: u64,
    ) -> Result<Self> {
        if x0.shape() != (problem.nodes(), problem.dim()) {
            return Err(Error::DimensionMismatch(format!(
                "initial state is {}x{}, expected {}x{}",
                x0.nrows(),
                x0.ncols(),
                problem.nodes(),
                problem.dim()
            )));
        }
        Ok(Self {
            problem,
            grid,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: x0,
            n: 0,
        })
    }

    pub fn state(&self) -> &DMatrix<f64> {
        &self.state
    }

    pub fn index(&self) -> usize {
        self.n
    }

    /// Advances one step and returns the noise `M̃(n+1)` that was used.
    pub fn step_update(&mut self) -> Result<DMatrix<f64>> {
        if self.n >= self.grid.horizon() {
            return Err(Error::HorizonExceeded(format!(
                "step {} beyond horizon {}",
                self.n,
                self.grid.horizon()
            )));
        }
        let a = self.grid.step(self.n);
        let hx = self.problem.drift.apply(&self.state);
        let noise = self.problem.noise.sample(&self.state, &mut self.rng);
        let next = transition(self.problem.gossip.p(), &self.state, a, &hx, &noise);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: self.n + 1 });
        }
        self.state = next;
        self.n += 1;
        Ok(noise)
    }
}

/// Runs `n_max` steps from `x0`, keeping every state and noise draw. With a
/// `cap`, stops as soon as `‖X(n)‖₂ > cap` and marks the record unbounded.
pub fn run(
    problem: &ProblemInstance,
    grid: &TimeGrid,
    x0: &DMatrix<f64>,
    n_max: usize,
    seed: u64,
    cap: Option<f64>,
) -> Result<RunRecord> {
    let n_max = n_max.min(grid.horizon());
    let mut sim = Simulator::new(problem, grid, x0.clone(), seed)?;
    let mut states = Vec::with_capacity(n_max + 1);
    let mut noise = Vec::with_capacity(n_max);
    states.push(x0.clone());
    let mut bounded = true;
    for _ in 0..n_max {
        noise.push(sim.step_update()?);
        states.push(sim.state().clone());
        if cap.is_some_and(|c| sim.state().norm() > c) {
            bounded = false;
            break;
        }
    }
    Ok(RunRecord {
        seed,
        states,
        noise,
        bounded,
    })
}

/// Recomputes step `n` from the stored state and noise.
pub fn recompute_step(
    problem: &ProblemInstance,
    grid: &TimeGrid,
    record: &RunRecord,
    n: usize,
) -> DMatrix<f64> {
    let x = &record.states[n];
    transition(
        problem.gossip.p(),
        x,
        grid.step(n),
        &problem.drift.apply(x),
        &record.noise[n],
    )
}

/// Piecewise-linear interpolation `X̄(t)` through `(t(n), X(n))`.
pub fn interpolate(record: &RunRecord, grid: &TimeGrid, t: f64) -> Result<DMatrix<f64>> {
    let last = record.states.len() - 1;
    let lo = grid.time(0);
    let hi = grid.time(last);
    if !(t >= lo && t <= hi) {
        return Err(Error::OutOfDomain { t, lo, hi });
    }
    let n = grid.knot_before(t).unwrap_or(0).min(last);
    if n == last {
        return Ok(record.states[last].clone());
    }
    let (t0, t1) = (grid.time(n), grid.time(n + 1));
    let u = (t - t0) / (t1 - t0);
    Ok(&record.states[n] * (1.0 - u) + &record.states[n + 1] * u)
}
