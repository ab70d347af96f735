//! Experiment configuration (JSON, versioned, unknown keys rejected).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::InitialState;
use crate::error::{Error, Result};
use crate::gossip::{self, GossipModel};
use crate::problem::{DriftField, ProblemSetup};
use crate::schedule::StepSchedule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum GossipSpec {
    Explicit { matrix: Vec<Vec<f64>> },
    Complete { nodes: usize },
    LazyRing { nodes: usize, laziness: f64 },
    RandomPrimitive { nodes: usize, density: f64, seed: u64 },
}

impl GossipSpec {
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        let check = |m: usize| {
            if m == 0 {
                Err(Error::Config("gossip network needs at least one node".into()))
            } else {
                Ok(())
            }
        };
        match self {
            GossipSpec::Explicit { matrix } => gossip::matrix_from_rows(matrix),
            GossipSpec::Complete { nodes } => {
                check(*nodes)?;
                Ok(gossip::complete(*nodes))
            }
            GossipSpec::LazyRing { nodes, laziness } => {
                check(*nodes)?;
                if !(0.0..1.0).contains(laziness) {
                    return Err(Error::Config(format!("laziness {laziness} must lie in [0, 1)")));
                }
                Ok(gossip::lazy_ring(*nodes, *laziness))
            }
            GossipSpec::RandomPrimitive {
                nodes,
                density,
                seed,
            } => {
                check(*nodes)?;
                Ok(gossip::random_primitive(*nodes, *density, *seed))
            }
        }
    }

    pub fn build(&self) -> Result<GossipModel> {
        GossipModel::new(self.matrix()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `h^i(x) = −(x − θ_i)`; one target row per node.
    Linear { targets: Vec<Vec<f64>> },
    /// `h^i(x) = x − x³ + c_i`; `branch` picks the stable equilibrium near it.
    DoubleWell {
        offsets: Vec<f64>,
        #[serde(default = "default_branch")]
        branch: f64,
    },
}

fn default_branch() -> f64 {
    1.0
}

impl ProblemSpec {
    pub fn drift(&self) -> Result<DriftField> {
        match self {
            ProblemSpec::Linear { targets } => {
                let m = targets.len();
                let d = targets.first().map_or(0, |r| r.len());
                if m == 0 || d == 0 || targets.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(
                        "linear targets must be a non-empty rectangular array".into(),
                    ));
                }
                Ok(DriftField::linear(DMatrix::from_fn(m, d, |i, j| targets[i][j])))
            }
            ProblemSpec::DoubleWell { offsets, .. } => {
                if offsets.is_empty() {
                    return Err(Error::Config("double-well offsets must be non-empty".into()));
                }
                Ok(DriftField::double_well(DVector::from_vec(offsets.clone())))
            }
        }
    }

    pub fn branch(&self) -> f64 {
        match self {
            ProblemSpec::Linear { .. } => 0.0,
            ProblemSpec::DoubleWell { branch, .. } => *branch,
        }
    }
}

/// Radii of `B′ ⊂ B̆` around the attractor and the level `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub b_prime_radius: f64,
    pub b_breve_radius: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub center: Vec<f64>,
    #[serde(default)]
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub n0_start: usize,
    pub n0_end: usize,
    pub n0_step: usize,
    /// Multipliers applied to `δ̃` in addition to the baseline.
    #[serde(default)]
    pub delta_tilde_scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub gossip: GossipSpec,
    pub problem: ProblemSpec,
    pub region: RegionSpec,
    pub schedule: StepSchedule,
    pub t_prime: f64,
    pub n0: usize,
    /// Steps simulated by `simulate` and `track`.
    pub horizon: usize,
    pub replicas: usize,
    pub master_seed: u64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    pub beta: f64,
    #[serde(default = "default_grid")]
    pub grid_resolution: usize,
    #[serde(default)]
    pub d_override: Option<f64>,
    #[serde(default = "default_out")]
    pub out_dir: String,
    pub initial: InitialSpec,
    /// Epochs of length `T′` simulated past `T_0 + τ` by `trap`.
    #[serde(default = "default_trap_epochs")]
    pub trap_epochs: usize,
    /// Explicit step horizon for `trap`, overriding `trap_epochs`.
    #[serde(default)]
    pub trap_horizon: Option<usize>,
    #[serde(default)]
    pub bound_sweep: Option<SweepSpec>,
    #[serde(default = "default_consensus_tol")]
    pub consensus_tolerance: f64,
}

fn default_cap() -> f64 {
    1e6
}
fn default_grid() -> usize {
    33
}
fn default_out() -> String {
    "runs".into()
}
fn default_trap_epochs() -> usize {
    10
}
fn default_consensus_tol() -> f64 {
    1e-2
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks that do not need any numerics.
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.replicas < 1 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        if self.horizon <= self.n0 {
            return Err(Error::Config(format!(
                "horizon {} must exceed n0 {}",
                self.horizon, self.n0
            )));
        }
        if !(self.t_prime > 0.0) {
            return Err(Error::Config("t_prime must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if let Some(d) = self.d_override {
            if !(d > 0.0) {
                return Err(Error::Config("d_override must be positive".into()));
            }
        }
        if let Some(s) = &self.bound_sweep {
            if s.n0_step == 0 || s.n0_end < s.n0_start {
                return Err(Error::Config("bound_sweep needs n0_step > 0 and n0_end >= n0_start".into()));
            }
        }
        Ok(())
    }

    pub fn problem_setup(&self) -> Result<ProblemSetup> {
        Ok(ProblemSetup {
            drift: self.problem.drift()?,
            equilibrium_guess: self.problem.branch(),
            b_prime_radius: self.region.b_prime_radius,
            b_breve_radius: self.region.b_breve_radius,
            epsilon: self.region.epsilon,
            beta: self.beta,
            grid_resolution: self.grid_resolution,
            max_step: crate::ode::MAX_STEP,
        })
    }

    pub fn initial_state(&self) -> InitialState {
        InitialState {
            center: DVector::from_vec(self.initial.center.clone()),
            spread: self.initial.spread,
        }
    }
}
