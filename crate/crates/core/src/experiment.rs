//! Experiment drivers behind the command-line subcommands. Each writes its
//! artifacts into `<out>/<command>/` next to a snapshot of the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    self, BoundConstants, ConcentrationReport, GrowthReport, InitialState, TheoremInputs,
    TrackingReport, TrapSettings,
};
use crate::config::ExperimentConfig;
use crate::engine::{self, RunRecord};
use crate::error::{Error, Result};
use crate::gossip::GossipModel;
use crate::hnorm::{lyapunov_residual, HMetric};
use crate::problem::ProblemInstance;
use crate::schedule::{build_time_grid, validate_schedule, AdmissibilityReport, TimeGrid, Verdict};

/// Largest step horizon derived for `trap`.
pub const MAX_TRAP_HORIZON: usize = 50_000_000;

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub horizon: Option<usize>,
}

impl RunOptions {
    fn apply(&self, cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = cfg.clone();
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(r) = self.replicas {
            cfg.replicas = r;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
            cfg.trap_horizon = Some(h);
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig, command: &str) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
            .join(command)
    }
}

/// Everything derived from a config before simulation.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub problem: ProblemInstance,
    pub grid: TimeGrid,
    pub admissibility: AdmissibilityReport,
    pub c_star: f64,
}

impl Context {
    pub fn constants(&self) -> BoundConstants {
        BoundConstants::new(&self.problem, &self.grid, self.c_star, self.config.d_override)
    }

    pub fn trap_settings(&self) -> TrapSettings {
        TrapSettings {
            replicas: self.config.replicas,
            master_seed: self.config.master_seed,
            cap: self.config.cap,
            initial: self.config.initial_state(),
            c_star: self.c_star,
            d_override: self.config.d_override,
        }
    }
}

/// `T = T′ + c·a(0)` without building the grid.
fn window_of(cfg: &ExperimentConfig) -> Result<f64> {
    Ok(cfg.t_prime + cfg.schedule.c * cfg.schedule.step_or_err(0)?)
}

/// Builds the problem and a grid up to `horizon`; fails on inadmissible
/// schedules.
pub fn prepare(cfg: &ExperimentConfig, horizon: usize) -> Result<Context> {
    let gossip = cfg.gossip.build()?;
    let window = window_of(cfg)?;
    let admissibility = validate_schedule(&cfg.schedule, window, horizon)?.into_result()?;
    let problem = ProblemInstance::build(gossip, &cfg.problem_setup()?, window)?;
    let grid = build_time_grid(&cfg.schedule, cfg.t_prime, cfg.n0, horizon, None)?;
    let c_star = cfg
        .schedule
        .c_star
        .or(admissibility.measured_c_star)
        .unwrap_or_else(|| grid.epoch_growth_constant());
    Ok(Context {
        config: cfg.clone(),
        problem,
        grid,
        admissibility,
        c_star,
    })
}

/// Steps needed so that `t(horizon) ≥ t(n0) + τ + epochs·T′`.
pub fn trap_horizon(cfg: &ExperimentConfig, tau: f64) -> Result<usize> {
    if let Some(h) = cfg.trap_horizon {
        return Ok(h);
    }
    let mut t = 0.0;
    let mut target = f64::INFINITY;
    for n in 0..=MAX_TRAP_HORIZON {
        t += cfg.schedule.step_or_err(n)?;
        if n == cfg.n0 {
            target = t + tau + cfg.trap_epochs as f64 * cfg.t_prime;
        }
        if n > cfg.n0 && t >= target {
            return Ok(n);
        }
    }
    Err(Error::HorizonExceeded(format!(
        "covering tau = {tau:.4} plus {} epochs needs more than {MAX_TRAP_HORIZON} steps; \
         lower trap_epochs or set trap_horizon",
        cfg.trap_epochs
    )))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn snapshot(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_file(dir, "config.json", &cfg.to_json())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Draws `(X(0), simulation seed)` for replica `r`, matching the trap driver.
pub fn replica_start(initial: &InitialState, nodes: usize, master: u64, r: u64) -> (DMatrix<f64>, u64) {
    let mut rng = engine::replica_rng(master, r);
    let x0 = initial.draw(nodes, &mut rng);
    (x0, rng.gen())
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub verdict: Verdict,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        !self.checks.iter().any(|c| c.verdict == Verdict::Fail)
    }

    fn push(&mut self, name: &str, verdict: Verdict, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            verdict,
            detail: detail.into(),
        });
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = match c.verdict {
                Verdict::Pass => "PASS",
                Verdict::Fail => "FAIL",
                Verdict::NotApplicable => "N/A ",
            };
            let _ = writeln!(s, "{tag}  {:<28} {}", c.name, c.detail);
        }
        s
    }
}

/// Runs every assumption check it can reach; later stages are skipped when an
/// earlier one they depend on fails.
pub fn cmd_validate(cfg: &ExperimentConfig) -> ValidationReport {
    let mut report = ValidationReport { checks: Vec::new() };
    let gossip = match cfg.gossip.build() {
        Ok(g) => {
            report.push(
                "gossip",
                Verdict::Pass,
                format!(
                    "stochastic, irreducible, rho(Q) = {:.6}",
                    g.q_spectral_radius()
                ),
            );
            Some(g)
        }
        Err(e) => {
            report.push("gossip", Verdict::Fail, e.to_string());
            None
        }
    };
    if let Some(g) = &gossip {
        match HMetric::solve(g) {
            Ok(m) => {
                let r = lyapunov_residual(g.q(), m.h());
                report.push(
                    "lyapunov",
                    Verdict::from_bool(r <= 1e-10),
                    format!("residual {r:.3e}, alpha = {:.6}, Lambda(H) = {:.6}", m.alpha(), m.lambda_ratio()),
                );
            }
            Err(e) => report.push("lyapunov", Verdict::Fail, e.to_string()),
        }
    }
    let window = window_of(cfg);
    let mut schedule_ok = false;
    match window.and_then(|w| validate_schedule(&cfg.schedule, w, cfg.horizon)) {
        Ok(adm) => {
            schedule_ok = adm.admissible();
            for c in &adm.conditions {
                report.push(&format!("schedule/{}", c.condition.label()), c.verdict, c.detail.clone());
            }
        }
        Err(e) => report.push("schedule", Verdict::Fail, e.to_string()),
    }
    if let (Some(g), true) = (gossip, schedule_ok) {
        let built = cfg
            .problem_setup()
            .and_then(|s| ProblemInstance::build(g, &s, window_of(cfg)?));
        match built {
            Ok(p) => {
                report.push(
                    "problem",
                    Verdict::Pass,
                    format!(
                        "Delta = {:.6e}, delta = {:.6e}, tau = {:.6}, C_T = {:.6}, L = {:.6}, K1 = {:.6}",
                        p.attractor.margin,
                        p.attractor.delta,
                        p.attractor.tau,
                        p.c_t,
                        p.lipschitz,
                        p.k1
                    ),
                );
                let cert = p.certify(1000, 100_000, cfg.master_seed);
                report.push(
                    "drift/lipschitz",
                    Verdict::from_bool(cert.lipschitz_ok),
                    format!("worst sampled ratio {:.6}", cert.worst_lipschitz_ratio),
                );
                report.push(
                    "drift/linear_growth",
                    Verdict::from_bool(cert.growth_ok),
                    format!("worst sampled ratio {:.6}", cert.worst_growth_ratio),
                );
                report.push(
                    "lyapunov_descent",
                    Verdict::from_bool(cert.lyapunov_descent_ok),
                    "<grad V, mean drift> < 0 off the attractor on the grid",
                );
                report.push("noise/mean", Verdict::from_bool(cert.noise_mean_ok), "within 3 standard errors");
                report.push("noise/growth", Verdict::from_bool(cert.noise_growth_ok), "every draw within K2(1+|X|)");
                report.push(
                    "noise/mgf",
                    Verdict::from_bool(cert.noise_mgf_ok),
                    format!("empirical {:.6} <= C = {:.6}", cert.empirical_mgf, p.noise.mgf_bound),
                );
            }
            Err(e) => report.push("problem", Verdict::Fail, e.to_string()),
        }
    } else {
        report.push("problem", Verdict::NotApplicable, "skipped after earlier failure");
    }
    report
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub replicas: usize,
    pub horizon: usize,
    pub bounded: usize,
    pub final_disagreement: Vec<f64>,
    pub consensus_tolerance: f64,
    pub below_tolerance: usize,
}

fn run_replicas(ctx: &Context, horizon: usize) -> Result<Vec<RunRecord>> {
    let cfg = &ctx.config;
    let initial = cfg.initial_state();
    (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| {
            let (x0, seed) = replica_start(&initial, ctx.problem.nodes(), cfg.master_seed, r);
            engine::run(&ctx.problem, &ctx.grid, &x0, horizon, seed, Some(cfg.cap))
        })
        .collect()
}

/// Trajectory CSV: `n,t,node,coordinate,value`.
pub fn trajectory_csv(record: &RunRecord, grid: &TimeGrid) -> String {
    let mut s = String::from("n,t,node,coordinate,value\n");
    for (n, x) in record.states.iter().enumerate() {
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let _ = writeln!(s, "{n},{},{i},{j},{}", num(grid.time(n)), num(x[(i, j)]));
            }
        }
    }
    s
}

pub fn cmd_simulate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SimulateSummary> {
    let cfg = opts.apply(cfg)?;
    let ctx = prepare(&cfg, cfg.horizon)?;
    let records = run_replicas(&ctx, cfg.horizon)?;
    let gossip: &GossipModel = &ctx.problem.gossip;
    let final_disagreement: Vec<f64> = records
        .iter()
        .map(|r| engine::disagreement(r.states.last().unwrap(), gossip))
        .collect();
    let summary = SimulateSummary {
        replicas: records.len(),
        horizon: cfg.horizon,
        bounded: records.iter().filter(|r| r.bounded).count(),
        below_tolerance: final_disagreement
            .iter()
            .zip(&records)
            .filter(|(d, r)| r.bounded && **d <= cfg.consensus_tolerance)
            .count(),
        final_disagreement,
        consensus_tolerance: cfg.consensus_tolerance,
    };
    let dir = opts.out_dir(&cfg, "simulate");
    snapshot(&dir, &cfg)?;
    write_file(&dir, "trajectory.csv", &trajectory_csv(&records[0], &ctx.grid))?;
    write_file(&dir, "summary.json", &json(&summary))?;
    Ok(summary)
}

// ---------------------------------------------------------------- track

#[derive(Debug, Clone, Serialize)]
pub struct TrackSummary {
    pub replicas: usize,
    pub bounded: usize,
    pub epochs_checked: usize,
    pub burn_in_epoch: Option<usize>,
    pub violations: usize,
    pub violations_past_burn_in: usize,
    pub max_rho: f64,
    pub growth_failures: usize,
    pub growth_checked: usize,
    pub worst_growth_ratio: f64,
    pub worst_increment_ratio: f64,
    pub k_t: f64,
    pub p_two_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub summary: TrackSummary,
    pub reports: Vec<TrackingReport>,
    pub growth: Vec<GrowthReport>,
}

/// Runs the tracking and growth checks on every replica of `ctx`.
pub fn track_context(ctx: &Context) -> Result<TrackOutcome> {
    let constants = ctx.constants();
    let records = run_replicas(ctx, ctx.grid.horizon())?;
    let per: Vec<(TrackingReport, GrowthReport, f64)> = records
        .par_iter()
        .map(|rec| {
            let rep = analysis::verify_tracking(&ctx.problem, &ctx.grid, rec, &constants)?;
            let g = analysis::growth_check(rec, &ctx.grid, &constants);
            let inc = analysis::increment_ratio(&ctx.grid, rec, &constants);
            Ok((rep, g, inc))
        })
        .collect::<Result<_>>()?;
    let summary = TrackSummary {
        replicas: records.len(),
        bounded: records.iter().filter(|r| r.bounded).count(),
        epochs_checked: per.iter().map(|p| p.0.epochs.len()).sum(),
        burn_in_epoch: per.first().and_then(|p| p.0.burn_in_epoch),
        violations: per.iter().map(|p| p.0.violations).sum(),
        violations_past_burn_in: per.iter().map(|p| p.0.violations_past_burn_in).sum(),
        max_rho: per.iter().map(|p| p.0.max_rho).fold(0.0, f64::max),
        growth_failures: per.iter().map(|p| p.1.failures).sum(),
        growth_checked: per.iter().map(|p| p.1.checked).sum(),
        worst_growth_ratio: per.iter().map(|p| p.1.worst_ratio).fold(0.0, f64::max),
        worst_increment_ratio: per.iter().map(|p| p.2).fold(0.0, f64::max),
        k_t: constants.k_t,
        p_two_norm: constants.p_two_norm,
    };
    let (reports, growth): (Vec<_>, Vec<_>) = per.into_iter().map(|(r, g, _)| (r, g)).unzip();
    Ok(TrackOutcome {
        summary,
        reports,
        growth,
    })
}

pub fn tracking_csv(reports: &[TrackingReport]) -> String {
    let mut s = String::from("replica,k,n_k,rho_k,bound,K_star,noise_term,violated\n");
    for (r, rep) in reports.iter().enumerate() {
        for e in &rep.epochs {
            let _ = writeln!(
                s,
                "{r},{},{},{},{},{},{},{}",
                e.k,
                e.n_k,
                num(e.rho),
                num(e.bound),
                num(e.k_star),
                num(e.noise_term),
                e.violated
            );
        }
    }
    s
}

/// Per-epoch extremes across replicas: `k,T_k,rho_max,rho_mean,bound_min,bound_mean`.
pub fn plot_csv(reports: &[TrackingReport], grid: &TimeGrid) -> String {
    let mut s = String::from("k,T_k,rho_max,rho_mean,bound_min,bound_mean\n");
    let epochs = reports.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
    for k in 0..epochs {
        let rho: Vec<f64> = reports.iter().map(|r| r.epochs[k].rho).collect();
        let bound: Vec<f64> = reports.iter().map(|r| r.epochs[k].bound).collect();
        let n = rho.len() as f64;
        let _ = writeln!(
            s,
            "{k},{},{},{},{},{}",
            num(grid.epoch(k).t_start),
            num(rho.iter().cloned().fold(0.0, f64::max)),
            num(rho.iter().sum::<f64>() / n),
            num(bound.iter().cloned().fold(f64::INFINITY, f64::min)),
            num(bound.iter().sum::<f64>() / n)
        );
    }
    s
}

pub fn cmd_track(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrackSummary> {
    let cfg = opts.apply(cfg)?;
    let ctx = prepare(&cfg, cfg.horizon)?;
    let out = track_context(&ctx)?;
    let dir = opts.out_dir(&cfg, "track");
    snapshot(&dir, &cfg)?;
    write_file(&dir, "tracking.csv", &tracking_csv(&out.reports))?;
    write_file(&dir, "plot.csv", &plot_csv(&out.reports, &ctx.grid))?;
    write_file(&dir, "summary.json", &json(&out.summary))?;
    Ok(out.summary)
}

// ---------------------------------------------------------------- trap

/// Context whose grid reaches the trap horizon.
pub fn trap_context(cfg: &ExperimentConfig) -> Result<Context> {
    let window = window_of(cfg)?;
    let gossip = cfg.gossip.build()?;
    let probe = ProblemInstance::build(gossip, &cfg.problem_setup()?, window)?;
    let horizon = trap_horizon(cfg, probe.attractor.tau)?;
    prepare(cfg, horizon)
}

pub fn cmd_trap(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ConcentrationReport> {
    let cfg = opts.apply(cfg)?;
    let ctx = trap_context(&cfg)?;
    let report = analysis::trap_probability_mc(&ctx.problem, &ctx.grid, &ctx.trap_settings())?;
    let dir = opts.out_dir(&cfg, "trap");
    snapshot(&dir, &cfg)?;
    write_file(&dir, "concentration.json", &json(&report))?;
    Ok(report)
}

// ---------------------------------------------------------------- bound

#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub n0: usize,
    pub scale: f64,
    pub delta_tilde: f64,
    pub branch: analysis::Branch,
    pub series: f64,
    pub bound: f64,
    pub vacuous: bool,
}

pub fn bound_table(ctx: &Context) -> Result<Vec<BoundRow>> {
    let cfg = &ctx.config;
    let constants = ctx.constants();
    let (start, end, step, extra) = match &cfg.bound_sweep {
        Some(s) => (s.n0_start, s.n0_end, s.n0_step, s.delta_tilde_scales.clone()),
        None => (cfg.n0, cfg.n0, 1, Vec::new()),
    };
    let mut scales = vec![1.0];
    scales.extend(extra);
    let mut rows = Vec::new();
    for scale in scales {
        let mut n0 = start;
        while n0 <= end {
            let dt = constants.delta_tilde * scale;
            let b = analysis::theorem_bound(
                &cfg.schedule,
                &TheoremInputs {
                    n0,
                    nodes: constants.nodes,
                    dim: constants.dim,
                    c_star: constants.c_star,
                    d_const: constants.d_const,
                    delta_tilde: dt,
                    kappa: constants.kappa,
                    mgf_bound: constants.mgf_bound,
                    window: constants.window,
                },
            )?;
            rows.push(BoundRow {
                n0,
                scale,
                delta_tilde: dt,
                branch: b.branch,
                series: b.series,
                bound: b.value,
                vacuous: b.vacuous,
            });
            n0 += step;
        }
    }
    Ok(rows)
}

pub fn bound_csv(rows: &[BoundRow]) -> String {
    let mut s = String::from("n0,scale,delta_tilde,branch,series,bound,vacuous\n");
    for r in rows {
        let branch = match r.branch {
            analysis::Branch::Quadratic => "quadratic",
            analysis::Branch::Linear => "linear",
        };
        let _ = writeln!(
            s,
            "{},{},{},{branch},{},{},{}",
            r.n0,
            num(r.scale),
            num(r.delta_tilde),
            num(r.series),
            num(r.bound),
            r.vacuous
        );
    }
    s
}

/// The bound only needs the schedule to vanish; inadmissibility of the window
/// condition is reported by `validate`, and a constant schedule surfaces as
/// `Divergent` here.
pub fn cmd_bound(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<BoundRow>> {
    let cfg = opts.apply(cfg)?;
    if !cfg.schedule.vanishes() && cfg.schedule.len().is_none() {
        return Err(Error::Divergent(
            "step sizes do not vanish, so the series in the bound does not converge".into(),
        ));
    }
    let ctx = prepare(&cfg, cfg.horizon)?;
    let rows = bound_table(&ctx)?;
    let dir = opts.out_dir(&cfg, "bound");
    snapshot(&dir, &cfg)?;
    write_file(&dir, "bound.csv", &bound_csv(&rows))?;
    write_file(&dir, "constants.json", &json(&ctx.constants()))?;
    Ok(rows)
}
