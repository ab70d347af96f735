//! Averaged ODE `ẋ = h̄(x)` integrated with fixed-step RK4, plus the
//! reference trajectories restarted at each epoch knot.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hnorm::HMetric;
use crate::problem::{lift, Ball, DriftField};
use crate::schedule::TimeGrid;

/// Hard cap for the integrator step.
pub const MAX_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct AveragedOde<'a> {
    drift: &'a DriftField,
    pi: &'a DVector<f64>,
    max_step: f64,
    region: Option<Ball>,
}

impl<'a> AveragedOde<'a> {
    pub fn new(drift: &'a DriftField, pi: &'a DVector<f64>, max_step: f64) -> Self {
        Self {
            drift,
            pi,
            max_step: if max_step > 0.0 { max_step.min(MAX_STEP) } else { MAX_STEP },
            region: None,
        }
    }

    /// Abort with `RegionExit` whenever the solution leaves `region`.
    pub fn with_region(mut self, region: Ball) -> Self {
        self.region = Some(region);
        self
    }

    pub fn drift(&self) -> &DriftField {
        self.drift
    }

    pub fn max_step(&self) -> f64 {
        self.max_step
    }

    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        self.drift.averaged(x, self.pi)
    }

    fn rk4(&self, x: &DVector<f64>, h: f64) -> DVector<f64> {
        let k1 = self.rhs(x);
        let k2 = self.rhs(&(x + &k1 * (0.5 * h)));
        let k3 = self.rhs(&(x + &k2 * (0.5 * h)));
        let k4 = self.rhs(&(x + &k3 * h));
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Integrates over `[t0, t0 + dt]` with `ceil(dt / max_step)` equal steps.
    fn advance(&self, x0: &DVector<f64>, t0: f64, dt: f64) -> Result<DVector<f64>> {
        if dt < 0.0 || !dt.is_finite() {
            return Err(Error::OutOfDomain {
                t: dt,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        if dt == 0.0 {
            return Ok(x0.clone());
        }
        let steps = (dt / self.max_step).ceil().max(1.0) as usize;
        let h = dt / steps as f64;
        let mut x = x0.clone();
        for s in 0..steps {
            x = self.rk4(&x, h);
            let t = t0 + h * (s + 1) as f64;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::RegionExit { t });
            }
            if let Some(region) = &self.region {
                if !region.contains(&x) {
                    return Err(Error::RegionExit { t });
                }
            }
        }
        Ok(x)
    }

    /// `Φ_t(x0)`.
    pub fn flow(&self, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.advance(x0, 0.0, t)
    }

    /// Values at each time in `times` (non-decreasing, starting at `times[0]`
    /// where the value is `x0`).
    pub fn solve_at(&self, x0: &DVector<f64>, times: &[f64]) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(times.len());
        let mut x = x0.clone();
        let mut t = match times.first() {
            Some(t) => *t,
            None => return Ok(out),
        };
        for &ti in times {
            x = self.advance(&x, t, ti - t)?;
            t = ti;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// `x^{T_k}` on `[t(n_k), t(n_k) + T]`, stored at every knot `t(n)` of the
/// epoch (and one past its end) and at the midpoints between them.
#[derive(Debug, Clone)]
pub struct ReferenceSegment {
    pub epoch: usize,
    pub start_step: usize,
    pub t_start: f64,
    /// Knot times `t(n_k), …, t(n_k + len)`.
    pub knot_times: Vec<f64>,
    pub knots: Vec<DVector<f64>>,
    pub midpoints: Vec<DVector<f64>>,
}

impl ReferenceSegment {
    /// Reference value at knot `n` (absolute step index).
    pub fn at_step(&self, n: usize) -> Option<&DVector<f64>> {
        n.checked_sub(self.start_step).and_then(|i| self.knots.get(i))
    }

    /// Lifted value `1 x(t(n))ᵀ`.
    pub fn lifted_at_step(&self, n: usize, nodes: usize) -> Option<DMatrix<f64>> {
        self.at_step(n).map(|x| lift(x, nodes))
    }

    /// Piecewise-quadratic evaluation through knot, midpoint and next knot.
    pub fn eval(&self, s: f64) -> Result<DVector<f64>> {
        let lo = self.knot_times[0];
        let hi = *self.knot_times.last().unwrap();
        if !(s >= lo && s <= hi) {
            return Err(Error::OutOfDomain { t: s, lo, hi });
        }
        let i = match self
            .knot_times
            .partition_point(|&t| t <= s)
            .checked_sub(1)
        {
            Some(i) if i + 1 < self.knot_times.len() => i,
            _ => return Ok(self.knots.last().unwrap().clone()),
        };
        let (t0, t1) = (self.knot_times[i], self.knot_times[i + 1]);
        let u = if t1 > t0 { (s - t0) / (t1 - t0) } else { 0.0 };
        let (a, b, c) = (&self.knots[i], &self.midpoints[i], &self.knots[i + 1]);
        let la = 2.0 * (u - 0.5) * (u - 1.0);
        let lb = -4.0 * u * (u - 1.0);
        let lc = 2.0 * u * (u - 0.5);
        Ok(a * la + b * lb + c * lc)
    }
}

/// Reference trajectory for epoch `k` starting from `x0 = x̄(n_k)`.
///
/// Knots cover `n_k ..= n_{k+1}` so the last knot sits at `t(n_{k+1}) ≤ t(n_k) + T`.
pub fn reference_segment(
    ode: &AveragedOde<'_>,
    grid: &TimeGrid,
    k: usize,
    x0: &DVector<f64>,
) -> Result<ReferenceSegment> {
    if k >= grid.epoch_count() {
        return Err(Error::IndexOutOfRange(format!(
            "epoch {k} of {}",
            grid.epoch_count()
        )));
    }
    let epoch = grid.epoch(k);
    let mut knot_times = Vec::with_capacity(epoch.len() + 1);
    for n in epoch.start..=epoch.end {
        knot_times.push(grid.time(n));
    }
    let mut knots = Vec::with_capacity(knot_times.len());
    let mut midpoints = Vec::with_capacity(knot_times.len());
    let mut x = x0.clone();
    knots.push(x.clone());
    for w in knot_times.windows(2) {
        let half = 0.5 * (w[1] - w[0]);
        let mid = ode.advance(&x, w[0], half)?;
        x = ode.advance(&mid, w[0] + half, w[1] - w[0] - half)?;
        midpoints.push(mid);
        knots.push(x.clone());
    }
    Ok(ReferenceSegment {
        epoch: k,
        start_step: epoch.start,
        t_start: epoch.t_start,
        knot_times,
        knots,
        midpoints,
    })
}

/// `C_T`: 1.1 × max of `‖h(1Φ_t(x)ᵀ)‖_H` over `t` on an even grid of
/// `[0, T]` with `time_samples` points and the supplied start points.
pub fn estimate_c_t(
    ode: &AveragedOde<'_>,
    drift: &DriftField,
    metric: &HMetric,
    window: f64,
    starts: &[DVector<f64>],
    time_samples: usize,
) -> Result<f64> {
    let n = time_samples.max(2);
    let times: Vec<f64> = (0..n).map(|i| window * i as f64 / (n - 1) as f64).collect();
    let mut best = 0.0_f64;
    for x0 in starts {
        for x in ode.solve_at(x0, &times)? {
            best = best.max(metric.norm(&drift.apply_lifted(&x)));
        }
    }
    Ok(1.1 * best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::{self, GossipModel};
    use crate::schedule::{build_time_grid, StepSchedule};

    fn linear(m: usize, d: usize) -> (DriftField, DVector<f64>) {
        (
            DriftField::linear(DMatrix::zeros(m, d)),
            DVector::from_element(m, 1.0 / m as f64),
        )
    }

    #[test]
    fn linear_flow_is_exponential() {
        let (f, pi) = linear(2, 2);
        let ode = AveragedOde::new(&f, &pi, 1e-3);
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let x = ode.flow(&x0, 1.5).unwrap();
        let exact = &x0 * (-1.5f64).exp();
        assert!((x - exact).amax() < 1e-12);
    }

    #[test]
    fn flow_composes() {
        let f = DriftField::double_well(DVector::from_vec(vec![0.5, -0.5]));
        let pi = DVector::from_element(2, 0.5);
        let ode = AveragedOde::new(&f, &pi, 1e-3);
        let x0 = DVector::from_element(1, 0.3);
        let a = ode.flow(&ode.flow(&x0, 0.7).unwrap(), 0.8).unwrap();
        let b = ode.flow(&x0, 1.5).unwrap();
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn region_exit_reported() {
        // x' = x - x³ starting above 1 stays bounded; flip sign by starting far
        let f = DriftField::linear(DMatrix::from_element(1, 1, 5.0));
        let pi = DVector::from_element(1, 1.0);
        let ode = AveragedOde::new(&f, &pi, 1e-3)
            .with_region(Ball::new(DVector::zeros(1), 1.0));
        let err = ode.flow(&DVector::zeros(1), 2.0).unwrap_err();
        match err {
            Error::RegionExit { t } => {
                // x(t) = 5(1 - e^{-t}) crosses 1 at t = ln(5/4)
                assert!((t - (1.25f64).ln()).abs() < 2e-3);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn reference_segment_tracks_exact_solution() {
        let (f, pi) = linear(2, 1);
        let ode = AveragedOde::new(&f, &pi, 1e-3);
        let grid = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 200, None).unwrap();
        let x0 = DVector::from_element(1, 2.0);
        let seg = reference_segment(&ode, &grid, 1, &x0).unwrap();
        let t0 = seg.t_start;
        for (t, x) in seg.knot_times.iter().zip(&seg.knots) {
            assert!((x[0] - 2.0 * (t0 - t).exp()).abs() < 1e-12);
        }
        let mid = 0.5 * (seg.knot_times[0] + seg.knot_times[1]);
        let v = seg.eval(mid).unwrap();
        assert!((v[0] - 2.0 * (t0 - mid).exp()).abs() < 1e-12);
        assert!(matches!(
            seg.eval(t0 - 1.0),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn c_t_for_linear_field() {
        let g = GossipModel::new(gossip::complete(2)).unwrap();
        let metric = HMetric::solve(&g).unwrap();
        let (f, _) = linear(2, 1);
        let ode = AveragedOde::new(&f, g.pi(), 1e-3);
        let starts = vec![DVector::from_element(1, 1.0), DVector::from_element(1, -0.5)];
        let c = estimate_c_t(&ode, &f, &metric, 1.0, &starts, 11).unwrap();
        // ‖h(1xᵀ)‖_H = sqrt(2)|x| is largest at t = 0, x = 1
        assert!((c - 1.1 * 2f64.sqrt()).abs() < 1e-12);
    }
}
