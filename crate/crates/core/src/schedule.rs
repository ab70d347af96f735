//! Stepsize sequences, their admissibility checks, and the epoch grid.
//!
//! The series conditions `Σa = ∞` and `Σa² < ∞` are decided per kind from
//! known series facts. Quasi-monotonicity, eventual decrease and the window
//! growth condition are checked empirically over a finite horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window search stops after this many indices past the horizon.
const WINDOW_SEARCH_FACTOR: usize = 64;
const WINDOW_SEARCH_MIN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// `1/(1+n)`
    Harmonic,
    /// `1/(1 + n·ln(max(n, 2)))`
    LogHarmonic,
    /// `1/(1+n)^γ`
    Power { exponent: f64 },
    /// `1/(1 + n^γ)`
    InversePower { exponent: f64 },
    Constant { value: f64 },
    /// Finite table; indices past the end are undefined.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    /// `a(m) ≤ c·a(n)` for all `m ≥ n`.
    pub c: f64,
    /// Declared window constant; measured from the horizon when absent.
    pub c_star: Option<f64>,
}

/// Wire form: `{"kind": "...", <kind parameters>, "c": .., "c_star": ..}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c_star: Option<f64>,
}

impl TryFrom<RawSchedule> for StepSchedule {
    type Error = String;

    fn try_from(raw: RawSchedule) -> std::result::Result<Self, String> {
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| format!("schedule kind `{}` requires `{field}`", raw.kind))
        };
        let unexpected = |present: bool, field: &str| {
            if present {
                Err(format!("schedule kind `{}` does not take `{field}`", raw.kind))
            } else {
                Ok(())
            }
        };
        let kind = match raw.kind.as_str() {
            "harmonic" | "log_harmonic" => {
                unexpected(raw.exponent.is_some(), "exponent")?;
                unexpected(raw.value.is_some(), "value")?;
                unexpected(raw.values.is_some(), "values")?;
                if raw.kind == "harmonic" {
                    ScheduleKind::Harmonic
                } else {
                    ScheduleKind::LogHarmonic
                }
            }
            "power" | "inverse_power" => {
                unexpected(raw.value.is_some(), "value")?;
                unexpected(raw.values.is_some(), "values")?;
                let exponent = need(raw.exponent, "exponent")?;
                if raw.kind == "power" {
                    ScheduleKind::Power { exponent }
                } else {
                    ScheduleKind::InversePower { exponent }
                }
            }
            "constant" => {
                unexpected(raw.exponent.is_some(), "exponent")?;
                unexpected(raw.values.is_some(), "values")?;
                ScheduleKind::Constant {
                    value: need(raw.value, "value")?,
                }
            }
            "table" => {
                unexpected(raw.exponent.is_some(), "exponent")?;
                unexpected(raw.value.is_some(), "value")?;
                ScheduleKind::Table {
                    values: raw
                        .values
                        .clone()
                        .ok_or_else(|| "schedule kind `table` requires `values`".to_string())?,
                }
            }
            other => return Err(format!("unknown schedule kind `{other}`")),
        };
        let c = raw.c.unwrap_or(1.0);
        if !(c >= 1.0) {
            return Err(format!("quasi-monotonicity constant c = {c} must be >= 1"));
        }
        Ok(StepSchedule {
            kind,
            c,
            c_star: raw.c_star,
        })
    }
}

impl From<StepSchedule> for RawSchedule {
    fn from(s: StepSchedule) -> Self {
        let mut raw = RawSchedule {
            kind: String::new(),
            exponent: None,
            value: None,
            values: None,
            c: Some(s.c),
            c_star: s.c_star,
        };
        raw.kind = match s.kind {
            ScheduleKind::Harmonic => "harmonic".into(),
            ScheduleKind::LogHarmonic => "log_harmonic".into(),
            ScheduleKind::Power { exponent } => {
                raw.exponent = Some(exponent);
                "power".into()
            }
            ScheduleKind::InversePower { exponent } => {
                raw.exponent = Some(exponent);
                "inverse_power".into()
            }
            ScheduleKind::Constant { value } => {
                raw.value = Some(value);
                "constant".into()
            }
            ScheduleKind::Table { values } => {
                raw.values = Some(values);
                "table".into()
            }
        };
        raw
    }
}

impl StepSchedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            c: 1.0,
            c_star: None,
        }
    }

    pub fn harmonic() -> Self {
        Self::new(ScheduleKind::Harmonic)
    }

    /// `a(n)`, or `None` past the end of a table.
    pub fn step(&self, n: usize) -> Option<f64> {
        let x = n as f64;
        Some(match &self.kind {
            ScheduleKind::Harmonic => 1.0 / (1.0 + x),
            ScheduleKind::LogHarmonic => 1.0 / (1.0 + x * x.max(2.0).ln()),
            ScheduleKind::Power { exponent } => (1.0 + x).powf(-exponent),
            ScheduleKind::InversePower { exponent } => 1.0 / (1.0 + x.powf(*exponent)),
            ScheduleKind::Constant { value } => *value,
            ScheduleKind::Table { values } => return values.get(n).copied(),
        })
    }

    pub fn step_or_err(&self, n: usize) -> Result<f64> {
        self.step(n)
            .ok_or_else(|| Error::HorizonExceeded(format!("schedule undefined at n = {n}")))
    }

    /// Last index at which the schedule is defined, if finite.
    pub fn len(&self) -> Option<usize> {
        match &self.kind {
            ScheduleKind::Table { values } => Some(values.len()),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// `Σ a(n) = ∞`, decided from the kind.
    pub fn sum_diverges(&self) -> Verdict {
        match &self.kind {
            ScheduleKind::Harmonic | ScheduleKind::LogHarmonic => Verdict::Pass,
            ScheduleKind::Power { exponent } | ScheduleKind::InversePower { exponent } => {
                Verdict::from_bool(*exponent <= 1.0)
            }
            ScheduleKind::Constant { value } => Verdict::from_bool(*value > 0.0),
            ScheduleKind::Table { .. } => Verdict::NotApplicable,
        }
    }

    /// `Σ a(n)² < ∞`, decided from the kind.
    pub fn square_summable(&self) -> Verdict {
        match &self.kind {
            ScheduleKind::Harmonic | ScheduleKind::LogHarmonic => Verdict::Pass,
            ScheduleKind::Power { exponent } | ScheduleKind::InversePower { exponent } => {
                Verdict::from_bool(*exponent > 0.5)
            }
            ScheduleKind::Constant { value } => Verdict::from_bool(*value == 0.0),
            ScheduleKind::Table { .. } => Verdict::NotApplicable,
        }
    }

    /// Whether `a(n) → 0`; required for the probability series to converge.
    pub fn vanishes(&self) -> bool {
        match &self.kind {
            ScheduleKind::Harmonic | ScheduleKind::LogHarmonic => true,
            ScheduleKind::Power { exponent } | ScheduleKind::InversePower { exponent } => {
                *exponent > 0.0
            }
            ScheduleKind::Constant { value } => *value == 0.0,
            ScheduleKind::Table { .. } => true,
        }
    }

    /// Upper bound on `b(n) = Σ_{m≥n} a(m)²` from `f(n) + ∫_n^∞ f`.
    pub fn tail_square_sum(&self, n: usize) -> f64 {
        let x = n as f64;
        let sq = |v: f64| v * v;
        match &self.kind {
            ScheduleKind::Harmonic => sq(1.0 / (1.0 + x)) + 1.0 / (1.0 + x),
            ScheduleKind::Power { exponent } => {
                let e2 = 2.0 * exponent;
                if e2 <= 1.0 {
                    f64::INFINITY
                } else {
                    (1.0 + x).powf(-e2) + (1.0 + x).powf(1.0 - e2) / (e2 - 1.0)
                }
            }
            ScheduleKind::InversePower { exponent } => {
                let e2 = 2.0 * exponent;
                if e2 <= 1.0 {
                    f64::INFINITY
                } else if n == 0 {
                    1.0 + self.tail_square_sum(1)
                } else {
                    sq(1.0 / (1.0 + x.powf(*exponent))) + x.powf(1.0 - e2) / (e2 - 1.0)
                }
            }
            ScheduleKind::LogHarmonic => {
                if n < 2 {
                    (n..2).map(|m| sq(self.step(m).unwrap())).sum::<f64>()
                        + self.tail_square_sum(2)
                } else {
                    let l = x.ln();
                    sq(self.step(n).unwrap()) + 1.0 / (x * l * l)
                }
            }
            ScheduleKind::Constant { value } => {
                if *value == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ScheduleKind::Table { values } => values.iter().skip(n).map(|v| v * v).sum(),
        }
    }

    /// `m(n) = min{k ≥ n : Σ_{i=n}^k a(i) ≥ window}`, searching up to `limit`.
    pub fn window_end(&self, n: usize, window: f64, limit: usize) -> Result<usize> {
        if !(window > 0.0) {
            return Err(Error::Config(format!("window length {window} must be positive")));
        }
        let mut acc = 0.0;
        let mut k = n;
        loop {
            if k > limit {
                return Err(Error::HorizonExceeded(format!(
                    "partial sums from n = {n} stay below {window} through index {limit}"
                )));
            }
            acc += self.step_or_err(k)?;
            if acc >= window {
                return Ok(k);
            }
            k += 1;
        }
    }

    /// Default search limit for windows starting at or before `horizon`.
    pub fn search_limit(&self, horizon: usize) -> usize {
        let generous = horizon
            .saturating_mul(WINDOW_SEARCH_FACTOR)
            .max(WINDOW_SEARCH_MIN);
        match self.len() {
            Some(len) => len.saturating_sub(1).min(generous),
            None => generous,
        }
    }

    /// Like [`window_end`](Self::window_end), asserting `m(n) − n ≤ C*·T·max(n, 1)`
    /// when the schedule declares `C*`.
    pub fn checked_window_end(&self, n: usize, window: f64) -> Result<usize> {
        let m = self.window_end(n, window, self.search_limit(n))?;
        if let Some(c_star) = self.c_star {
            let allowed = c_star * window * n.max(1) as f64;
            if (m - n) as f64 > allowed {
                return Err(Error::Inadmissible(vec![format!(
                    "window from n = {n} spans {} indices, more than C*·T·max(n,1) = {allowed}",
                    m - n
                )]));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_fail(self) -> bool {
        self == Verdict::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NonNegative,
    DivergentSum,
    SquareSummable,
    QuasiMonotone,
    EventuallyDecreasing,
    WindowBound,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::NonNegative => "a(n) >= 0",
            Condition::DivergentSum => "sum a(n) = inf",
            Condition::SquareSummable => "sum a(n)^2 < inf",
            Condition::QuasiMonotone => "a(m) <= c a(n) for m >= n",
            Condition::EventuallyDecreasing => "eventually non-increasing",
            Condition::WindowBound => "window m(n) - n <= C* T n",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub verdict: Verdict,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub conditions: Vec<ConditionReport>,
    /// `1.1 × sup (m(n) − n)/(T·max(n,1))` over the horizon.
    pub measured_c_star: Option<f64>,
    /// `sup (m(n) − n)/T`, the un-normalised window length.
    pub max_window_over_t: Option<f64>,
}

impl AdmissibilityReport {
    pub fn admissible(&self) -> bool {
        !self.conditions.iter().any(|c| c.verdict.is_fail())
    }

    pub fn failed(&self) -> Vec<Condition> {
        self.conditions
            .iter()
            .filter(|c| c.verdict.is_fail())
            .map(|c| c.condition)
            .collect()
    }

    pub fn verdict(&self, condition: Condition) -> Option<Verdict> {
        self.conditions
            .iter()
            .find(|c| c.condition == condition)
            .map(|c| c.verdict)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.admissible() {
            Ok(self)
        } else {
            Err(Error::Inadmissible(
                self.conditions
                    .iter()
                    .filter(|c| c.verdict.is_fail())
                    .map(|c| format!("{}: {}", c.condition.label(), c.detail))
                    .collect(),
            ))
        }
    }
}

struct WindowScan {
    ratios: Vec<f64>,
    max_window: usize,
    exceeded_at: Option<usize>,
}

/// Sliding two-pointer scan of `m(n)` for `n = 0..=horizon`, using that
/// `m(n)` is non-decreasing in `n` for non-negative steps.
fn scan_windows(schedule: &StepSchedule, window: f64, horizon: usize) -> Result<WindowScan> {
    let limit = schedule.search_limit(horizon);
    let mut ratios = Vec::with_capacity(horizon + 1);
    let mut max_window = 0;
    let mut end = 0usize;
    // acc = Σ_{i=n}^{end} a(i)
    let mut acc = schedule.step_or_err(0)?;
    for n in 0..=horizon {
        if n > 0 {
            acc -= schedule.step_or_err(n - 1)?;
            if end < n {
                end = n;
                acc = schedule.step_or_err(n)?;
            }
        }
        while acc < window {
            if end + 1 > limit {
                return Ok(WindowScan {
                    ratios,
                    max_window,
                    exceeded_at: Some(n),
                });
            }
            end += 1;
            acc += schedule.step_or_err(end)?;
        }
        let w = end - n;
        max_window = max_window.max(w);
        ratios.push(w as f64 / (window * n.max(1) as f64));
    }
    Ok(WindowScan {
        ratios,
        max_window,
        exceeded_at: None,
    })
}

/// Checks every stepsize condition over `n ∈ [0, horizon]` with windows of
/// length `window`.
pub fn validate_schedule(
    schedule: &StepSchedule,
    window: f64,
    horizon: usize,
) -> Result<AdmissibilityReport> {
    if horizon < 1 {
        return Err(Error::Config("schedule horizon must be at least 1".into()));
    }
    let horizon = match schedule.len() {
        Some(0) => return Err(Error::Config("empty step table".into())),
        Some(len) => horizon.min(len - 1),
        None => horizon,
    };
    let steps: Vec<f64> = (0..=horizon)
        .map(|n| schedule.step_or_err(n))
        .collect::<Result<_>>()?;
    let mut conditions = Vec::new();

    let negative = steps.iter().position(|a| !(*a >= 0.0) || !a.is_finite());
    conditions.push(ConditionReport {
        condition: Condition::NonNegative,
        verdict: Verdict::from_bool(negative.is_none()),
        detail: match negative {
            Some(n) => format!("a({n}) = {}", steps[n]),
            None => format!("checked n <= {horizon}"),
        },
    });
    conditions.push(ConditionReport {
        condition: Condition::DivergentSum,
        verdict: schedule.sum_diverges(),
        detail: "decided from the schedule kind".into(),
    });
    conditions.push(ConditionReport {
        condition: Condition::SquareSummable,
        verdict: schedule.square_summable(),
        detail: "decided from the schedule kind".into(),
    });

    // suffix maxima give max_{m ≥ n} a(m) on the horizon
    let mut suffix_max = vec![0.0; steps.len()];
    let mut running = f64::NEG_INFINITY;
    for (i, a) in steps.iter().enumerate().rev() {
        running = running.max(*a);
        suffix_max[i] = running;
    }
    let worst = (0..steps.len())
        .map(|n| (n, suffix_max[n] - schedule.c * steps[n]))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let qm_ok = worst.1 <= 1e-12 * suffix_max[worst.0].abs();
    conditions.push(ConditionReport {
        condition: Condition::QuasiMonotone,
        verdict: Verdict::from_bool(qm_ok),
        detail: format!("c = {}, worst excess {:.3e} at n = {}", schedule.c, worst.1, worst.0),
    });

    let half = horizon / 2;
    let increase = (half..horizon).find(|&n| steps[n + 1] > steps[n]);
    conditions.push(ConditionReport {
        condition: Condition::EventuallyDecreasing,
        verdict: Verdict::from_bool(increase.is_none()),
        detail: match increase {
            Some(n) => format!("a({}) > a({n})", n + 1),
            None => format!("non-increasing on [{half}, {horizon}]"),
        },
    });

    let scan = scan_windows(schedule, window, horizon)?;
    let mut measured_c_star = None;
    let mut max_window_over_t = None;
    let (verdict, detail) = if let Some(n) = scan.exceeded_at {
        (
            Verdict::Fail,
            format!("window from n = {n} did not close within the search limit"),
        )
    } else {
        let sup = scan.ratios.iter().cloned().fold(0.0, f64::max);
        measured_c_star = Some(1.1 * sup);
        max_window_over_t = Some(scan.max_window as f64 / window);
        match schedule.c_star {
            Some(declared) => {
                let ok = sup <= declared;
                (
                    Verdict::from_bool(ok),
                    format!("declared C* = {declared}, observed sup ratio {sup:.6}"),
                )
            }
            None => {
                let mid = horizon / 2;
                let first = scan.ratios[..=mid].iter().cloned().fold(0.0, f64::max);
                let second = scan.ratios[mid..].iter().cloned().fold(0.0, f64::max);
                let ok = second <= 1.1 * first;
                (
                    Verdict::from_bool(ok),
                    format!(
                        "sup ratio {first:.6} on [0, {mid}], {second:.6} on [{mid}, {horizon}]"
                    ),
                )
            }
        }
    };
    conditions.push(ConditionReport {
        condition: Condition::WindowBound,
        verdict,
        detail,
    });

    Ok(AdmissibilityReport {
        conditions,
        measured_c_star,
        max_window_over_t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epoch {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl Epoch {
    /// `υ_k = n_{k+1} − n_k`.
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone)]
pub struct TimeGrid {
    schedule: StepSchedule,
    steps: Vec<f64>,
    t: Vec<f64>,
    t_prime: f64,
    window: f64,
    boundaries: Vec<usize>,
}

/// Cumulative times and epoch boundaries `n_k` from `n_0`, up to `horizon`
/// or `max_epochs` complete epochs, whichever comes first.
pub fn build_time_grid(
    schedule: &StepSchedule,
    t_prime: f64,
    n0: usize,
    horizon: usize,
    max_epochs: Option<usize>,
) -> Result<TimeGrid> {
    if !(t_prime > 0.0) {
        return Err(Error::Config(format!("T' = {t_prime} must be positive")));
    }
    if n0 > horizon {
        return Err(Error::HorizonExceeded(format!("n0 = {n0} beyond horizon {horizon}")));
    }
    let mut steps = Vec::with_capacity(horizon + 1);
    let mut t = Vec::with_capacity(horizon + 1);
    let mut acc = 0.0;
    for n in 0..=horizon {
        let a = schedule.step_or_err(n)?;
        acc += a;
        steps.push(a);
        t.push(acc);
    }
    let a0 = steps[0];
    let window = t_prime + schedule.c * a0;
    let mut boundaries = vec![n0];
    let mut n = n0;
    while max_epochs.is_none_or(|cap| boundaries.len() <= cap) {
        let target = t[*boundaries.last().unwrap()] + t_prime;
        while n <= horizon && t[n] < target {
            n += 1;
        }
        if n > horizon {
            break;
        }
        boundaries.push(n);
    }
    if boundaries.len() < 2 {
        return Err(Error::HorizonExceeded(format!(
            "no complete epoch of length {t_prime} between n0 = {n0} and horizon {horizon}"
        )));
    }
    for w in boundaries.windows(2) {
        let span = t[w[1]] - t[w[0]];
        if span > window * (1.0 + 1e-12) || span < t_prime * (1.0 - 1e-12) {
            return Err(Error::Inadmissible(vec![format!(
                "epoch [{}, {}] spans time {span}, outside [T', T' + c a(0)]",
                w[0], w[1]
            )]));
        }
    }
    Ok(TimeGrid {
        schedule: schedule.clone(),
        steps,
        t,
        t_prime,
        window,
        boundaries,
    })
}

impl TimeGrid {
    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    pub fn horizon(&self) -> usize {
        self.t.len() - 1
    }

    /// `a(n)`.
    pub fn step(&self, n: usize) -> f64 {
        self.steps[n]
    }

    /// `t(n) = Σ_{m=0}^{n} a(m)`.
    pub fn time(&self, n: usize) -> f64 {
        self.t[n]
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn t_prime(&self) -> f64 {
        self.t_prime
    }

    /// `T = T′ + c·a(0)`.
    pub fn window(&self) -> f64 {
        self.window
    }

    /// `n_0, n_1, …`
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn epoch_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn epoch(&self, k: usize) -> Epoch {
        let start = self.boundaries[k];
        let end = self.boundaries[k + 1];
        Epoch {
            index: k,
            start,
            end,
            t_start: self.t[start],
            t_end: self.t[end],
        }
    }

    pub fn epochs(&self) -> impl Iterator<Item = Epoch> + '_ {
        (0..self.epoch_count()).map(|k| self.epoch(k))
    }

    /// Upper bound on `b(n)`.
    pub fn tail_square_sum(&self, n: usize) -> f64 {
        self.schedule.tail_square_sum(n)
    }

    /// Largest `n ≤ horizon` with `t(n) ≤ s`, i.e. the knot at or before `s`.
    pub fn knot_before(&self, s: f64) -> Option<usize> {
        let idx = self.t.partition_point(|v| *v <= s);
        idx.checked_sub(1)
    }

    /// `1.1 × max_k υ_k / max(n_k, 1)`: the window constant applied to epochs.
    pub fn epoch_growth_constant(&self) -> f64 {
        1.1 * self
            .epochs()
            .map(|e| e.len() as f64 / e.start.max(1) as f64)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(v: f64, len: usize) -> StepSchedule {
        StepSchedule::new(ScheduleKind::Table {
            values: vec![v; len],
        })
    }

    /// Oracle: naive partial sums, no two-pointer.
    fn naive_window_end(s: &StepSchedule, n: usize, window: f64) -> usize {
        let mut acc = 0.0;
        for k in n.. {
            acc += s.step(k).unwrap();
            if acc >= window {
                return k;
            }
        }
        unreachable!()
    }

    #[test]
    fn harmonic_window_ends() {
        let s = StepSchedule::harmonic();
        assert_eq!(s.window_end(0, 1.0, 100).unwrap(), 0);
        // 1/4 + … + 1/9 = 0.99563…, adding 1/10 gives 1.0956…
        assert_eq!(naive_window_end(&s, 3, 1.0), 9);
        assert_eq!(s.window_end(3, 1.0, 100).unwrap(), 9);
        assert_eq!(s.window_end(7, 1e-12, 100).unwrap(), 7);
    }

    #[test]
    fn window_search_limit() {
        let s = StepSchedule::harmonic();
        assert!(matches!(
            s.window_end(0, 100.0, 1000),
            Err(Error::HorizonExceeded(_))
        ));
        assert!(s.window_end(0, 0.0, 10).is_err());
    }

    #[test]
    fn declared_c_star_is_enforced() {
        let mut s = StepSchedule::harmonic();
        s.c_star = Some(0.01);
        assert!(matches!(
            s.checked_window_end(50, 1.0),
            Err(Error::Inadmissible(_))
        ));
        s.c_star = Some(10.0);
        assert!(s.checked_window_end(50, 1.0).is_ok());
    }

    #[test]
    fn two_pointer_matches_naive() {
        for s in [
            StepSchedule::harmonic(),
            StepSchedule::new(ScheduleKind::InversePower { exponent: 2.0 / 3.0 }),
            StepSchedule::new(ScheduleKind::Power { exponent: 0.8 }),
        ] {
            let scan = scan_windows(&s, 1.5, 300).unwrap();
            for n in 0..=300 {
                let m = naive_window_end(&s, n, 1.5);
                let expected = (m - n) as f64 / (1.5 * n.max(1) as f64);
                assert!((scan.ratios[n] - expected).abs() < 1e-15, "n = {n}");
            }
        }
    }

    #[test]
    fn harmonic_is_admissible() {
        let r = validate_schedule(&StepSchedule::harmonic(), 2.0, 20_000).unwrap();
        assert!(r.admissible(), "{r:?}");
    }

    #[test]
    fn constant_fails_square_summability() {
        let s = StepSchedule::new(ScheduleKind::Constant { value: 0.1 });
        let r = validate_schedule(&s, 1.0, 1000).unwrap();
        assert_eq!(r.failed(), vec![Condition::SquareSummable]);
    }

    #[test]
    fn log_harmonic_window_growth_is_superlinear() {
        let s = StepSchedule::new(ScheduleKind::LogHarmonic);
        let r = validate_schedule(&s, 2.0, 2000).unwrap();
        assert_eq!(r.verdict(Condition::WindowBound), Some(Verdict::Fail));
        assert_eq!(r.verdict(Condition::SquareSummable), Some(Verdict::Pass));
    }

    #[test]
    fn increasing_table_fails_monotonicity() {
        let s = StepSchedule::new(ScheduleKind::Table {
            values: (0..100).map(|n| 0.01 * (1 + n) as f64).collect(),
        });
        let r = validate_schedule(&s, 0.5, 50).unwrap();
        assert_eq!(r.verdict(Condition::QuasiMonotone), Some(Verdict::Fail));
        assert_eq!(r.verdict(Condition::EventuallyDecreasing), Some(Verdict::Fail));
    }

    #[test]
    fn harmonic_grid_first_boundary() {
        let g = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 1000, None).unwrap();
        assert_eq!(g.boundaries()[1], 3);
        assert!((g.time(3) - (1.0 + 0.5 + 1.0 / 3.0 + 0.25)).abs() < 1e-15);
        assert_eq!(g.window(), 2.0);
    }

    #[test]
    fn constant_table_uniform_spacing() {
        let g = build_time_grid(&table(0.5, 200), 1.0, 0, 199, None).unwrap();
        assert!(g.epochs().all(|e| e.len() == 2));
        assert_eq!(g.epoch_count(), 99);
    }

    #[test]
    fn epoch_sums_within_window() {
        let s = StepSchedule::harmonic();
        let g = build_time_grid(&s, 1.0, 5, 100_000, None).unwrap();
        for e in g.epochs() {
            let inner: f64 = (e.start..e.end).map(|n| g.step(n)).sum();
            assert!(inner >= g.t_prime() - 1e-12 && inner <= g.window() + 1e-12);
            assert!(e.t_end - e.t_start <= g.window() + 1e-12);
        }
    }

    #[test]
    fn max_epochs_caps_grid() {
        let g = build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 100_000, Some(3)).unwrap();
        assert_eq!(g.epoch_count(), 3);
    }

    #[test]
    fn short_horizon_errors() {
        assert!(matches!(
            build_time_grid(&StepSchedule::harmonic(), 1.0, 0, 2, None),
            Err(Error::HorizonExceeded(_))
        ));
    }

    #[test]
    fn harmonic_tail_bound_brackets_exact() {
        let s = StepSchedule::harmonic();
        for n in [0usize, 1, 5, 50, 500] {
            let exact: f64 = (n..2_000_000).map(|m| 1.0 / ((1.0 + m as f64).powi(2))).sum::<f64>()
                + 1.0 / 2_000_001.0;
            let b = s.tail_square_sum(n);
            assert!(b >= exact, "n = {n}");
            assert!(b <= exact + 1.0 / ((1.0 + n as f64).powi(2)) + 1e-12);
            let lower = 1.0 / (n as f64 + 1.0);
            assert!(exact >= lower - 1e-9);
        }
    }

    #[test]
    fn tail_bounds_dominate_truncated_sums() {
        for s in [
            StepSchedule::new(ScheduleKind::LogHarmonic),
            StepSchedule::new(ScheduleKind::Power { exponent: 0.75 }),
            StepSchedule::new(ScheduleKind::InversePower { exponent: 2.0 / 3.0 }),
        ] {
            for n in [0usize, 1, 2, 10, 300] {
                let partial: f64 = (n..200_000).map(|m| s.step(m).unwrap().powi(2)).sum();
                assert!(s.tail_square_sum(n) >= partial, "{:?} n = {n}", s.kind);
            }
            let mut prev = f64::INFINITY;
            for n in (2..1000).step_by(7) {
                let b = s.tail_square_sum(n);
                assert!(b <= prev);
                prev = b;
            }
        }
    }

    #[test]
    fn schedule_json_roundtrip() {
        let s: StepSchedule =
            serde_json::from_str(r#"{"kind":"inverse_power","exponent":0.5,"c":1.0}"#).unwrap();
        assert_eq!(s.kind, ScheduleKind::InversePower { exponent: 0.5 });
        assert!(serde_json::from_str::<StepSchedule>(r#"{"kind":"harmonic","bogus":1}"#).is_err());
    }
}
