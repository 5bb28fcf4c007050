//! Integration of a [`Field`] with dense recording and the `∫γ` accumulator.

mod init;
mod io;
mod solver;

pub use init::{init_state, setup, InitScheme, InitSpec, InitialState, ModelKind, ModelSpec, Setup};
pub use io::{
    fmt_f64, trajectory_header, write_json, FinalValues, Summary,
    read_trajectory, read_trajectory_table, write_artifacts, write_state_csv, write_summary,
    write_trajectory_csv, ArtifactPaths, TrajectoryTable,
};
pub use solver::{dopri45, initial_step, rk4, DriveEnd, DriveFailure, OdeSystem, StepObserver, Tolerances};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Field, Observation};
use crate::metrics::entropy_of;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Rk4Fixed {
        dt: f64,
    },
    Rk45Adaptive {
        rtol: f64,
        atol: f64,
        dt_min: f64,
        dt_max: f64,
    },
}

/// Which times are recorded; `0` and `t_end` always are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "grid", rename_all = "kebab-case")]
pub enum Recording {
    /// Every `n`-th accepted step.
    Stride { n: usize },
    /// `k · interval`.
    Linear { interval: f64 },
    /// `first · 10^(k / per_decade)`.
    Geometric { first: f64, per_decade: usize },
}

impl Recording {
    /// First grid time strictly after `t`; `None` for stride recording.
    pub fn next_after(&self, t: f64) -> Option<f64> {
        match *self {
            Recording::Stride { .. } => None,
            Recording::Linear { interval } => {
                let mut k = (t / interval).floor().max(0.0);
                while k * interval <= t {
                    k += 1.0;
                }
                Some(k * interval)
            }
            Recording::Geometric { first, per_decade } => {
                if t < first {
                    return Some(first);
                }
                let n = per_decade as f64;
                let mut k = (n * (t / first).log10()).floor().max(0.0);
                let at = |k: f64| first * 10f64.powf(k / n);
                while at(k) <= t {
                    k += 1.0;
                }
                Some(at(k))
            }
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Recording::Geometric { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    #[serde(flatten)]
    pub method: Method,
    pub t_end: f64,
    pub record: Recording,
}

impl IntegratorConfig {
    pub fn rk45(t_end: f64, record: Recording) -> Self {
        Self {
            method: Method::Rk45Adaptive {
                rtol: 1e-8,
                atol: 1e-10,
                dt_min: 1e-12,
                dt_max: 1e4,
            },
            t_end,
            record,
        }
    }

    pub fn rk4(dt: f64, t_end: f64, record: Recording) -> Self {
        Self {
            method: Method::Rk4Fixed { dt },
            t_end,
            record,
        }
    }

    /// Geometric grid starting at `1e-2` with 20 points per decade.
    pub fn geometric(t_end: f64) -> Self {
        Self::rk45(
            t_end,
            Recording::Geometric {
                first: 1e-2,
                per_decade: 20,
            },
        )
    }

    /// Linear grid with 200 intervals.
    pub fn linear(t_end: f64) -> Self {
        Self::rk45(
            t_end,
            Recording::Linear {
                interval: t_end / 200.0,
            },
        )
    }

    pub fn with_rtol(mut self, rtol: f64) -> Self {
        if let Method::Rk45Adaptive { rtol: r, .. } = &mut self.method {
            *r = rtol;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad("t_end must be positive and finite");
        }
        match self.method {
            Method::Rk4Fixed { dt } if !(dt > 0.0) => return bad("dt must be positive"),
            Method::Rk45Adaptive {
                rtol,
                atol,
                dt_min,
                dt_max,
            } => {
                if !(rtol > 0.0 && atol > 0.0) {
                    return bad("tolerances must be positive");
                }
                if !(dt_min > 0.0 && dt_min <= dt_max) {
                    return bad("need 0 < dt_min <= dt_max");
                }
            }
            _ => {}
        }
        match self.record {
            Recording::Stride { n } if n == 0 => bad("stride must be at least 1"),
            Recording::Linear { interval } if !(interval > 0.0) => bad("interval must be positive"),
            Recording::Geometric { first, per_decade } if !(first > 0.0) || per_decade == 0 => {
                bad("geometric grid needs first > 0 and per_decade >= 1")
            }
            _ => Ok(()),
        }
    }
}

/// Ordered series in which an exact tie can be recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    U,
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    /// Two coordinates were exactly equal at a recorded `t > 0`.
    Tie { t: f64, series: Series, i: usize, j: usize },
    Halt { t: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    /// Field state, without the accumulator.
    pub state: Vec<f64>,
    pub int_gamma: f64,
    pub obs: Observation,
    pub entropy: f64,
    pub max_sigma: f64,
    /// `dℓ/dt` by central differences along the field.
    pub loss_rate: f64,
    /// Indices sorted by decreasing value, ties kept in index order.
    pub u_order: Vec<usize>,
    pub sigma_order: Vec<usize>,
}

impl Sample {
    pub fn loss(&self) -> f64 {
        self.obs.loss
    }

    pub fn gamma(&self) -> f64 {
        self.obs.gamma
    }

    pub fn sigma(&self) -> &[f64] {
        &self.obs.sigma
    }

    pub fn u(&self) -> &[f64] {
        &self.obs.u
    }

    pub fn a(&self) -> &[f64] {
        &self.obs.a
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub field: Field,
    pub config: IntegratorConfig,
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    /// Controller proposal for the step after the last sample.
    pub next_dt: Option<f64>,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn p(&self) -> usize {
        self.field.p()
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has samples")
    }

    pub fn t_end(&self) -> f64 {
        self.last().t
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Index of the recorded sample closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, s) in self.samples.iter().enumerate() {
            if (s.t - t).abs() < (self.samples[best].t - t).abs() {
                best = i;
            }
        }
        best
    }

    /// Rebuilds samples from stored `(t, state, ∫γ)` rows.
    pub fn from_states(
        field: Field,
        config: IntegratorConfig,
        rows: Vec<(f64, Vec<f64>, f64)>,
    ) -> Result<Self> {
        field.validate()?;
        let mut traj = Trajectory {
            field,
            config,
            samples: Vec::with_capacity(rows.len()),
            events: vec![],
            next_dt: None,
            stats: StepStats::default(),
        };
        for (t, x, ig) in rows {
            traj.push(t, &x, ig)?;
        }
        Ok(traj)
    }

    fn push(&mut self, t: f64, x: &[f64], int_gamma: f64) -> Result<()> {
        let sample = make_sample(&self.field, t, x, int_gamma)?;
        if t > 0.0 {
            record_ties(&mut self.events, t, Series::U, sample.u(), &sample.u_order);
            record_ties(&mut self.events, t, Series::Sigma, sample.sigma(), &sample.sigma_order);
        }
        self.samples.push(sample);
        Ok(())
    }
}

/// Indices by decreasing value; NaN sorts last.
pub fn descending_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| {
        v[j].partial_cmp(&v[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx
}

fn record_ties(events: &mut Vec<Event>, t: f64, series: Series, v: &[f64], order: &[usize]) {
    for w in order.windows(2) {
        if v[w[0]] == v[w[1]] {
            events.push(Event::Tie {
                t,
                series,
                i: w[0].min(w[1]),
                j: w[0].max(w[1]),
            });
        }
    }
}

/// `dℓ/dt` along `ẋ`, central difference with displacement `1e-6 (1 + ‖x‖)`.
pub fn loss_rate(field: &Field, x: &[f64]) -> Result<f64> {
    let mut dx = vec![0.0; x.len()];
    field.eval(x, &mut dx)?;
    let fnorm = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Ok(0.0);
    }
    let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut h = 1e-6 * (1.0 + xnorm) / fnorm;
    for _ in 0..20 {
        let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&dx).map(|(a, d)| a + s * d).collect() };
        if let (Ok(lp), Ok(lm)) = (field.loss(&shifted(h)), field.loss(&shifted(-h))) {
            return Ok((lp - lm) / (2.0 * h));
        }
        h *= 0.5;
    }
    Ok(f64::NAN)
}

fn make_sample(field: &Field, t: f64, x: &[f64], int_gamma: f64) -> Result<Sample> {
    let obs = field.observe(x)?;
    let entropy = entropy_of(&obs.sigma);
    let max_sigma = obs.sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u_order = descending_order(&obs.u);
    let sigma_order = descending_order(&obs.sigma);
    Ok(Sample {
        t,
        state: x.to_vec(),
        int_gamma,
        loss_rate: loss_rate(field, x)?,
        obs,
        entropy,
        max_sigma,
        u_order,
        sigma_order,
    })
}

/// The field with `∫γ` appended as the last state coordinate.
struct Augmented<'a>(&'a Field);

impl OdeSystem for Augmented<'_> {
    fn dim(&self) -> usize {
        self.0.dim() + 1
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.0.dim();
        dy[n] = self.0.eval(&y[..n], &mut dy[..n])?;
        Ok(())
    }
}

struct Recorder<'a> {
    traj: &'a mut Trajectory,
    record: Recording,
    t_end: f64,
    since_record: usize,
}

impl StepObserver for Recorder<'_> {
    fn accepted(&mut self, t: f64, y: &[f64], at_mark: bool) -> Result<bool> {
        self.since_record += 1;
        let due = match self.record {
            Recording::Stride { n } => self.since_record >= n || t >= self.t_end,
            _ => at_mark,
        };
        if due {
            let n = y.len() - 1;
            self.traj.push(t, &y[..n], y[n])?;
            self.since_record = 0;
        }
        Ok(true)
    }

    fn next_mark(&self, t: f64) -> f64 {
        self.record.next_after(t).unwrap_or(self.t_end).min(self.t_end)
    }
}

/// Integration error together with everything recorded before it.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationFailure {
    pub error: Error,
    pub partial: Box<Trajectory>,
}

impl std::fmt::Display for IntegrationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (partial trajectory up to t = {:e})",
            self.error,
            self.partial.samples.last().map_or(0.0, |s| s.t)
        )
    }
}

impl std::error::Error for IntegrationFailure {}

pub type FlowResult = std::result::Result<Trajectory, IntegrationFailure>;

fn bare(field: &Field, config: &IntegratorConfig) -> Trajectory {
    Trajectory {
        field: field.clone(),
        config: *config,
        samples: vec![],
        events: vec![],
        next_dt: None,
        stats: StepStats::default(),
    }
}

/// Integrates `ẋ = field(x)` from `x0` at `t = 0` to `config.t_end`.
pub fn integrate(field: &Field, x0: &[f64], config: &IntegratorConfig) -> FlowResult {
    let mut traj = bare(field, config);
    let setup_err = |e: Error, traj: Trajectory| IntegrationFailure {
        error: e,
        partial: Box::new(traj),
    };
    if let Err(e) = field.validate().and_then(|_| config.validate()) {
        return Err(setup_err(e, traj));
    }
    if x0.len() != field.dim() {
        let e = Error::InvalidInput(format!(
            "initial state has length {}, field expects {}",
            x0.len(),
            field.dim()
        ));
        return Err(setup_err(e, traj));
    }
    if let Err(e) = traj.push(0.0, x0, 0.0) {
        return Err(setup_err(e, traj));
    }
    let mut y0 = x0.to_vec();
    y0.push(0.0);
    run(traj, 0.0, y0, config.t_end, None)
}

/// Extends a trajectory by `extra_time`, resuming the step controller where
/// it stopped.
pub fn continue_trajectory(traj: &Trajectory, extra_time: f64) -> FlowResult {
    if extra_time == 0.0 {
        return Ok(traj.clone());
    }
    let fail = |e: Error| IntegrationFailure {
        error: e,
        partial: Box::new(traj.clone()),
    };
    if !(extra_time > 0.0) {
        return Err(fail(Error::InvalidInput("extra_time must be >= 0".into())));
    }
    let last = traj.last();
    let mut y0 = last.state.clone();
    y0.push(last.int_gamma);
    let t0 = last.t;
    let mut next = traj.clone();
    next.config.t_end = t0 + extra_time;
    run(next, t0, y0, t0 + extra_time, traj.next_dt)
}

fn run(mut traj: Trajectory, t0: f64, y0: Vec<f64>, t_end: f64, h: Option<f64>) -> FlowResult {
    let field = traj.field.clone();
    let config = traj.config;
    let sys = Augmented(&field);
    let mut rec = Recorder {
        record: config.record,
        t_end,
        since_record: 0,
        traj: &mut traj,
    };
    let outcome = match config.method {
        Method::Rk45Adaptive {
            rtol,
            atol,
            dt_min,
            dt_max,
        } => {
            let tol = Tolerances {
                rtol,
                atol,
                dt_min,
                dt_max,
            };
            dopri45(&sys, t0, &y0, t_end, &tol, h, &mut rec)
        }
        Method::Rk4Fixed { dt } => rk4(&sys, t0, &y0, t_end, dt, &mut rec),
    };
    match outcome {
        Ok(end) => {
            traj.stats.accepted += end.accepted;
            traj.stats.rejected += end.rejected;
            traj.next_dt = Some(end.next_dt);
            Ok(traj)
        }
        Err(f) => {
            traj.stats.accepted += f.accepted;
            traj.stats.rejected += f.rejected;
            let n = f.y.len() - 1;
            if traj.samples.last().is_none_or(|s| s.t < f.t) {
                // The last accepted state is kept if it can still be observed.
                let _ = traj.push(f.t, &f.y[..n], f.y[n]);
            }
            traj.events.push(Event::Halt {
                t: f.t,
                reason: f.error.to_string(),
            });
            Err(IntegrationFailure {
                error: f.error,
                partial: Box::new(traj),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_grid_is_increasing_and_hits_first() {
        let r = Recording::Geometric {
            first: 1e-2,
            per_decade: 10,
        };
        assert_eq!(r.next_after(0.0), Some(1e-2));
        let mut t = 0.0;
        let mut count = 0;
        while t < 1e3 {
            let n = r.next_after(t).unwrap();
            assert!(n > t);
            t = n;
            count += 1;
        }
        assert_eq!(count, 51);
    }

    #[test]
    fn linear_grid_steps() {
        let r = Recording::Linear { interval: 0.5 };
        assert_eq!(r.next_after(0.0), Some(0.5));
        assert_eq!(r.next_after(0.5), Some(1.0));
        assert_eq!(r.next_after(0.7), Some(1.0));
    }

    #[test]
    fn descending_order_keeps_index_order_on_ties() {
        assert_eq!(descending_order(&[0.1, 0.5, 0.5, -1.0]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::geometric(1e3).validate().is_ok());
        assert!(IntegratorConfig::geometric(-1.0).validate().is_err());
        let mut c = IntegratorConfig::linear(10.0);
        c.method = Method::Rk45Adaptive {
            rtol: 1e-8,
            atol: 1e-10,
            dt_min: 1.0,
            dt_max: 0.5,
        };
        assert!(c.validate().is_err());
    }
}
