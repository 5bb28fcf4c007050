//! Verifiers that turn a recorded trajectory into a pass/fail report with
//! named witness quantities.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Event, Sample, Trajectory};
use crate::losses::{split_matrix_state, split_multirow_state, Field, Layout};
use crate::simplex::{softmax_slice, ScoreFn};

/// Margin for strict orderings and monotone sequences between adjacent samples.
pub const ORDER_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub name: String,
    pub passed: bool,
    pub tolerance: f64,
    pub witnesses: BTreeMap<String, f64>,
}

impl VerifierReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: true,
            tolerance,
            witnesses: BTreeMap::new(),
        }
    }

    fn witness(&mut self, key: &str, value: f64) -> &mut Self {
        self.witnesses.insert(key.to_string(), value);
        self
    }

    /// Records the witness and folds `ok` into `passed`.
    fn check(&mut self, key: &str, value: f64, ok: bool) -> &mut Self {
        self.passed &= ok;
        self.witness(key, value)
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.witnesses.get(key).copied()
    }
}

/// `Φ_ij = (u_i − u_j)(e^{−a_j} − e^{−a_i})` at one recorded time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSample {
    pub t: f64,
    pub i: usize,
    pub j: usize,
    pub phi: f64,
}

fn inapplicable(verifier: &str, traj: &Trajectory) -> Error {
    Error::Inapplicable(format!("{verifier} does not apply to {} trajectories", traj.field.name()))
}

fn require(ok: bool, verifier: &str, traj: &Trajectory) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(inapplicable(verifier, traj))
    }
}

fn is_logistic_vector(field: &Field) -> bool {
    matches!(field, Field::LogisticFull { .. } | Field::LogisticReduced { .. })
}

fn is_regression_vector(field: &Field) -> bool {
    matches!(field, Field::RegressionFull { .. } | Field::RegressionReduced { .. })
}

/// Late-time verifiers need two decades of geometric samples.
fn require_long_geometric(verifier: &str, traj: &Trajectory) -> Result<()> {
    if !traj.config.record.is_geometric() || traj.t_end() < 1e4 {
        return Err(Error::Inapplicable(format!(
            "{verifier} needs a geometric grid reaching t >= 1e4 (got t_end = {:e})",
            traj.t_end()
        )));
    }
    Ok(())
}

/// Least squares `y ≈ slope·x + intercept`; returns `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 0.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Samples at `t > 0`.
fn positive_times(traj: &Trajectory) -> impl Iterator<Item = &Sample> {
    traj.samples.iter().filter(|s| s.t > 0.0)
}

/// Index of the largest `u(0)`, ties broken by the larger `σ(0)`.
pub fn reference_index(traj: &Trajectory) -> usize {
    let s = traj.first();
    let (u, sigma) = (s.u(), s.sigma());
    (0..u.len())
        .max_by(|&i, &j| {
            u[i].total_cmp(&u[j])
                .then(sigma[i].total_cmp(&sigma[j]))
                .then(j.cmp(&i))
        })
        .expect("p >= 2")
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len())
        .max_by(|&i, &j| v[i].total_cmp(&v[j]).then(j.cmp(&i)))
        .expect("non-empty")
}

/// Smallest `v_k − v_{k+1}`; positive iff `v` is strictly decreasing.
fn min_adjacent_gap(v: &[f64]) -> f64 {
    v.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min)
}

fn order_report(traj: &Trajectory, name: &str) -> VerifierReport {
    let mut r = VerifierReport::new(name, 0.0);
    let (mut gu, mut tu, mut gs, mut ts) = (f64::INFINITY, 0.0, f64::INFINITY, 0.0);
    for s in positive_times(traj) {
        let g = min_adjacent_gap(s.u());
        if g < gu {
            (gu, tu) = (g, s.t);
        }
        let g = min_adjacent_gap(s.sigma());
        if g < gs {
            (gs, ts) = (g, s.t);
        }
    }
    let ties = traj.events.iter().filter(|e| matches!(e, Event::Tie { .. })).count();
    r.check("min_u_gap", gu, gu > 0.0)
        .witness("t_min_u_gap", tu)
        .check("min_sigma_gap", gs, gs > 0.0)
        .witness("t_min_sigma_gap", ts)
        .check("ties", ties as f64, ties == 0);
    r
}

/// `u` and `σ` stay strictly decreasing in index order at every `t > 0`.
pub fn verify_order_preservation(traj: &Trajectory) -> Result<VerifierReport> {
    let ok = is_logistic_vector(&traj.field) || matches!(traj.field, Field::GeneralNorm { .. });
    require(ok, "order_preservation", traj)?;
    Ok(order_report(traj, "order_preservation"))
}

/// Every pairwise gap `u_i − u_j`, `i < j`, grows between adjacent samples
/// (margin `ORDER_MARGIN`) and has grown overall.
pub fn verify_repulsion(traj: &Trajectory) -> Result<VerifierReport> {
    let ok = is_logistic_vector(&traj.field)
        || is_regression_vector(&traj.field)
        || matches!(traj.field, Field::GeneralNorm { .. });
    require(ok, "repulsion", traj)?;
    let p = traj.p();
    let mut r = VerifierReport::new("repulsion", ORDER_MARGIN);
    let (mut worst, mut t_worst) = (f64::INFINITY, 0.0);
    let mut min_growth = f64::INFINITY;
    let gap = |s: &Sample, i: usize, j: usize| s.u()[i] - s.u()[j];
    for i in 0..p {
        for j in i + 1..p {
            for w in traj.samples.windows(2) {
                let inc = gap(&w[1], i, j) - gap(&w[0], i, j);
                if inc < worst {
                    (worst, t_worst) = (inc, w[1].t);
                }
            }
            min_growth = min_growth.min(gap(traj.last(), i, j) - gap(traj.first(), i, j));
        }
    }
    r.check("min_increment", worst, worst > -ORDER_MARGIN)
        .witness("t_min_increment", t_worst)
        .check("min_net_growth", min_growth, min_growth > ORDER_MARGIN);
    Ok(r)
}

/// `Φ_ij` for every pair `i < j` at every sample.
pub fn lyapunov_samples(traj: &Trajectory) -> Result<Vec<LyapunovSample>> {
    require(is_logistic_vector(&traj.field), "lyapunov", traj)?;
    let p = traj.p();
    let mut out = Vec::with_capacity(traj.samples.len() * p * (p - 1) / 2);
    for s in &traj.samples {
        let (u, a) = (s.u(), s.a());
        for i in 0..p {
            for j in i + 1..p {
                let phi = (u[i] - u[j]) * ((-a[j]).exp() - (-a[i]).exp());
                out.push(LyapunovSample { t: s.t, i, j, phi });
            }
        }
    }
    Ok(out)
}

/// Relative slack allowed when `Φ` is compared between adjacent samples.
pub const LYAPUNOV_REL_TOL: f64 = 1e-9;

/// `Φ_ij(0) = 0`, `Φ_ij > 0` for `t > 0`, and `Φ_ij` non-decreasing.
pub fn verify_lyapunov(traj: &Trajectory) -> Result<VerifierReport> {
    let phis = lyapunov_samples(traj)?;
    let pairs = traj.p() * (traj.p() - 1) / 2;
    let mut r = VerifierReport::new("lyapunov", LYAPUNOV_REL_TOL);
    let initial = phis[..pairs].iter().map(|s| s.phi.abs()).fold(0.0, f64::max);
    let (mut min_pos, mut t_min) = (f64::INFINITY, 0.0);
    for s in phis[pairs..].iter().filter(|s| s.t > 0.0) {
        if s.phi < min_pos {
            (min_pos, t_min) = (s.phi, s.t);
        }
    }
    let (mut worst, mut t_worst) = (f64::INFINITY, 0.0);
    for k in pairs..phis.len() {
        let (prev, cur) = (phis[k - pairs], phis[k]);
        let slack = (cur.phi - prev.phi) / (1.0 + prev.phi.abs());
        if slack < worst {
            (worst, t_worst) = (slack, cur.t);
        }
    }
    r.check("max_abs_phi_at_0", initial, initial <= 1e-12)
        .check("min_phi", min_pos, min_pos > 0.0)
        .witness("t_min_phi", t_min)
        .check("min_relative_increment", worst, worst >= -LYAPUNOV_REL_TOL)
        .witness("t_min_relative_increment", t_worst);
    Ok(r)
}

pub const RATIO_BOUND_SLACK: f64 = 1e-9;

/// `σ_j/σ_0 ≤ 1/(1 + (δ/p)∫γ)` with `δ` the smallest adjacent gap of `u(0)`.
pub fn verify_ratio_bound(traj: &Trajectory) -> Result<VerifierReport> {
    require(is_logistic_vector(&traj.field), "ratio_bound", traj)?;
    let delta = min_adjacent_gap(traj.first().u());
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "u(0) is not strictly decreasing (min gap {delta:e})"
        )));
    }
    let p = traj.p() as f64;
    let mut r = VerifierReport::new("ratio_bound", RATIO_BOUND_SLACK);
    let (mut worst, mut t_worst) = (f64::INFINITY, 0.0);
    for s in &traj.samples {
        let bound = 1.0 / (1.0 + delta / p * s.int_gamma);
        let sigma = s.sigma();
        for &sj in &sigma[1..] {
            let slack = bound - sj / sigma[0];
            if slack < worst {
                (worst, t_worst) = (slack, s.t);
            }
        }
    }
    r.witness("delta", delta)
        .check("min_slack", worst, worst >= -RATIO_BOUND_SLACK)
        .witness("t_min_slack", t_worst);
    Ok(r)
}

/// Samples with `t` in `[lo, hi]`.
fn window(traj: &Trajectory, lo: f64, hi: f64) -> Vec<&Sample> {
    traj.samples.iter().filter(|s| s.t >= lo && s.t <= hi).collect()
}

/// `∫γ` against `ln t` over the last two decades: `R² > 0.99` and slope in
/// `[0.2, 5]`.
pub fn verify_polarization_growth(traj: &Trajectory) -> Result<VerifierReport> {
    require(traj.field.has_gamma(), "polarization_growth", traj)?;
    require_long_geometric("polarization_growth", traj)?;
    let t_end = traj.t_end();
    let pts = window(traj, t_end / 100.0 * (1.0 - 1e-12), t_end);
    let x: Vec<f64> = pts.iter().map(|s| s.t.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|s| s.int_gamma).collect();
    let (slope, intercept, r2) = linear_fit(&x, &y);
    let mut r = VerifierReport::new("polarization_growth", 0.01);
    r.check("slope", slope, (0.2..=5.0).contains(&slope))
        .witness("intercept", intercept)
        .check("r_squared", r2, r2 > 0.99)
        .witness("points", pts.len() as f64);
    let decade = traj.samples[traj.nearest(t_end / 10.0)].int_gamma;
    r.witness("last_decade_increase", traj.last().int_gamma - decade);
    // du_0/dt = γBσ_0 ≤ γB, so B∫γ bounds the growth of u_0.
    let b = traj.field.beta_star_norm_sq();
    let u00 = traj.first().u()[0];
    let slack = traj
        .samples
        .iter()
        .map(|s| b * s.int_gamma - (s.u()[0] - u00))
        .fold(f64::INFINITY, f64::min);
    r.witness("u0_bound_min_slack", slack);
    // Smallest c0 with B∫γ ≥ ln(t/(2p) − c0) − u_0(0) across the window.
    let p2 = 2.0 * traj.p() as f64;
    let c0 = pts
        .iter()
        .map(|s| s.t / p2 - (b * s.int_gamma + u00).exp())
        .fold(f64::NEG_INFINITY, f64::max);
    r.witness("c0", c0);
    Ok(r)
}

/// `σ_ref(t_end) ≥ 1 − eps` and `argmax σ(t_end)` is the reference index.
pub fn verify_onehot_limit(traj: &Trajectory, eps: f64) -> Result<VerifierReport> {
    let k = reference_index(traj);
    let last = traj.last();
    let top = argmax(last.sigma());
    let mut r = VerifierReport::new("onehot_limit", eps);
    r.witness("reference_index", k as f64)
        .check("sigma_ref_end", last.sigma()[k], last.sigma()[k] >= 1.0 - eps)
        .check("argmax_end", top as f64, top == k)
        .witness("entropy_end", last.entropy);
    Ok(r)
}

/// Slack on loss increases between adjacent samples.
pub const LOSS_MONOTONE_TOL: f64 = 1e-10;

/// `loss(t_end) < tol` and the loss never rises by more than
/// `LOSS_MONOTONE_TOL` between samples.
pub fn verify_vanishing_loss(traj: &Trajectory, tol: f64) -> Result<VerifierReport> {
    let rise = traj
        .samples
        .windows(2)
        .map(|w| w[1].loss() - w[0].loss())
        .fold(f64::NEG_INFINITY, f64::max);
    let end = traj.last().loss();
    let mut r = VerifierReport::new("vanishing_loss", tol);
    r.check("loss_end", end, end < tol)
        .check("max_rise", rise, !(rise > LOSS_MONOTONE_TOL));
    Ok(r)
}

/// Fits `ln loss` against `t` over `t > 0` until the loss first drops below
/// `1e-12·loss(0)`, past which rounding dominates; needs at least 5 points.
pub fn verify_exponential_decay(traj: &Trajectory) -> Result<VerifierReport> {
    let floor = 1e-12 * traj.first().loss();
    let pts: Vec<&Sample> = positive_times(traj)
        .take_while(|s| s.loss() >= floor && s.loss() > 0.0)
        .collect();
    let mut r = VerifierReport::new("exponential_decay", 0.01);
    r.check("points", pts.len() as f64, pts.len() >= 5);
    if pts.len() >= 2 {
        let x: Vec<f64> = pts.iter().map(|s| s.t).collect();
        let y: Vec<f64> = pts.iter().map(|s| s.loss().ln()).collect();
        let (slope, _, r2) = linear_fit(&x, &y);
        r.check("rate", slope, slope < 0.0).check("r_squared", r2, r2 > 0.99);
    }
    Ok(r)
}

/// Ratio of second to first singular value.
fn rank_ratio(v: &DMatrix<f64>) -> f64 {
    let mut sv: Vec<f64> = v.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] == 0.0 {
        0.0
    } else {
        sv[1] / sv[0]
    }
}

/// Non-maximal `u_j` plateau over the last decade relative to `u_0`,
/// `σ_j ln²t` stays within a factor 10, and for full states `V` is close to
/// rank one.
pub fn verify_nonmaximal_rates(traj: &Trajectory) -> Result<VerifierReport> {
    require(is_logistic_vector(&traj.field), "nonmaximal_rates", traj)?;
    require_long_geometric("nonmaximal_rates", traj)?;
    let k = reference_index(traj);
    let t_end = traj.t_end();
    let (end, dec) = (traj.last(), &traj.samples[traj.nearest(t_end / 10.0)]);
    let du = |j: usize| end.u()[j] - dec.u()[j];
    let others: Vec<usize> = (0..traj.p()).filter(|&j| j != k).collect();
    let plateau = others.iter().map(|&j| du(j)).fold(f64::NEG_INFINITY, f64::max) / du(k);
    let pts = window(traj, dec.t, t_end);
    let mut spread = 1.0f64;
    for &j in &others {
        let vals: Vec<f64> = pts.iter().map(|s| s.sigma()[j] * s.t.ln().powi(2)).collect();
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        spread = spread.max(hi / lo);
    }
    let mut r = VerifierReport::new("nonmaximal_rates", 0.05);
    r.check("plateau_ratio", plateau, plateau < 0.05)
        .witness("u_ref_last_decade_growth", du(k))
        .check("sigma_log2_spread", spread, spread < 10.0);
    if let Layout::Matrix { p } = traj.field.layout() {
        let (v, _) = split_matrix_state(&end.state, p);
        let ratio = rank_ratio(&v);
        r.check("rank_ratio", ratio, ratio < 0.1);
    }
    Ok(r)
}

/// Columns of `V` stay in `span(β*)`: `‖P⊥V‖ < 1e-8 (1 + ‖V‖)` at every sample.
pub fn verify_rank_one(traj: &Trajectory) -> Result<VerifierReport> {
    let Field::RegressionFull { beta_star } = &traj.field else {
        return Err(inapplicable("rank_one", traj));
    };
    let p = beta_star.len();
    let b = DVector::from_column_slice(beta_star);
    let proj = DMatrix::identity(p, p) - &b * b.transpose() / b.norm_squared();
    let tol = 1e-8;
    let (mut worst, mut t_worst, mut worst_abs) = (0.0f64, 0.0, 0.0);
    for s in &traj.samples {
        let (v, _) = split_matrix_state(&s.state, p);
        let res = (&proj * &v).norm();
        let rel = res / (1.0 + v.norm());
        if rel > worst {
            (worst, t_worst, worst_abs) = (rel, s.t, res);
        }
    }
    let mut r = VerifierReport::new("rank_one", tol);
    r.check("max_relative_residual", worst, worst < tol)
        .witness("residual_norm", worst_abs)
        .witness("t_max_residual", t_worst);
    Ok(r)
}

/// Strict `u` ordering, weak `a` ordering, and a non-negative potential
/// `(G(a_i) − G(a_j))(u_i − u_j)` with `G′ = 1/f′`. For `f = exp` this is the
/// order-preservation report under a different name.
pub fn verify_general_norm_nocrossing(traj: &Trajectory) -> Result<VerifierReport> {
    let Field::GeneralNorm { f, .. } = traj.field else {
        return Err(inapplicable("general_norm_nocrossing", traj));
    };
    const NAME: &str = "general_norm_nocrossing";
    if f == ScoreFn::Exp {
        return Ok(order_report(traj, NAME));
    }
    for s in &traj.samples {
        if let Some(&a) = s.a().iter().find(|&&a| !(f.derivative(a) > 0.0)) {
            return Err(Error::Inapplicable(format!(
                "{} is not increasing at a = {a:e} (t = {:e})",
                f.name(),
                s.t
            )));
        }
    }
    let p = traj.p();
    let (mut gu, mut ga, mut phi_min, mut t_phi) = (f64::INFINITY, f64::INFINITY, f64::INFINITY, 0.0);
    for s in positive_times(traj) {
        gu = gu.min(min_adjacent_gap(s.u()));
        ga = ga.min(min_adjacent_gap(s.a()));
        let g: Vec<f64> = s
            .a()
            .iter()
            .map(|&a| f.inverse_gain_potential(a).expect("f' > 0 checked above"))
            .collect();
        for i in 0..p {
            for j in i + 1..p {
                let phi = (g[i] - g[j]) * (s.u()[i] - s.u()[j]);
                if phi < phi_min {
                    (phi_min, t_phi) = (phi, s.t);
                }
            }
        }
    }
    let mut r = VerifierReport::new(NAME, ORDER_MARGIN);
    r.check("min_u_gap", gu, gu > 0.0)
        .check("min_a_gap", ga, ga >= -ORDER_MARGIN)
        .check("min_potential", phi_min, phi_min >= -ORDER_MARGIN)
        .witness("t_min_potential", t_phi)
        .witness("max_sigma_end", traj.last().max_sigma);
    Ok(r)
}

/// Which coordinate of each row must carry the mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkMode {
    Token(usize),
    /// Each row's own largest coordinate.
    PerRowArgmax,
}

/// Every row softmax puts more than `1 − eps` on its sink coordinate at `t_end`.
pub fn verify_sink_formation(traj: &Trajectory, eps: f64, mode: SinkMode) -> Result<VerifierReport> {
    let Field::MultiRow { rows, p, beta_star } = &traj.field else {
        return Err(inapplicable("sink_formation", traj));
    };
    let (_, a) = split_multirow_state(&traj.last().state, *rows, *p, beta_star.len());
    let mut min_mass = f64::INFINITY;
    let mut worst_row = 0;
    for t in 0..*rows {
        let logits: Vec<f64> = a.row(t).iter().copied().collect();
        let s = softmax_slice(&logits);
        let k = match mode {
            SinkMode::Token(k) => k,
            SinkMode::PerRowArgmax => argmax(s.as_slice()),
        };
        if k >= *p {
            return Err(Error::InvalidInput(format!("sink token {k} out of range for p = {p}")));
        }
        if s[k] < min_mass {
            (min_mass, worst_row) = (s[k], t);
        }
    }
    let mut r = VerifierReport::new("sink_formation", eps);
    r.check("min_row_sink_mass", min_mass, min_mass > 1.0 - eps)
        .witness("worst_row", worst_row as f64);
    Ok(r)
}

fn column_norms(r: &DMatrix<f64>) -> Vec<f64> {
    r.column_iter().map(|c| c.norm()).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// With `m = argmax a(t_end)`, column `m` of `R` dominates the median of the
/// other column norms by more than 3 and is still growing over the last decade.
pub fn verify_massive_activation(traj: &Trajectory) -> Result<VerifierReport> {
    require(matches!(traj.field, Field::Tied { .. }), "massive_activation", traj)?;
    let p = traj.p();
    let end = traj.last();
    let m = argmax(end.a());
    let (r_end, _) = split_matrix_state(&end.state, p);
    let norms = column_norms(&r_end);
    let others: Vec<f64> = (0..p).filter(|&j| j != m).map(|j| norms[j]).collect();
    let ratio = norms[m] / median(others);
    let dec = &traj.samples[traj.nearest(traj.t_end() / 10.0)];
    let (r_dec, _) = split_matrix_state(&dec.state, p);
    let growth = norms[m] - r_dec.column(m).norm();
    let mut r = VerifierReport::new("massive_activation", 3.0);
    r.witness("column", m as f64)
        .check("norm_ratio", ratio, ratio > 3.0)
        .check("last_decade_growth", growth, growth > 0.0)
        .witness("max_sigma_end", end.max_sigma);
    Ok(r)
}

/// Entropy of `σ` falls below its initial value while the limit stays away
/// from one-hot (`max σ < 0.99`).
pub fn verify_kl(traj: &Trajectory) -> Result<VerifierReport> {
    require(matches!(traj.field, Field::Kl { .. }), "kl", traj)?;
    let (h0, h1) = (traj.first().entropy, traj.last().entropy);
    let mut r = VerifierReport::new("kl", 0.99);
    r.witness("entropy_start", h0)
        .check("entropy_drop", h0 - h1, h1 < h0)
        .check("max_sigma_end", traj.last().max_sigma, traj.last().max_sigma < 0.99);
    Ok(r)
}

pub const CONSERVATION_TOL: f64 = 1e-8;

/// `Σ_i a_i` (per logit row) is constant along shift-invariant fields.
pub fn verify_conservation(traj: &Trajectory) -> Result<VerifierReport> {
    require(traj.field.shift_invariant(), "conservation", traj)?;
    let drift = logit_sum_drift(traj);
    let mut r = VerifierReport::new("conservation", CONSERVATION_TOL);
    r.check("max_drift", drift, drift < CONSERVATION_TOL);
    Ok(r)
}

/// Largest change of any logit-row sum from its initial value.
pub fn logit_sum_drift(traj: &Trajectory) -> f64 {
    let s0 = &traj.first().obs.logit_sums;
    traj.samples
        .iter()
        .flat_map(|s| s.obs.logit_sums.iter().zip(s0).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

/// Slack on the recorded loss rate, scaled by `1 + ‖∇_β ℓ‖²`.
pub const DESCENT_TOL: f64 = 1e-6;

/// `dℓ/dt ≤ −‖∇_β ℓ‖²/p` where that bound holds, otherwise `dℓ/dt ≤ 0`, both
/// within `DESCENT_TOL·(1 + ‖∇_β ℓ‖²)`; the loss also never rises by more than
/// `LOSS_MONOTONE_TOL` between samples.
pub fn verify_descent(traj: &Trajectory) -> Result<VerifierReport> {
    let bound = traj.field.descent_bound_applies();
    let p = traj.p() as f64;
    let (mut worst, mut t_worst) = (f64::INFINITY, 0.0);
    for s in &traj.samples {
        let g2 = s.obs.grad_beta_sq;
        let limit = if bound { -g2 / p } else { 0.0 };
        let slack = limit + DESCENT_TOL * (1.0 + g2) - s.loss_rate;
        if !(slack >= worst) {
            (worst, t_worst) = (slack, s.t);
        }
    }
    let rise = traj
        .samples
        .windows(2)
        .map(|w| w[1].loss() - w[0].loss())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut r = VerifierReport::new("descent", DESCENT_TOL);
    r.witness("bound_applies", f64::from(u8::from(bound)))
        .check("min_rate_slack", worst, worst >= 0.0)
        .witness("t_min_rate_slack", t_worst)
        .check("max_loss_rise", rise, !(rise > LOSS_MONOTONE_TOL));
    Ok(r)
}

/// A verifier selectable by name, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verifier", rename_all = "kebab-case")]
pub enum Verifier {
    Order,
    Repulsion,
    Lyapunov,
    RatioBound,
    PolarizationGrowth,
    Onehot { eps: f64 },
    VanishingLoss { tol: f64 },
    ExponentialDecay,
    NonmaximalRates,
    RankOne,
    Nocrossing,
    Sink { eps: f64, mode: SinkMode },
    MassiveActivation,
    Kl,
    Conservation,
    Descent,
}

impl Verifier {
    pub const NAMES: [&'static str; 16] = [
        "order",
        "repulsion",
        "lyapunov",
        "ratio-bound",
        "polarization-growth",
        "onehot",
        "vanishing-loss",
        "exponential-decay",
        "nonmaximal-rates",
        "rank-one",
        "nocrossing",
        "sink",
        "massive-activation",
        "kl",
        "conservation",
        "descent",
    ];

    /// Parses a name from [`Verifier::NAMES`] with default parameters.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "order" => Self::Order,
            "repulsion" => Self::Repulsion,
            "lyapunov" => Self::Lyapunov,
            "ratio-bound" => Self::RatioBound,
            "polarization-growth" => Self::PolarizationGrowth,
            "onehot" => Self::Onehot { eps: 0.01 },
            "vanishing-loss" => Self::VanishingLoss { tol: 1e-2 },
            "exponential-decay" => Self::ExponentialDecay,
            "nonmaximal-rates" => Self::NonmaximalRates,
            "rank-one" => Self::RankOne,
            "nocrossing" => Self::Nocrossing,
            "sink" => Self::Sink {
                eps: 0.05,
                mode: SinkMode::Token(0),
            },
            "massive-activation" => Self::MassiveActivation,
            "kl" => Self::Kl,
            "conservation" => Self::Conservation,
            "descent" => Self::Descent,
            _ => {
                return Err(Error::Parse(format!(
                    "unknown verifier {s:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        let i = match self {
            Self::Order => 0,
            Self::Repulsion => 1,
            Self::Lyapunov => 2,
            Self::RatioBound => 3,
            Self::PolarizationGrowth => 4,
            Self::Onehot { .. } => 5,
            Self::VanishingLoss { .. } => 6,
            Self::ExponentialDecay => 7,
            Self::NonmaximalRates => 8,
            Self::RankOne => 9,
            Self::Nocrossing => 10,
            Self::Sink { .. } => 11,
            Self::MassiveActivation => 12,
            Self::Kl => 13,
            Self::Conservation => 14,
            Self::Descent => 15,
        };
        Self::NAMES[i]
    }

    pub fn run(&self, traj: &Trajectory) -> Result<VerifierReport> {
        match *self {
            Self::Order => verify_order_preservation(traj),
            Self::Repulsion => verify_repulsion(traj),
            Self::Lyapunov => verify_lyapunov(traj),
            Self::RatioBound => verify_ratio_bound(traj),
            Self::PolarizationGrowth => verify_polarization_growth(traj),
            Self::Onehot { eps } => verify_onehot_limit(traj, eps),
            Self::VanishingLoss { tol } => verify_vanishing_loss(traj, tol),
            Self::ExponentialDecay => verify_exponential_decay(traj),
            Self::NonmaximalRates => verify_nonmaximal_rates(traj),
            Self::RankOne => verify_rank_one(traj),
            Self::Nocrossing => verify_general_norm_nocrossing(traj),
            Self::Sink { eps, mode } => verify_sink_formation(traj, eps, mode),
            Self::MassiveActivation => verify_massive_activation(traj),
            Self::Kl => verify_kl(traj),
            Self::Conservation => verify_conservation(traj),
            Self::Descent => verify_descent(traj),
        }
    }
}
