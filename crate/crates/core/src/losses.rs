//! Gradient fields of every objective, in full `(V, a)` and reduced `(u, a)`
//! coordinates.
//!
//! The typed functions (`field_*`) are the reference implementations. [`Field`]
//! wraps them behind a flat `&[f64]` state so the integrator can drive any of
//! them; the flat layouts are documented on [`Layout`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::ConditionedDesign;
use crate::error::{Error, Result};
use crate::simplex::{
    jacobian_apply, normalize_general, sigmoid, softmax_slice, Logits, ScoreFn, SimplexVector,
    DEGENERATE_DENOMINATOR,
};

/// Entries of `β` must stay strictly above this for the KL loss.
pub const KL_DOMAIN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub v: DMatrix<f64>,
    pub a: DVector<f64>,
    pub beta_star: DVector<f64>,
}

impl FullState {
    pub fn new(v: DMatrix<f64>, a: DVector<f64>, beta_star: DVector<f64>) -> Result<Self> {
        let p = a.len();
        Logits::new(a.clone())?;
        if v.nrows() != beta_star.len() || v.ncols() != p {
            return Err(Error::InvalidInput(format!(
                "V is {}x{}, expected {}x{p}",
                v.nrows(),
                v.ncols(),
                beta_star.len()
            )));
        }
        check_finite(v.as_slice(), "V")?;
        check_finite(beta_star.as_slice(), "beta_star")?;
        Ok(Self { v, a, beta_star })
    }

    pub fn projection(&self) -> DVector<f64> {
        self.v.tr_mul(&self.beta_star)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedState {
    pub u: DVector<f64>,
    pub a: DVector<f64>,
    pub beta_star_norm_sq: f64,
}

impl ReducedState {
    pub fn new(u: DVector<f64>, a: DVector<f64>, beta_star_norm_sq: f64) -> Result<Self> {
        Logits::new(a.clone())?;
        if u.len() != a.len() {
            return Err(Error::InvalidInput("u and a lengths differ".into()));
        }
        check_finite(u.as_slice(), "u")?;
        if !(beta_star_norm_sq > 0.0 && beta_star_norm_sq.is_finite()) {
            return Err(Error::InvalidInput("target norm must be positive".into()));
        }
        Ok(Self {
            u,
            a,
            beta_star_norm_sq,
        })
    }

    pub fn from_full(s: &FullState) -> Self {
        Self {
            u: s.projection(),
            a: s.a.clone(),
            beta_star_norm_sq: s.beta_star.norm_squared(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiedState {
    pub r: DMatrix<f64>,
    pub a: DVector<f64>,
    pub beta_star: DVector<f64>,
}

impl TiedState {
    pub fn new(r: DMatrix<f64>, a: DVector<f64>, beta_star: DVector<f64>) -> Result<Self> {
        let p = a.len();
        Logits::new(a.clone())?;
        if r.nrows() != p || r.ncols() != p || beta_star.len() != p {
            return Err(Error::InvalidInput("tied state needs square R matching a".into()));
        }
        check_finite(r.as_slice(), "R")?;
        check_finite(beta_star.as_slice(), "beta_star")?;
        Ok(Self { r, a, beta_star })
    }
}

/// Values stored as rows: `V` is `p × d`, logits `A` are `T × p`, and
/// position `t` predicts `β_t = σ(A_t)ᵀ V`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRowState {
    pub v: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub beta_star: DVector<f64>,
}

impl MultiRowState {
    pub fn new(v: DMatrix<f64>, a: DMatrix<f64>, beta_star: DVector<f64>) -> Result<Self> {
        if a.ncols() < 2 || a.nrows() < 1 {
            return Err(Error::InvalidInput("A needs T >= 1 rows and p >= 2 columns".into()));
        }
        if v.nrows() != a.ncols() || v.ncols() != beta_star.len() {
            return Err(Error::InvalidInput(format!(
                "V is {}x{}, expected {}x{}",
                v.nrows(),
                v.ncols(),
                a.ncols(),
                beta_star.len()
            )));
        }
        check_finite(v.as_slice(), "V")?;
        check_finite(a.as_slice(), "A")?;
        check_finite(beta_star.as_slice(), "beta_star")?;
        Ok(Self { v, a, beta_star })
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn row_softmax(&self, t: usize) -> DVector<f64> {
        let row: Vec<f64> = self.a.row(t).iter().copied().collect();
        softmax_slice(&row)
    }
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

/// Time derivative of a full (or tied) state.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub dv: DMatrix<f64>,
    pub da: DVector<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedField {
    pub du: DVector<f64>,
    pub da: DVector<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRowField {
    pub dv: DMatrix<f64>,
    pub da: DMatrix<f64>,
    pub gamma: f64,
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1/(1 + eᵐ)` for margin `m = ⟨β*, β⟩`.
pub fn gamma_from_margin(m: f64) -> f64 {
    sigmoid(-m)
}

/// `ln γ`, finite even where `γ` itself underflows.
pub fn log_gamma_from_margin(m: f64) -> f64 {
    -softplus(m)
}

pub fn gamma_logistic(beta: &DVector<f64>, beta_star: &DVector<f64>) -> f64 {
    gamma_from_margin(beta_star.dot(beta))
}

/// `ln(1 + e^{−m})`.
pub fn logistic_loss_from_margin(m: f64) -> f64 {
    softplus(-m)
}

pub fn loss_logistic_full(s: &FullState) -> f64 {
    let sigma = softmax_slice(s.a.as_slice());
    logistic_loss_from_margin(s.projection().dot(&sigma))
}

pub fn field_logistic_full(s: &FullState) -> MatrixField {
    let sigma = softmax_slice(s.a.as_slice());
    let u = s.projection();
    let gamma = gamma_from_margin(u.dot(&sigma));
    MatrixField {
        dv: &s.beta_star * sigma.transpose() * gamma,
        da: jacobian_apply(&sigma, &u) * gamma,
        gamma,
    }
}

/// Shared reduced form `du = γ B σ`, `da = γ J(σ) u`.
pub fn reduced_field_with_gamma(s: &ReducedState, gamma: f64) -> ReducedField {
    let sigma = softmax_slice(s.a.as_slice());
    ReducedField {
        du: &sigma * (gamma * s.beta_star_norm_sq),
        da: jacobian_apply(&sigma, &s.u) * gamma,
        gamma,
    }
}

pub fn reduced_margin(s: &ReducedState) -> f64 {
    s.u.dot(&softmax_slice(s.a.as_slice()))
}

pub fn loss_logistic_reduced(s: &ReducedState) -> f64 {
    logistic_loss_from_margin(reduced_margin(s))
}

pub fn field_logistic_reduced(s: &ReducedState) -> ReducedField {
    reduced_field_with_gamma(s, gamma_from_margin(reduced_margin(s)))
}

pub fn loss_regression_full(s: &FullState) -> f64 {
    let sigma = softmax_slice(s.a.as_slice());
    0.5 * (&s.beta_star - &s.v * sigma).norm_squared()
}

pub fn field_regression_full(s: &FullState) -> MatrixField {
    let sigma = softmax_slice(s.a.as_slice());
    let r = &s.beta_star - &s.v * &sigma;
    let gamma = s.beta_star.dot(&r) / s.beta_star.norm_squared();
    let vr = s.v.tr_mul(&r);
    MatrixField {
        dv: &r * sigma.transpose(),
        da: jacobian_apply(&sigma, &vr),
        gamma,
    }
}

/// `1 − ⟨u, σ⟩/‖β*‖²`.
pub fn gamma_regression(s: &ReducedState) -> f64 {
    1.0 - reduced_margin(s) / s.beta_star_norm_sq
}

/// Rank-one value matrices `V = β* uᵀ/‖β*‖²` have residual `γ β*`.
pub fn loss_regression_reduced(s: &ReducedState) -> f64 {
    let g = gamma_regression(s);
    0.5 * s.beta_star_norm_sq * g * g
}

pub fn field_regression_reduced(s: &ReducedState) -> ReducedField {
    reduced_field_with_gamma(s, gamma_regression(s))
}

pub fn loss_regression_conditioned(s: &FullState, design: &ConditionedDesign) -> f64 {
    let sigma = softmax_slice(s.a.as_slice());
    0.5 * (&s.beta_star - &design.x * (&s.v * sigma)).norm_squared()
}

pub fn field_regression_conditioned(s: &FullState, design: &ConditionedDesign) -> MatrixField {
    let sigma = softmax_slice(s.a.as_slice());
    let r = &s.beta_star - &design.x * (&s.v * &sigma);
    let gamma = s.beta_star.dot(&r) / s.beta_star.norm_squared();
    let xr = design.x.tr_mul(&r);
    let vxr = s.v.tr_mul(&xr);
    MatrixField {
        dv: &xr * sigma.transpose(),
        da: jacobian_apply(&sigma, &vxr),
        gamma,
    }
}

fn kl_prediction(s: &FullState) -> Result<(DVector<f64>, DVector<f64>)> {
    let sigma = softmax_slice(s.a.as_slice());
    let beta = &s.v * &sigma;
    if let Some(index) = beta.iter().position(|&b| !(b > KL_DOMAIN_FLOOR)) {
        return Err(Error::DomainViolation {
            index,
            value: beta[index],
        });
    }
    Ok((sigma, beta))
}

pub fn loss_kl(s: &FullState, p_star: &SimplexVector) -> Result<f64> {
    let (_, beta) = kl_prediction(s)?;
    Ok(-p_star
        .as_vector()
        .iter()
        .zip(beta.iter())
        .map(|(p, b)| p * b.ln())
        .sum::<f64>())
}

/// Negative gradient of `−⟨p*, ln(Vσ)⟩`; `γ` is not defined and reported as 0.
pub fn field_kl(s: &FullState, p_star: &SimplexVector) -> Result<MatrixField> {
    let (sigma, beta) = kl_prediction(s)?;
    let r = p_star.as_vector().component_div(&beta);
    let vr = s.v.tr_mul(&r);
    Ok(MatrixField {
        dv: &r * sigma.transpose(),
        da: jacobian_apply(&sigma, &vr),
        gamma: 0.0,
    })
}

fn general_norm_parts(s: &ReducedState, f: ScoreFn) -> Result<(DVector<f64>, f64)> {
    let sigma_f = normalize_general(&Logits::new(s.a.clone())?, f)?.into_vector();
    let m = s.u.dot(&sigma_f);
    Ok((sigma_f, m))
}

pub fn loss_general_norm_logistic(s: &ReducedState, f: ScoreFn) -> Result<f64> {
    Ok(logistic_loss_from_margin(general_norm_parts(s, f)?.1))
}

/// `du = γ B σ_f`, `da = γ (f′(a)/Σf(a)) ⊙ (u − ⟨u, σ_f⟩ 1)`.
pub fn field_general_norm_logistic(s: &ReducedState, f: ScoreFn) -> Result<ReducedField> {
    if !f.is_normalization() {
        return Err(Error::InvalidInput(format!(
            "{} is an elementwise map, not a normalization",
            f.name()
        )));
    }
    let (sigma_f, m) = general_norm_parts(s, f)?;
    let gamma = gamma_from_margin(m);
    let denom: f64 = s.a.iter().map(|&x| f.value(x)).sum();
    if denom.abs() < DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateNormalization { denominator: denom });
    }
    let da = DVector::from_fn(s.a.len(), |k, _| {
        gamma * f.derivative(s.a[k]) / denom * (s.u[k] - m)
    });
    Ok(ReducedField {
        du: sigma_f * (gamma * s.beta_star_norm_sq),
        da,
        gamma,
    })
}

fn check_elementwise(g: ScoreFn) -> Result<()> {
    if g.is_normalization() {
        return Err(Error::InvalidInput(format!(
            "{} is a normalization, not an elementwise control",
            g.name()
        )));
    }
    Ok(())
}

pub fn loss_elementwise(s: &FullState, g: ScoreFn) -> Result<f64> {
    check_elementwise(g)?;
    let ga = s.a.map(|x| g.value(x));
    Ok(logistic_loss_from_margin(s.projection().dot(&ga)))
}

/// Logistic loss with `β = V g(a)`, `g` applied entrywise and not normalized.
pub fn field_elementwise(s: &FullState, g: ScoreFn) -> Result<MatrixField> {
    check_elementwise(g)?;
    let ga = s.a.map(|x| g.value(x));
    let u = s.projection();
    let gamma = gamma_from_margin(u.dot(&ga));
    let da = DVector::from_fn(s.a.len(), |k, _| gamma * g.derivative(s.a[k]) * u[k]);
    Ok(MatrixField {
        dv: &s.beta_star * ga.transpose() * gamma,
        da,
        gamma,
    })
}

pub fn loss_tied(s: &TiedState) -> f64 {
    let sv = softmax_slice((&s.r * &s.a).as_slice());
    logistic_loss_from_margin(s.beta_star.dot(&(&s.r * sv)))
}

/// Negative gradient of `ℓ(R σ(R a))` through both occurrences of `R`:
/// `−∇_R = r sᵀ + (J Rᵀ r) aᵀ` and `−∇_a = Rᵀ J Rᵀ r` with `r = γ β*`.
pub fn field_tied(s: &TiedState) -> MatrixField {
    let sv = softmax_slice((&s.r * &s.a).as_slice());
    let gamma = gamma_from_margin(s.beta_star.dot(&(&s.r * &sv)));
    let r = &s.beta_star * gamma;
    let jrr = jacobian_apply(&sv, &s.r.tr_mul(&r));
    MatrixField {
        dv: &r * sv.transpose() + &jrr * s.a.transpose(),
        da: s.r.tr_mul(&jrr),
        gamma,
    }
}

/// Per-row margins `⟨β*, β_t⟩ = ⟨σ_t, V β*⟩`.
fn multirow_margins(s: &MultiRowState) -> (Vec<DVector<f64>>, DVector<f64>, Vec<f64>) {
    let w = &s.v * &s.beta_star;
    let sigmas: Vec<_> = (0..s.rows()).map(|t| s.row_softmax(t)).collect();
    let margins = sigmas.iter().map(|sg| sg.dot(&w)).collect();
    (sigmas, w, margins)
}

pub fn loss_multirow_logistic(s: &MultiRowState) -> f64 {
    let (_, _, margins) = multirow_margins(s);
    margins.iter().map(|&m| logistic_loss_from_margin(m)).sum::<f64>() / s.rows() as f64
}

/// Reported `γ` is the mean of the per-row factors.
pub fn field_multirow_logistic(s: &MultiRowState) -> MultiRowField {
    let (sigmas, w, margins) = multirow_margins(s);
    let rows = s.rows();
    let inv_t = 1.0 / rows as f64;
    let p = s.a.ncols();
    let mut weighted = DVector::zeros(p);
    let mut da = DMatrix::zeros(rows, p);
    let mut gamma_sum = 0.0;
    for (t, (sigma, &m)) in sigmas.iter().zip(&margins).enumerate() {
        let gamma = gamma_from_margin(m);
        gamma_sum += gamma;
        weighted.axpy(gamma * inv_t, sigma, 1.0);
        let row = jacobian_apply(sigma, &w) * (gamma * inv_t);
        da.row_mut(t).copy_from(&row.transpose());
    }
    MultiRowField {
        dv: weighted * s.beta_star.transpose(),
        da,
        gamma: gamma_sum * inv_t,
    }
}

/// Flat-state arrangement used by [`Field`]. Matrices are column-major.
///
/// * `Matrix`: `V` (or `R`) as `p × p`, then `a`.
/// * `Reduced`: `u`, then `a`.
/// * `MultiRow`: `V` as `p × d`, then `A` as `T × p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Matrix { p: usize },
    Reduced { p: usize },
    MultiRow { rows: usize, p: usize, d: usize },
}

impl Layout {
    pub fn dim(self) -> usize {
        match self {
            Layout::Matrix { p } => p * p + p,
            Layout::Reduced { p } => 2 * p,
            Layout::MultiRow { rows, p, d } => p * d + rows * p,
        }
    }

    pub fn p(self) -> usize {
        match self {
            Layout::Matrix { p } | Layout::Reduced { p } | Layout::MultiRow { p, .. } => p,
        }
    }
}

/// A gradient field over a flat state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Field {
    LogisticFull { beta_star: Vec<f64> },
    LogisticReduced { p: usize, beta_star_norm_sq: f64 },
    RegressionFull { beta_star: Vec<f64> },
    RegressionReduced { p: usize, beta_star_norm_sq: f64 },
    RegressionConditioned { beta_star: Vec<f64>, design: ConditionedDesign },
    Kl { p_star: Vec<f64> },
    GeneralNorm { p: usize, beta_star_norm_sq: f64, f: ScoreFn },
    Elementwise { beta_star: Vec<f64>, g: ScoreFn },
    Tied { beta_star: Vec<f64> },
    MultiRow { rows: usize, p: usize, beta_star: Vec<f64> },
}

/// Everything the recorder needs from one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub loss: f64,
    pub gamma: f64,
    /// Attention weights; the row mean for multi-row states and `g(a)/Σg(a)`
    /// for elementwise controls.
    pub sigma: Vec<f64>,
    pub u: Vec<f64>,
    /// Logits; the row mean for multi-row states.
    pub a: Vec<f64>,
    /// `Σᵢ aᵢ`, one entry per logit row.
    pub logit_sums: Vec<f64>,
    /// `‖∇_β ℓ‖²`.
    pub grad_beta_sq: f64,
}

impl Field {
    pub fn name(&self) -> &'static str {
        match self {
            Field::LogisticFull { .. } => "logistic-full",
            Field::LogisticReduced { .. } => "logistic-reduced",
            Field::RegressionFull { .. } => "regression-full",
            Field::RegressionReduced { .. } => "regression-reduced",
            Field::RegressionConditioned { .. } => "regression-conditioned",
            Field::Kl { .. } => "kl",
            Field::GeneralNorm { .. } => "general-norm",
            Field::Elementwise { .. } => "elementwise",
            Field::Tied { .. } => "tied",
            Field::MultiRow { .. } => "multirow",
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            Field::LogisticFull { beta_star }
            | Field::RegressionFull { beta_star }
            | Field::RegressionConditioned { beta_star, .. }
            | Field::Elementwise { beta_star, .. }
            | Field::Tied { beta_star } => Layout::Matrix { p: beta_star.len() },
            Field::Kl { p_star } => Layout::Matrix { p: p_star.len() },
            Field::LogisticReduced { p, .. }
            | Field::RegressionReduced { p, .. }
            | Field::GeneralNorm { p, .. } => Layout::Reduced { p: *p },
            Field::MultiRow { rows, p, beta_star } => Layout::MultiRow {
                rows: *rows,
                p: *p,
                d: beta_star.len(),
            },
        }
    }

    pub fn p(&self) -> usize {
        self.layout().p()
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// `‖β*‖²` (for KL, `‖p*‖²`).
    pub fn beta_star_norm_sq(&self) -> f64 {
        match self {
            Field::LogisticReduced {
                beta_star_norm_sq, ..
            }
            | Field::RegressionReduced {
                beta_star_norm_sq, ..
            }
            | Field::GeneralNorm {
                beta_star_norm_sq, ..
            } => *beta_star_norm_sq,
            Field::LogisticFull { beta_star }
            | Field::RegressionFull { beta_star }
            | Field::RegressionConditioned { beta_star, .. }
            | Field::Elementwise { beta_star, .. }
            | Field::Tied { beta_star }
            | Field::MultiRow { beta_star, .. } => beta_star.iter().map(|b| b * b).sum(),
            Field::Kl { p_star } => p_star.iter().map(|b| b * b).sum(),
        }
    }

    /// The target vector, when the field carries one explicitly.
    pub fn beta_star(&self) -> Option<&[f64]> {
        match self {
            Field::LogisticFull { beta_star }
            | Field::RegressionFull { beta_star }
            | Field::RegressionConditioned { beta_star, .. }
            | Field::Elementwise { beta_star, .. }
            | Field::Tied { beta_star }
            | Field::MultiRow { beta_star, .. } => Some(beta_star),
            Field::Kl { p_star } => Some(p_star),
            _ => None,
        }
    }

    /// Loss unchanged by `a ↦ a + c·1` (per row), so `Σa` is conserved.
    pub fn shift_invariant(&self) -> bool {
        match self {
            Field::GeneralNorm { f, .. } => *f == ScoreFn::Exp,
            Field::Elementwise { .. } | Field::Tied { .. } => false,
            _ => true,
        }
    }

    /// `β` is `V` times weights summing to one with `V` trainable, which gives
    /// `dℓ/dt ≤ −‖∇_β ℓ‖²/p`.
    pub fn descent_bound_applies(&self) -> bool {
        !matches!(self, Field::Elementwise { .. } | Field::Tied { .. })
    }

    pub fn has_gamma(&self) -> bool {
        !matches!(self, Field::Kl { .. })
    }

    pub fn is_logistic(&self) -> bool {
        matches!(
            self,
            Field::LogisticFull { .. }
                | Field::LogisticReduced { .. }
                | Field::GeneralNorm { .. }
                | Field::Elementwise { .. }
                | Field::Tied { .. }
                | Field::MultiRow { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p < 2 {
            return Err(Error::InvalidInput(format!("p must be >= 2, got {p}")));
        }
        match self {
            Field::GeneralNorm { f, .. } if !f.is_normalization() => Err(Error::InvalidInput(
                format!("{} is not a normalization", f.name()),
            )),
            Field::Elementwise { g, .. } => check_elementwise(*g),
            Field::RegressionConditioned { design, .. } if design.p() != p => {
                Err(Error::InvalidInput("design and target dimensions differ".into()))
            }
            Field::Kl { p_star } => SimplexVector::new(DVector::from_column_slice(p_star)).map(|_| ()),
            Field::MultiRow { rows, beta_star, .. } if *rows == 0 || beta_star.is_empty() => {
                Err(Error::InvalidInput("multirow needs T >= 1 and d >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "state has length {}, field {} expects {}",
                x.len(),
                self.name(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn full(&self, x: &[f64], beta_star: &[f64]) -> FullState {
        let p = beta_star.len();
        FullState {
            v: DMatrix::from_column_slice(p, p, &x[..p * p]),
            a: DVector::from_column_slice(&x[p * p..]),
            beta_star: DVector::from_column_slice(beta_star),
        }
    }

    fn reduced(&self, x: &[f64], p: usize, b: f64) -> ReducedState {
        ReducedState {
            u: DVector::from_column_slice(&x[..p]),
            a: DVector::from_column_slice(&x[p..]),
            beta_star_norm_sq: b,
        }
    }

    fn tied(&self, x: &[f64], beta_star: &[f64]) -> TiedState {
        let f = self.full(x, beta_star);
        TiedState {
            r: f.v,
            a: f.a,
            beta_star: f.beta_star,
        }
    }

    fn multirow(&self, x: &[f64], rows: usize, p: usize, beta_star: &[f64]) -> MultiRowState {
        let d = beta_star.len();
        MultiRowState {
            v: DMatrix::from_column_slice(p, d, &x[..p * d]),
            a: DMatrix::from_column_slice(rows, p, &x[p * d..]),
            beta_star: DVector::from_column_slice(beta_star),
        }
    }

    fn p_star(p_star: &[f64]) -> SimplexVector {
        SimplexVector::new(DVector::from_column_slice(p_star))
            .expect("validated target distribution")
    }

    /// Writes `ẋ` into `dx` and returns `γ`.
    pub fn eval(&self, x: &[f64], dx: &mut [f64]) -> Result<f64> {
        self.check_len(x)?;
        if dx.len() != x.len() {
            return Err(Error::InvalidInput("derivative buffer has the wrong length".into()));
        }
        let (head, tail, gamma) = match self {
            Field::LogisticReduced {
                p,
                beta_star_norm_sq,
            } => {
                let r = field_logistic_reduced(&self.reduced(x, *p, *beta_star_norm_sq));
                (r.du, r.da, r.gamma)
            }
            Field::RegressionReduced {
                p,
                beta_star_norm_sq,
            } => {
                let r = field_regression_reduced(&self.reduced(x, *p, *beta_star_norm_sq));
                (r.du, r.da, r.gamma)
            }
            Field::GeneralNorm {
                p,
                beta_star_norm_sq,
                f,
            } => {
                let r = field_general_norm_logistic(&self.reduced(x, *p, *beta_star_norm_sq), *f)?;
                (r.du, r.da, r.gamma)
            }
            Field::MultiRow { rows, p, beta_star } => {
                let r = field_multirow_logistic(&self.multirow(x, *rows, *p, beta_star));
                write_parts(dx, r.dv.as_slice(), r.da.as_slice());
                return Ok(r.gamma);
            }
            _ => {
                let m = self.matrix_field(x)?;
                write_parts(dx, m.dv.as_slice(), m.da.as_slice());
                return Ok(m.gamma);
            }
        };
        write_parts(dx, head.as_slice(), tail.as_slice());
        Ok(gamma)
    }

    fn matrix_field(&self, x: &[f64]) -> Result<MatrixField> {
        Ok(match self {
            Field::LogisticFull { beta_star } => field_logistic_full(&self.full(x, beta_star)),
            Field::RegressionFull { beta_star } => field_regression_full(&self.full(x, beta_star)),
            Field::RegressionConditioned { beta_star, design } => {
                field_regression_conditioned(&self.full(x, beta_star), design)
            }
            Field::Kl { p_star } => field_kl(&self.full(x, p_star), &Self::p_star(p_star))?,
            Field::Elementwise { beta_star, g } => field_elementwise(&self.full(x, beta_star), *g)?,
            Field::Tied { beta_star } => field_tied(&self.tied(x, beta_star)),
            _ => unreachable!("not a matrix-layout field"),
        })
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        Ok(match self {
            Field::LogisticFull { beta_star } => loss_logistic_full(&self.full(x, beta_star)),
            Field::LogisticReduced {
                p,
                beta_star_norm_sq,
            } => loss_logistic_reduced(&self.reduced(x, *p, *beta_star_norm_sq)),
            Field::RegressionFull { beta_star } => loss_regression_full(&self.full(x, beta_star)),
            Field::RegressionReduced {
                p,
                beta_star_norm_sq,
            } => loss_regression_reduced(&self.reduced(x, *p, *beta_star_norm_sq)),
            Field::RegressionConditioned { beta_star, design } => {
                loss_regression_conditioned(&self.full(x, beta_star), design)
            }
            Field::Kl { p_star } => loss_kl(&self.full(x, p_star), &Self::p_star(p_star))?,
            Field::GeneralNorm {
                p,
                beta_star_norm_sq,
                f,
            } => loss_general_norm_logistic(&self.reduced(x, *p, *beta_star_norm_sq), *f)?,
            Field::Elementwise { beta_star, g } => loss_elementwise(&self.full(x, beta_star), *g)?,
            Field::Tied { beta_star } => loss_tied(&self.tied(x, beta_star)),
            Field::MultiRow { rows, p, beta_star } => {
                loss_multirow_logistic(&self.multirow(x, *rows, *p, beta_star))
            }
        })
    }

    pub fn observe(&self, x: &[f64]) -> Result<Observation> {
        self.check_len(x)?;
        let loss = self.loss(x)?;
        let b = self.beta_star_norm_sq();
        let obs = match self {
            Field::LogisticFull { beta_star } => {
                let s = self.full(x, beta_star);
                let sigma = softmax_slice(s.a.as_slice());
                let u = s.projection();
                let gamma = gamma_from_margin(u.dot(&sigma));
                vector_obs(loss, gamma, sigma, u, s.a, gamma * gamma * b)
            }
            Field::LogisticReduced {
                p,
                beta_star_norm_sq,
            } => {
                let s = self.reduced(x, *p, *beta_star_norm_sq);
                let sigma = softmax_slice(s.a.as_slice());
                let gamma = gamma_from_margin(s.u.dot(&sigma));
                vector_obs(loss, gamma, sigma, s.u, s.a, gamma * gamma * b)
            }
            Field::RegressionFull { beta_star } => {
                let s = self.full(x, beta_star);
                let sigma = softmax_slice(s.a.as_slice());
                let r = &s.beta_star - &s.v * &sigma;
                let gamma = s.beta_star.dot(&r) / b;
                let u = s.projection();
                vector_obs(loss, gamma, sigma, u, s.a, r.norm_squared())
            }
            Field::RegressionReduced {
                p,
                beta_star_norm_sq,
            } => {
                let s = self.reduced(x, *p, *beta_star_norm_sq);
                let gamma = gamma_regression(&s);
                let sigma = softmax_slice(s.a.as_slice());
                vector_obs(loss, gamma, sigma, s.u, s.a, b * gamma * gamma)
            }
            Field::RegressionConditioned { beta_star, design } => {
                let s = self.full(x, beta_star);
                let sigma = softmax_slice(s.a.as_slice());
                let xv = &design.x * &s.v;
                let r = &s.beta_star - &xv * &sigma;
                let gamma = s.beta_star.dot(&r) / b;
                let u = xv.tr_mul(&s.beta_star);
                let grad = design.x.tr_mul(&r).norm_squared();
                vector_obs(loss, gamma, sigma, u, s.a, grad)
            }
            Field::Kl { p_star } => {
                let s = self.full(x, p_star);
                let (sigma, beta) = kl_prediction(&s)?;
                let grad = DVector::from_column_slice(p_star)
                    .component_div(&beta)
                    .norm_squared();
                let u = s.projection();
                vector_obs(loss, 0.0, sigma, u, s.a, grad)
            }
            Field::GeneralNorm {
                p,
                beta_star_norm_sq,
                f,
            } => {
                let s = self.reduced(x, *p, *beta_star_norm_sq);
                let (sigma_f, m) = general_norm_parts(&s, *f)?;
                let gamma = gamma_from_margin(m);
                vector_obs(loss, gamma, sigma_f, s.u, s.a, gamma * gamma * b)
            }
            Field::Elementwise { beta_star, g } => {
                let s = self.full(x, beta_star);
                let ga = s.a.map(|v| g.value(v));
                let u = s.projection();
                let gamma = gamma_from_margin(u.dot(&ga));
                let total: f64 = ga.iter().sum();
                let weights = if total.abs() > DEGENERATE_DENOMINATOR {
                    ga / total
                } else {
                    DVector::zeros(s.a.len())
                };
                vector_obs(loss, gamma, weights, u, s.a, gamma * gamma * b)
            }
            Field::Tied { beta_star } => {
                let s = self.tied(x, beta_star);
                let sv = softmax_slice((&s.r * &s.a).as_slice());
                let gamma = gamma_from_margin(s.beta_star.dot(&(&s.r * &sv)));
                let u = s.r.tr_mul(&s.beta_star);
                vector_obs(loss, gamma, sv, u, s.a, gamma * gamma * b)
            }
            Field::MultiRow { rows, p, beta_star } => {
                let s = self.multirow(x, *rows, *p, beta_star);
                let (sigmas, w, margins) = multirow_margins(&s);
                let t = *rows as f64;
                let mut mean_sigma = DVector::zeros(*p);
                for sg in &sigmas {
                    mean_sigma += sg;
                }
                mean_sigma /= t;
                let gammas: Vec<f64> = margins.iter().map(|&m| gamma_from_margin(m)).collect();
                let gamma = gammas.iter().sum::<f64>() / t;
                let grad = gammas.iter().map(|g| g * g).sum::<f64>() * b / (t * t);
                let mean_a: Vec<f64> = (0..*p).map(|j| s.a.column(j).mean()).collect();
                let logit_sums = (0..*rows).map(|r| s.a.row(r).sum()).collect();
                Observation {
                    loss,
                    gamma,
                    sigma: mean_sigma.as_slice().to_vec(),
                    u: w.as_slice().to_vec(),
                    a: mean_a,
                    logit_sums,
                    grad_beta_sq: grad,
                }
            }
        };
        Ok(obs)
    }
}

fn write_parts(dx: &mut [f64], head: &[f64], tail: &[f64]) {
    let n = head.len();
    dx[..n].copy_from_slice(head);
    dx[n..].copy_from_slice(tail);
}

fn vector_obs(
    loss: f64,
    gamma: f64,
    sigma: DVector<f64>,
    u: DVector<f64>,
    a: DVector<f64>,
    grad_beta_sq: f64,
) -> Observation {
    Observation {
        loss,
        gamma,
        sigma: sigma.as_slice().to_vec(),
        u: u.as_slice().to_vec(),
        logit_sums: vec![a.sum()],
        a: a.as_slice().to_vec(),
        grad_beta_sq,
    }
}

/// Splits a matrix-layout state into `(V, a)`.
pub fn split_matrix_state(x: &[f64], p: usize) -> (DMatrix<f64>, DVector<f64>) {
    (
        DMatrix::from_column_slice(p, p, &x[..p * p]),
        DVector::from_column_slice(&x[p * p..p * p + p]),
    )
}

/// Splits a multi-row state into `(V, A)`.
pub fn split_multirow_state(x: &[f64], rows: usize, p: usize, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_column_slice(p, d, &x[..p * d]),
        DMatrix::from_column_slice(rows, p, &x[p * d..p * d + rows * p]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_from_margin(0.0), 0.5);
        assert!((gamma_from_margin(3f64.ln()) - 0.25).abs() < 1e-15);
        let g = gamma_from_margin(1e4);
        assert!((0.0..1e-300).contains(&g));
        assert!((log_gamma_from_margin(1e4) + 1e4).abs() < 1e-9);
        assert!(gamma_from_margin(-1e4) <= 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn zero_values_give_zero_logit_velocity() {
        let s = FullState::new(DMatrix::zeros(3, 3), vec(&[0.3, -1.0, 2.0]), vec(&[1.0, 2.0, 0.5]))
            .unwrap();
        let f = field_logistic_full(&s);
        assert_eq!(f.da.norm(), 0.0);
        let r = field_regression_full(&s);
        assert_eq!(r.da.norm(), 0.0);
    }

    #[test]
    fn logistic_full_value_update_is_rank_one_along_target() {
        let b = vec(&[0.6, -0.8]);
        let s = FullState::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]), vec(&[0.0, 0.0]), b.clone())
            .unwrap();
        let f = field_logistic_full(&s);
        let sv = f.dv.clone().singular_values();
        assert!(sv.min() < 1e-14);
        let perp = &f.dv - &b * (b.transpose() * &f.dv) / b.norm_squared();
        assert!(perp.norm() < 1e-14);
    }

    #[test]
    fn reduced_uniform_logits_give_equal_increments() {
        let s = ReducedState::new(vec(&[1.0, -0.5, 0.2, 0.0]), DVector::zeros(4), 0.25).unwrap();
        let f = field_logistic_reduced(&s);
        assert!(f.du.iter().all(|&d| (d - f.du[0]).abs() < 1e-16));
        assert!(f.da.sum().abs() < 1e-15);
    }

    #[test]
    fn regression_stationary_at_zero_residual() {
        let beta_star = vec(&[0.5, -0.25, 1.0]);
        let a = vec(&[0.1, 0.4, -0.3]);
        let sigma = softmax_slice(a.as_slice());
        let v = &beta_star * sigma.transpose() / sigma.norm_squared();
        let s = FullState::new(v, a, beta_star).unwrap();
        let f = field_regression_full(&s);
        assert!(f.dv.norm() < 1e-14 && f.da.norm() < 1e-14);
    }

    #[test]
    fn regression_reduced_gamma_cases() {
        let s = ReducedState::new(DVector::zeros(3), vec(&[0.0, 1.0, 2.0]), 0.5).unwrap();
        assert_eq!(gamma_regression(&s), 1.0);
        let a = vec(&[0.0, 1.0, 2.0]);
        let sigma = softmax_slice(a.as_slice());
        let u = &sigma * (0.5 / sigma.norm_squared());
        let s = ReducedState::new(u, a, 0.5).unwrap();
        let f = field_regression_reduced(&s);
        assert!(f.du.norm() < 1e-15 && f.da.norm() < 1e-15);
    }

    #[test]
    fn reduced_fields_differ_only_in_gamma() {
        let s = ReducedState::new(vec(&[0.4, 0.1, -0.3]), vec(&[0.2, -0.1, 0.5]), 0.7).unwrap();
        let l = field_logistic_reduced(&s);
        let r = field_regression_reduced(&s);
        let l2 = reduced_field_with_gamma(&s, r.gamma);
        assert_eq!(l2, r);
        assert_eq!(reduced_field_with_gamma(&s, l.gamma), l);
    }

    #[test]
    fn kl_domain_guard() {
        let p_star = SimplexVector::new(vec(&[0.5, 0.5])).unwrap();
        let s = FullState::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]), vec(&[0.0, 0.0]), vec(&[0.5, 0.5]))
            .unwrap();
        assert!(matches!(
            field_kl(&s, &p_star),
            Err(Error::DomainViolation { index: 1, .. })
        ));
    }

    #[test]
    fn kl_at_target_matches_linear_loss_gradient() {
        let p_star = SimplexVector::new(vec(&[0.2, 0.3, 0.5])).unwrap();
        let a = vec(&[0.3, -0.2, 0.1]);
        let sigma = softmax_slice(a.as_slice());
        // Every column equal to p*, so β = p*.
        let v = p_star.as_vector() * DVector::from_element(3, 1.0).transpose();
        let s = FullState::new(v, a, p_star.as_vector().clone()).unwrap();
        let f = field_kl(&s, &p_star).unwrap();
        let ones = DVector::from_element(3, 1.0);
        let expected = &ones * sigma.transpose();
        assert!((f.dv - expected).norm() < 1e-14);
    }

    #[test]
    fn general_norm_exp_matches_softmax_field() {
        let s = ReducedState::new(vec(&[0.9, 0.3, -0.4, 0.1]), vec(&[0.5, -0.2, 0.0, 1.1]), 0.25).unwrap();
        let g = field_general_norm_logistic(&s, ScoreFn::Exp).unwrap();
        let l = field_logistic_reduced(&s);
        assert!((g.du - l.du).norm() < 1e-12);
        assert!((g.da - l.da).norm() < 1e-12);
    }

    #[test]
    fn general_norm_constant_u_freezes_logits() {
        let s = ReducedState::new(DVector::from_element(3, 0.7), vec(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        let g = field_general_norm_logistic(&s, ScoreFn::Square).unwrap();
        assert!(g.da.norm() < 1e-15);
    }

    #[test]
    fn general_norm_rejects_elementwise_maps_and_degenerate_sums() {
        let s = ReducedState::new(vec(&[1.0, 0.0]), vec(&[1.0, -1.0]), 1.0).unwrap();
        assert!(field_general_norm_logistic(&s, ScoreFn::Relu).is_err());
        assert!(matches!(
            field_general_norm_logistic(&s, ScoreFn::Identity),
            Err(Error::DegenerateNormalization { .. })
        ));
    }

    #[test]
    fn elementwise_cases() {
        let s = FullState::new(DMatrix::identity(3, 3), DVector::zeros(3), vec(&[1.0, 0.0, 0.0])).unwrap();
        let f = field_elementwise(&s, ScoreFn::Sigmoid).unwrap();
        // dV = γ β* g(a)ᵀ with g(0) = ½.
        assert!((f.dv[(0, 1)] - 0.5 * f.gamma).abs() < 1e-16);
        let neg = FullState::new(DMatrix::identity(3, 3), vec(&[-1.0, -0.5, -2.0]), vec(&[1.0, 0.3, 0.0]))
            .unwrap();
        let f = field_elementwise(&neg, ScoreFn::Relu).unwrap();
        assert_eq!(f.da.norm(), 0.0);
    }

    #[test]
    fn tied_at_zero_matrix() {
        let s = TiedState::new(DMatrix::zeros(3, 3), vec(&[0.5, -0.5, 1.0]), vec(&[0.6, 0.8, 0.0])).unwrap();
        let f = field_tied(&s);
        assert_eq!(f.gamma, 0.5);
        assert_eq!(f.da.norm(), 0.0);
        let expected = &s.beta_star * DVector::from_element(3, 1.0 / 3.0).transpose() * 0.5;
        assert!((f.dv - expected).norm() < 1e-16);
    }

    #[test]
    fn multirow_single_row_is_transposed_full() {
        let v = DMatrix::from_row_slice(3, 3, &[0.3, -0.2, 0.5, 1.0, 0.1, -0.4, 0.2, 0.6, 0.0]);
        let a = vec(&[0.2, -0.7, 0.4]);
        let b = vec(&[0.5, 0.1, -0.3]);
        let full = field_logistic_full(&FullState::new(v.clone(), a.clone(), b.clone()).unwrap());
        let mr = field_multirow_logistic(
            &MultiRowState::new(v.transpose(), DMatrix::from_row_slice(1, 3, a.as_slice()), b).unwrap(),
        );
        assert!((mr.dv.transpose() - full.dv).norm() < 1e-15);
        assert!((mr.da.row(0).transpose() - full.da).norm() < 1e-15);
        assert_eq!(mr.gamma, full.gamma);
    }

    #[test]
    fn multirow_identical_rows_move_together() {
        let v = DMatrix::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.3);
        let a = DMatrix::from_fn(3, 4, |_, j| j as f64 * 0.2);
        let s = MultiRowState::new(v, a, vec(&[1.0, -0.5])).unwrap();
        let f = field_multirow_logistic(&s);
        for t in 1..3 {
            assert_eq!(f.da.row(t), f.da.row(0));
        }
        for t in 0..3 {
            assert!(f.da.row(t).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn flat_field_round_trip() {
        let field = Field::LogisticFull {
            beta_star: vec![0.3, -0.4],
        };
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.5];
        let mut dx = [0.0; 6];
        let gamma = field.eval(&x, &mut dx).unwrap();
        let (v, a) = split_matrix_state(&x, 2);
        let direct = field_logistic_full(&FullState::new(v, a, vec(&[0.3, -0.4])).unwrap());
        assert_eq!(gamma, direct.gamma);
        assert_eq!(&dx[..4], direct.dv.as_slice());
        assert_eq!(&dx[4..], direct.da.as_slice());
        assert!(field.eval(&x[..5], &mut dx).is_err());
    }

    #[test]
    fn field_serde_round_trip() {
        let field = Field::GeneralNorm {
            p: 4,
            beta_star_norm_sq: 0.25,
            f: ScoreFn::Square,
        };
        let json = serde_json::to_string(&field).unwrap();
        assert!(json.contains("\"kind\":\"general-norm\""));
        assert_eq!(serde_json::from_str::<Field>(&json).unwrap(), field);
    }
}
