//! Score vectors, the softmax map and its generalizations.
//!
//! Everything here is a pure function of its inputs. Vectors and matrices use
//! `nalgebra`'s dynamically sized types because every dimension in this crate
//! is a runtime parameter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum-to-one tolerance for simplex vectors.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Denominators smaller than this in magnitude make a normalization degenerate.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// Trainable score vector; at least two finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(DVector<f64>);

impl Logits {
    pub fn new(a: DVector<f64>) -> Result<Self> {
        if a.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logits need p >= 2 entries, got {}",
                a.len()
            )));
        }
        if let Some(i) = a.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("logit {i} is not finite")));
        }
        Ok(Self(a))
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(a))
    }

    pub fn zeros(p: usize) -> Result<Self> {
        Self::new(DVector::zeros(p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// A point on the probability simplex.
///
/// Outputs of sign-indefinite normalizations (`f(x) = x`) still sum to one but
/// may leave `[0, 1]`; they are kept and tagged with `signed = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector {
    s: DVector<f64>,
    signed: bool,
}

impl SimplexVector {
    pub fn new(s: DVector<f64>) -> Result<Self> {
        if s.len() < 2 {
            return Err(Error::InvalidInput("simplex vector needs p >= 2".into()));
        }
        if let Some(i) = s.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidInput(format!(
                "simplex entry {i} = {} outside [0, 1]",
                s[i]
            )));
        }
        let total: f64 = s.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "simplex entries sum to {total}, not 1"
            )));
        }
        Ok(Self { s, signed: false })
    }

    fn signed(s: DVector<f64>) -> Self {
        Self { s, signed: true }
    }

    pub fn uniform(p: usize) -> Result<Self> {
        Self::new(DVector::from_element(p, 1.0 / p as f64))
    }

    pub fn one_hot(p: usize, k: usize) -> Result<Self> {
        if k >= p {
            return Err(Error::InvalidInput(format!("index {k} out of range for p = {p}")));
        }
        let mut s = DVector::zeros(p);
        s[k] = 1.0;
        Self::new(s)
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.s
    }
}

/// Square value matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix(DMatrix<f64>);

impl ValueMatrix {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("value matrix has non-finite entries".into()));
        }
        Ok(Self(v))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// The value matrix projected on the target, `u = Vᵀβ*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub u: DVector<f64>,
    pub beta_star: DVector<f64>,
}

impl Projection {
    pub fn from_values(v: &ValueMatrix, beta_star: &DVector<f64>) -> Result<Self> {
        let m = v.as_matrix();
        if m.nrows() != beta_star.len() {
            return Err(Error::InvalidInput(format!(
                "value matrix has {} rows but target has length {}",
                m.nrows(),
                beta_star.len()
            )));
        }
        Ok(Self {
            u: m.transpose() * beta_star,
            beta_star: beta_star.clone(),
        })
    }

    /// Checks `u = Vᵀβ*` to the given relative tolerance.
    pub fn matches(&self, v: &ValueMatrix, rel_tol: f64) -> bool {
        let expected = v.as_matrix().transpose() * &self.beta_star;
        (&expected - &self.u).norm() <= rel_tol * (1.0 + expected.norm())
    }
}

/// Fixed catalog of score functions.
///
/// `Sigmoid` and `Relu` are elementwise nonlinearities; the loss fields use
/// them without normalization. They can still be normalized for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFn {
    Exp,
    Identity,
    Square,
    Sigmoid,
    Relu,
}

impl ScoreFn {
    pub const ALL: [ScoreFn; 5] = [
        ScoreFn::Exp,
        ScoreFn::Identity,
        ScoreFn::Square,
        ScoreFn::Sigmoid,
        ScoreFn::Relu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFn::Exp => "exp",
            ScoreFn::Identity => "identity",
            ScoreFn::Square => "square",
            ScoreFn::Sigmoid => "sigmoid",
            ScoreFn::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown score function {s:?}")))
    }

    /// True for the maps that are used as `f(a)/Σf(a)` normalizations.
    pub fn is_normalization(self) -> bool {
        matches!(self, ScoreFn::Exp | ScoreFn::Identity | ScoreFn::Square)
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            ScoreFn::Exp => x.exp(),
            ScoreFn::Identity => x,
            ScoreFn::Square => x * x,
            ScoreFn::Sigmoid => sigmoid(x),
            ScoreFn::Relu => x.max(0.0),
        }
    }

    /// Derivative; the relu subgradient at 0 is taken as 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ScoreFn::Exp => x.exp(),
            ScoreFn::Identity => 1.0,
            ScoreFn::Square => 2.0 * x,
            ScoreFn::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ScoreFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// An antiderivative `G` of `1/f'`, defined where `f' > 0`.
    pub fn inverse_gain_potential(self, x: f64) -> Option<f64> {
        if self.derivative(x) <= 0.0 {
            return None;
        }
        Some(match self {
            ScoreFn::Exp => -(-x).exp(),
            ScoreFn::Identity | ScoreFn::Relu => x,
            ScoreFn::Square => 0.5 * x.ln(),
            ScoreFn::Sigmoid => x.exp() + 2.0 * x - (-x).exp(),
        })
    }

    /// Logit offset `c` with `f'(c)/f(c) = 1`, so that `a(0) = c·1` gives every
    /// map the same initial logit velocity as softmax.
    pub fn matched_offset(self) -> f64 {
        match self {
            ScoreFn::Exp => 0.0,
            ScoreFn::Identity | ScoreFn::Relu | ScoreFn::Sigmoid => 1.0,
            ScoreFn::Square => 2.0,
        }
    }
}

/// Either the softmax or a general `f(a)/Σf(a)` normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizationMap {
    Softmax,
    General(ScoreFn),
}

impl NormalizationMap {
    pub fn apply(self, a: &Logits) -> Result<SimplexVector> {
        match self {
            NormalizationMap::Softmax => softmax(a),
            NormalizationMap::General(f) => normalize_general(a, f),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a raw slice (max subtraction).
pub fn softmax_slice(a: &[f64]) -> DVector<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = DVector::from_iterator(a.len(), a.iter().map(|x| (x - max).exp()));
    let total: f64 = s.iter().sum();
    s /= total;
    s
}

pub fn softmax(a: &Logits) -> Result<SimplexVector> {
    let s = softmax_slice(a.as_vector().as_slice());
    Ok(SimplexVector {
        s: clamp_unit(s),
        signed: false,
    })
}

// Guards against 1 + ulp after division.
fn clamp_unit(mut s: DVector<f64>) -> DVector<f64> {
    s.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    s
}

/// `diag(s) − s sᵀ`.
pub fn softmax_jacobian(s: &SimplexVector) -> DMatrix<f64> {
    jacobian_of(s.as_vector())
}

pub(crate) fn jacobian_of(s: &DVector<f64>) -> DMatrix<f64> {
    let mut j = -(s * s.transpose());
    for i in 0..s.len() {
        j[(i, i)] += s[i];
    }
    j
}

/// `(diag(s) − s sᵀ) v` without forming the matrix.
pub(crate) fn jacobian_apply(s: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mean = s.dot(v);
    s.component_mul(&v.add_scalar(-mean))
}

/// `f(aᵢ)/Σⱼ f(aⱼ)`.
pub fn normalize_general(a: &Logits, f: ScoreFn) -> Result<SimplexVector> {
    if f == ScoreFn::Exp {
        return softmax(a);
    }
    let fa = a.as_vector().map(|x| f.value(x));
    let denominator: f64 = fa.iter().sum();
    if denominator.abs() < DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateNormalization { denominator });
    }
    let s = fa / denominator;
    if s.iter().all(|x| (0.0..=1.0).contains(x)) {
        Ok(SimplexVector { s, signed: false })
    } else {
        Ok(SimplexVector::signed(s))
    }
}
