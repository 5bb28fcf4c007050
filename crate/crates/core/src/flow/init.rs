//! Seeded initial states and the field each experiment integrates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::make_conditioned_design;
use crate::error::{Error, Result};
use crate::losses::{Field, FullState, ReducedState};
use crate::simplex::ScoreFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Logits at a constant offset (zero by default), `u(0)` strictly decreasing.
    Assumption1,
    /// Zero values, `σ(a(0))` strictly decreasing.
    Assumption2,
    Explicit,
    /// Every value column is `p*` plus small positive noise.
    KlInterior,
    /// Tied model only: `R(0) = I + noise`, Gaussian logits.
    Residual,
}

impl InitScheme {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "assumption1" => Self::Assumption1,
            "assumption2" => Self::Assumption2,
            "explicit" => Self::Explicit,
            "kl-interior" => Self::KlInterior,
            "residual" => Self::Residual,
            _ => return Err(Error::Parse(format!("unknown init scheme {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
    /// Half-width of the uniform draws for `u(0)` or `a(0)`; logit std for
    /// the residual scheme.
    pub scale: f64,
    pub p: usize,
    /// `‖β*‖`.
    pub target_norm: f64,
    /// Std of the value-matrix component orthogonal to the target; noise
    /// amplitude for the kl-interior and residual schemes.
    pub perp_scale: f64,
    /// Constant added to every initial logit.
    pub logit_offset: f64,
    /// State for the explicit scheme, in the field's flat layout.
    pub explicit: Option<Vec<f64>>,
}

impl InitSpec {
    pub fn new(scheme: InitScheme, p: usize, seed: u64) -> Self {
        Self {
            scheme,
            seed,
            scale: 1.0,
            p,
            target_norm: 0.5,
            perp_scale: 0.1,
            logit_offset: 0.0,
            explicit: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidInput(format!("p must be >= 2, got {}", self.p)));
        }
        for (name, v) in [("scale", self.scale), ("target_norm", self.target_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.perp_scale >= 0.0) || !self.logit_offset.is_finite() {
            return Err(Error::InvalidInput("perp_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelKind {
    Logistic,
    Regression,
    RegressionConditioned { kappa: f64 },
    Kl,
    GeneralNorm { f: ScoreFn },
    Elementwise { g: ScoreFn },
    Tied,
    MultiRow { rows: usize, d: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    /// Reduced `(u, a)` coordinates where the model has them.
    pub reduced: bool,
}

/// A field and its starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub field: Field,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Full(FullState),
    Reduced(ReducedState),
}

/// Initial state for the logistic (assumption1) or regression (other schemes)
/// model with a random target of norm `spec.target_norm`.
pub fn init_state(spec: &InitSpec, reduced: bool) -> Result<InitialState> {
    let kind = match spec.scheme {
        InitScheme::Assumption1 => ModelKind::Logistic,
        _ => ModelKind::Regression,
    };
    let s = setup(&ModelSpec { kind, reduced }, spec)?;
    let p = spec.p;
    if reduced {
        let u = DVector::from_column_slice(&s.x0[..p]);
        let a = DVector::from_column_slice(&s.x0[p..]);
        Ok(InitialState::Reduced(ReducedState::new(u, a, s.field.beta_star_norm_sq())?))
    } else {
        let v = DMatrix::from_column_slice(p, p, &s.x0[..p * p]);
        let a = DVector::from_column_slice(&s.x0[p * p..]);
        let b = DVector::from_column_slice(s.field.beta_star().expect("full field has a target"));
        Ok(InitialState::Full(FullState::new(v, a, b)?))
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Strictly decreasing draw; redrawn until no two entries coincide.
fn sorted_distinct(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    loop {
        let mut v = uniform(rng, n, scale);
        v.sort_by(|a, b| b.partial_cmp(a).expect("finite draws"));
        if v.windows(2).all(|w| w[0] > w[1]) {
            return v;
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_target(rng: &mut ChaCha8Rng, d: usize, norm: f64) -> DVector<f64> {
    loop {
        let g = DVector::from_vec(gaussian(rng, d));
        let n = g.norm();
        if n > 1e-8 {
            return g * (norm / n);
        }
    }
}

/// `β* uᵀ/‖β*‖² + perp · (I − β*β*ᵀ/‖β*‖²) G`, so that `Vᵀβ* = u`.
fn value_matrix_with_projection(
    rng: &mut ChaCha8Rng,
    beta_star: &DVector<f64>,
    u: &DVector<f64>,
    perp: f64,
) -> DMatrix<f64> {
    let d = beta_star.len();
    let b = beta_star.norm_squared();
    let g = DMatrix::from_vec(d, u.len(), gaussian(rng, d * u.len()));
    let proj = beta_star * (beta_star.transpose() * &g) / b;
    beta_star * u.transpose() / b + (g - proj) * perp
}

pub fn setup(model: &ModelSpec, spec: &InitSpec) -> Result<Setup> {
    spec.validate()?;
    let p = spec.p;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = match model.kind {
        ModelKind::MultiRow { d, .. } => d,
        _ => p,
    };
    let beta_star = match model.kind {
        ModelKind::Kl => {
            let w: Vec<f64> = (0..p).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = w.iter().sum();
            DVector::from_iterator(p, w.iter().map(|x| x / total))
        }
        _ => random_target(&mut rng, d, spec.target_norm),
    };
    let b = beta_star.norm_squared();
    let bs = beta_star.as_slice().to_vec();
    let reduced = model.reduced
        && matches!(
            model.kind,
            ModelKind::Logistic | ModelKind::Regression | ModelKind::GeneralNorm { .. }
        );
    if model.reduced && !reduced {
        return Err(Error::InvalidInput(
            "reduced coordinates exist only for logistic, regression and general-norm".into(),
        ));
    }
    let field = match model.kind {
        ModelKind::Logistic if reduced => Field::LogisticReduced {
            p,
            beta_star_norm_sq: b,
        },
        ModelKind::Logistic => Field::LogisticFull { beta_star: bs },
        ModelKind::Regression if reduced => Field::RegressionReduced {
            p,
            beta_star_norm_sq: b,
        },
        ModelKind::Regression => Field::RegressionFull { beta_star: bs },
        ModelKind::RegressionConditioned { kappa } => Field::RegressionConditioned {
            beta_star: bs,
            design: make_conditioned_design(p, kappa, spec.seed)?,
        },
        ModelKind::Kl => Field::Kl { p_star: bs },
        ModelKind::GeneralNorm { f } => {
            if !reduced {
                return Err(Error::InvalidInput(
                    "general normalization runs in reduced coordinates".into(),
                ));
            }
            Field::GeneralNorm {
                p,
                beta_star_norm_sq: b,
                f,
            }
        }
        ModelKind::Elementwise { g } => Field::Elementwise { beta_star: bs, g },
        ModelKind::Tied => Field::Tied { beta_star: bs },
        ModelKind::MultiRow { rows, .. } => Field::MultiRow {
            rows,
            p,
            beta_star: bs,
        },
    };
    field.validate()?;

    let offset = spec.logit_offset;
    let x0 = match (spec.scheme, &field) {
        (InitScheme::Explicit, _) => {
            let x = spec
                .explicit
                .clone()
                .ok_or_else(|| Error::InvalidInput("explicit scheme needs a state".into()))?;
            if x.len() != field.dim() {
                return Err(Error::InvalidInput(format!(
                    "explicit state has length {}, expected {}",
                    x.len(),
                    field.dim()
                )));
            }
            x
        }
        (InitScheme::Assumption1, Field::MultiRow { rows, .. }) => {
            let w = DVector::from_vec(sorted_distinct(&mut rng, p, spec.scale));
            // Rows of V are values; `V β* = w`.
            let v = value_matrix_with_projection(&mut rng, &beta_star, &w, spec.perp_scale)
                .transpose();
            let mut x = v.as_slice().to_vec();
            x.extend(std::iter::repeat_n(offset, rows * p));
            x
        }
        (InitScheme::Assumption1, _) => {
            let u = DVector::from_vec(sorted_distinct(&mut rng, p, spec.scale));
            let a = vec![offset; p];
            let mut x = if reduced {
                u.as_slice().to_vec()
            } else {
                value_matrix_with_projection(&mut rng, &beta_star, &u, spec.perp_scale)
                    .as_slice()
                    .to_vec()
            };
            x.extend(a);
            x
        }
        (InitScheme::Assumption2, Field::MultiRow { rows, .. }) => {
            let mut a = DMatrix::zeros(*rows, p);
            for t in 0..*rows {
                let row = sorted_distinct(&mut rng, p, spec.scale);
                for j in 0..p {
                    a[(t, j)] = row[j] + offset;
                }
            }
            let mut x = vec![0.0; p * d];
            x.extend_from_slice(a.as_slice());
            x
        }
        (InitScheme::Assumption2, _) => {
            let mut x = vec![0.0; if reduced { p } else { p * p }];
            x.extend(sorted_distinct(&mut rng, p, spec.scale).iter().map(|v| v + offset));
            x
        }
        (InitScheme::KlInterior, Field::Kl { .. }) => {
            let mut v = DMatrix::zeros(p, p);
            for j in 0..p {
                for i in 0..p {
                    v[(i, j)] = beta_star[i] + spec.perp_scale * rng.random::<f64>();
                }
            }
            let mut x = v.as_slice().to_vec();
            x.extend(sorted_distinct(&mut rng, p, spec.scale).iter().map(|v| v + offset));
            x
        }
        (InitScheme::Residual, Field::Tied { .. }) => {
            let noise = DMatrix::from_vec(p, p, gaussian(&mut rng, p * p));
            let r = DMatrix::identity(p, p) + noise * spec.perp_scale;
            let mut x = r.as_slice().to_vec();
            x.extend(gaussian(&mut rng, p).iter().map(|v| v * spec.scale + offset));
            x
        }
        (scheme, f) => {
            return Err(Error::InvalidInput(format!(
                "init scheme {scheme:?} does not apply to {}",
                f.name()
            )))
        }
    };
    Ok(Setup { field, x0 })
}
