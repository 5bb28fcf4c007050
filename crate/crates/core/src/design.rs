//! Seeded design matrices with a prescribed condition number.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `X = Q₁ diag(s) Q₂ᵀ` with singular values geometrically spaced on `[1/κ, 1]`.
///
/// Serializes as its generating parameters; `X` is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignParams", into = "DesignParams")]
pub struct ConditionedDesign {
    pub x: DMatrix<f64>,
    pub kappa: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct DesignParams {
    p: usize,
    kappa: f64,
    seed: u64,
}

impl TryFrom<DesignParams> for ConditionedDesign {
    type Error = Error;

    fn try_from(d: DesignParams) -> Result<Self> {
        make_conditioned_design(d.p, d.kappa, d.seed)
    }
}

impl From<ConditionedDesign> for DesignParams {
    fn from(d: ConditionedDesign) -> Self {
        DesignParams {
            p: d.x.nrows(),
            kappa: d.kappa,
            seed: d.seed,
        }
    }
}

impl ConditionedDesign {
    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn singular_values(&self) -> DVector<f64> {
        spectrum(self.p(), self.kappa)
    }
}

/// `sᵢ = κ^(i/(p−1) − 1)`, so `s` runs from `1/κ` up to 1.
fn spectrum(p: usize, kappa: f64) -> DVector<f64> {
    DVector::from_fn(p, |i, _| {
        let frac = i as f64 / (p - 1) as f64;
        kappa.powf(frac - 1.0)
    })
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `diag(R)` folded into `Q`.
pub fn random_orthogonal(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn make_conditioned_design(p: usize, kappa: f64, seed: u64) -> Result<ConditionedDesign> {
    if p < 2 {
        return Err(Error::InvalidInput(format!("design needs p >= 2, got {p}")));
    }
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::InvalidInput(format!("kappa must be >= 1, got {kappa}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q1 = random_orthogonal(p, &mut rng);
    let q2 = random_orthogonal(p, &mut rng);
    let s = spectrum(p, kappa);
    let x = q1 * DMatrix::from_diagonal(&s) * q2.transpose();
    Ok(ConditionedDesign { x, kappa, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn condition_number(x: &DMatrix<f64>) -> f64 {
        let sv = x.clone().singular_values();
        sv.max() / sv.min()
    }

    #[test]
    fn unit_kappa_is_orthogonal() {
        let d = make_conditioned_design(6, 1.0, 3).unwrap();
        let gram = d.x.transpose() * &d.x;
        assert!((gram - DMatrix::identity(6, 6)).abs().max() < 1e-10);
    }

    #[test]
    fn condition_number_matches_kappa() {
        for (p, kappa) in [(8, 5.0), (2, 3.0), (12, 100.0)] {
            let d = make_conditioned_design(p, kappa, 11).unwrap();
            let c = condition_number(&d.x);
            assert!((c / kappa - 1.0).abs() < 1e-8, "p={p} kappa={kappa} got {c}");
        }
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = make_conditioned_design(5, 2.5, 42).unwrap();
        let b = make_conditioned_design(5, 2.5, 42).unwrap();
        assert_eq!(a.x.as_slice(), b.x.as_slice());
        let c = make_conditioned_design(5, 2.5, 43).unwrap();
        assert_ne!(a.x.as_slice(), c.x.as_slice());
    }

    #[test]
    fn rejects_small_kappa() {
        assert!(matches!(
            make_conditioned_design(4, 0.5, 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(make_conditioned_design(4, f64::NAN, 0).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_matrix() {
        let d = make_conditioned_design(4, 3.0, 9).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        let back: ConditionedDesign = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
    }
}
