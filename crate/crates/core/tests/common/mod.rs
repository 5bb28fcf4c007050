//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's numerical code except to build inputs.
#![allow(dead_code)]

use polarflow::design::make_conditioned_design;
use polarflow::flow::Trajectory;
use polarflow::losses::Field;
use polarflow::simplex::ScoreFn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn uniforms(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `M x` for column-major `M` with `rows` rows.
fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for (j, xj) in x.iter().enumerate() {
        for i in 0..rows {
            y[i] += m[j * rows + i] * xj;
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn score(f: ScoreFn, x: f64) -> f64 {
    match f {
        ScoreFn::Exp => x.exp(),
        ScoreFn::Identity => x,
        ScoreFn::Square => x * x,
        ScoreFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        ScoreFn::Relu => x.max(0.0),
    }
}

/// Loss written directly from the model definitions, in full coordinates.
/// Reduced fields are scored through their full-coordinate counterpart.
pub fn oracle_loss(field: &Field, x: &[f64]) -> f64 {
    match field {
        Field::LogisticFull { beta_star } => {
            let p = beta_star.len();
            let beta = matvec(&x[..p * p], p, &softmax(&x[p * p..]));
            softplus(-dot(beta_star, &beta))
        }
        Field::RegressionFull { beta_star } => {
            let p = beta_star.len();
            let beta = matvec(&x[..p * p], p, &softmax(&x[p * p..]));
            0.5 * beta_star.iter().zip(&beta).map(|(b, y)| (b - y).powi(2)).sum::<f64>()
        }
        Field::RegressionConditioned { beta_star, design } => {
            let p = beta_star.len();
            let beta = matvec(&x[..p * p], p, &softmax(&x[p * p..]));
            let xb = matvec(design.x.as_slice(), p, &beta);
            0.5 * beta_star.iter().zip(&xb).map(|(b, y)| (b - y).powi(2)).sum::<f64>()
        }
        Field::Kl { p_star } => {
            let p = p_star.len();
            let beta = matvec(&x[..p * p], p, &softmax(&x[p * p..]));
            -p_star.iter().zip(&beta).map(|(q, b)| q * b.ln()).sum::<f64>()
        }
        Field::Elementwise { beta_star, g } => {
            let p = beta_star.len();
            let ga: Vec<f64> = x[p * p..].iter().map(|&a| score(*g, a)).collect();
            softplus(-dot(beta_star, &matvec(&x[..p * p], p, &ga)))
        }
        Field::Tied { beta_star } => {
            let p = beta_star.len();
            let r = &x[..p * p];
            let s = softmax(&matvec(r, p, &x[p * p..]));
            softplus(-dot(beta_star, &matvec(r, p, &s)))
        }
        Field::MultiRow { rows, p, beta_star } => {
            let (t, p, d) = (*rows, *p, beta_star.len());
            let w = matvec(&x[..p * d], p, beta_star);
            let a = &x[p * d..];
            let mut total = 0.0;
            for r in 0..t {
                let row: Vec<f64> = (0..p).map(|j| a[j * t + r]).collect();
                total += softplus(-dot(&softmax(&row), &w));
            }
            total / t as f64
        }
        _ => panic!("reduced fields are checked through full_oracle_loss"),
    }
}

/// `softplus(−⟨β*, V σ_f(a)⟩)` or the regression loss, for a full `(V, a)`
/// behind a reduced field.
pub fn full_oracle_loss(reduced: &Field, beta_star: &[f64], x: &[f64]) -> f64 {
    let p = beta_star.len();
    let a = &x[p * p..];
    let weights = match reduced {
        Field::GeneralNorm { f, .. } => {
            let fa: Vec<f64> = a.iter().map(|&v| score(*f, v)).collect();
            let z: f64 = fa.iter().sum();
            fa.iter().map(|v| v / z).collect()
        }
        _ => softmax(a),
    };
    let beta = matvec(&x[..p * p], p, &weights);
    match reduced {
        Field::RegressionReduced { .. } => {
            0.5 * beta_star.iter().zip(&beta).map(|(b, y)| (b - y).powi(2)).sum::<f64>()
        }
        _ => softplus(-dot(beta_star, &beta)),
    }
}

/// Central differences of `loss` at `x`.
pub fn fd_gradient(loss: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            y[k] = x[k] + FD_STEP;
            let lp = loss(&y);
            y[k] = x[k] - FD_STEP;
            let lm = loss(&y);
            y[k] = x[k];
            (lp - lm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

/// Field kinds covered by the oracle suite.
pub const ORACLE_KINDS: [&str; 13] = [
    "logistic-full",
    "regression-full",
    "regression-conditioned",
    "kl",
    "elementwise-sigmoid",
    "elementwise-relu",
    "tied",
    "multirow",
    "logistic-reduced",
    "regression-reduced",
    "general-norm-exp",
    "general-norm-square",
    "general-norm-identity",
];

fn target(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let g = normals(rng, d, 1.0);
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm = rng.random_range(0.3..1.5);
    g.iter().map(|x| x * norm / n).collect()
}

/// Relative error between the crate's field and the negated finite-difference
/// gradient of the oracle loss at one random state of `kind`.
pub fn oracle_case(kind: &str, p: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let full = |field: Field, x: Vec<f64>| {
        let mut dx = vec![0.0; x.len()];
        field.eval(&x, &mut dx).expect("field evaluates");
        let g = fd_gradient(|y| oracle_loss(&field, y), &x);
        let flow: Vec<f64> = g.iter().map(|v| -v).collect();
        rel_err(&dx, &flow)
    };
    match kind {
        "logistic-full" | "regression-full" | "tied" => {
            let b = target(&mut r, p);
            let v = if kind == "tied" {
                let mut v = normals(&mut r, p * p, 0.3);
                for i in 0..p {
                    v[i * p + i] += 1.0;
                }
                v
            } else {
                normals(&mut r, p * p, 0.7)
            };
            let x = [v, normals(&mut r, p, 1.0)].concat();
            let field = match kind {
                "logistic-full" => Field::LogisticFull { beta_star: b },
                "regression-full" => Field::RegressionFull { beta_star: b },
                _ => Field::Tied { beta_star: b },
            };
            full(field, x)
        }
        "regression-conditioned" => {
            let b = target(&mut r, p);
            let kappa = r.random_range(1.0..5.0);
            let design = make_conditioned_design(p, kappa, seed).unwrap();
            let x = [normals(&mut r, p * p, 0.7), normals(&mut r, p, 1.0)].concat();
            full(Field::RegressionConditioned { beta_star: b, design }, x)
        }
        "kl" => {
            let w = uniforms(&mut r, p, 0.1, 1.0);
            let z: f64 = w.iter().sum();
            let p_star = w.iter().map(|v| v / z).collect();
            let x = [uniforms(&mut r, p * p, 0.05, 1.0), normals(&mut r, p, 1.0)].concat();
            full(Field::Kl { p_star }, x)
        }
        "elementwise-sigmoid" | "elementwise-relu" => {
            let b = target(&mut r, p);
            let g = if kind == "elementwise-relu" { ScoreFn::Relu } else { ScoreFn::Sigmoid };
            // keep ReLU logits away from the kink
            let a: Vec<f64> = normals(&mut r, p, 1.0)
                .into_iter()
                .map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
                .collect();
            full(Field::Elementwise { beta_star: b, g }, [normals(&mut r, p * p, 0.7), a].concat())
        }
        "multirow" => {
            let rows = r.random_range(1..=5);
            let d = r.random_range(2..=10);
            let b = target(&mut r, d);
            let x = [normals(&mut r, p * d, 0.7), normals(&mut r, rows * p, 1.0)].concat();
            full(Field::MultiRow { rows, p, beta_star: b }, x)
        }
        _ => reduced_case(kind, p, &mut r),
    }
}

/// Reduced fields: the flow of `u = Vᵀβ*` and `a` induced by the full
/// finite-difference gradient.
fn reduced_case(kind: &str, p: usize, r: &mut ChaCha8Rng) -> f64 {
    let b = target(r, p);
    let bb: f64 = b.iter().map(|x| x * x).sum();
    let field = match kind {
        "logistic-reduced" => Field::LogisticReduced { p, beta_star_norm_sq: bb },
        "regression-reduced" => Field::RegressionReduced { p, beta_star_norm_sq: bb },
        "general-norm-exp" => Field::GeneralNorm { p, beta_star_norm_sq: bb, f: ScoreFn::Exp },
        "general-norm-square" => Field::GeneralNorm { p, beta_star_norm_sq: bb, f: ScoreFn::Square },
        "general-norm-identity" => Field::GeneralNorm { p, beta_star_norm_sq: bb, f: ScoreFn::Identity },
        _ => panic!("unknown oracle kind {kind}"),
    };
    let a = match kind {
        "general-norm-square" | "general-norm-identity" => uniforms(r, p, 0.2, 2.0),
        _ => normals(r, p, 1.0),
    };
    // regression reduces exactly only on V = β* uᵀ / ‖β*‖²
    let v = if kind == "regression-reduced" {
        let u = normals(r, p, 0.7);
        (0..p * p).map(|k| b[k % p] * u[k / p] / bb).collect()
    } else {
        normals(r, p * p, 0.7)
    };
    let x = [v.clone(), a.clone()].concat();
    let g = fd_gradient(|y| full_oracle_loss(&field, &b, y), &x);
    let mut expected = vec![0.0; 2 * p];
    for j in 0..p {
        expected[j] = -(0..p).map(|i| g[j * p + i] * b[i]).sum::<f64>();
        expected[p + j] = -g[p * p + j];
    }
    let u: Vec<f64> = (0..p).map(|j| (0..p).map(|i| v[j * p + i] * b[i]).sum()).collect();
    let y = [u, a].concat();
    let mut dy = vec![0.0; 2 * p];
    field.eval(&y, &mut dy).expect("field evaluates");
    rel_err(&dy, &expected)
}

/// Worst relative error over `n` random states per kind, `p` cycling 2..=10.
pub fn oracle_suite(n: usize) -> Vec<(&'static str, f64)> {
    ORACLE_KINDS
        .iter()
        .enumerate()
        .map(|(k, kind)| {
            let worst = (0..n)
                .map(|i| oracle_case(kind, 2 + i % 9, 1000 * k as u64 + i as u64))
                .fold(0.0, f64::max);
            (*kind, worst)
        })
        .collect()
}

/// Random attention tensor as nested vectors `[L][H][S][Q][K]`.
pub type Nested = Vec<Vec<Vec<Vec<Vec<f64>>>>>;

pub fn random_nested(rng: &mut ChaCha8Rng, dims: [usize; 5], lo: f64) -> Nested {
    (0..dims[0])
        .map(|_| {
            (0..dims[1])
                .map(|_| {
                    (0..dims[2])
                        .map(|_| (0..dims[3]).map(|_| uniforms(rng, dims[4], lo, 1.0)).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn flatten(t: &Nested) -> Vec<f64> {
    t.iter().flatten().flatten().flatten().flatten().copied().collect()
}

/// Per-head mean of `max/total`, by direct loops.
pub fn naive_sparsity(t: &Nested) -> Vec<f64> {
    let mut out = vec![];
    for layer in t {
        for head in layer {
            let (mut acc, mut n) = (0.0, 0.0);
            for sample in head {
                for row in sample {
                    let total: f64 = row.iter().sum();
                    let mut max = row[0];
                    for &v in row {
                        if v > max {
                            max = v;
                        }
                    }
                    acc += max / total;
                    n += 1.0;
                }
            }
            out.push(acc / n);
        }
    }
    out
}

/// Per-head mean of `row[bos]/total` over `queries`, clipped to `[0, 1]`.
pub fn naive_sink(t: &Nested, q0: usize, q1: usize, bos: usize) -> Vec<f64> {
    let mut out = vec![];
    for layer in t {
        for head in layer {
            let (mut acc, mut n) = (0.0, 0.0);
            for sample in head {
                for row in &sample[q0..q1] {
                    let total: f64 = row.iter().sum();
                    acc += row[bos] / total;
                    n += 1.0;
                }
            }
            out.push((acc / n).clamp(0.0, 1.0));
        }
    }
    out
}

/// Largest `max_i a_i` of the reported weights over a trajectory.
pub fn peak_max_sigma(traj: &Trajectory) -> f64 {
    traj.samples.iter().map(|s| s.max_sigma).fold(f64::NEG_INFINITY, f64::max)
}

/// A field of `kind` and a random state in its own coordinates. States are
/// drawn from the same ranges as the gradient oracle uses.
pub fn random_state(kind: &str, p: usize, seed: u64) -> (Field, Vec<f64>) {
    let mut r = rng(seed);
    let b = target(&mut r, p);
    let bb: f64 = b.iter().map(|x| x * x).sum();
    let matrix = |r: &mut ChaCha8Rng| [normals(r, p * p, 0.7), normals(r, p, 1.0)].concat();
    let reduced = |r: &mut ChaCha8Rng, positive: bool| {
        let a = if positive { uniforms(r, p, 0.2, 2.0) } else { normals(r, p, 1.0) };
        [normals(r, p, 0.7), a].concat()
    };
    match kind {
        "logistic-full" => (Field::LogisticFull { beta_star: b }, matrix(&mut r)),
        "regression-full" => (Field::RegressionFull { beta_star: b }, matrix(&mut r)),
        "tied" => (Field::Tied { beta_star: b }, matrix(&mut r)),
        "elementwise-sigmoid" => (Field::Elementwise { beta_star: b, g: ScoreFn::Sigmoid }, matrix(&mut r)),
        "elementwise-relu" => (Field::Elementwise { beta_star: b, g: ScoreFn::Relu }, matrix(&mut r)),
        "regression-conditioned" => {
            let kappa = r.random_range(1.0..5.0);
            let design = make_conditioned_design(p, kappa, seed).unwrap();
            (Field::RegressionConditioned { beta_star: b, design }, matrix(&mut r))
        }
        "kl" => {
            let w = uniforms(&mut r, p, 0.1, 1.0);
            let z: f64 = w.iter().sum();
            let p_star = w.iter().map(|v| v / z).collect();
            let x = [uniforms(&mut r, p * p, 0.05, 1.0), normals(&mut r, p, 1.0)].concat();
            (Field::Kl { p_star }, x)
        }
        "multirow" => {
            let rows = r.random_range(1..=5);
            let d = r.random_range(2..=10);
            let b = target(&mut r, d);
            let x = [normals(&mut r, p * d, 0.7), normals(&mut r, rows * p, 1.0)].concat();
            (Field::MultiRow { rows, p, beta_star: b }, x)
        }
        "logistic-reduced" => (Field::LogisticReduced { p, beta_star_norm_sq: bb }, reduced(&mut r, false)),
        "regression-reduced" => (Field::RegressionReduced { p, beta_star_norm_sq: bb }, reduced(&mut r, false)),
        "general-norm-exp" => (Field::GeneralNorm { p, beta_star_norm_sq: bb, f: ScoreFn::Exp }, reduced(&mut r, false)),
        "general-norm-square" => (Field::GeneralNorm { p, beta_star_norm_sq: bb, f: ScoreFn::Square }, reduced(&mut r, true)),
        "general-norm-identity" => (Field::GeneralNorm { p, beta_star_norm_sq: bb, f: ScoreFn::Identity }, reduced(&mut r, true)),
        _ => panic!("unknown kind {kind}"),
    }
}
