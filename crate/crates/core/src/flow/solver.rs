//! Explicit Runge–Kutta drivers: fixed-step RK4 and the Dormand–Prince 5(4)
//! embedded pair with FSAL and a clamped step-size controller.

use crate::error::{Error, Result};

/// `ẏ = f(y)`; autonomous.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

impl<F> OdeSystem for (usize, F)
where
    F: Fn(&[f64], &mut [f64]) -> Result<()>,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        (self.1)(y, dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub dt_min: f64,
    pub dt_max: f64,
}


const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Fifth- minus fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// Callback for the driver: `Ok(true)` keeps going, `Ok(false)` stops early.
pub trait StepObserver {
    /// Called after every accepted step with `at_mark` set when `t` landed on
    /// a requested mark.
    fn accepted(&mut self, t: f64, y: &[f64], at_mark: bool) -> Result<bool>;
    /// Next time the driver must land on exactly, strictly after `t`.
    fn next_mark(&self, t: f64) -> f64;
}

/// Where a run stopped and what the controller would try next.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveEnd {
    pub t: f64,
    pub y: Vec<f64>,
    pub next_dt: f64,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveFailure {
    pub error: Error,
    pub t: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

fn rms_scaled(v: &[f64], y: &[f64], tol: &Tolerances) -> f64 {
    let sum: f64 = v
        .iter()
        .zip(y)
        .map(|(e, yi)| {
            let sc = tol.atol + tol.rtol * yi.abs();
            (e / sc) * (e / sc)
        })
        .sum();
    (sum / v.len() as f64).sqrt()
}

/// Starting step from the local Lipschitz estimate of the field.
pub fn initial_step<S: OdeSystem>(sys: &S, y0: &[f64], f0: &[f64], tol: &Tolerances) -> f64 {
    let d0 = rms_scaled(y0, y0, tol);
    let d1 = rms_scaled(f0, y0, tol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    let h = match sys.rhs(&y1, &mut f1) {
        Ok(()) => {
            let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
            let d2 = rms_scaled(&diff, y0, tol) / h0;
            let dmax = d1.max(d2);
            let h1 = if dmax <= 1e-15 {
                (h0 * 1e-3).max(1e-6)
            } else {
                (0.01 / dmax).powf(1.0 / 5.0)
            };
            (100.0 * h0).min(h1)
        }
        Err(_) => h0,
    };
    h.min(tol.dt_max).max(tol.dt_min)
}

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl Stages {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
        }
    }
}

fn combine(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..y.len() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

/// One Dormand–Prince attempt from `(y, k1)`; fills `st.y_new`, `st.k[6]`
/// (the FSAL derivative) and returns the scaled error norm.
fn dopri_attempt<S: OdeSystem>(
    sys: &S,
    y: &[f64],
    h: f64,
    st: &mut Stages,
    tol: &Tolerances,
) -> Result<f64> {
    let [k1, k2, k3, k4, k5, k6, k7] = &mut st.k;
    combine(&mut st.tmp, y, h, &[(A21, k1)]);
    sys.rhs(&st.tmp, k2)?;
    combine(&mut st.tmp, y, h, &[(A31, k1), (A32, k2)]);
    sys.rhs(&st.tmp, k3)?;
    combine(&mut st.tmp, y, h, &[(A41, k1), (A42, k2), (A43, k3)]);
    sys.rhs(&st.tmp, k4)?;
    combine(&mut st.tmp, y, h, &[(A51, k1), (A52, k2), (A53, k3), (A54, k4)]);
    sys.rhs(&st.tmp, k5)?;
    combine(
        &mut st.tmp,
        y,
        h,
        &[(A61, k1), (A62, k2), (A63, k3), (A64, k4), (A65, k5)],
    );
    sys.rhs(&st.tmp, k6)?;
    combine(
        &mut st.y_new,
        y,
        h,
        &[(B1, k1), (B3, k3), (B4, k4), (B5, k5), (B6, k6)],
    );
    sys.rhs(&st.y_new, k7)?;
    let mut sum = 0.0;
    for i in 0..y.len() {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let sc = tol.atol + tol.rtol * y[i].abs().max(st.y_new[i].abs());
        sum += (e / sc) * (e / sc);
    }
    let err = (sum / y.len() as f64).sqrt();
    if err.is_finite() {
        Ok(err)
    } else {
        Ok(f64::INFINITY)
    }
}

/// Adaptive Dormand–Prince from `t0` to `t_end`, landing exactly on every mark
/// the observer requests. `h_start` resumes a previous controller state.
///
/// Stage failures (domain errors) count as rejections; once the step would
/// drop below `dt_min` the last stage error (or a stiffness error) is returned.
pub fn dopri45<S: OdeSystem, O: StepObserver>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    tol: &Tolerances,
    h_start: Option<f64>,
    obs: &mut O,
) -> std::result::Result<DriveEnd, DriveFailure> {
    let n = sys.dim();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut st = Stages::new(n);
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let fail = |error: Error, t: f64, y: &[f64], a: usize, r: usize| DriveFailure {
        error,
        t,
        y: y.to_vec(),
        accepted: a,
        rejected: r,
    };
    if let Err(e) = sys.rhs(&y, &mut st.k[0]) {
        return Err(fail(e, t, &y, 0, 0));
    }
    let mut h = match h_start {
        Some(h) => h,
        None => initial_step(sys, &y, &st.k[0], tol),
    };
    let mut rejected_prev = false;
    while t < t_end {
        let mark = obs.next_mark(t).min(t_end);
        let clamped = h >= mark - t;
        let step = if clamped { mark - t } else { h };
        let attempt = dopri_attempt(sys, &y, step, &mut st, tol);
        let (err, stage_error) = match attempt {
            Ok(e) => (e, None),
            Err(e) => (f64::INFINITY, Some(e)),
        };
        if err <= 1.0 {
            t = if clamped { mark } else { t + step };
            std::mem::swap(&mut y, &mut st.y_new);
            st.k.swap(0, 6);
            accepted += 1;
            let mut factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            if rejected_prev {
                factor = factor.min(1.0);
            }
            let mut h_new = step * factor;
            if clamped {
                h_new = h_new.max(h);
            }
            h = h_new.min(tol.dt_max);
            rejected_prev = false;
            match obs.accepted(t, &y, clamped) {
                Ok(true) => {}
                Ok(false) => break,
                Err(e) => return Err(fail(e, t, &y, accepted, rejected)),
            }
        } else {
            rejected += 1;
            let factor = if err.is_finite() {
                (SAFETY * err.powf(-0.2)).max(MIN_FACTOR)
            } else {
                MIN_FACTOR
            };
            h = step * factor.min(1.0);
            rejected_prev = true;
            if h < tol.dt_min {
                let error = stage_error.unwrap_or(Error::Stiffness { t, dt: h });
                return Err(fail(error, t, &y, accepted, rejected));
            }
        }
    }
    Ok(DriveEnd {
        t,
        y,
        next_dt: h,
        accepted,
        rejected,
    })
}

/// Classical RK4 with step `dt`, shortened only to land on marks.
pub fn rk4<S: OdeSystem, O: StepObserver>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    dt: f64,
    obs: &mut O,
) -> std::result::Result<DriveEnd, DriveFailure> {
    let n = sys.dim();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut accepted = 0;
    let fail = |error: Error, t: f64, y: &[f64], a: usize| DriveFailure {
        error,
        t,
        y: y.to_vec(),
        accepted: a,
        rejected: 0,
    };
    while t < t_end {
        let mark = obs.next_mark(t).min(t_end);
        let clamped = dt >= mark - t;
        let h = if clamped { mark - t } else { dt };
        let stages = (|| -> Result<()> {
            let [k1, k2, k3, k4] = &mut k;
            sys.rhs(&y, k1)?;
            combine(&mut tmp, &y, h, &[(0.5, k1)]);
            sys.rhs(&tmp, k2)?;
            combine(&mut tmp, &y, h, &[(0.5, k2)]);
            sys.rhs(&tmp, k3)?;
            combine(&mut tmp, &y, h, &[(1.0, k3)]);
            sys.rhs(&tmp, k4)
        })();
        if let Err(e) = stages {
            return Err(fail(e, t, &y, accepted));
        }
        let [k1, k2, k3, k4] = &k;
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t = if clamped { mark } else { t + h };
        accepted += 1;
        match obs.accepted(t, &y, clamped) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(fail(e, t, &y, accepted)),
        }
    }
    Ok(DriveEnd {
        t,
        y,
        next_dt: dt,
        accepted,
        rejected: 0,
    })
}
