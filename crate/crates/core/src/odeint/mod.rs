//! Explicit Runge-Kutta integration over flat `f64` state vectors.
//!
//! Two methods are provided: classical fixed-step RK4 and the adaptive
//! Dormand-Prince 5(4) pair with PI step-size control. Both integrate in
//! either time direction.

mod flow;

pub use flow::{
    flow_batch, integrate_adjoint, integrate_adjoint_batch, integrate_augmented, integrate_augmented_batch,
    AdjointResult, AugmentedBatch, AugmentedState, Direction, TraceMode, TraceProbes,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Number of equal steps for `rk4`.
    pub fixed_steps: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on accepted plus rejected steps for `dopri5`.
    pub max_steps: usize,
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: Method::Rk4,
            fixed_steps: steps,
            rel_tol: 1e-5,
            abs_tol: 1e-5,
            max_steps: 10_000,
        }
    }

    pub fn dopri5(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            fixed_steps: 32,
            rel_tol,
            abs_tol,
            max_steps: 10_000,
        }
    }

    /// Training default: 32 fixed RK4 steps.
    pub fn training_default() -> Self {
        Self::rk4(32)
    }

    /// Inference default: Dormand-Prince at `1e-5` relative and absolute.
    pub fn inference_default() -> Self {
        Self::dopri5(1e-5, 1e-5)
    }

    pub fn is_fixed_step(&self) -> bool {
        self.method == Method::Rk4
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        let bad = |m: &str| Err(OdeError::InvalidConfig(m.to_owned()));
        match self.method {
            Method::Rk4 if self.fixed_steps == 0 => bad("fixed_steps must be at least 1"),
            Method::Dopri5 if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) => bad("tolerances must be positive"),
            Method::Dopri5 if self.max_steps == 0 => bad("max_steps must be at least 1"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("maximum number of steps ({max_steps}) exceeded at t = {t}")]
    MaxSteps { max_steps: usize, t: f64 },
    #[error("non-finite vector field value at t = {t}")]
    NonFinite { t: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// Work counters of one integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evals: usize,
}

/// Integrates `dy/dt = field(t, y)` from `t0` to `t1` and returns `y(t1)`.
///
/// `t1 < t0` integrates backward in time.
pub fn integrate<F>(field: F, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Vec<f64>, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    integrate_with_stats(field, y0, t0, t1, cfg).map(|(y, _)| y)
}

pub fn integrate_with_stats<F>(
    mut field: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, Stats), OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    if t0 == t1 {
        return Ok((y0.to_vec(), Stats::default()));
    }
    match cfg.method {
        Method::Rk4 => rk4(&mut field, y0, t0, t1, cfg.fixed_steps),
        Method::Dopri5 => dopri5(&mut field, y0, t0, t1, cfg),
    }
}

fn eval<F>(field: &mut F, t: f64, y: &[f64], out: &mut [f64]) -> Result<(), OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    field(t, y, out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite { t })
    }
}

fn combine(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        *o = y[i] + h * acc;
    }
}

fn rk4<F>(field: &mut F, y0: &[f64], t0: f64, t1: f64, steps: usize) -> Result<(Vec<f64>, Stats), OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y0.len();
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut tmp = vec![0.0; dim];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        eval(field, t, &y, &mut k1)?;
        combine(&mut tmp, &y, 0.5 * h, &[(1.0, &k1)]);
        eval(field, t + 0.5 * h, &tmp, &mut k2)?;
        combine(&mut tmp, &y, 0.5 * h, &[(1.0, &k2)]);
        eval(field, t + 0.5 * h, &tmp, &mut k3)?;
        combine(&mut tmp, &y, h, &[(1.0, &k3)]);
        eval(field, t + h, &tmp, &mut k4)?;
        for j in 0..dim {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    let stats = Stats {
        accepted: steps,
        rejected: 0,
        evals: 4 * steps,
    };
    Ok((y, stats))
}

mod tableau {
    pub const C2: f64 = 1.0 / 5.0;
    pub const C3: f64 = 3.0 / 10.0;
    pub const C4: f64 = 4.0 / 5.0;
    pub const C5: f64 = 8.0 / 9.0;
    pub const A21: f64 = 1.0 / 5.0;
    pub const A31: f64 = 3.0 / 40.0;
    pub const A32: f64 = 9.0 / 40.0;
    pub const A41: f64 = 44.0 / 45.0;
    pub const A42: f64 = -56.0 / 15.0;
    pub const A43: f64 = 32.0 / 9.0;
    pub const A51: f64 = 19372.0 / 6561.0;
    pub const A52: f64 = -25360.0 / 2187.0;
    pub const A53: f64 = 64448.0 / 6561.0;
    pub const A54: f64 = -212.0 / 729.0;
    pub const A61: f64 = 9017.0 / 3168.0;
    pub const A62: f64 = -355.0 / 33.0;
    pub const A63: f64 = 46732.0 / 5247.0;
    pub const A64: f64 = 49.0 / 176.0;
    pub const A65: f64 = -5103.0 / 18656.0;
    pub const A71: f64 = 35.0 / 384.0;
    pub const A73: f64 = 500.0 / 1113.0;
    pub const A74: f64 = 125.0 / 192.0;
    pub const A75: f64 = -2187.0 / 6784.0;
    pub const A76: f64 = 11.0 / 84.0;
    // 5th minus embedded 4th order weights
    pub const E1: f64 = 71.0 / 57600.0;
    pub const E3: f64 = -71.0 / 16695.0;
    pub const E4: f64 = 71.0 / 1920.0;
    pub const E5: f64 = -17253.0 / 339200.0;
    pub const E6: f64 = 22.0 / 525.0;
    pub const E7: f64 = -1.0 / 40.0;
}

fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], cfg: &SolverConfig) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let sc = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / err.len().max(1) as f64).sqrt()
}

/// Starting step size from the local derivative scale (Hairer, Norsett &
/// Wanner, algorithm HINIT).
fn initial_step<F>(
    field: &mut F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    span: f64,
    cfg: &SolverConfig,
) -> Result<f64, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y0.len();
    let sc: Vec<f64> = y0.iter().map(|v| cfg.abs_tol + cfg.rel_tol * v.abs()).collect();
    let rms = |v: &[f64]| -> f64 {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / dim.max(1) as f64).sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + dir * h0 * f).collect();
    let mut f1 = vec![0.0; dim];
    eval(field, t0 + dir * h0, &y1, &mut f1)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dopri5<F>(field: &mut F, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, Stats), OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    use tableau::*;
    const SAFE: f64 = 0.9;
    const BETA: f64 = 0.04;
    const FAC_MIN: f64 = 0.2;
    const FAC_MAX: f64 = 10.0;
    let expo = 0.2 - BETA * 0.75;

    let dim = y0.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut stats = Stats::default();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    eval(field, t, &y, &mut k1)?;
    stats.evals += 1;
    let mut h = initial_step(field, t0, y0, &k1, dir, span, cfg)?;
    stats.evals += 1;

    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    );
    let mut tmp = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;

    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(OdeError::MaxSteps {
                max_steps: cfg.max_steps,
                t,
            });
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t });
        }
        let hs = dir * h;

        combine(&mut tmp, &y, hs, &[(A21, &k1)]);
        eval(field, t + C2 * hs, &tmp, &mut k2)?;
        combine(&mut tmp, &y, hs, &[(A31, &k1), (A32, &k2)]);
        eval(field, t + C3 * hs, &tmp, &mut k3)?;
        combine(&mut tmp, &y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]);
        eval(field, t + C4 * hs, &tmp, &mut k4)?;
        combine(&mut tmp, &y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        eval(field, t + C5 * hs, &tmp, &mut k5)?;
        combine(
            &mut tmp,
            &y,
            hs,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
        );
        let t_next = if last { t1 } else { t + hs };
        eval(field, t_next, &tmp, &mut k6)?;
        combine(
            &mut y_new,
            &y,
            hs,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        );
        eval(field, t_next, &y_new, &mut k7)?;
        stats.evals += 6;

        for i in 0..dim {
            err[i] = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let e = error_norm(&err, &y, &y_new, cfg);
        let fac11 = e.powf(expo);
        if e <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = e.max(1e-4);
            stats.accepted += 1;
            t = t_next;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            last_rejected = false;
            h = h_new;
            if last {
                break;
            }
        } else {
            stats.rejected += 1;
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
    }
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn decay(_t: f64, y: &[f64], out: &mut [f64]) {
        out[0] = -y[0];
    }

    #[test]
    fn dopri5_exponential_decay() {
        let cfg = SolverConfig::dopri5(1e-8, 1e-10);
        let y = integrate(decay, &[1.0], 0.0, 1.0, &cfg).unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn zero_field_is_exact() {
        let y0 = [0.3, -1.7, 2.5];
        for cfg in [SolverConfig::rk4(7), SolverConfig::dopri5(1e-6, 1e-6)] {
            let y = integrate(|_, _, out: &mut [f64]| out.fill(0.0), &y0, 0.0, 1.0, &cfg).unwrap();
            assert_eq!(y, y0);
        }
    }

    #[test]
    fn rotation_field_quarter_turn() {
        let field = |_t: f64, y: &[f64], out: &mut [f64]| {
            out[0] = -y[1];
            out[1] = y[0];
        };
        for cfg in [SolverConfig::dopri5(1e-8, 1e-10), SolverConfig::rk4(200)] {
            let y = integrate(field, &[1.0, 0.0], 0.0, FRAC_PI_2, &cfg).unwrap();
            assert!(y[0].abs() < 1e-6 && (y[1] - 1.0).abs() < 1e-6, "{y:?}");
        }
    }

    #[test]
    fn backward_integration_reverses_time() {
        for cfg in [SolverConfig::dopri5(1e-9, 1e-12), SolverConfig::rk4(64)] {
            let y = integrate(decay, &[(-1.0f64).exp()], 1.0, 0.0, &cfg).unwrap();
            assert!((y[0] - 1.0).abs() < 1e-7, "{y:?}");
        }
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let exact = (-1.0f64).exp();
        let e1 = (integrate(decay, &[1.0], 0.0, 1.0, &SolverConfig::rk4(8)).unwrap()[0] - exact).abs();
        let e2 = (integrate(decay, &[1.0], 0.0, 1.0, &SolverConfig::rk4(16)).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn dopri5_respects_tolerances() {
        // y' = y cos t, y(0) = 1 -> y = exp(sin t)
        let field = |t: f64, y: &[f64], out: &mut [f64]| out[0] = y[0] * t.cos();
        for rtol in [1e-4, 1e-6, 1e-8] {
            let atol = rtol * 1e-2;
            let cfg = SolverConfig::dopri5(rtol, atol);
            let y = integrate(field, &[1.0], 0.0, 5.0, &cfg).unwrap()[0];
            let exact = 5.0f64.sin().exp();
            assert!((y - exact).abs() <= 10.0 * rtol * exact.abs() + atol, "rtol {rtol}");
        }
    }

    #[test]
    fn reports_non_finite_field_time() {
        let field = |t: f64, _y: &[f64], out: &mut [f64]| out[0] = if t > 0.5 { f64::NAN } else { 1.0 };
        match integrate(field, &[0.0], 0.0, 1.0, &SolverConfig::rk4(10)) {
            Err(OdeError::NonFinite { t }) => assert!(t > 0.5 && t <= 1.0),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            integrate(field, &[0.0], 0.0, 1.0, &SolverConfig::dopri5(1e-6, 1e-6)),
            Err(OdeError::NonFinite { .. })
        ));
    }

    #[test]
    fn max_steps_exceeded() {
        let mut cfg = SolverConfig::dopri5(1e-12, 1e-12);
        cfg.max_steps = 3;
        let field = |t: f64, _y: &[f64], out: &mut [f64]| out[0] = (50.0 * t).sin();
        assert!(matches!(
            integrate(field, &[0.0], 0.0, 10.0, &cfg),
            Err(OdeError::MaxSteps { max_steps: 3, .. })
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SolverConfig::rk4(0).validate().is_err());
        assert!(SolverConfig::dopri5(0.0, 1e-6).validate().is_err());
    }
}
