//! Flow-specific systems: the state ODE, the state augmented with the
//! log-density integral, and the adjoint system used for gradients.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{integrate, OdeError, SolverConfig};
use crate::dynamics::{unit_probes, Conditioner, DynamicsNet};

/// Integration direction of the flow. `Forward` maps latent `z = z(0)` to a
/// joint configuration `q = z(1)`; `Backward` maps `q` back to `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// `(start, end)` times.
    pub fn span(self) -> (f64, f64) {
        match self {
            Direction::Forward => (0.0, 1.0),
            Direction::Backward => (1.0, 0.0),
        }
    }
}

/// How `tr(dh/dz)` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceMode {
    /// Sum of `n` unit-vector products.
    Exact,
    /// Mean of `e^T (dh/dz) e` over `probes` Rademacher vectors drawn from
    /// `seed`, held fixed along the trajectory.
    Hutchinson { probes: usize, seed: u64 },
}

/// Trace probes for a batch.
#[derive(Clone, Debug)]
pub enum TraceProbes {
    Exact,
    /// One `batch x n` matrix of Rademacher entries per probe.
    Hutchinson(Vec<Array2<f64>>),
}

impl TraceProbes {
    pub fn rademacher<R: Rng + ?Sized>(batch: usize, n: usize, count: usize, rng: &mut R) -> Self {
        let probes = (0..count.max(1))
            .map(|_| Array2::from_shape_simple_fn((batch, n), || if rng.gen::<bool>() { 1.0 } else { -1.0 }))
            .collect();
        TraceProbes::Hutchinson(probes)
    }

    pub fn from_mode(mode: &TraceMode, batch: usize, n: usize) -> Self {
        match *mode {
            TraceMode::Exact => TraceProbes::Exact,
            TraceMode::Hutchinson { probes, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Self::rademacher(batch, n, probes, &mut rng)
            }
        }
    }

    /// The probes of the batch rows in `rows`.
    pub fn rows(&self, rows: Range<usize>) -> Self {
        match self {
            TraceProbes::Exact => TraceProbes::Exact,
            TraceProbes::Hutchinson(p) => {
                TraceProbes::Hutchinson(p.iter().map(|m| m.slice(s![rows.clone(), ..]).to_owned()).collect())
            }
        }
    }

    /// Probe vectors and the weight applied to their sum.
    fn resolve(&self, batch: usize, n: usize) -> (Vec<Array2<f64>>, f64) {
        match self {
            TraceProbes::Exact => (unit_probes(batch, n), 1.0),
            TraceProbes::Hutchinson(p) => (p.clone(), 1.0 / p.len() as f64),
        }
    }
}

/// State and accumulated `-int tr(dh/dz) dt` at the end of an integration.
///
/// For the backward direction `logdet` equals `int_0^1 tr(dh/dz) dt`, so
/// `log p(q) = log p(z) - logdet`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub z: Vec<f64>,
    pub logdet: f64,
}

#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub z: Array2<f64>,
    pub logdet: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    /// Loss gradient with respect to the state at the start of the original
    /// integration.
    pub dl_dz_start: Vec<f64>,
    pub dl_dtheta: Vec<f64>,
}

fn flat(y: ArrayView2<'_, f64>) -> Vec<f64> {
    y.iter().copied().collect()
}

/// Integrates only the state.
pub fn flow_batch(
    net: &DynamicsNet,
    y: ArrayView2<'_, f64>,
    cond: &Conditioner,
    direction: Direction,
    cfg: &SolverConfig,
) -> Result<Array2<f64>, OdeError> {
    let (b, n) = y.dim();
    let (t0, t1) = direction.span();
    let field = |t: f64, s: &[f64], out: &mut [f64]| {
        let z = ArrayView2::from_shape((b, n), s).expect("state shape");
        let h = net.eval_batch(z, cond, t);
        out.iter_mut().zip(h.iter()).for_each(|(o, v)| *o = *v);
    };
    let end = integrate(field, &flat(y), t0, t1, cfg)?;
    Ok(Array2::from_shape_vec((b, n), end).expect("state shape"))
}

/// Jointly integrates `dz/dt = h` and `d(logdet)/dt = -tr(dh/dz)`.
pub fn integrate_augmented_batch(
    net: &DynamicsNet,
    y: ArrayView2<'_, f64>,
    cond: &Conditioner,
    direction: Direction,
    probes: &TraceProbes,
    cfg: &SolverConfig,
) -> Result<AugmentedBatch, OdeError> {
    let (b, n) = y.dim();
    let bn = b * n;
    let (vectors, weight) = probes.resolve(b, n);
    let views: Vec<ArrayView2<'_, f64>> = vectors.iter().map(|v| v.view()).collect();
    let (t0, t1) = direction.span();

    let field = |t: f64, s: &[f64], out: &mut [f64]| {
        let z = ArrayView2::from_shape((b, n), &s[..bn]).expect("state shape");
        let (h, tan, _) = net.forward(z, cond, t, &views);
        out[..bn].iter_mut().zip(h.iter()).for_each(|(o, v)| *o = *v);
        for (row, o) in out[bn..].iter_mut().enumerate() {
            let mut acc = 0.0;
            for (e, je) in views.iter().zip(&tan) {
                acc += e.row(row).dot(&je.row(row));
            }
            *o = -weight * acc;
        }
    };
    let mut y0 = flat(y);
    y0.resize(bn + b, 0.0);
    let mut end = integrate(field, &y0, t0, t1, cfg)?;
    let logdet = Array1::from(end.split_off(bn));
    Ok(AugmentedBatch {
        z: Array2::from_shape_vec((b, n), end).expect("state shape"),
        logdet,
    })
}

/// Gradients of a loss `L(z_end, logdet)` through an augmented integration
/// in `direction`, by integrating the adjoint system from the end time back
/// to the start time while reconstructing the state.
///
/// `dl_dlogdet` holds one coefficient per batch row; `probes` must be the
/// ones used for the primal integration.
#[allow(clippy::too_many_arguments)]
pub fn integrate_adjoint_batch(
    net: &DynamicsNet,
    z_end: ArrayView2<'_, f64>,
    dl_dz_end: ArrayView2<'_, f64>,
    dl_dlogdet: ArrayView1<'_, f64>,
    cond: &Conditioner,
    direction: Direction,
    probes: &TraceProbes,
    cfg: &SolverConfig,
) -> Result<(Array2<f64>, Vec<f64>), OdeError> {
    let (b, n) = z_end.dim();
    let bn = b * n;
    let np = net.parameter_count();
    let (vectors, weight) = probes.resolve(b, n);
    let views: Vec<ArrayView2<'_, f64>> = vectors.iter().map(|v| v.view()).collect();
    // logdet rate is -w sum_p e_p^T J e_p, so its cotangent on J e_p is -w kappa e_p
    let tan_bar: Vec<Array2<f64>> = vectors
        .iter()
        .map(|e| {
            let mut tb = e.clone();
            for (mut row, k) in tb.rows_mut().into_iter().zip(dl_dlogdet.iter()) {
                row *= -weight * k;
            }
            tb
        })
        .collect();
    let tan_bar_views: Vec<ArrayView2<'_, f64>> = tan_bar.iter().map(|v| v.view()).collect();
    let (t_start, t_end) = direction.span();

    let field = |t: f64, s: &[f64], out: &mut [f64]| {
        let z = ArrayView2::from_shape((b, n), &s[..bn]).expect("state shape");
        let a = ArrayView2::from_shape((b, n), &s[bn..2 * bn]).expect("adjoint shape");
        let (h, _, tape) = net.forward(z, cond, t, &views);
        let (head, theta) = out.split_at_mut(2 * bn);
        theta.fill(0.0);
        let z_bar = net.reverse(&tape, cond, a, &tan_bar_views, Some(theta));
        theta.iter_mut().for_each(|v| *v = -*v);
        head[..bn].iter_mut().zip(h.iter()).for_each(|(o, v)| *o = *v);
        head[bn..].iter_mut().zip(z_bar.iter()).for_each(|(o, v)| *o = -*v);
    };

    let mut y0 = Vec::with_capacity(2 * bn + np);
    y0.extend(z_end.iter());
    y0.extend(dl_dz_end.iter());
    y0.resize(2 * bn + np, 0.0);
    let end = integrate(field, &y0, t_end, t_start, cfg)?;
    let a_start = Array2::from_shape_vec((b, n), end[bn..2 * bn].to_vec()).expect("adjoint shape");
    Ok((a_start, end[2 * bn..].to_vec()))
}

fn single_condition(net: &DynamicsNet, condition: &[f64]) -> Result<Conditioner, crate::Error> {
    let x = Array2::from_shape_vec((1, condition.len()), condition.to_vec()).expect("row");
    net.condition(x)
}

fn single_row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row")
}

/// Single-sample augmented integration; `condition` is the pose part of the
/// condition vector (time is appended internally).
pub fn integrate_augmented(
    net: &DynamicsNet,
    y: &[f64],
    condition: &[f64],
    direction: Direction,
    trace: &TraceMode,
    cfg: &SolverConfig,
) -> Result<AugmentedState, crate::Error> {
    crate::error::check_dim("flow state", net.config().state_dim, y.len())?;
    let cond = single_condition(net, condition)?;
    let probes = TraceProbes::from_mode(trace, 1, y.len());
    let out = integrate_augmented_batch(net, single_row(y), &cond, direction, &probes, cfg)?;
    Ok(AugmentedState {
        z: out.z.into_raw_vec_and_offset().0,
        logdet: out.logdet[0],
    })
}

/// Single-sample adjoint integration; see [`integrate_adjoint_batch`].
#[allow(clippy::too_many_arguments)]
pub fn integrate_adjoint(
    net: &DynamicsNet,
    z_end: &[f64],
    dl_dz_end: &[f64],
    dl_dlogdet: f64,
    condition: &[f64],
    direction: Direction,
    trace: &TraceMode,
    cfg: &SolverConfig,
) -> Result<AdjointResult, crate::Error> {
    let n = net.config().state_dim;
    crate::error::check_dim("flow state", n, z_end.len())?;
    crate::error::check_dim("state cotangent", n, dl_dz_end.len())?;
    let cond = single_condition(net, condition)?;
    let probes = TraceProbes::from_mode(trace, 1, n);
    let k = Array1::from(vec![dl_dlogdet]);
    let (a, theta) = integrate_adjoint_batch(
        net,
        single_row(z_end),
        single_row(dl_dz_end),
        k.view(),
        &cond,
        direction,
        &probes,
        cfg,
    )?;
    Ok(AdjointResult {
        dl_dz_start: a.into_raw_vec_and_offset().0,
        dl_dtheta: theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsConfig;
    use crate::testutil::{expm, linear_net, random_net};
    use ndarray::{array, Array1};

    #[test]
    fn zero_dynamics_is_identity() {
        let net = DynamicsNet::zeros(DynamicsConfig::new(3, 7, vec![8])).unwrap();
        let q = [0.4, -0.2, 1.5];
        let out = integrate_augmented(
            &net,
            &q,
            &[0.1; 7],
            Direction::Backward,
            &TraceMode::Exact,
            &SolverConfig::rk4(8),
        )
        .unwrap();
        assert_eq!(out.z, q.to_vec());
        assert_eq!(out.logdet, 0.0);
    }

    #[test]
    fn linear_field_matches_matrix_exponential() {
        let a = array![[-0.4, 0.3, 0.0], [0.1, 0.2, -0.5], [0.0, 0.6, -0.1]];
        let net = linear_net(&a, 2);
        let z0 = [0.7, -0.3, 1.1];
        let cfg = SolverConfig::dopri5(1e-10, 1e-12);
        let out = integrate_augmented(&net, &z0, &[0.0, 0.0], Direction::Forward, &TraceMode::Exact, &cfg).unwrap();
        let expect = expm(&a).dot(&Array1::from(z0.to_vec()));
        for (g, e) in out.z.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-6);
        }
        assert!((out.logdet + a.diag().sum()).abs() < 1e-6);
        let back = integrate_augmented(&net, &z0, &[0.0, 0.0], Direction::Backward, &TraceMode::Exact, &cfg).unwrap();
        assert!((back.logdet - a.diag().sum()).abs() < 1e-6);
    }

    #[test]
    fn hutchinson_mean_within_three_standard_errors() {
        let a = array![[-0.4, 0.3, 0.2], [0.1, 0.2, -0.5], [0.9, 0.6, -0.1]];
        let net = linear_net(&a, 2);
        let cfg = SolverConfig::rk4(4);
        let draws: Vec<f64> = (0..10_000)
            .map(|seed| {
                let mode = TraceMode::Hutchinson { probes: 1, seed };
                -integrate_augmented(&net, &[0.1, 0.2, 0.3], &[0.0, 0.0], Direction::Forward, &mode, &cfg)
                    .unwrap()
                    .logdet
            })
            .collect();
        let m = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / m;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        assert!(se > 0.0);
        assert!((mean - a.diag().sum()).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn forward_then_backward_returns_start() {
        for seed in 0..5 {
            let net = random_net(DynamicsConfig::new(6, 7, vec![16, 16]), 0.4, seed);
            let cond = net.condition(Array2::from_elem((3, 7), 0.2)).unwrap();
            let z0 = Array2::from_shape_fn((3, 6), |(i, j)| (i as f64 - 1.0) * 0.5 + j as f64 * 0.1);
            let cfg = SolverConfig::rk4(64);
            let q = flow_batch(&net, z0.view(), &cond, Direction::Forward, &cfg).unwrap();
            let back = flow_batch(&net, q.view(), &cond, Direction::Backward, &cfg).unwrap();
            assert!((&back - &z0).iter().all(|d| d.abs() < 1e-6));
        }
    }

    /// Full pipeline loss used for the gradient checks: data `q` at t = 1 is
    /// mapped back to `z`, then `L = |z|^2 / 2 + logdet`.
    fn pipeline_loss(net: &DynamicsNet, q: &[f64], c: &[f64], cfg: &SolverConfig) -> f64 {
        let out = integrate_augmented(net, q, c, Direction::Backward, &TraceMode::Exact, cfg).unwrap();
        0.5 * out.z.iter().map(|v| v * v).sum::<f64>() + out.logdet
    }

    fn adjoint_grads(net: &DynamicsNet, q: &[f64], c: &[f64], cfg: &SolverConfig, scale: f64) -> AdjointResult {
        let out = integrate_augmented(net, q, c, Direction::Backward, &TraceMode::Exact, cfg).unwrap();
        let dz: Vec<f64> = out.z.iter().map(|v| scale * v).collect();
        integrate_adjoint(net, &out.z, &dz, scale, c, Direction::Backward, &TraceMode::Exact, cfg).unwrap()
    }

    #[test]
    fn adjoint_of_identity_flow() {
        let net = DynamicsNet::zeros(DynamicsConfig::new(3, 7, vec![8])).unwrap();
        let z = [0.3, -0.6, 0.9];
        let cfg = SolverConfig::rk4(16);
        let r = integrate_adjoint(
            &net,
            &z,
            &z,
            0.0,
            &[0.0; 7],
            Direction::Backward,
            &TraceMode::Exact,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.dl_dz_start, z.to_vec());
        // only the output layer sees a nonzero cotangent, through zero hidden activations
        assert!(r.dl_dtheta.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn adjoint_gradients_match_finite_differences() {
        let cfg = SolverConfig::rk4(64);
        let net = random_net(DynamicsConfig::new(3, 7, vec![8]), 0.5, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = adjoint_grads(&net, &q, &c, &cfg, 1.0);
        for idx in 0..net.parameter_count() {
            let mut p = net.clone();
            p.params_mut()[idx] += 1e-6;
            let lp = pipeline_loss(&p, &q, &c, &cfg);
            p.params_mut()[idx] -= 2e-6;
            let lm = pipeline_loss(&p, &q, &c, &cfg);
            let fd = (lp - lm) / 2e-6;
            let err = (r.dl_dtheta[idx] - fd).abs();
            assert!(
                err <= 1e-4 * fd.abs() + 1e-7,
                "param {idx}: {} vs {fd}",
                r.dl_dtheta[idx]
            );
        }
        for k in 0..3 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let fd = (pipeline_loss(&net, &qp, &c, &cfg) - pipeline_loss(&net, &qm, &c, &cfg)) / 2e-6;
            assert!((r.dl_dz_start[k] - fd).abs() <= 1e-4 * fd.abs() + 1e-7);
        }
    }

    #[test]
    fn adjoint_is_linear_in_loss_scale() {
        let cfg = SolverConfig::rk4(32);
        let net = random_net(DynamicsConfig::new(3, 7, vec![8]), 0.5, 31);
        let q = [0.2, -0.4, 0.6];
        let c = [0.1, 0.2, 0.3, 0.9, 0.1, 0.0, 0.0];
        let r1 = adjoint_grads(&net, &q, &c, &cfg, 1.0);
        let r2 = adjoint_grads(&net, &q, &c, &cfg, 2.0);
        for (a, b) in r1.dl_dtheta.iter().zip(&r2.dl_dtheta) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batched_augmented_matches_single() {
        let net = random_net(DynamicsConfig::new(3, 7, vec![8, 8]), 0.4, 41);
        let x = Array2::from_shape_fn((4, 7), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let q = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.71).cos());
        let cond = net.condition(x.clone()).unwrap();
        let cfg = SolverConfig::rk4(16);
        let batch =
            integrate_augmented_batch(&net, q.view(), &cond, Direction::Backward, &TraceProbes::Exact, &cfg).unwrap();
        for b in 0..4 {
            let single = integrate_augmented(
                &net,
                q.row(b).as_slice().unwrap(),
                x.row(b).as_slice().unwrap(),
                Direction::Backward,
                &TraceMode::Exact,
                &cfg,
            )
            .unwrap();
            assert!((single.logdet - batch.logdet[b]).abs() < 1e-12);
            for k in 0..3 {
                assert!((single.z[k] - batch.z[[b, k]]).abs() < 1e-12);
            }
        }
    }
}
