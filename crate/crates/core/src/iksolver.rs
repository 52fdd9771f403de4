//! IK front ends: batch solving with the flow, Cartesian path to joint path
//! conversion with a continuity check, and a damped least-squares solver.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cnf::{FlowModel, FEATURES_PER_TARGET};
use crate::error::{check_dim, Error, Result};
use crate::kinematics::{orientation_error, position_error, rotation_error_vector, KinematicModel, Pose};

/// Default continuity threshold on the per-step joint change, in radians
/// (infinity norm).
pub const DEFAULT_STEP_THRESHOLD: f64 = 0.25;

/// Where the latent of every batch entry comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Latents {
    /// Drawn from `N(0, I)` with a seeded generator, entry by entry.
    Sampled { seed: u64 },
    /// One latent per entry, or a single latent used for every entry.
    Provided(Vec<Vec<f64>>),
    /// The same latent for every entry.
    Shared(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRequest {
    /// One list of `m` target poses per entry.
    pub targets: Vec<Vec<Pose>>,
    pub latents: Latents,
}

/// Per-entry solutions and errors. Entries whose integration failed hold
/// `NaN` joints and errors and are listed in `failures`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult {
    pub q: Vec<Vec<f64>>,
    /// Position error averaged over the entry's targets (m).
    pub pos_err: Vec<f64>,
    /// Orientation error averaged over the entry's targets (rad).
    pub ori_err: Vec<f64>,
    /// Per-target position errors of every entry.
    pub target_pos_err: Vec<Vec<f64>>,
    pub target_ori_err: Vec<Vec<f64>>,
    pub failures: Vec<usize>,
}

impl BatchResult {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    fn succeeded(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|i| self.failures.binary_search(i).is_err())
    }

    /// Mean of `pos_err` over successful entries.
    pub fn mean_pos_err(&self) -> f64 {
        mean(self.succeeded().map(|i| self.pos_err[i]))
    }

    pub fn mean_ori_err(&self) -> f64 {
        mean(self.succeeded().map(|i| self.ori_err[i]))
    }

    /// Mean position error of target `k` over successful entries.
    pub fn mean_target_pos_err(&self, k: usize) -> f64 {
        mean(self.succeeded().map(|i| self.target_pos_err[i][k]))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Linearly interpolated percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `count` latents of dimension `n`, drawn in order from a seeded generator.
/// The stream differs from the one [`sample_targets`] uses with the same
/// seed.
pub fn sample_latents(count: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..count)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn resolve_latents(latents: &Latents, k: usize, n: usize) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = match latents {
        Latents::Sampled { seed } => sample_latents(k, n, *seed),
        Latents::Shared(z) => vec![z.clone(); k],
        Latents::Provided(list) if list.len() == 1 => vec![list[0].clone(); k],
        Latents::Provided(list) => {
            check_dim("provided latents", k, list.len())?;
            list.clone()
        }
    };
    let mut z = Array2::zeros((k, n));
    for (mut row, v) in z.rows_mut().into_iter().zip(&rows) {
        check_dim("latent", n, v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("latent vectors must be finite".into()));
        }
        row.iter_mut().zip(v).for_each(|(d, s)| *d = *s);
    }
    Ok(z)
}

/// Solves every entry with one flow evaluation and scores the prediction
/// by forward kinematics.
pub fn solve_batch(model: &FlowModel, robot: &KinematicModel, req: &BatchRequest) -> Result<BatchResult> {
    model.check_robot(robot)?;
    let k = req.targets.len();
    let n = model.dof();
    let m = model.num_targets();
    let z = resolve_latents(&req.latents, k, n)?;
    let x = model.conditions(&req.targets)?;
    let rows = model.forward_batch(z.view(), x.view())?;

    let mut out = BatchResult {
        q: Vec::with_capacity(k),
        pos_err: Vec::with_capacity(k),
        ori_err: Vec::with_capacity(k),
        target_pos_err: Vec::with_capacity(k),
        target_ori_err: Vec::with_capacity(k),
        failures: Vec::new(),
    };
    for (i, (row, targets)) in rows.into_iter().zip(&req.targets).enumerate() {
        let q = match row {
            Ok(q) if q.iter().all(|v| v.is_finite()) => q,
            _ => {
                out.failures.push(i);
                out.q.push(vec![f64::NAN; n]);
                out.pos_err.push(f64::NAN);
                out.ori_err.push(f64::NAN);
                out.target_pos_err.push(vec![f64::NAN; m]);
                out.target_ori_err.push(vec![f64::NAN; m]);
                continue;
            }
        };
        let reached = robot.forward_kinematics(&q)?;
        let pe: Vec<f64> = reached.iter().zip(targets).map(|(a, b)| position_error(a, b)).collect();
        let oe: Vec<f64> = reached
            .iter()
            .zip(targets)
            .map(|(a, b)| orientation_error(a, b))
            .collect();
        out.pos_err.push(pe.iter().sum::<f64>() / m as f64);
        out.ori_err.push(oe.iter().sum::<f64>() / m as f64);
        out.target_pos_err.push(pe);
        out.target_ori_err.push(oe);
        out.q.push(q);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Continuity {
    Continuous,
    /// The step into waypoint `index` exceeds the threshold, or waypoint
    /// `index` could not be solved.
    Discontinuous {
        index: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathReport {
    pub result: BatchResult,
    pub continuity: Continuity,
    /// Largest infinity-norm change between consecutive waypoints.
    pub max_joint_step: f64,
    pub within_limits: bool,
    pub step_threshold: f64,
}

impl PathReport {
    pub fn is_continuous(&self) -> bool {
        self.continuity == Continuity::Continuous
    }
}

/// Largest infinity-norm step between consecutive rows.
pub fn max_joint_step(q: &[Vec<f64>]) -> f64 {
    q.windows(2)
        .map(|w| joint_step(&w[0], &w[1]))
        .fold(0.0, |acc, v| if v.is_nan() || v > acc { v } else { acc })
}

fn joint_step(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (y - x).abs())
        .fold(0.0, |acc, v| if v.is_nan() || v > acc { v } else { acc })
}

/// Converts a Cartesian path to a joint path with one shared latent.
pub fn solve_path(
    model: &FlowModel,
    robot: &KinematicModel,
    path: &[Vec<Pose>],
    z: &[f64],
    step_threshold: f64,
) -> Result<PathReport> {
    solve_path_with(model, robot, path, Latents::Shared(z.to_vec()), step_threshold)
}

/// [`solve_path`] with an arbitrary latent source, e.g. one latent per
/// waypoint.
pub fn solve_path_with(
    model: &FlowModel,
    robot: &KinematicModel,
    path: &[Vec<Pose>],
    latents: Latents,
    step_threshold: f64,
) -> Result<PathReport> {
    if path.len() < 2 {
        return Err(Error::Config("a path needs at least two waypoints".into()));
    }
    if !(step_threshold >= 0.0) {
        return Err(Error::Config("step threshold must be nonnegative".into()));
    }
    let result = solve_batch(
        model,
        robot,
        &BatchRequest {
            targets: path.to_vec(),
            latents,
        },
    )?;
    let q = &result.q;
    let jump = (1..q.len()).find(|&i| !(joint_step(&q[i - 1], &q[i]) <= step_threshold));
    let continuity = [result.failures.first().copied(), jump]
        .into_iter()
        .flatten()
        .min()
        .map_or(Continuity::Continuous, |index| Continuity::Discontinuous { index });
    let within_limits = result.failures.is_empty() && result.q.iter().all(|q| robot.within_limits(q, 0.0));
    Ok(PathReport {
        max_joint_step: max_joint_step(&result.q),
        result,
        continuity,
        within_limits,
        step_threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryOutcome {
    pub report: PathReport,
    /// Zero-based index of the chosen attempt.
    pub attempt: usize,
    pub attempts: usize,
    /// The shared latent of the chosen attempt.
    pub z: Vec<f64>,
}

/// Draws a fresh shared latent per attempt and returns the first continuous
/// path, or else the attempt with the smallest `max_joint_step`.
pub fn retry_path(
    model: &FlowModel,
    robot: &KinematicModel,
    path: &[Vec<Pose>],
    max_retries: usize,
    seed: u64,
    step_threshold: f64,
) -> Result<RetryOutcome> {
    if max_retries == 0 {
        return Err(Error::Config("retries must be at least 1".into()));
    }
    let latents = sample_latents(max_retries, model.dof(), seed);
    let mut best: Option<RetryOutcome> = None;
    for (attempt, z) in latents.into_iter().enumerate() {
        let report = solve_path(model, robot, path, &z, step_threshold)?;
        let done = report.is_continuous();
        let better = match &best {
            None => true,
            Some(b) => done || report.max_joint_step < b.report.max_joint_step,
        };
        if better {
            best = Some(RetryOutcome {
                report,
                attempt,
                attempts: attempt + 1,
                z,
            });
        }
        if done {
            break;
        }
    }
    let mut best = best.expect("at least one attempt");
    if !best.report.is_continuous() {
        best.attempts = max_retries;
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlsParams {
    pub damping: f64,
    pub max_iters: usize,
    pub tol_pos: f64,
    pub tol_ori: f64,
    /// Largest joint change per iteration (infinity norm); longer updates
    /// are scaled down.
    pub max_step: f64,
    /// Ignore orientation: only the position rows are stacked and tested.
    pub position_only: bool,
}

impl Default for DlsParams {
    fn default() -> Self {
        Self {
            damping: 0.1,
            max_iters: 200,
            tol_pos: 1e-6,
            tol_ori: 1e-6,
            max_step: 0.5,
            position_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DlsResult {
    pub q: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest position error over the targets at the returned `q`.
    pub pos_err: f64,
    pub ori_err: f64,
}

/// Damped least squares: `q <- clamp(q + J^T (J J^T + lambda^2 I)^-1 e)`
/// with the per-target 6-vector errors `e` stacked.
///
/// The damping used in an iteration is `lambda^2 * clamp(|e|, 1e-4, 1)`, so
/// it reaches the configured value for large errors and fades near the
/// solution, where fixed damping stalls at singular configurations. Updates
/// are capped at `max_step`, and full-turn revolute joints wrap instead of
/// clamping; see [`KinematicModel::enforce_limits`].
pub fn dls_solve(robot: &KinematicModel, targets: &[Pose], q_init: &[f64], params: &DlsParams) -> Result<DlsResult> {
    check_dim("DLS targets", robot.num_targets(), targets.len())?;
    check_dim("DLS initial joints", robot.dof(), q_init.len())?;
    if !(params.damping > 0.0 && params.max_step > 0.0) {
        return Err(Error::Config("DLS damping and max_step must be positive".into()));
    }
    let n = robot.dof();
    let rows_per = if params.position_only { 3 } else { 6 };
    let rows = rows_per * targets.len();
    let mut q = q_init.to_vec();
    robot.enforce_limits(&mut q);
    let lambda2 = params.damping * params.damping;

    let mut iterations = 0;
    loop {
        let reached = robot.forward_kinematics(&q)?;
        let pos_err = reached
            .iter()
            .zip(targets)
            .map(|(a, b)| position_error(a, b))
            .fold(0.0, f64::max);
        let ori_err = if params.position_only {
            0.0
        } else {
            reached
                .iter()
                .zip(targets)
                .map(|(a, b)| orientation_error(a, b))
                .fold(0.0, f64::max)
        };
        let converged = pos_err <= params.tol_pos && ori_err <= params.tol_ori;
        if converged || iterations == params.max_iters {
            return Ok(DlsResult {
                q,
                converged,
                iterations,
                pos_err,
                ori_err,
            });
        }

        let mut jac = DMatrix::zeros(rows, n);
        let mut err = DVector::zeros(rows);
        for (k, (cur, tgt)) in reached.iter().zip(targets).enumerate() {
            let jk = robot.jacobian(&q, k)?;
            let r0 = k * rows_per;
            jac.view_mut((r0, 0), (rows_per, n)).copy_from(&jk.rows(0, rows_per));
            err.rows_mut(r0, 3).copy_from(&(tgt.position - cur.position));
            if !params.position_only {
                err.rows_mut(r0 + 3, 3).copy_from(&rotation_error_vector(cur, tgt));
            }
        }
        let lambda2 = lambda2 * err.norm().clamp(1e-4, 1.0);
        let mut a = &jac * jac.transpose();
        for i in 0..rows {
            a[(i, i)] += lambda2;
        }
        let y = a
            .cholesky()
            .expect("damped normal matrix is positive definite")
            .solve(&err);
        let mut dq = jac.transpose() * y;
        let longest = dq.amax();
        if longest > params.max_step {
            dq *= params.max_step / longest;
        }
        for (v, d) in q.iter_mut().zip(dq.iter()) {
            *v += d;
        }
        robot.enforce_limits(&mut q);
        iterations += 1;
    }
}

const TARGET_COLUMNS: [&str; FEATURES_PER_TARGET] = ["px", "py", "pz", "qw", "qx", "qy", "qz"];

/// Header of a target CSV with `m` poses per row.
pub fn targets_header(m: usize) -> Vec<&'static str> {
    TARGET_COLUMNS
        .iter()
        .copied()
        .cycle()
        .take(FEATURES_PER_TARGET * m)
        .collect()
}

/// Reads one target set per row: `px,py,pz,qw,qx,qy,qz` repeated `m` times.
/// A header row is optional. Errors name the 1-based line number.
pub fn read_targets<R: Read>(reader: R, m: usize) -> Result<Vec<Vec<Pose>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let width = FEATURES_PER_TARGET * m;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv {
            row: e.position().map_or(i + 1, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let row = rec.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && rec.iter().next().is_some_and(|f| f.parse::<f64>().is_err()) {
            let expect = targets_header(m);
            if rec.iter().ne(expect.iter().copied()) {
                return Err(Error::Csv {
                    row,
                    reason: format!("header must be `{}`", expect.join(",")),
                });
            }
            continue;
        }
        if rec.len() != width {
            return Err(Error::Csv {
                row,
                reason: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let mut vals = Vec::with_capacity(width);
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Csv {
                row,
                reason: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row,
                    reason: "non-finite value".into(),
                });
            }
            vals.push(v);
        }
        let poses = vals
            .chunks(FEATURES_PER_TARGET)
            .map(|c| {
                let norm = (c[3] * c[3] + c[4] * c[4] + c[5] * c[5] + c[6] * c[6]).sqrt();
                if norm < 1e-9 {
                    return Err(Error::Csv {
                        row,
                        reason: "zero quaternion".into(),
                    });
                }
                Ok(Pose::from_parts([c[0], c[1], c[2]], [c[3], c[4], c[5], c[6]]))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(poses);
    }
    Ok(out)
}

pub fn load_targets(path: impl AsRef<Path>, m: usize) -> Result<Vec<Vec<Pose>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_targets(std::io::BufReader::new(file), m)
}

/// Writes target sets with a header; numbers use shortest round-trip
/// formatting.
pub fn write_targets<W: Write>(writer: W, targets: &[Vec<Pose>]) -> std::io::Result<()> {
    let m = targets.first().map_or(1, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(targets_header(m))?;
    for row in targets {
        w.write_record(row.iter().flat_map(|p| p.features()).map(|v| v.to_string()))?;
    }
    w.flush()
}

/// Reachable target sets: FK of joints drawn uniformly within limits.
pub fn sample_targets(robot: &KinematicModel, count: usize, seed: u64) -> Vec<Vec<Pose>> {
    robot
        .sample_joints(count, seed)
        .iter()
        .map(|q| robot.forward_kinematics(q).expect("sampled joints match dof"))
        .collect()
}
