//! The conditional flow model: sampling `z -> q`, the inverse `q -> z` with
//! its log-determinant, log-densities, the training loss, and checkpoints.
//!
//! `inverse` returns `logdet = int_0^1 tr(dh/dz) dt`, so
//! `log p(q | x) = log N(z; 0, I) - logdet`.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Activation, Conditioner, DynamicsConfig, DynamicsNet, LayerArrays};
use crate::error::{check_dim, Error, Result};
use crate::kinematics::{KinematicModel, Pose};
use crate::odeint::{flow_batch, integrate_augmented_batch, Direction, OdeError, SolverConfig, TraceMode, TraceProbes};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Pose features per end-effector target.
pub const FEATURES_PER_TARGET: usize = 7;

/// Rows per joint integration in batched routines that use a fixed-step
/// solver. Adaptive solves run one row at a time so that every sample gets
/// its own step sequence.
pub(crate) const FIXED_STEP_CHUNK: usize = 32;

/// Binds a model to the robot it was trained for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotSignature {
    pub name: String,
    pub dof: usize,
    pub targets: usize,
}

impl RobotSignature {
    pub fn of(robot: &KinematicModel) -> Self {
        Self {
            name: robot.name().to_owned(),
            dof: robot.dof(),
            targets: robot.num_targets(),
        }
    }

    pub fn check(&self, robot: &KinematicModel) -> Result<()> {
        let other = Self::of(robot);
        if *self == other {
            Ok(())
        } else {
            Err(Error::Signature {
                checkpoint: self.to_string(),
                robot: other.to_string(),
            })
        }
    }
}

impl fmt::Display for RobotSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}` (dof {}, {} targets)", self.name, self.dof, self.targets)
    }
}

/// Affine map applied to pose features before they reach the network:
/// `x' = (x - shift) * scale`, elementwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ConditionScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        check_dim("condition shift", dim, self.shift.len())?;
        check_dim("condition scale", dim, self.scale.len())?;
        if self.shift.iter().chain(&self.scale).any(|v| !v.is_finite()) || self.scale.contains(&0.0) {
            return Err(Error::Config(
                "condition scaling must be finite with nonzero scale".into(),
            ));
        }
        Ok(())
    }

    fn apply(&self, x: &mut [f64]) {
        for ((v, s), k) in x.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = (*v - s) * k;
        }
    }
}

/// Optimizer state stored next to the weights so training can resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub iteration: usize,
    pub samples: u64,
    pub adam_step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Sum and count of the losses since the last metrics row.
    #[serde(default)]
    pub loss_window: (f64, usize),
}

/// A trained (or freshly initialized) conditional flow for one robot.
#[derive(Clone, Debug)]
pub struct FlowModel {
    net: DynamicsNet,
    signature: RobotSignature,
    scaling: ConditionScaling,
    /// Solver used by the loss and training.
    pub train_solver: SolverConfig,
    /// Solver used by sampling, inversion and log-densities.
    pub infer_solver: SolverConfig,
}

/// `log N(z; 0, I)`.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Applies `f` to consecutive row ranges of length `chunk` (the last may be
/// shorter), in parallel, returning results in row order.
pub(crate) fn map_chunks<T, F>(rows: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    let chunk = chunk.max(1);
    let count = rows.div_ceil(chunk);
    (0..count)
        .into_par_iter()
        .map(|c| f(c * chunk..((c + 1) * chunk).min(rows)))
        .collect()
}

fn chunk_len(solver: &SolverConfig) -> usize {
    if solver.is_fixed_step() {
        FIXED_STEP_CHUNK
    } else {
        1
    }
}

impl FlowModel {
    /// Randomly initialized model whose initial flow is the identity.
    pub fn new<R: Rng + ?Sized>(
        robot: &KinematicModel,
        hidden_widths: Vec<usize>,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut cfg = DynamicsConfig::new(robot.dof(), FEATURES_PER_TARGET * robot.num_targets(), hidden_widths);
        cfg.activation = activation;
        Self::from_net(DynamicsNet::new(cfg, rng)?, RobotSignature::of(robot))
    }

    pub fn from_net(net: DynamicsNet, signature: RobotSignature) -> Result<Self> {
        let cfg = net.config();
        if cfg.state_dim != signature.dof || cfg.condition_dim != FEATURES_PER_TARGET * signature.targets {
            return Err(Error::Checkpoint(format!(
                "dynamics dimensions (state {}, condition {}) do not fit robot {signature}",
                cfg.state_dim, cfg.condition_dim
            )));
        }
        let scaling = ConditionScaling::identity(cfg.condition_dim);
        Ok(Self {
            net,
            signature,
            scaling,
            train_solver: SolverConfig::training_default(),
            infer_solver: SolverConfig::inference_default(),
        })
    }

    pub fn with_scaling(mut self, scaling: ConditionScaling) -> Result<Self> {
        scaling.validate(self.net.config().condition_dim)?;
        self.scaling = scaling;
        Ok(self)
    }

    pub fn net(&self) -> &DynamicsNet {
        &self.net
    }

    pub fn config(&self) -> &DynamicsConfig {
        self.net.config()
    }

    pub fn signature(&self) -> &RobotSignature {
        &self.signature
    }

    pub fn scaling(&self) -> &ConditionScaling {
        &self.scaling
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    pub fn dof(&self) -> usize {
        self.signature.dof
    }

    pub fn num_targets(&self) -> usize {
        self.signature.targets
    }

    pub fn check_robot(&self, robot: &KinematicModel) -> Result<()> {
        self.signature.check(robot)
    }

    /// Scaled condition row for one set of targets.
    pub fn condition_row(&self, targets: &[Pose]) -> Result<Vec<f64>> {
        check_dim("target poses", self.signature.targets, targets.len())?;
        let mut row: Vec<f64> = targets.iter().flat_map(|p| p.features()).collect();
        self.scaling.apply(&mut row);
        Ok(row)
    }

    /// Scaled condition rows, one per entry of `targets`.
    pub fn conditions(&self, targets: &[Vec<Pose>]) -> Result<Array2<f64>> {
        let dim = self.net.config().condition_dim;
        let mut x = Array2::zeros((targets.len(), dim));
        for (mut row, t) in x.rows_mut().into_iter().zip(targets) {
            row.assign(&Array1::from(self.condition_row(t)?));
        }
        Ok(x)
    }

    pub(crate) fn conditioner(&self, x: ArrayView2<'_, f64>) -> Conditioner {
        self.net.condition(x.to_owned()).expect("condition width checked")
    }

    fn check_batch(&self, y: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Result<()> {
        check_dim("state columns", self.signature.dof, y.ncols())?;
        check_dim("condition columns", self.net.config().condition_dim, x.ncols())?;
        check_dim("condition rows", y.nrows(), x.nrows())
    }

    /// Maps a latent to a joint configuration by integrating `t: 0 -> 1`
    /// with the inference solver.
    pub fn forward(&self, z: &[f64], targets: &[Pose]) -> Result<Vec<f64>> {
        check_dim("latent", self.signature.dof, z.len())?;
        let x =
            Array2::from_shape_vec((1, self.net.config().condition_dim), self.condition_row(targets)?).expect("row");
        let zr = ArrayView2::from_shape((1, z.len()), z).expect("row");
        let q = flow_batch(
            &self.net,
            zr,
            &self.conditioner(x.view()),
            Direction::Forward,
            &self.infer_solver,
        )?;
        Ok(q.into_raw_vec_and_offset().0)
    }

    /// Integrates every row of `y` in `direction`; rows are independent and
    /// a failing row does not affect the others.
    pub fn flow_rows(
        &self,
        y: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
        direction: Direction,
        solver: &SolverConfig,
    ) -> Result<Vec<Result<Vec<f64>, OdeError>>> {
        self.check_batch(y, x)?;
        let run = |r: Range<usize>| {
            let cond = self.conditioner(x.slice(s![r.clone(), ..]));
            flow_batch(&self.net, y.slice(s![r, ..]), &cond, direction, solver)
        };
        let chunks = map_chunks(y.nrows(), chunk_len(solver), |r| match run(r.clone()) {
            Ok(out) => out.rows().into_iter().map(|row| Ok(row.to_vec())).collect::<Vec<_>>(),
            Err(_) if r.len() > 1 => r
                .map(|i| run(i..i + 1).map(|out| out.into_raw_vec_and_offset().0))
                .collect(),
            Err(e) => vec![Err(e)],
        });
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Batched [`FlowModel::forward`]: row `i` of `z` with condition row `i`.
    pub fn forward_batch(
        &self,
        z: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
    ) -> Result<Vec<Result<Vec<f64>, OdeError>>> {
        self.flow_rows(z, x, Direction::Forward, &self.infer_solver)
    }

    /// Maps a joint configuration back to its latent, integrating `t: 1 -> 0`
    /// with the exact trace. Returns `(z, logdet)`.
    pub fn inverse(&self, q: &[f64], targets: &[Pose]) -> Result<(Vec<f64>, f64)> {
        let solver = self.infer_solver.clone();
        self.inverse_with(q, targets, &TraceMode::Exact, &solver)
    }

    pub fn inverse_with(
        &self,
        q: &[f64],
        targets: &[Pose],
        trace: &TraceMode,
        solver: &SolverConfig,
    ) -> Result<(Vec<f64>, f64)> {
        check_dim("joint vector", self.signature.dof, q.len())?;
        let x =
            Array2::from_shape_vec((1, self.net.config().condition_dim), self.condition_row(targets)?).expect("row");
        let qr = ArrayView2::from_shape((1, q.len()), q).expect("row");
        let probes = TraceProbes::from_mode(trace, 1, q.len());
        let out = integrate_augmented_batch(
            &self.net,
            qr,
            &self.conditioner(x.view()),
            Direction::Backward,
            &probes,
            solver,
        )?;
        Ok((out.z.into_raw_vec_and_offset().0, out.logdet[0]))
    }

    /// `log p(q | targets)` under the inference solver.
    pub fn log_density(&self, q: &[f64], targets: &[Pose], trace: &TraceMode) -> Result<f64> {
        let solver = self.infer_solver.clone();
        let (z, logdet) = self.inverse_with(q, targets, trace, &solver)?;
        Ok(standard_normal_log_density(&z) - logdet)
    }

    /// Log-densities of every row of `q`. Hutchinson probes are drawn for the
    /// whole batch from the mode's seed. A failing row aborts the batch with
    /// its index.
    pub fn log_density_batch(
        &self,
        q: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
        trace: &TraceMode,
        solver: &SolverConfig,
    ) -> Result<Array1<f64>> {
        self.check_batch(q, x)?;
        let probes = TraceProbes::from_mode(trace, q.nrows(), q.ncols());
        let run = |r: Range<usize>| {
            let cond = self.conditioner(x.slice(s![r.clone(), ..]));
            let p = probes.rows(r.clone());
            integrate_augmented_batch(&self.net, q.slice(s![r, ..]), &cond, Direction::Backward, &p, solver)
        };
        let chunks = map_chunks(q.nrows(), chunk_len(solver), |r| {
            run(r.clone()).map_err(|e| {
                let sample = r.clone().find(|&i| run(i..i + 1).is_err()).unwrap_or(r.start);
                Error::NonFiniteSample { sample, source: e }
            })
        });
        let mut out = Vec::with_capacity(q.nrows());
        for chunk in chunks {
            let aug = chunk?;
            for (z, ld) in aug.z.rows().into_iter().zip(aug.logdet.iter()) {
                let v = standard_normal_log_density(z.as_slice().expect("standard layout")) - ld;
                out.push(v);
            }
        }
        Ok(Array1::from(out))
    }

    /// Mean negative log-likelihood of joint samples given their targets,
    /// under the training solver.
    pub fn loss(&self, q: &[Vec<f64>], targets: &[Vec<Pose>], trace: &TraceMode) -> Result<f64> {
        check_dim("loss targets", q.len(), targets.len())?;
        if q.is_empty() {
            return Err(Error::Config("loss of an empty batch".into()));
        }
        let n = self.signature.dof;
        let mut qm = Array2::zeros((q.len(), n));
        for (mut row, v) in qm.rows_mut().into_iter().zip(q) {
            check_dim("joint vector", n, v.len())?;
            row.assign(&ArrayView2::from_shape((1, n), v).expect("row").row(0));
        }
        let x = self.conditions(targets)?;
        let lp = self.log_density_batch(qm.view(), x.view(), trace, &self.train_solver)?;
        let loss = -lp.mean().expect("nonempty");
        if loss.is_finite() {
            Ok(loss)
        } else {
            let sample = lp.iter().position(|v| !v.is_finite()).unwrap_or(0);
            Err(Error::NonFiniteSample {
                sample,
                source: OdeError::NonFinite { t: 0.0 },
            })
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json(None)?)
    }

    pub fn save_with_state(&self, path: impl AsRef<Path>, state: &TrainingState) -> Result<()> {
        write_text(path.as_ref(), &self.to_json(Some(state))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::load_with_state(path)?.0)
    }

    /// Loads a checkpoint and checks that it was made for `robot`.
    pub fn load_for(path: impl AsRef<Path>, robot: &KinematicModel) -> Result<Self> {
        let model = Self::load(path)?;
        model.check_robot(robot)?;
        Ok(model)
    }

    pub fn load_with_state(path: impl AsRef<Path>) -> Result<(Self, Option<TrainingState>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Serialized checkpoint. Numbers use shortest round-trip formatting, so
    /// loading restores every parameter bit for bit.
    pub fn to_json(&self, state: Option<&TrainingState>) -> Result<String> {
        if self.net.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("refusing to save non-finite parameters".into()));
        }
        let layers = (0..self.net.num_layers())
            .map(|l| {
                let v = self.net.layer(l);
                LayerRecord {
                    weight: nested(v.weight),
                    bias: v.bias.to_vec(),
                    cond_scale: nested(v.cond_scale),
                    cond_shift: nested(v.cond_shift),
                }
            })
            .collect();
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            robot: self.signature.clone(),
            dynamics: self.net.config().clone(),
            train_solver: self.train_solver.clone(),
            infer_solver: self.infer_solver.clone(),
            condition_scaling: self.scaling.clone(),
            layers,
            output: nested(self.net.output()),
            training: state.cloned(),
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<TrainingState>)> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        file.dynamics.validate()?;
        for solver in [&file.train_solver, &file.infer_solver] {
            solver.validate()?;
        }
        let layers = file
            .layers
            .into_iter()
            .map(|r| {
                Ok(LayerArrays {
                    weight: matrix(r.weight)?,
                    bias: Array1::from(r.bias),
                    cond_scale: matrix(r.cond_scale)?,
                    cond_shift: matrix(r.cond_shift)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = DynamicsNet::from_layers(file.dynamics, &layers, &matrix(file.output)?)?;
        let mut model = Self::from_net(net, file.robot)?.with_scaling(file.condition_scaling)?;
        model.train_solver = file.train_solver;
        model.infer_solver = file.infer_solver;
        if let Some(state) = &file.training {
            let np = model.parameter_count();
            check_dim("optimizer first moment", np, state.adam_m.len())?;
            check_dim("optimizer second moment", np, state.adam_v.len())?;
        }
        Ok((model, file.training))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    robot: RobotSignature,
    dynamics: DynamicsConfig,
    train_solver: SolverConfig,
    infer_solver: SolverConfig,
    condition_scaling: ConditionScaling,
    layers: Vec<LayerRecord>,
    output: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    cond_scale: Vec<Vec<f64>>,
    cond_shift: Vec<Vec<f64>>,
}

fn nested(m: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Checkpoint("ragged weight matrix".into()));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
