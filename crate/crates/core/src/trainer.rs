//! Online maximum-likelihood training: every step draws fresh joint samples
//! within the limits, conditions on their forward kinematics, and descends
//! the negative log-likelihood with adjoint gradients and Adam.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnf::{map_chunks, standard_normal_log_density, FlowModel, TrainingState, FIXED_STEP_CHUNK};
use crate::dynamics::Activation;
use crate::error::{Error, Result};
use crate::iksolver::{percentile, sample_targets, solve_batch, BatchRequest, BatchResult, Latents};
use crate::kinematics::{KinematicModel, Pose};
use crate::odeint::{
    integrate_adjoint_batch, integrate_augmented_batch, Direction, OdeError, SolverConfig, TraceMode, TraceProbes,
};

/// Consecutive skipped steps that abort training.
pub const MAX_CONSECUTIVE_SKIPS: usize = 3;

pub const METRICS_HEADER: &str = "iteration,samples,loss,pos_err_mean,pos_err_p95,ori_err_mean,ori_err_p95,wall_s";

/// Architecture and solvers of a freshly initialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "SolverConfig::training_default")]
    pub train_solver: SolverConfig,
    #[serde(default = "SolverConfig::inference_default")]
    pub infer_solver: SolverConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64, 64],
            activation: Activation::Tanh,
            train_solver: SolverConfig::training_default(),
            infer_solver: SolverConfig::inference_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Initial learning rate; cosine-decayed to `learning_rate * final_lr_ratio`.
    pub learning_rate: f64,
    pub final_lr_ratio: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Global-norm gradient clipping; `0` disables it.
    pub grad_clip_norm: f64,
    /// Iterations between metric rows; `0` disables evaluation.
    pub eval_every: usize,
    /// Iterations between checkpoint writes; `0` writes only the final one.
    pub checkpoint_every: usize,
    pub rng_seed: u64,
    /// Trace estimator for the loss. The Hutchinson seed is combined with
    /// the iteration so every step gets fresh probes.
    pub trace_mode: TraceMode,
    pub eval_targets: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub model: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 1000,
            learning_rate: 1e-3,
            final_lr_ratio: 0.1,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            grad_clip_norm: 10.0,
            eval_every: 100,
            checkpoint_every: 0,
            rng_seed: 0,
            trace_mode: TraceMode::Hutchinson { probes: 1, seed: 0 },
            eval_targets: 100,
            eval_samples: 50,
            eval_seed: 7,
            model: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        let [b1, b2] = self.adam_betas;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return bad("final_lr_ratio must lie in [0, 1]");
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad("grad_clip_norm must be nonnegative");
        }
        if self.eval_every > 0 && (self.eval_targets == 0 || self.eval_samples == 0) {
            return bad("eval_targets and eval_samples must be positive");
        }
        if let TraceMode::Hutchinson { probes: 0, .. } = self.trace_mode {
            return bad("Hutchinson trace needs at least one probe");
        }
        self.model.train_solver.validate()?;
        self.model.infer_solver.validate()?;
        let probe = crate::dynamics::DynamicsConfig::new(1, 7, self.model.hidden_widths.clone());
        probe.validate()
    }

    /// Learning rate used by step `iteration` (zero-based).
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let floor = self.learning_rate * self.final_lr_ratio;
        let frac = if self.iterations == 0 {
            0.0
        } else {
            iteration as f64 / self.iterations as f64
        };
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(params: usize, betas: [f64; 2], eps: f64) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `grad` to norm `max_norm` if it is longer; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Mean negative log-likelihood of the rows of `q` and its gradient with
/// respect to the network parameters, by the adjoint method.
///
/// `probes` covers the whole batch; rows are processed in fixed chunks and
/// reduced in row order, so the result does not depend on thread count.
pub fn loss_and_gradient(
    model: &FlowModel,
    q: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    probes: &TraceProbes,
    solver: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    crate::error::check_dim("condition rows", q.nrows(), x.nrows())?;
    let b = q.nrows();
    let inv_b = 1.0 / b as f64;
    let net = model.net();
    let chunks = map_chunks(b, FIXED_STEP_CHUNK, |r| -> Result<(f64, Vec<f64>), OdeError> {
        let cond = model.conditioner(x.slice(s![r.clone(), ..]));
        let p = probes.rows(r.clone());
        let aug = integrate_augmented_batch(net, q.slice(s![r.clone(), ..]), &cond, Direction::Backward, &p, solver)?;
        let mut loss = 0.0;
        for (z, ld) in aug.z.rows().into_iter().zip(aug.logdet.iter()) {
            loss -= standard_normal_log_density(z.as_slice().expect("standard layout")) - ld;
        }
        let dl_dz = &aug.z * inv_b;
        let kappa = Array1::from_elem(r.len(), inv_b);
        let (_, grad) = integrate_adjoint_batch(
            net,
            aug.z.view(),
            dl_dz.view(),
            kappa.view(),
            &cond,
            Direction::Backward,
            &p,
            solver,
        )?;
        Ok((loss, grad))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.parameter_count()];
    for chunk in chunks {
        let (l, g) = chunk?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * inv_b, grad))
}

fn step_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// The training batch of step `iteration`: joints and their scaled
/// conditions.
pub fn training_batch(
    model: &FlowModel,
    robot: &KinematicModel,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut rng = step_rng(cfg.rng_seed, iteration);
    let n = robot.dof();
    let mut q = Array2::zeros((cfg.batch_size, n));
    let mut targets: Vec<Vec<Pose>> = Vec::with_capacity(cfg.batch_size);
    for mut row in q.rows_mut() {
        let sample = robot.sample_joints_with(&mut rng);
        targets.push(robot.forward_kinematics(&sample)?);
        row.iter_mut().zip(&sample).for_each(|(d, s)| *d = *s);
    }
    Ok((q, model.conditions(&targets)?))
}

fn step_probes(cfg: &TrainConfig, iteration: usize, n: usize) -> TraceProbes {
    match cfg.trace_mode {
        TraceMode::Exact => TraceProbes::Exact,
        TraceMode::Hutchinson { probes, seed } => {
            let mut rng = step_rng(seed, iteration);
            TraceProbes::rademacher(cfg.batch_size, n, probes, &mut rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied {
        loss: f64,
        grad_norm: f64,
    },
    /// Non-finite loss or gradient; parameters and optimizer are untouched.
    Skipped {
        reason: String,
    },
}

/// One optimization step on a freshly sampled batch.
pub fn train_step(
    model: &mut FlowModel,
    robot: &KinematicModel,
    cfg: &TrainConfig,
    adam: &mut Adam,
    iteration: usize,
) -> Result<StepOutcome> {
    model.check_robot(robot)?;
    let (q, x) = training_batch(model, robot, cfg, iteration)?;
    let probes = step_probes(cfg, iteration, robot.dof());
    let solver = model.train_solver.clone();
    let (loss, mut grad) = match loss_and_gradient(model, q.view(), x.view(), &probes, &solver) {
        Ok(v) => v,
        Err(Error::Ode(e)) => return Ok(StepOutcome::Skipped { reason: e.to_string() }),
        Err(e) => return Err(e),
    };
    if !loss.is_finite() {
        return Ok(StepOutcome::Skipped {
            reason: format!("non-finite loss {loss}"),
        });
    }
    let grad_norm = clip_global_norm(&mut grad, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Ok(StepOutcome::Skipped {
            reason: "non-finite gradient".into(),
        });
    }
    adam.update(model.params_mut(), &grad, cfg.learning_rate_at(iteration));
    Ok(StepOutcome::Applied { loss, grad_norm })
}

/// Error statistics of a batch of solutions, over successful entries.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub solutions: usize,
    pub failures: usize,
    pub pos_err_mean: f64,
    pub pos_err_p95: f64,
    pub ori_err_mean: f64,
    pub ori_err_p95: f64,
    /// Mean position error of each end-effector target.
    pub target_pos_err_mean: Vec<f64>,
}

impl ErrorSummary {
    pub fn of(res: &BatchResult) -> Self {
        let ok: Vec<usize> = (0..res.len())
            .filter(|i| res.failures.binary_search(i).is_err())
            .collect();
        let pos: Vec<f64> = ok.iter().map(|&i| res.pos_err[i]).collect();
        let ori: Vec<f64> = ok.iter().map(|&i| res.ori_err[i]).collect();
        let m = res.target_pos_err.first().map_or(0, Vec::len);
        Self {
            solutions: res.len(),
            failures: res.failures.len(),
            pos_err_mean: res.mean_pos_err(),
            pos_err_p95: percentile(&pos, 95.0),
            ori_err_mean: res.mean_ori_err(),
            ori_err_p95: percentile(&ori, 95.0),
            target_pos_err_mean: (0..m).map(|k| res.mean_target_pos_err(k)).collect(),
        }
    }
}

/// Solves `samples` latent draws for every target set, ordered target by
/// target, with latents drawn from `seed`.
pub fn solve_targets(
    model: &FlowModel,
    robot: &KinematicModel,
    targets: &[Vec<Pose>],
    samples: usize,
    seed: u64,
) -> Result<BatchResult> {
    let entries = targets
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.clone(), samples))
        .collect();
    solve_batch(
        model,
        robot,
        &BatchRequest {
            targets: entries,
            latents: Latents::Sampled { seed },
        },
    )
}

/// Accuracy on `n_targets` reachable targets (forward kinematics of joints
/// drawn within limits) with `n_samples` latents each, using the model's
/// inference solver.
pub fn evaluate(
    model: &FlowModel,
    robot: &KinematicModel,
    n_targets: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ErrorSummary> {
    let targets = sample_targets(robot, n_targets, seed);
    Ok(ErrorSummary::of(&solve_targets(
        model, robot, &targets, n_samples, seed,
    )?))
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    pub iteration: usize,
    pub samples: u64,
    /// Mean loss of the applied steps since the previous row.
    pub loss: f64,
    pub pos_err_mean: f64,
    pub pos_err_p95: f64,
    pub ori_err_mean: f64,
    pub ori_err_p95: f64,
    pub wall_s: f64,
}

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.samples,
            self.loss,
            self.pos_err_mean,
            self.pos_err_p95,
            self.ori_err_mean,
            self.ori_err_p95,
            self.wall_s
        )
    }

    pub fn parse_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            iteration: f[0].parse().ok()?,
            samples: f[1].parse().ok()?,
            loss: num(2)?,
            pos_err_mean: num(3)?,
            pos_err_p95: num(4)?,
            ori_err_mean: num(5)?,
            ori_err_p95: num(6)?,
            wall_s: num(7)?,
        })
    }
}

/// Reads a metrics log written by [`train_loop`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<TrainMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Csv {
            row: 1,
            reason: format!("metrics header must be `{METRICS_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            TrainMetrics::parse_row(l).ok_or_else(|| Error::Csv {
                row: i + 2,
                reason: "malformed metrics row".into(),
            })
        })
        .collect()
}

/// Files written by [`train_loop`] into its output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl TrainPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            checkpoint: dir.join("model.json"),
            metrics: dir.join("metrics.csv"),
        }
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoint with optimizer state to continue from.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many completed iterations, keeping
    /// the schedule of the full run.
    pub stop_after: Option<usize>,
    /// Called with every metrics row as it is written.
    pub on_metrics: Option<&'a mut dyn FnMut(&TrainMetrics)>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: usize,
    pub skipped: usize,
    pub metrics: Vec<TrainMetrics>,
    pub paths: TrainPaths,
}

fn model_for(robot: &KinematicModel, cfg: &TrainConfig) -> Result<FlowModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = FlowModel::new(robot, cfg.model.hidden_widths.clone(), cfg.model.activation, &mut rng)?;
    model.train_solver = cfg.model.train_solver.clone();
    model.infer_solver = cfg.model.infer_solver.clone();
    Ok(model)
}

fn write_metrics(path: &Path, rows: &[TrainMetrics]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains from scratch (or resumes) and writes `model.json` and
/// `metrics.csv` into `out_dir`.
pub fn train_loop(
    robot: &KinematicModel,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = TrainPaths::in_dir(out_dir);

    let (mut model, mut adam, start, wall_offset, mut window, mut rows) = match &opts.resume {
        None => {
            let model = model_for(robot, cfg)?;
            let adam = Adam::new(model.parameter_count(), cfg.adam_betas, cfg.adam_eps);
            (model, adam, 0, 0.0, (0.0, 0), Vec::new())
        }
        Some(path) => {
            let (mut model, state) = FlowModel::load_with_state(path)?;
            model.check_robot(robot)?;
            let state = state.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume".into()))?;
            if model.config().hidden_widths != cfg.model.hidden_widths
                || model.config().activation != cfg.model.activation
            {
                return Err(Error::Config(
                    "resume checkpoint architecture differs from the configuration".into(),
                ));
            }
            model.train_solver = cfg.model.train_solver.clone();
            model.infer_solver = cfg.model.infer_solver.clone();
            let mut adam = Adam::new(model.parameter_count(), cfg.adam_betas, cfg.adam_eps);
            adam.step = state.adam_step;
            adam.m = state.adam_m;
            adam.v = state.adam_v;
            let rows = if paths.metrics.exists() {
                read_metrics(&paths.metrics)?
                    .into_iter()
                    .filter(|r| r.iteration <= state.iteration)
                    .collect()
            } else {
                Vec::new()
            };
            // Checkpoints carry no clock so they stay byte-reproducible; the
            // elapsed time resumes from the last kept metrics row.
            let wall = rows.last().map_or(0.0, |r: &TrainMetrics| r.wall_s);
            (model, adam, state.iteration, wall, state.loss_window, rows)
        }
    };

    let end = opts
        .stop_after
        .map_or(cfg.iterations, |s| s.min(cfg.iterations))
        .max(start);
    let clock = Instant::now();
    let wall = |offset: f64| offset + clock.elapsed().as_secs_f64();
    let save = |model: &FlowModel, adam: &Adam, iteration: usize, window: (f64, usize)| {
        let state = TrainingState {
            iteration,
            samples: (iteration * cfg.batch_size) as u64,
            adam_step: adam.step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            loss_window: window,
        };
        model.save_with_state(&paths.checkpoint, &state)
    };

    write_metrics(&paths.metrics, &rows)?;
    let mut skipped = 0;
    let mut consecutive = 0;
    for it in start..end {
        match train_step(&mut model, robot, cfg, &mut adam, it)? {
            StepOutcome::Applied { loss, .. } => {
                consecutive = 0;
                window.0 += loss;
                window.1 += 1;
            }
            StepOutcome::Skipped { reason } => {
                skipped += 1;
                consecutive += 1;
                if consecutive >= MAX_CONSECUTIVE_SKIPS {
                    save(&model, &adam, it, window)?;
                    return Err(Error::TrainingAborted {
                        iteration: it,
                        skips: consecutive,
                        reason,
                    });
                }
            }
        }
        let done = it + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let eval = evaluate(&model, robot, cfg.eval_targets, cfg.eval_samples, cfg.eval_seed)?;
            let row = TrainMetrics {
                iteration: done,
                samples: (done * cfg.batch_size) as u64,
                loss: if window.1 == 0 {
                    f64::NAN
                } else {
                    window.0 / window.1 as f64
                },
                pos_err_mean: eval.pos_err_mean,
                pos_err_p95: eval.pos_err_p95,
                ori_err_mean: eval.ori_err_mean,
                ori_err_p95: eval.ori_err_p95,
                wall_s: wall(wall_offset),
            };
            window = (0.0, 0);
            if let Some(cb) = opts.on_metrics.as_mut() {
                cb(&row);
            }
            rows.push(row);
            write_metrics(&paths.metrics, &rows)?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save(&model, &adam, done, window)?;
        }
    }
    save(&model, &adam, end, window)?;
    Ok(TrainSummary {
        iterations: end,
        skipped,
        metrics: rows,
        paths,
    })
}
