use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use flowik::cnf::FlowModel;
use flowik::iksolver::{self, retry_path, BatchResult, DlsParams};
use flowik::kinematics::KinematicModel;
use flowik::odeint::SolverConfig;
use flowik::trainer::{self, ErrorSummary, TrainConfig, TrainOptions};
use rayon::prelude::*;
use serde_json::json;

use crate::manifest::{beside, RunManifest};
use crate::{BenchArgs, EvaluateArgs, FkArgs, PathArgs, SolveArgs, TargetsArgs, TrainArgs, EXIT_DISCONTINUOUS};

fn load_robot(path: &Path) -> Result<KinematicModel> {
    KinematicModel::load(path).with_context(|| format!("loading robot {}", path.display()))
}

fn load_model(path: &Path, robot: &KinematicModel, solver: Option<&SolverConfig>) -> Result<FlowModel> {
    let mut model = FlowModel::load_for(path, robot).with_context(|| format!("loading model {}", path.display()))?;
    if let Some(s) = solver {
        model.infer_solver = s.clone();
    }
    Ok(model)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let robot = load_robot(&a.robot)?;
    let cfg = TrainConfig::load(&a.config).with_context(|| format!("loading config {}", a.config.display()))?;
    cfg.validate()?;
    let paths = trainer::TrainPaths::in_dir(&a.out);
    let mut manifest = RunManifest::new("train", Some(cfg.rng_seed), &a.robot)?.input("config", &a.config)?;
    if let Some(r) = &a.resume {
        manifest = manifest.input("resume", r)?;
    }
    let manifest_path = a.out.join("manifest.json");
    manifest
        .artifact(&paths.checkpoint)
        .artifact(&paths.metrics)
        .artifact(&manifest_path)
        .write(&manifest_path)?;

    let mut report = |m: &trainer::TrainMetrics| {
        eprintln!(
            "iter {:>7}  loss {:>9.4}  pos_err {:.4} m (p95 {:.4})  ori_err {:.4} rad  {:.1} s",
            m.iteration, m.loss, m.pos_err_mean, m.pos_err_p95, m.ori_err_mean, m.wall_s
        );
    };
    let opts = TrainOptions {
        resume: a.resume.clone(),
        stop_after: a.stop_after,
        on_metrics: Some(&mut report),
    };
    let summary = trainer::train_loop(&robot, &cfg, &a.out, opts)?;
    println!(
        "trained {} iterations ({} skipped steps); checkpoint {}, metrics {}",
        summary.iterations,
        summary.skipped,
        summary.paths.checkpoint.display(),
        summary.paths.metrics.display()
    );
    Ok(0)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<u8> {
    let robot = load_robot(&a.robot)?;
    let model = load_model(&a.model, &robot, a.solver.as_ref())?;
    if let Some(out) = &a.out {
        RunManifest::new("evaluate", Some(a.seed), &a.robot)?
            .input("model", &a.model)?
            .artifact(out)
            .write(&beside(out))?;
    }
    let summary = trainer::evaluate(&model, &robot, a.targets, a.samples, a.seed)?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(0)
}

/// The stderr summary of `solve`; numbers use shortest round-trip formatting
/// so they compare exactly with the library's statistics.
pub fn summary_line(s: &ErrorSummary) -> String {
    format!(
        "solutions {} failures {} pos_err_mean_m {} pos_err_p95_m {} ori_err_mean_rad {} ori_err_p95_rad {}",
        s.solutions, s.failures, s.pos_err_mean, s.pos_err_p95, s.ori_err_mean, s.ori_err_p95
    )
}

fn solutions_csv(res: &BatchResult, dof: usize, samples: usize) -> String {
    let mut text = String::from("target,sample");
    for j in 1..=dof {
        write!(text, ",q{j}").unwrap();
    }
    text.push_str(",pos_err_m,ori_err_rad\n");
    for (i, q) in res.q.iter().enumerate() {
        write!(text, "{},{}", i / samples, i % samples).unwrap();
        for v in q {
            write!(text, ",{v}").unwrap();
        }
        writeln!(text, ",{},{}", res.pos_err[i], res.ori_err[i]).unwrap();
    }
    text
}

pub fn solve(a: &SolveArgs) -> Result<u8> {
    if a.samples == 0 {
        bail!(flowik::Error::Config("--samples must be at least 1".into()));
    }
    let robot = load_robot(&a.robot)?;
    let model = load_model(&a.model, &robot, a.solver.as_ref())?;
    let targets = iksolver::load_targets(&a.targets, robot.num_targets())
        .with_context(|| format!("reading targets {}", a.targets.display()))?;
    if let Some(out) = &a.out {
        RunManifest::new("solve", Some(a.seed), &a.robot)?
            .input("model", &a.model)?
            .input("targets", &a.targets)?
            .artifact(out)
            .write(&beside(out))?;
    }
    let res = trainer::solve_targets(&model, &robot, &targets, a.samples, a.seed)?;
    emit(a.out.as_deref(), &solutions_csv(&res, robot.dof(), a.samples))?;
    eprintln!("{}", summary_line(&ErrorSummary::of(&res)));
    Ok(0)
}

pub fn path(a: &PathArgs) -> Result<u8> {
    let robot = load_robot(&a.robot)?;
    let model = load_model(&a.model, &robot, a.solver.as_ref())?;
    let waypoints = iksolver::load_targets(&a.path, robot.num_targets())
        .with_context(|| format!("reading path {}", a.path.display()))?;
    if a.retries == 0 {
        bail!(flowik::Error::Config("--retries must be at least 1".into()));
    }
    let report_path = a.out.join("path_report.json");
    let joints_path = a.out.join("path_joints.csv");
    let manifest_path = a.out.join("manifest.json");
    RunManifest::new("path", Some(a.seed), &a.robot)?
        .input("model", &a.model)?
        .input("path", &a.path)?
        .artifact(&report_path)
        .artifact(&joints_path)
        .artifact(&manifest_path)
        .write(&manifest_path)?;

    let outcome = retry_path(&model, &robot, &waypoints, a.retries, a.seed, a.step_threshold)?;
    let rep = &outcome.report;
    let errors = ErrorSummary::of(&rep.result);
    let doc = json!({
        "continuity": rep.continuity,
        "max_joint_step": rep.max_joint_step,
        "step_threshold": rep.step_threshold,
        "within_limits": rep.within_limits,
        "attempt": outcome.attempt,
        "attempts": outcome.attempts,
        "latent": outcome.z,
        "waypoints": rep.result.len(),
        "errors": errors,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_text(&report_path, &text)?;

    let mut csv = String::from("waypoint");
    for j in 1..=robot.dof() {
        write!(csv, ",q{j}").unwrap();
    }
    csv.push_str(",pos_err_m,ori_err_rad\n");
    for (i, q) in rep.result.q.iter().enumerate() {
        write!(csv, "{i}").unwrap();
        for v in q {
            write!(csv, ",{v}").unwrap();
        }
        writeln!(csv, ",{},{}", rep.result.pos_err[i], rep.result.ori_err[i]).unwrap();
    }
    write_text(&joints_path, &csv)?;

    if rep.is_continuous() {
        println!(
            "continuous path on attempt {} of {}; max joint step {:.4}, mean position error {:.3} mm",
            outcome.attempt + 1,
            a.retries,
            rep.max_joint_step,
            errors.pos_err_mean * 1e3
        );
        Ok(0)
    } else {
        eprintln!(
            "no continuous path in {} attempts; best max joint step {:.4} > {}; best attempt written to {}",
            outcome.attempts,
            rep.max_joint_step,
            a.step_threshold,
            joints_path.display()
        );
        Ok(EXIT_DISCONTINUOUS)
    }
}

/// `STATE:CONDITION:W1,W2,...` to a dynamics configuration.
fn parse_architecture(text: &str) -> Result<flowik::dynamics::DynamicsConfig> {
    let parts: Vec<&str> = text.split(':').collect();
    let [state, cond, widths] = parts.as_slice() else {
        bail!(flowik::Error::Config(format!(
            "architecture `{text}` is not STATE:CONDITION:W1,W2,..."
        )));
    };
    let int = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| flowik::Error::Config(format!("`{s}` is not a nonnegative integer")))
    };
    let widths = widths.split(',').map(int).collect::<Result<Vec<_>, _>>()?;
    let cfg = flowik::dynamics::DynamicsConfig::new(int(state)?, int(cond)?, widths);
    cfg.validate()?;
    Ok(cfg)
}

struct Row {
    metric: &'static str,
    value: String,
    display: String,
}

fn row(metric: &'static str, value: impl ToString, display: impl Into<String>) -> Row {
    Row {
        metric,
        value: value.to_string(),
        display: display.into(),
    }
}

pub fn bench(a: &BenchArgs) -> Result<u8> {
    let mut rows = Vec::new();
    if let Some(arch) = &a.architecture {
        let cfg = parse_architecture(arch)?;
        let n = cfg.parameter_count();
        rows.push(row("parameters", n, format!("parameters        {n}")));
    } else {
        let (model_path, robot_path) = match (&a.model, &a.robot) {
            (Some(m), Some(r)) => (m, r),
            _ => bail!(flowik::Error::Config(
                "bench needs --model and --robot, or --architecture".into()
            )),
        };
        let robot = load_robot(robot_path)?;
        let model = load_model(model_path, &robot, a.solver.as_ref())?;
        if let Some(out) = &a.out {
            RunManifest::new("bench", Some(a.seed), robot_path)?
                .input("model", model_path)?
                .artifact(out)
                .write(&beside(out))?;
        }
        let targets = iksolver::sample_targets(&robot, a.targets, a.seed);
        let clock = Instant::now();
        let res = trainer::solve_targets(&model, &robot, &targets, a.samples, a.seed)?;
        let secs = clock.elapsed().as_secs_f64();
        let s = ErrorSummary::of(&res);
        let rate = res.len() as f64 / secs;
        rows.extend([
            row(
                "targets",
                a.targets,
                format!("targets           {} x {} samples", a.targets, a.samples),
            ),
            row("samples", a.samples, String::new()),
            row(
                "solutions",
                s.solutions,
                format!("solutions         {} ({} failed)", s.solutions, s.failures),
            ),
            row("failures", s.failures, String::new()),
            row(
                "pos_err_mean_mm",
                s.pos_err_mean * 1e3,
                format!(
                    "position error    mean {:.3} mm, p95 {:.3} mm",
                    s.pos_err_mean * 1e3,
                    s.pos_err_p95 * 1e3
                ),
            ),
            row("pos_err_p95_mm", s.pos_err_p95 * 1e3, String::new()),
            row(
                "ori_err_mean_deg",
                s.ori_err_mean.to_degrees(),
                format!(
                    "orientation error mean {:.3} deg, p95 {:.3} deg",
                    s.ori_err_mean.to_degrees(),
                    s.ori_err_p95.to_degrees()
                ),
            ),
            row("ori_err_p95_deg", s.ori_err_p95.to_degrees(), String::new()),
            row(
                "parameters",
                model.parameter_count(),
                format!("parameters        {}", model.parameter_count()),
            ),
            row(
                "solutions_per_s",
                rate,
                format!("throughput        {rate:.1} solutions/s ({} in {secs:.3} s)", res.len()),
            ),
        ]);
        if a.baseline {
            let inits = robot.sample_joints(targets.len(), a.seed ^ 0x5eed);
            let params = DlsParams::default();
            let clock = Instant::now();
            let sols = targets
                .par_iter()
                .zip(&inits)
                .map(|(t, q0)| iksolver::dls_solve(&robot, t, q0, &params))
                .collect::<flowik::Result<Vec<_>>>()?;
            let secs = clock.elapsed().as_secs_f64();
            let converged = sols.iter().filter(|r| r.converged).count() as f64 / sols.len().max(1) as f64;
            let pos = sols.iter().map(|r| r.pos_err).sum::<f64>() / sols.len().max(1) as f64;
            let rate = sols.len() as f64 / secs;
            rows.extend([
                row(
                    "dls_converged_frac",
                    converged,
                    format!(
                        "dls baseline      {:.1} % converged from random starts",
                        converged * 100.0
                    ),
                ),
                row(
                    "dls_pos_err_mean_mm",
                    pos * 1e3,
                    format!("dls position err  mean {:.6} mm", pos * 1e3),
                ),
                row(
                    "dls_solutions_per_s",
                    rate,
                    format!("dls throughput    {rate:.1} solutions/s"),
                ),
            ]);
        }
    }
    for r in rows.iter().filter(|r| !r.display.is_empty()) {
        println!("{}", r.display);
    }
    if let Some(out) = &a.out {
        let mut csv = String::from("metric,value\n");
        for r in &rows {
            writeln!(csv, "{},{}", r.metric, r.value).unwrap();
        }
        write_text(out, &csv)?;
    }
    Ok(0)
}

/// `v` rounded to 9 significant digits, printed without trailing zeros.
fn sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{}", rounded + 0.0)
}

fn fixed9(v: f64) -> String {
    let s = format!("{v:.9}");
    if s.trim_start_matches('-').bytes().all(|b| b == b'0' || b == b'.') {
        s.trim_start_matches('-').to_owned()
    } else {
        s
    }
}

pub fn fk(a: &FkArgs) -> Result<u8> {
    let robot = load_robot(&a.robot)?;
    let q =
        a.q.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| flowik::Error::Config(format!("joint value `{s}` is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
    let poses = robot.forward_kinematics(&q)?;
    for p in poses {
        let pos = [p.position.x, p.position.y, p.position.z];
        let rot = p.wxyz();
        let (pos, rot): (Vec<String>, Vec<String>) = if a.full {
            (
                pos.iter().map(f64::to_string).collect(),
                rot.iter().map(f64::to_string).collect(),
            )
        } else {
            (
                pos.iter().map(|&v| fixed9(v)).collect(),
                rot.iter().map(|&v| sig9(v)).collect(),
            )
        };
        println!("{}  {}", pos.join(" "), rot.join(" "));
    }
    Ok(0)
}

pub fn targets(a: &TargetsArgs) -> Result<u8> {
    let robot = load_robot(&a.robot)?;
    if let Some(out) = &a.out {
        RunManifest::new("targets", Some(a.seed), &a.robot)?
            .artifact(out)
            .write(&beside(out))?;
    }
    let targets = iksolver::sample_targets(&robot, a.count, a.seed);
    let mut buf = Vec::new();
    iksolver::write_targets(&mut buf, &targets)?;
    emit(a.out.as_deref(), std::str::from_utf8(&buf)?)?;
    Ok(0)
}
