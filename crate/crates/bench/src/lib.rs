//! Fixtures shared by the benchmarks: a randomly perturbed flow model (so
//! the field is not the identity) and matching training-style batches.

use flowik::cnf::FlowModel;
use flowik::kinematics::KinematicModel;
use flowik::odeint::SolverConfig;
use flowik::trainer::{training_batch, TrainConfig};
use flowik::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn planar3r() -> KinematicModel {
    KinematicModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../robots/planar3r.json"))
        .expect("bundled robot loads")
}

/// A model of the given widths whose parameters carry small noise.
pub fn perturbed_model(robot: &KinematicModel, widths: Vec<usize>, steps: usize) -> Result<FlowModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = FlowModel::new(robot, widths, Default::default(), &mut rng)?;
    for p in model.params_mut() {
        *p += 0.05 * (rng.gen::<f64>() - 0.5);
    }
    model.train_solver = SolverConfig::rk4(steps);
    model.infer_solver = SolverConfig::rk4(steps);
    Ok(model)
}

/// Joints and scaled conditions of one training batch.
pub fn batch(
    model: &FlowModel,
    robot: &KinematicModel,
    size: usize,
) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let cfg = TrainConfig {
        batch_size: size,
        ..TrainConfig::default()
    };
    training_batch(model, robot, &cfg, 0)
}
