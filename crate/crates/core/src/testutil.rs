//! Shared fixtures for unit tests.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{Activation, DynamicsConfig, DynamicsNet, LayerArrays};

/// Every parameter drawn from `N(0, scale^2)`.
pub fn random_net(cfg: DynamicsConfig, scale: f64, seed: u64) -> DynamicsNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..cfg.parameter_count())
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            e * scale
        })
        .collect();
    DynamicsNet::from_params(cfg, params).unwrap()
}

/// One linear hidden layer with `W = I` and output `A` realizes `h = A z`.
pub fn linear_net(a: &Array2<f64>, condition_dim: usize) -> DynamicsNet {
    let n = a.nrows();
    let mut cfg = DynamicsConfig::new(n, condition_dim, vec![n]);
    cfg.activation = Activation::Linear;
    let layer = LayerArrays {
        weight: Array2::eye(n),
        bias: Array1::zeros(n),
        cond_scale: Array2::zeros((n, condition_dim + 1)),
        cond_shift: Array2::zeros((n, condition_dim + 1)),
    };
    DynamicsNet::from_layers(cfg, &[layer], a).unwrap()
}

/// `exp(A)` by scaling and squaring of a Taylor series.
pub fn expm(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let s = 8;
    let scaled = a / f64::from(1 << s);
    let mut term = Array2::<f64>::eye(n);
    let mut sum = Array2::<f64>::eye(n);
    for k in 1..20 {
        term = term.dot(&scaled) / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = sum.dot(&sum);
    }
    sum
}
