#![allow(dead_code)]

use pm_edit::editors::{Algorithm, EditBatchMatrices};
use pm_edit::harness::{ExperimentPlan, Strategy};
use pm_edit::toy_model::{estimate_preservation, Activation, PreservationBasis, ToyModel, ToyModelConfig};
use pm_edit::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// An editing problem taken from a real toy model: `W0` is a down projection,
/// `C0` its estimated key covariance, and the keys come from forward passes.
pub struct Instance {
    pub model: ToyModel,
    pub layer: usize,
    pub basis: PreservationBasis,
    pub batch: EditBatchMatrices,
}

impl Instance {
    pub fn w0(&self) -> &Matrix {
        self.model.down_proj(self.layer)
    }

    pub fn c0(&self) -> &Matrix {
        &self.basis.covariance
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn small_config(num_layers: usize, d_model: usize, d_ffn: usize, seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        num_layers,
        d_model,
        d_ffn,
        seed,
        ..ToyModelConfig::benchmark(seed)
    }
}

/// `e` keys and target values at a random layer of a seeded 4-layer model.
pub fn instance(seed: u64, d_model: usize, d_ffn: usize, e: usize) -> Instance {
    instance_with(seed, d_model, d_ffn, e, Activation::Relu)
}

pub fn instance_with(seed: u64, d_model: usize, d_ffn: usize, e: usize, activation: Activation) -> Instance {
    let mut config = small_config(4, d_model, d_ffn, seed);
    config.activation = activation;
    let model = ToyModel::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let layer = rng.random_range(0..model.num_layers());
    let basis = estimate_preservation(&model, layer, 4 * d_ffn, 1e-6, seed).unwrap();
    let w0 = model.down_proj(layer);
    let mut keys = Vec::with_capacity(e);
    let mut values = Vec::with_capacity(e);
    for _ in 0..e {
        let x = gaussian(&mut rng, d_model);
        let key = model.forward(&x).unwrap().keys.swap_remove(layer);
        let shift = gaussian(&mut rng, d_model);
        let value: Vec<f64> = w0.matvec(&key).unwrap().iter().zip(&shift).map(|(a, b)| a + b).collect();
        keys.push(key);
        values.push(value);
    }
    let batch = EditBatchMatrices::new(
        Matrix::from_columns(&keys),
        Matrix::from_columns(&values),
        (0..e).collect(),
    )
    .unwrap();
    Instance {
        model,
        layer,
        basis,
        batch,
    }
}

/// The acceptance suite: `per_size` instances for each E in {1, 2, 4, 8}.
pub fn suite(per_size: u64) -> Vec<Instance> {
    let mut out = Vec::new();
    for (i, e) in [1usize, 2, 4, 8].into_iter().enumerate() {
        for s in 0..per_size {
            out.push(instance(1000 * i as u64 + s, 32, 64, e));
        }
    }
    out
}

pub fn rel_residual(w_hat: &Matrix, key: &[f64], value: &[f64]) -> f64 {
    let got = w_hat.matvec(key).unwrap();
    let err: f64 = got.iter().zip(value).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = value.iter().map(|v| v * v).sum::<f64>().sqrt();
    err / (1.0 + norm)
}

/// A small, fast plan on a 4-layer model.
pub fn small_plan(
    algorithm: Algorithm,
    strategy: Strategy,
    batch_size: usize,
    total_edits: usize,
    seed: u64,
) -> ExperimentPlan {
    let mut plan = ExperimentPlan::new(
        algorithm,
        strategy,
        1,
        batch_size,
        total_edits,
        seed,
        small_config(4, 16, 32, seed),
    );
    plan.facts.num_facts = 64;
    plan.preservation.n_samples = 256;
    plan
}
