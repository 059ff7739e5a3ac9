#![allow(dead_code)]

use apivr::data::{generate_synthetic, PairedDataset, SyntheticConfig};
use apivr::model::{init_params_glorot, Activation, ModelDims, ModelState, Weighting};
use apivr::numerics::Matrix;
use apivr::training::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn small_synthetic(seed: u64) -> PairedDataset {
    generate_synthetic(&SyntheticConfig {
        categories: 3,
        train_pairs_per_category: 8,
        test_pairs_per_category: 4,
        k: 5,
        clean_per_bag: 2,
        d1: 6,
        d2: 4,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

pub fn small_dims(dataset: &PairedDataset) -> ModelDims {
    ModelDims {
        d1: dataset.d1,
        d2: dataset.d2,
        r: 6,
        r_prime: 4,
        categories: dataset.categories,
        video_hidden: [10, 8],
        image_hidden: [8, 7],
        discriminator_hidden: 5,
        activation: Activation::Tanh,
    }
}

pub fn small_model(dataset: &PairedDataset, weighting: Weighting, seed: u64) -> ModelState {
    init_params_glorot(&small_dims(dataset), weighting, seed).unwrap()
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        truncation: 3,
        r: 6,
        r_prime: 4,
        video_hidden: [10, 8],
        image_hidden: [8, 7],
        discriminator_hidden: 5,
        batch_size: 8,
        generator_steps: 3,
        learning_rate: 1e-2,
        outer_iterations: 4,
        seed,
        ..TrainConfig::default()
    }
}
