//! Fixtures shared by the benchmarks.

use agecal_core::kernel::{Hyperparameters, InputVector};
use agecal_core::preprocess::{PreprocessConfig, TrainingRow};
use agecal_core::study::prepare_all;
use agecal_core::synth::{default_dataset, DatasetLayout, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Training rows from the default synthetic static cells.
pub fn study_rows() -> Vec<TrainingRow> {
    let layout = DatasetLayout {
        dynamic: false,
        ..DatasetLayout::default()
    };
    let data = default_dataset(&SynthConfig::default(), &layout).expect("default dataset");
    prepare_all(&data.cells, &data.profiles, &PreprocessConfig::default())
        .expect("preprocessing")
        .into_iter()
        .flat_map(|c| c.rows)
        .collect()
}

/// `n` distinct inputs spread over the operating window.
pub fn random_inputs(n: usize, seed: u64) -> Vec<InputVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            InputVector::from_celsius(
                rng.random_range(10.0..60.0),
                rng.random_range(0.0..100.0),
                rng.random_range(10.0..120.0),
            )
        })
        .collect()
}

pub fn typical_hyperparameters() -> Hyperparameters {
    Hyperparameters {
        theta_t: 2e-4,
        theta_soc: 120.0,
        theta_dt: 20.0,
        sigma_f2: 1e-6,
        sigma_n2: 3e-3,
        pinned: Default::default(),
    }
}
