//! Shared fixtures for the criterion benchmarks.

use mcra_core::gnn::{GnnModel, NormStats};
use mcra_core::rng::Rng;
use mcra_core::{Dataset, NetworkConfig};

/// Test instances and an untrained model with stats fitted to them.
pub fn fixture(d: usize, m: usize, samples: usize) -> (Dataset, GnnModel) {
    let data = Dataset::generate(NetworkConfig::new(d, m).with_seed(7), samples).expect("valid config");
    let model = GnnModel::init(&mut Rng::from_seed(7), NormStats::fit(&data.samples), data.config.p_max);
    (data, model)
}
