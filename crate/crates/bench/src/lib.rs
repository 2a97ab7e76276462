//! Shared fixtures for the criterion benches.

use snn_lottery::data::{load_dataset, DatasetSource, Split};
use snn_lottery::reference::reference_config;
use snn_lottery::suite::ExperimentConfig;
use snn_lottery::NumArray;

/// Reference config shrunk to a training set small enough for repeated timing.
pub fn small_reference(train_size: usize) -> (ExperimentConfig, Split) {
    let mut cfg = reference_config().expect("shipped reference config is valid");
    cfg.data = DatasetSource {
        train_size,
        test_size: 64,
        ..cfg.data
    };
    let data = load_dataset(&cfg.data).expect("synthetic data loads");
    (cfg, data)
}

/// Deterministic pseudo-random array with entries in [-1, 1).
pub fn ramp(shape: &[usize], salt: u32) -> NumArray {
    let n: usize = shape.iter().product();
    let data = (0..n as u32)
        .map(|i| {
            let h = i.wrapping_mul(2_654_435_761).wrapping_add(salt.wrapping_mul(40_503));
            (h >> 8) as f32 / (1u32 << 23) as f32 - 1.0
        })
        .collect();
    NumArray::new(shape.to_vec(), data).expect("shape matches")
}
