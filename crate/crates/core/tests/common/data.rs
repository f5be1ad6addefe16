//! Small synthetic sample sets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarefy::patchset::{DataSplit, PatchTensor, Sample};

pub fn random_patch(rng: &mut ChaCha8Rng, index: usize, len: usize) -> PatchTensor {
    let mut value_layer = [[0.0; 3]; 3];
    let mut location_layer = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            value_layer[r][c] = rng.random_range(0.2..0.8);
            location_layer[r][c] = (index + r * 3 + c) as f64 / len as f64;
        }
    }
    PatchTensor { value_layer, location_layer, center_index: index }
}

/// Samples whose target is the same constant everywhere.
pub fn constant_task(n: usize, target: f64, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample { input: random_patch(&mut rng, i, n + 9), target, augmented: false })
        .collect()
}

/// Samples whose target is a smooth function of the centre value.
pub fn linear_task(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let input = random_patch(&mut rng, i, n + 9);
            let target = 0.9 - 0.5 * input.center_value();
            Sample { input, target, augmented: false }
        })
        .collect()
}

pub fn split_of(train: Vec<Sample>, test: Vec<Sample>) -> DataSplit {
    DataSplit { train, test, seed: 0 }
}
