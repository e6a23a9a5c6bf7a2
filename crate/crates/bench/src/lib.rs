//! Seeded fixtures shared by the benchmarks.

use fvforge::gmm::GmmModel;
use fvforge::normalize::{DescriptorSet, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` descriptors of dimension `d`, uniform in [-1, 1).
pub fn descriptors(n: usize, d: usize, seed: u64) -> DescriptorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    DescriptorSet::new(d, data, Provenance::Raw).expect("valid fixture")
}

/// A random diagonal GMM with `k` components in `d` dimensions.
pub fn gmm(k: usize, d: usize, seed: u64) -> GmmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let variances = (0..k * d).map(|_| rng.random_range(0.2..1.0)).collect();
    GmmModel::new(k, d, weights, means, variances).expect("valid fixture")
}

/// Scores and binary labels with roughly one positive in ten.
pub fn ranked_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
    let scores = labels
        .iter()
        .map(|&l| rng.random::<f64>() + if l { 0.3 } else { 0.0 })
        .collect();
    (scores, labels)
}
