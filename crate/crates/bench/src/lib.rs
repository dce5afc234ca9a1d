//! Shared fixtures for the benchmarks: seeded tensors, a desk-sized backbone
//! and synthetic expert scores.

use ltpeft_core::backbone::{BackboneParams, ViTConfig};
use ltpeft_core::moe::ExpertScores;
use ltpeft_core::rng::{stream, truncated_normal};
use ltpeft_core::Tensor;

/// Seeded standard-normal tensor truncated at ±2.
pub fn tensor(seed: u64, shape: impl Into<Vec<usize>>) -> Tensor {
    truncated_normal(&mut stream(seed, 0xBE4C), shape, 1.0)
}

/// The default desk ViT with freshly initialised weights.
pub fn desk_backbone() -> (ViTConfig, BackboneParams) {
    let cfg = ViTConfig::default();
    let params = BackboneParams::init(&cfg, &mut stream(1, 0));
    (cfg, params)
}

/// Two experts' scores over `n` samples and `classes` classes, each right
/// on roughly two thirds of the samples.
pub fn expert_scores(n: usize, classes: usize) -> ExpertScores {
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % classes).collect();
    let noisy = |seed: u64, bonus: f64| {
        let mut t = tensor(seed, [n, classes]);
        for (r, &y) in labels.iter().enumerate() {
            t.data_mut()[r * classes + y] += bonus;
        }
        t
    };
    ExpertScores::new(noisy(2, 1.5), noisy(3, 1.2), labels).expect("aligned scores")
}
