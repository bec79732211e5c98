//! Deterministic random inputs shared by the integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgs::layout::{SaliencyMap, SemanticLayout, NUM_CLASSES};
use sgs::network::ModelConfig;
use sgs::numerics::{NormKind, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries with magnitude in `[0.1, 1.1]` and random sign, clear of kinks at 0.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.1);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Fixed random weights for reducing a tensor to a scalar.
pub fn probe_weights(shape: &[usize]) -> Tensor {
    let mut r = rng(shape.iter().fold(17, |a, &d| a * 31 + d as u64));
    uniform(shape, -1.0, 1.0, &mut r)
}

/// Layout using only `classes`, each assigned to at least one pixel when
/// there is room.
pub fn layout_from(h: usize, w: usize, classes: &[u8], rng: &mut ChaCha8Rng) -> SemanticLayout {
    let mut cells: Vec<u8> = (0..h * w).map(|_| classes[rng.random_range(0..classes.len())]).collect();
    let seats = rand::seq::index::sample(rng, h * w, classes.len().min(h * w));
    for (at, &c) in seats.iter().zip(classes) {
        cells[at] = c;
    }
    SemanticLayout::new(h, w, cells).unwrap()
}

pub fn random_layout(h: usize, w: usize, rng: &mut ChaCha8Rng) -> SemanticLayout {
    let all: Vec<u8> = (0..NUM_CLASSES as u8).collect();
    layout_from(h, w, &all, rng)
}

pub fn random_saliency(h: usize, w: usize, rng: &mut ChaCha8Rng) -> SaliencyMap {
    SaliencyMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Small generator configuration that still has five feature taps.
pub fn tiny_model(in_channels: usize, out_channels: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        depth: 4,
        base_channels: 2,
        in_channels,
        out_channels,
        use_saliency: true,
        image_size: 16,
        seed,
        si_hidden: 3,
        norm: NormKind::Instance,
    }
}
