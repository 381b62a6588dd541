#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrel_core::data::{generate_synthetic, DatasetManifest, SyntheticSceneConfig};
use wrel_core::model::{Network, NetworkConfig};
use wrel_core::text::Vocabulary;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// `||a - n|| / max(||a||, ||n||, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

pub fn small_scene(seed: u64, n: usize) -> DatasetManifest {
    generate_synthetic(
        &SyntheticSceneConfig {
            grid_size: 16,
            max_instances: 3,
            corruption: 1.0,
            seed,
            ..Default::default()
        },
        n,
    )
    .unwrap()
}

pub fn small_net(manifest: &DatasetManifest, seed: u64) -> Network {
    let texts: Vec<&str> = manifest
        .samples
        .iter()
        .flat_map(|s| [s.expression.as_str(), s.category.as_str()])
        .collect();
    let vocab = Vocabulary::build(texts);
    let cfg = NetworkConfig {
        max_len: 10,
        text_dim: 8,
        embed_dim: 6,
        c1: 4,
        c2: 6,
        fused: 5,
    };
    Network::new(vocab, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn random_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

/// Up to `k` indices spread over `0..n`.
pub fn probe_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..k).map(|_| r.gen_range(0..n)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}
