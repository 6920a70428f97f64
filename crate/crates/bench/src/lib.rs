//! Shared inputs for the criterion benches.

use fg3d_core::diffusion::{to_model, ArchConfig, Example};
use fg3d_core::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

pub fn desk_arch() -> ArchConfig {
    ArchConfig::desk()
}

pub fn batch(n_points: usize, cond_points: usize, size: usize, seed: u64) -> Vec<Example<f32>> {
    (0..size)
        .map(|k| {
            let s = seed + 3 * k as u64;
            Example {
                x_t: to_model(&random_cloud(n_points, s)),
                t: 1 + k * 7 % 100,
                noise: to_model(&random_cloud(n_points, s + 1)),
                cond: Some(to_model(&random_cloud(cond_points, s + 2))),
            }
        })
        .collect()
}
