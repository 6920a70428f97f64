use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{from_model, gaussian, to_model, DenoiserWeights, DiffusionSchedule};
use crate::derive_seed;
use crate::geom::{subsample_fixed, voxel_downsample, PointCloud};

/// Generation settings shared by the CLI, validation and landscape runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_points: usize,
    pub runs: usize,
    /// Voxel size (unit-cube frame) of the ensemble merge; ≤ 0 disables it.
    pub merge_voxel: f64,
    pub cond_points: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_points: 2048, runs: 1, merge_voxel: 0.0, cond_points: 1024 }
    }
}

/// Ancestral sampling in model coordinates.
pub fn sample_model(
    w: &DenoiserWeights<f32>,
    cond: Option<&Array2<f32>>,
    n_points: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cc = w.encode_condition(cond);
    let mut x: Array2<f32> = gaussian(&mut rng, n_points, 3);
    for t in (1..=sched.steps).rev() {
        let eps = w.predict(&x, t, &cc);
        let coef = (sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt()) as f32;
        let inv_sqrt_alpha = (1.0 / sched.alpha(t).sqrt()) as f32;
        x = (&x - &(eps * coef)) * inv_sqrt_alpha;
        if t > 1 {
            let z: Array2<f32> = gaussian(&mut rng, n_points, 3);
            x = x + z * sched.sigma(t) as f32;
        }
    }
    x
}

/// One generation in the pair's unit-cube frame. `cond` is the normalized
/// ALS cloud (capped at `cond_points` by seeded subsampling), or `None` for
/// unconditional generation.
pub fn sample(
    w: &DenoiserWeights<f32>,
    cond: Option<&PointCloud>,
    n_points: usize,
    cond_points: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> PointCloud {
    let y = cond.map(|c| {
        if c.len() > cond_points {
            to_model(&subsample_fixed(c, cond_points, derive_seed(seed, 0xC0)))
        } else {
            to_model(c)
        }
    });
    from_model(&sample_model(w, y.as_ref(), n_points, sched, seed))
}

/// Union of `cfg.runs` independent generations, merged by voxel downsampling.
pub fn ensemble_sample(
    w: &DenoiserWeights<f32>,
    cond: Option<&PointCloud>,
    cfg: &SampleConfig,
    sched: &DiffusionSchedule,
    seed: u64,
) -> PointCloud {
    assert!(cfg.runs >= 1, "at least one run");
    let mut merged = PointCloud::empty();
    for r in 0..cfg.runs {
        let s = if cfg.runs == 1 { seed } else { derive_seed(seed, r as u64) };
        merged = merged.concat(&sample(w, cond, cfg.n_points, cfg.cond_points, sched, s));
    }
    if cfg.merge_voxel > 0.0 {
        voxel_downsample(&merged, cfg.merge_voxel)
    } else {
        merged
    }
}
