//! Conditional denoising diffusion over point clouds.
//!
//! Clouds enter the model in "model coordinates": the pair's unit-cube frame
//! mapped affinely onto `[-1, 1]` so that the data scale matches the unit
//! Gaussian prior. [`to_model`] and [`from_model`] convert between the two.

mod checkpoint;
mod network;
mod sample;
mod schedule;
mod train;

use ndarray::Array2;
use thiserror::Error;

use crate::geom::PointCloud;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use network::{time_embedding, ArchConfig, ConditionCache, DenoiserWeights, Example, FilmBlock, Linear, Real};
pub use sample::{ensemble_sample, sample, sample_model, SampleConfig};
pub use schedule::{make_schedule, DiffusionSchedule, ScheduleConfig};
pub use train::{evaluate_validation, learning_rate_at, smoothed_windows, train, Adam, CheckpointRecord, TrainConfig, TrainHistory};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("non-finite loss at iteration {iteration}: {state}")]
    NonFiniteLoss { iteration: usize, state: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Unit-cube coordinates to model coordinates.
pub fn to_model<F: Real>(cloud: &PointCloud) -> Array2<F> {
    let mut a = Array2::zeros((cloud.len(), 3));
    for (i, p) in cloud.points().iter().enumerate() {
        for k in 0..3 {
            a[[i, k]] = F::from_f64(2.0 * p[k] - 1.0).unwrap();
        }
    }
    a
}

/// Model coordinates back to unit-cube coordinates. Non-finite rows are
/// replaced by the cube center so downstream geometry stays well defined.
pub fn from_model<F: Real>(a: &Array2<F>) -> PointCloud {
    let pts = a
        .outer_iter()
        .map(|r| {
            let p = [0, 1, 2].map(|k| (r[k].to_f64().unwrap() + 1.0) * 0.5);
            if p.iter().all(|v| v.is_finite()) {
                p
            } else {
                [0.5; 3]
            }
        })
        .collect();
    PointCloud::new(pts).expect("finite by construction")
}

/// Forward corruption `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn q_sample<F: Real>(
    x0: &Array2<F>,
    t: usize,
    noise: &Array2<F>,
    sched: &DiffusionSchedule,
) -> Result<Array2<F>, DiffusionError> {
    if x0.dim() != noise.dim() {
        return Err(DiffusionError::ShapeMismatch(x0.dim(), noise.dim()));
    }
    assert!((1..=sched.steps).contains(&t), "step {t} outside 1..={}", sched.steps);
    let a = sched.alpha_bar(t);
    let sa = F::from_f64(a.sqrt()).unwrap();
    let sn = F::from_f64((1.0 - a).sqrt()).unwrap();
    Ok(x0 * sa + &(noise * sn))
}

/// Standard normal array drawn from `rng`.
pub fn gaussian<F: Real>(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Array2<F> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        F::from_f64(v).unwrap()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn q_sample_edge_cases() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Array2::from_shape_fn((5, 3), |(i, k)| (i + k) as f64 * 0.1);
        let zero = Array2::zeros((5, 3));
        let xt = q_sample(&x0, 10, &zero, &s).unwrap();
        assert_eq!(xt, &x0 * s.alpha_bar(10).sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps: Array2<f64> = gaussian(&mut rng, 5, 3);
        let xt = q_sample(&zero, 1000, &eps, &s).unwrap();
        assert!((&xt - &eps).iter().all(|d| d.abs() < 1e-4 * 5.0));
        assert!(q_sample(&x0, 1, &Array2::zeros((4, 3)), &s).is_err());
    }

    #[test]
    fn q_sample_variance_matches_moments() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        // x0 uniform on [-1, 1]: variance 1/3
        let x0 = Array2::from_shape_fn((n, 3), |_| rand::Rng::random_range(&mut rng, -1.0..1.0f64));
        let t = 40;
        let eps: Array2<f64> = gaussian(&mut rng, n, 3);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let a = s.alpha_bar(t);
        let expected = a / 3.0 + (1.0 - a);
        for k in 0..3 {
            let col = xt.column(k);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // sd of the sample variance for a near-Gaussian mix: var·√(2/(n−1))
            let sd = expected * (2.0 / (n - 1) as f64).sqrt() * 1.2;
            assert!((var - expected).abs() < 3.0 * sd, "axis {k}: {var} vs {expected}");
        }
    }

    #[test]
    fn model_frame_round_trip() {
        let c = PointCloud::new(vec![[0.0, 0.5, 1.0], [0.25, 0.75, 0.125]]).unwrap();
        let a: Array2<f64> = to_model(&c);
        assert_eq!(a[[0, 0]], -1.0);
        assert_eq!(a[[0, 2]], 1.0);
        assert_eq!(from_model(&a), c);
    }
}
