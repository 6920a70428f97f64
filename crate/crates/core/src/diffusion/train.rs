use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gaussian, q_sample, sample, to_model, ArchConfig, DenoiserWeights, DiffusionError, Example, ScheduleConfig};
use crate::derive_seed;
use crate::geom::{subsample_fixed, ConvexHull3, DEFAULT_CONTAINMENT_TOL};
use crate::metrics::{chamfer, emd_exact, epc_with_hull};
use crate::scansim::TreePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub beta0: f64,
    pub beta_t: f64,
    pub batch_size: usize,
    pub n_points: usize,
    /// Cap on the per-step ALS condition size.
    pub cond_points: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate over the run down to this fraction
    /// of `learning_rate`; 1 keeps it constant.
    pub lr_min_fraction: f64,
    pub iterations: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Iterations at which validation metrics are recorded; empty means
    /// `n_checkpoints` log-spaced points including 0 and `iterations`.
    pub checkpoints: Vec<usize>,
    pub n_checkpoints: usize,
    pub val_pairs: usize,
    pub val_samples: usize,
    pub max_emd_n: usize,
    pub arch: ArchConfig,
    pub conditional: bool,
    pub log_every: usize,
    /// Decay of the weight moving average used for validation and returned
    /// as the trained model; 0 disables averaging.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta0: 1e-4,
            beta_t: 0.02,
            batch_size: 16,
            n_points: 2048,
            cond_points: 1024,
            learning_rate: 1e-3,
            lr_min_fraction: 1.0,
            iterations: 20_000,
            seed: 0,
            grad_clip: 10.0,
            checkpoints: Vec::new(),
            n_checkpoints: 8,
            val_pairs: 20,
            val_samples: 1,
            max_emd_n: 512,
            arch: ArchConfig::default(),
            conditional: true,
            log_every: 500,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    /// Single-core CPU configuration: T = 100, N = 256, reduced widths.
    /// With only 100 steps the final beta is raised so that the chain still
    /// ends close to pure noise (alpha_bar_T around 2e-5).
    pub fn desk() -> Self {
        Self {
            steps: 100,
            beta_t: 0.2,
            n_points: 256,
            cond_points: 512,
            learning_rate: 2e-3,
            lr_min_fraction: 0.05,
            iterations: 20_000,
            arch: ArchConfig::desk(),
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig { steps: self.steps, beta0: self.beta0, beta_t: self.beta_t }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: &str| Err(DiffusionError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.cond_points == 0 || self.val_samples == 0 || self.max_emd_n == 0 {
            return bad("counts must be positive");
        }
        if self.n_points < 8 {
            return bad("n_points must be at least 8");
        }
        if !(self.lr_min_fraction > 0.0 && self.lr_min_fraction <= 1.0) {
            return bad("lr_min_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning rate and clip must be positive");
        }
        self.arch.validate().map_err(DiffusionError::InvalidConfig)?;
        self.schedule().build().map(|_| ())
    }

    pub fn checkpoint_iterations(&self) -> Vec<usize> {
        let mut v = if self.checkpoints.is_empty() {
            let n = self.n_checkpoints.max(2);
            let mut v = vec![0];
            for k in 0..n - 1 {
                let denom = 1u64 << (n - 2 - k).min(40);
                v.push(((self.iterations as u64) / denom) as usize);
            }
            v
        } else {
            self.checkpoints.clone()
        };
        v.retain(|&i| i <= self.iterations);
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    /// Mean training loss since the previous record (the initial loss at 0).
    pub train_loss: f64,
    pub val_cd: f64,
    pub val_emd: f64,
    pub val_epc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub checkpoints: Vec<CheckpointRecord>,
    pub step_losses: Vec<f64>,
}

/// Means of consecutive non-overlapping windows of `window` losses.
pub fn smoothed_windows(losses: &[f64], window: usize) -> Vec<f64> {
    losses.chunks_exact(window).map(|c| c.iter().sum::<f64>() / window as f64).collect()
}

/// Adaptive moment estimation over every parameter tensor.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: DenoiserWeights<f32>,
    v: DenoiserWeights<f32>,
    t: i32,
}

impl Adam {
    pub fn new(like: &DenoiserWeights<f32>, lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, w: &mut DenoiserWeights<f32>, g: &DenoiserWeights<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        let eps = self.eps * c2.sqrt();
        for (((p, g), m), v) in w.tensors_mut().into_iter().zip(g.tensors()).zip(self.m.tensors_mut()).zip(self.v.tensors_mut()) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
        }
    }
}

pub fn learning_rate_at(cfg: &TrainConfig, it: usize) -> f64 {
    let f = cfg.lr_min_fraction;
    if f >= 1.0 || cfg.iterations <= 1 {
        return cfg.learning_rate;
    }
    let progress = it as f64 / (cfg.iterations - 1) as f64;
    cfg.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `avg ← d·avg + (1 − d)·w` with the warm-up `d = min(decay, (1 + k)/(10 + k))`.
fn ema_update(avg: &mut DenoiserWeights<f32>, w: &DenoiserWeights<f32>, decay: f64, k: usize) {
    let d = decay.min((1.0 + k as f64) / (10.0 + k as f64)) as f32;
    for (a, p) in avg.tensors_mut().into_iter().zip(w.tensors()) {
        ndarray::Zip::from(a).and(p).for_each(|a, &p| *a = d * *a + (1.0 - d) * p);
    }
}

fn grad_norm(g: &DenoiserWeights<f32>) -> f64 {
    g.tensors().iter().map(|t| t.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sum::<f64>().sqrt()
}

fn assemble_batch(
    data: &[TreePair],
    cfg: &TrainConfig,
    sched: &super::DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Vec<Example<f32>> {
    let b = cfg.batch_size;
    (0..b)
        .map(|slot| {
            let pair = &data[rng.random_range(0..data.len())];
            let x0 = to_model::<f32>(&subsample_fixed(&pair.tls, cfg.n_points, rng.random()));
            let cond = cfg.conditional.then(|| {
                let m = pair.als.len().min(cfg.cond_points);
                to_model::<f32>(&subsample_fixed(&pair.als, m, rng.random()))
            });
            // Steps are stratified across the batch: slot k draws from the
            // k-th of B equal sub-ranges of 1..=T.
            let u: f64 = rng.random();
            let t = 1 + (((slot as f64 + u) / b as f64) * sched.steps as f64).floor() as usize;
            let t = t.min(sched.steps);
            let noise: ndarray::Array2<f32> = gaussian(rng, cfg.n_points, 3);
            let x_t = q_sample(&x0, t, &noise, sched).expect("matching shapes");
            Example { x_t, t, noise, cond }
        })
        .collect()
}

/// Mean CD, EMD and EPC of generations against the validation pairs. Uses a
/// fixed seed stream so checkpoints are compared on identical noise.
pub fn evaluate_validation(
    w: &DenoiserWeights<f32>,
    val: &[TreePair],
    cfg: &TrainConfig,
    seed: u64,
) -> (f64, f64, f64) {
    let sched = cfg.schedule().build().expect("validated schedule");
    let pairs = &val[..val.len().min(cfg.val_pairs)];
    if pairs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let per_pair: Vec<(f64, f64, Option<f64>)> = crate::with_workers(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let hull = ConvexHull3::from_points(pair.als.points()).ok();
                let reference = subsample_fixed(&pair.tls, cfg.n_points, derive_seed(seed, 1_000_000 + i as u64));
                let (mut cd, mut emd, mut epc) = (0.0, 0.0, 0.0);
                for k in 0..cfg.val_samples {
                    let s = derive_seed(seed, (i * cfg.val_samples + k) as u64);
                    let cond = cfg.conditional.then_some(&pair.als);
                    let g = sample(w, cond, cfg.n_points, cfg.cond_points, &sched, s);
                    cd += chamfer(&g, &reference).expect("nonempty");
                    let (ge, re) = if cfg.n_points > cfg.max_emd_n {
                        (subsample_fixed(&g, cfg.max_emd_n, s), subsample_fixed(&reference, cfg.max_emd_n, s ^ 1))
                    } else {
                        (g.clone(), reference.clone())
                    };
                    emd += emd_exact(&ge, &re).expect("equal sizes");
                    if let Some(h) = &hull {
                        epc += epc_with_hull(&g, h, DEFAULT_CONTAINMENT_TOL);
                    }
                }
                let k = cfg.val_samples as f64;
                (cd / k, emd / k, hull.map(|_| epc / k))
            })
            .collect()
    });
    let n = per_pair.len() as f64;
    let cd = per_pair.iter().map(|r| r.0).sum::<f64>() / n;
    let emd = per_pair.iter().map(|r| r.1).sum::<f64>() / n;
    let epcs: Vec<f64> = per_pair.iter().filter_map(|r| r.2).collect();
    let epc = if epcs.is_empty() { f64::NAN } else { epcs.iter().sum::<f64>() / epcs.len() as f64 };
    (cd, emd, epc)
}

/// Trains a denoiser from scratch. Deterministic given `cfg.seed`.
pub fn train(
    data: &[TreePair],
    cfg: &TrainConfig,
    val: &[TreePair],
) -> Result<(DenoiserWeights<f32>, TrainHistory), DiffusionError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let sched = cfg.schedule().build()?;
    let mut w = DenoiserWeights::<f32>::init(&cfg.arch, derive_seed(cfg.seed, 1));
    let mut grads = w.zeros_like();
    let mut opt = Adam::new(&w, cfg.learning_rate as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let val_seed = derive_seed(cfg.seed, 3);
    let marks = cfg.checkpoint_iterations();
    let mut history = TrainHistory::default();
    let mut avg = (cfg.ema_decay > 0.0).then(|| w.clone());
    let mut since_mark = Vec::new();
    let record = |w: &DenoiserWeights<f32>, iteration: usize, train_loss: f64, history: &mut TrainHistory| {
        let (val_cd, val_emd, val_epc) = evaluate_validation(w, val, cfg, val_seed);
        info!("iter {iteration}: loss {train_loss:.5} val cd {val_cd:.5} emd {val_emd:.5} epc {val_epc:.4}");
        history.checkpoints.push(CheckpointRecord { iteration, train_loss, val_cd, val_emd, val_epc });
    };
    for it in 0..cfg.iterations {
        let batch = assemble_batch(data, cfg, &sched, &mut rng);
        let loss = w.loss_and_grad(&batch, &mut grads) as f64;
        if !loss.is_finite() {
            let state = format!(
                "last losses {:?}, weights finite: {}, batch steps {:?}",
                &history.step_losses[history.step_losses.len().saturating_sub(5)..],
                w.all_finite(),
                batch.iter().map(|e| e.t).collect::<Vec<_>>()
            );
            return Err(DiffusionError::NonFiniteLoss { iteration: it, state });
        }
        if it == 0 && marks.first() == Some(&0) {
            record(&w, 0, loss, &mut history);
        }
        let norm = grad_norm(&grads);
        if norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            for t in grads.tensors_mut() {
                t.mapv_inplace(|v| v * s);
            }
        }
        opt.lr = learning_rate_at(cfg, it) as f32;
        opt.step(&mut w, &grads);
        if let Some(a) = avg.as_mut() {
            ema_update(a, &w, cfg.ema_decay, it);
        }
        history.step_losses.push(loss);
        since_mark.push(loss);
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            let tail = &history.step_losses[history.step_losses.len() - cfg.log_every..];
            info!("iter {}: mean loss {:.5}", it + 1, tail.iter().sum::<f64>() / tail.len() as f64);
        }
        if marks.binary_search(&(it + 1)).is_ok() {
            let mean = since_mark.iter().sum::<f64>() / since_mark.len() as f64;
            since_mark.clear();
            record(avg.as_ref().unwrap_or(&w), it + 1, mean, &mut history);
        }
    }
    let w = avg.unwrap_or(w);
    if !w.all_finite() {
        warn!("non-finite weights after training");
    }
    Ok((w, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_marks_are_log_spaced() {
        let cfg = TrainConfig { iterations: 6400, n_checkpoints: 8, ..TrainConfig::default() };
        assert_eq!(cfg.checkpoint_iterations(), vec![0, 100, 200, 400, 800, 1600, 3200, 6400]);
        let explicit = TrainConfig { iterations: 10, checkpoints: vec![5, 0, 50, 5], ..TrainConfig::default() };
        assert_eq!(explicit.checkpoint_iterations(), vec![0, 5]);
    }

    #[test]
    fn cosine_learning_rate_ends_at_floor() {
        let cfg = TrainConfig { iterations: 101, learning_rate: 1e-3, lr_min_fraction: 0.1, ..TrainConfig::default() };
        assert_eq!(learning_rate_at(&cfg, 0), 1e-3);
        assert!((learning_rate_at(&cfg, 50) - 5.5e-4).abs() < 1e-12);
        assert!((learning_rate_at(&cfg, 100) - 1e-4).abs() < 1e-12);
        let flat = TrainConfig { lr_min_fraction: 1.0, ..cfg };
        assert_eq!(learning_rate_at(&flat, 77), 1e-3);
    }

    #[test]
    fn window_means() {
        assert_eq!(smoothed_windows(&[1.0, 3.0, 2.0, 2.0, 9.0], 2), vec![2.0, 2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig { n_points: 4, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { beta_t: 2.0, ..TrainConfig::desk() }.validate().is_err());
    }
}
