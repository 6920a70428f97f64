use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear β schedule and its derived quantities, indexed by step `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Posterior variances `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`; zero at `t = 1`.
    pub posterior_variances: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta0: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta0: 1e-4, beta_t: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, DiffusionError> {
        make_schedule(self.steps, self.beta0, self.beta_t)
    }
}

pub fn make_schedule(steps: usize, beta0: f64, beta_t: f64) -> Result<DiffusionSchedule, DiffusionError> {
    if steps < 2 || !(0.0 < beta0 && beta0 < beta_t && beta_t < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!("T={steps}, beta0={beta0}, betaT={beta_t}")));
    }
    let betas: Vec<f64> = (1..=steps)
        .map(|t| beta0 + (beta_t - beta0) * (t - 1) as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let posterior_variances = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
        })
        .collect();
    Ok(DiffusionSchedule { steps, betas, alphas, alpha_bars, posterior_variances })
}

impl DiffusionSchedule {
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1].sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_endpoints() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-18);
        // β_500 = 1e-4 + 0.0199 * 499/999 = 0.0100400...; the commonly quoted
        // 0.0100349 agrees to 6e-4 relative.
        let direct = 1e-4 + 0.0199 * 499.0 / 999.0;
        assert!((s.beta(500) - direct).abs() < 1e-17);
        assert!((s.beta(500) - 0.010_034_9).abs() / 0.010_034_9 < 1e-3);
    }

    #[test]
    fn terminal_alpha_bar_matches_log_sum() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // oracle: exp(Σ ln(1 − β_t)) accumulated with ln_1p
        let log_sum: f64 = (1..=1000).map(|t| (-(1e-4 + 0.0199 * (t - 1) as f64 / 999.0)).ln_1p()).sum();
        let oracle = log_sum.exp();
        assert!((s.alpha_bar(1000) - oracle).abs() / oracle < 1e-9);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() / 4.0e-5 < 0.1);
        assert!(s.alpha_bar(1000) < 1e-3);
    }

    #[test]
    fn monotone_and_unit_variance() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        for t in 2..=200 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        for t in 1..=200 {
            let a = s.alpha_bar(t);
            assert!((a.sqrt().powi(2) + (1.0 - a) - 1.0).abs() < 1e-15);
        }
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }
}
