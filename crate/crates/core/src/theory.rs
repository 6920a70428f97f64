//! Exact checks of the soft-containment guarantee on finite distributions.
//!
//! With a bounded score `f ∈ [0, 1]`, the gap `|E_p f − E_q f|` is at most the
//! total variation distance, which Pinsker's inequality bounds by
//! `sqrt(KL(p‖q) / 2)`. On finite supports all of these are closed-form, so
//! the chain can be checked instance by instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::epc;
use crate::scansim::TreePair;

/// Floating-point slack for every inequality checked here.
pub const SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("supports differ: {0} vs {1} outcomes")]
    SupportMismatch(usize, usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("containment score outside [0, 1] at outcome {0}")]
    ScoreOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub outcomes: Vec<u32>,
    pub probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, TheoryError> {
        if probs.is_empty() {
            return Err(TheoryError::InvalidDistribution("no outcomes".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(TheoryError::InvalidDistribution("negative or non-finite mass".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(TheoryError::InvalidDistribution(format!("mass sums to {s}")));
        }
        Ok(Self { outcomes: (0..probs.len() as u32).collect(), probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.probs.iter().zip(f).map(|(p, v)| p * v).sum()
    }
}

fn check_support(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<(), TheoryError> {
    if p.outcomes != q.outcomes {
        return Err(TheoryError::SupportMismatch(p.len(), q.len()));
    }
    Ok(())
}

pub fn tv_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64, TheoryError> {
    check_support(p, q)?;
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p‖q)` in nats; `f64::INFINITY` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64, TheoryError> {
    check_support(p, q)?;
    let mut s = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        s += a * (a / b).ln();
    }
    Ok(s.max(0.0))
}

/// Data distribution `p`, model distribution `q` and a per-outcome
/// containment score `f` (expected fraction of points inside the envelope).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentInstance {
    pub p: DiscreteDistribution,
    pub q: DiscreteDistribution,
    pub f: Vec<f64>,
}

impl ContainmentInstance {
    pub fn new(p: DiscreteDistribution, q: DiscreteDistribution, f: Vec<f64>) -> Result<Self, TheoryError> {
        check_support(&p, &q)?;
        if f.len() != p.len() {
            return Err(TheoryError::SupportMismatch(p.len(), f.len()));
        }
        if let Some(i) = f.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(TheoryError::ScoreOutOfRange(i));
        }
        Ok(Self { p, q, f })
    }

    /// Data-side containment deficit `1 − E_p[f]`.
    pub fn epsilon(&self) -> f64 {
        1.0 - self.p.expect(&self.f)
    }

    pub fn kl(&self) -> f64 {
        kl_divergence(&self.p, &self.q).expect("supports checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub e_p: f64,
    pub e_q: f64,
    pub tv: f64,
    pub kl: f64,
    /// `E_p[f] − sqrt(KL/2)`.
    pub bound_tight: f64,
    /// `1 − ε − sqrt(2 KL)`, the looser published constant.
    pub bound_paper: f64,
    pub holds_tight: bool,
    pub holds_paper: bool,
    /// `|E_p f − E_q f| ≤ TV` within slack.
    pub gap_le_tv: bool,
    /// `TV ≤ sqrt(KL/2)` within slack.
    pub pinsker: bool,
    /// KL was infinite, so the bounds hold vacuously.
    pub kl_infinite: bool,
}

impl BoundReport {
    pub fn all_hold(&self) -> bool {
        self.holds_tight && self.holds_paper && self.gap_le_tv && self.pinsker
    }
}

pub fn check_bound(inst: &ContainmentInstance) -> BoundReport {
    let e_p = inst.p.expect(&inst.f);
    let e_q = inst.q.expect(&inst.f);
    let tv = tv_distance(&inst.p, &inst.q).expect("supports checked at construction");
    let kl = inst.kl();
    let eps = inst.epsilon();
    if kl.is_infinite() {
        return BoundReport {
            e_p,
            e_q,
            tv,
            kl,
            bound_tight: f64::NEG_INFINITY,
            bound_paper: f64::NEG_INFINITY,
            holds_tight: true,
            holds_paper: true,
            gap_le_tv: (e_p - e_q).abs() <= tv + SLACK,
            pinsker: true,
            kl_infinite: true,
        };
    }
    let bound_tight = e_p - (kl / 2.0).sqrt();
    let bound_paper = 1.0 - eps - (2.0 * kl).sqrt();
    BoundReport {
        e_p,
        e_q,
        tv,
        kl,
        bound_tight,
        bound_paper,
        holds_tight: e_q >= bound_tight - SLACK,
        holds_paper: e_q >= bound_paper - SLACK,
        gap_le_tv: (e_p - e_q).abs() <= tv + SLACK,
        pinsker: tv <= (kl / 2.0).sqrt() + SLACK,
        kl_infinite: false,
    }
}

/// Random instance with support size in `2..=max_support`. Some outcomes get
/// zero mass under `q` or `p` so boundary cases are exercised.
pub fn random_instance(rng: &mut impl Rng, max_support: usize) -> ContainmentInstance {
    let k = rng.random_range(2..=max_support);
    let p = draw_probs(rng, k);
    let q = draw_probs(rng, k);
    let binary = rng.random_bool(0.3);
    let f: Vec<f64> = (0..k)
        .map(|_| if binary { if rng.random_bool(0.5) { 1.0 } else { 0.0 } } else { rng.random::<f64>() })
        .collect();
    ContainmentInstance::new(
        DiscreteDistribution::new(p).expect("normalized"),
        DiscreteDistribution::new(q).expect("normalized"),
        f,
    )
    .expect("valid by construction")
}

fn draw_probs(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k)
        .map(|_| {
            if rng.random::<f64>() < 0.1 {
                0.0
            } else {
                // heavy-tailed weights give both near-uniform and peaked distributions
                (-(rng.random::<f64>().max(1e-300)).ln()).powf(3.0)
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    let mut probs: Vec<f64> = w.iter().map(|x| x / s).collect();
    let resid = 1.0 - probs.iter().sum::<f64>();
    let imax = (0..k).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
    probs[imax] += resid;
    probs
}

/// Two-outcome instances on a `side x side` grid of `(p_0, q_0)` with the score
/// that maximizes `E_p f − E_q f` (indicator of the outcome where p exceeds q).
pub fn adversarial_grid(side: usize) -> Vec<ContainmentInstance> {
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let a = (i as f64 + 0.5) / side as f64;
            let b = (j as f64 + 0.5) / side as f64;
            let f = if a >= b { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
            out.push(
                ContainmentInstance::new(
                    DiscreteDistribution::new(vec![a, 1.0 - a]).unwrap(),
                    DiscreteDistribution::new(vec![b, 1.0 - b]).unwrap(),
                    f,
                )
                .unwrap(),
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheckSummary {
    pub random_instances: usize,
    pub grid_instances: usize,
    pub seed: u64,
    pub gap_le_tv_failures: usize,
    pub pinsker_failures: usize,
    pub tight_failures: usize,
    pub paper_failures: usize,
    pub tight_without_paper: usize,
    pub infinite_kl: usize,
    /// Largest observed `(E_p f − E_q f) / sqrt(KL/2)` on the adversarial grid.
    pub max_grid_ratio: f64,
}

impl TheoryCheckSummary {
    pub fn passed(&self) -> bool {
        self.gap_le_tv_failures == 0
            && self.pinsker_failures == 0
            && self.tight_failures == 0
            && self.tight_without_paper == 0
    }
}

pub fn run_theory_check(instances: usize, grid_side: usize, seed: u64) -> TheoryCheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = TheoryCheckSummary {
        random_instances: instances,
        grid_instances: grid_side * grid_side,
        seed,
        gap_le_tv_failures: 0,
        pinsker_failures: 0,
        tight_failures: 0,
        paper_failures: 0,
        tight_without_paper: 0,
        infinite_kl: 0,
        max_grid_ratio: 0.0,
    };
    let tally = |r: &BoundReport, s: &mut TheoryCheckSummary| {
        s.gap_le_tv_failures += usize::from(!r.gap_le_tv);
        s.pinsker_failures += usize::from(!r.pinsker);
        s.tight_failures += usize::from(!r.holds_tight);
        s.paper_failures += usize::from(!r.holds_paper);
        s.tight_without_paper += usize::from(r.holds_tight && !r.holds_paper);
        s.infinite_kl += usize::from(r.kl_infinite);
    };
    for _ in 0..instances {
        let r = check_bound(&random_instance(&mut rng, 10));
        tally(&r, &mut s);
    }
    for inst in adversarial_grid(grid_side) {
        let r = check_bound(&inst);
        tally(&r, &mut s);
        if r.kl > 0.0 {
            s.max_grid_ratio = s.max_grid_ratio.max((r.e_p - r.e_q) / (r.kl / 2.0).sqrt());
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    /// `1 − mean pair EPC`.
    pub epsilon_hat: f64,
    pub per_pair_epc: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Data-side containment: fraction of each pair's TLS points inside its ALS hull.
pub fn empirical_containment_report(pairs: &[TreePair]) -> ContainmentReport {
    let per_pair_epc: Vec<Option<f64>> = pairs
        .iter()
        .map(|pair| match epc(&pair.tls, &pair.als) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("containment undefined for pair {:?}: {e}", pair.tree_ids);
                None
            }
        })
        .collect();
    let vals: Vec<f64> = per_pair_epc.iter().flatten().copied().collect();
    let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    ContainmentReport { epsilon_hat: 1.0 - mean, skipped: per_pair_epc.len() - vals.len(), per_pair_epc }
}
