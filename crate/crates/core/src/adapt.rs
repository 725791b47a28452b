//! Online controllers: link-utilization throttle, per-layer compression
//! scheme selection with a learned objective, and the UCB depth bandit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Scheme;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptError {
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("{0}")]
    Invalid(String),
}

/// Multiplicative back-off on link utilization with additive recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThrottleState {
    pub beta: f64,
    pub kappa: f64,
    pub target: f64,
    pub beta_min: f64,
    pub recovery: f64,
    /// Update interval in ticks.
    pub interval: u64,
}

impl Default for ThrottleState {
    fn default() -> Self {
        Self {
            beta: 1.0,
            kappa: 0.5,
            target: 0.72,
            beta_min: 0.05,
            recovery: 0.01,
            interval: 1024,
        }
    }
}

impl ThrottleState {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(AdaptError::Invalid(format!("throttle kappa must be >= 0 (got {})", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.target) {
            return Err(AdaptError::Invalid(format!("throttle target must lie in [0, 1] (got {})", self.target)));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= 1.0) {
            return Err(AdaptError::Invalid("beta_min must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// `β' = clamp(β·(1 - κ·max(U - θ, 0)))`, followed by the recovery step
    /// when `U < θ`.
    pub fn update(&mut self, u_cxl: f64) -> f64 {
        self.beta = throttle_update(self.beta, self.kappa, self.target, u_cxl, self.beta_min);
        if u_cxl < self.target {
            self.beta = (self.beta + self.recovery).min(1.0);
        }
        self.beta
    }

    /// Prefetch slots granted out of `k`: `⌈β·k⌉`, at least one.
    pub fn effective_depth(&self, k: u32) -> u32 {
        ((self.beta * f64::from(k)).ceil() as u32).clamp(1, k.max(1))
    }
}

/// The multiplicative rule alone.
pub fn throttle_update(beta: f64, kappa: f64, target: f64, u: f64, beta_min: f64) -> f64 {
    (beta * (1.0 - kappa * (u - target).max(0.0))).clamp(beta_min, 1.0)
}

/// Measured properties of one scheme on one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeCandidate {
    pub scheme: Scheme,
    pub ratio: f64,
    pub quality: f64,
    /// Compression latency in cycles.
    pub latency: f64,
}

/// Objective weights `(w_r, w_q, w_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub r: f64,
    pub q: f64,
    pub c: f64,
}

impl Weights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.r, self.q, self.c]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { r: a[0], q: a[1], c: a[2] }
    }

    pub fn sum(&self) -> f64 {
        self.r + self.q + self.c
    }
}

/// `J = w_r·R + w_q·Q - w_c·L`.
pub fn objective(w: &Weights, c: &SchemeCandidate) -> f64 {
    w.r * c.ratio + w.q * c.quality - w.c * c.latency
}

/// Argmax of `J` over candidates meeting the quality floor. Ties go to the
/// higher ratio; if nothing meets the floor the result is Raw.
pub fn select_scheme(w: &Weights, q_min: f64, candidates: &[SchemeCandidate]) -> Result<Scheme, AdaptError> {
    if candidates.is_empty() {
        return Err(AdaptError::NoCandidates);
    }
    let mut best: Option<(&SchemeCandidate, f64)> = None;
    for c in candidates.iter().filter(|c| c.quality >= q_min) {
        let j = objective(w, c);
        best = match best {
            Some((b, bj)) if bj > j || (bj == j && b.ratio >= c.ratio) => Some((b, bj)),
            _ => Some((c, j)),
        };
    }
    Ok(best.map_or(Scheme::Raw, |(c, _)| c.scheme))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
enum Phase {
    Plus,
    Minus,
}

/// Objective weights plus the finite-difference learner that tunes them.
///
/// Epochs come in pairs per coordinate: `w + δ·e_i`, then `w - δ·e_i`. After
/// the pair the base weight moves by `±η` toward the better side, is clamped
/// at zero and the vector is renormalized to sum 1. Coordinates cycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSelector {
    pub weights: Weights,
    pub q_min: f64,
    pub eta: f64,
    pub delta: f64,
    coord: usize,
    phase: Phase,
    plus_reward: f64,
}

impl SchemeSelector {
    pub fn new(weights: Weights, q_min: f64) -> Self {
        let mut s = Self {
            weights,
            q_min,
            eta: 0.05,
            delta: 0.05,
            coord: 0,
            phase: Phase::Plus,
            plus_reward: 0.0,
        };
        s.weights = normalize(s.weights.as_array());
        s
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.weights.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AdaptError::Invalid("selector weights must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.q_min) {
            return Err(AdaptError::Invalid(format!("selector q_min must lie in [0, 1] (got {})", self.q_min)));
        }
        Ok(())
    }

    /// Weights to use for the current epoch (base plus the probe offset).
    pub fn active_weights(&self) -> Weights {
        let mut a = self.weights.as_array();
        let sign = if self.phase == Phase::Plus { 1.0 } else { -1.0 };
        a[self.coord] = (a[self.coord] + sign * self.delta).max(0.0);
        normalize(a)
    }

    pub fn select(&self, candidates: &[SchemeCandidate]) -> Result<Scheme, AdaptError> {
        select_scheme(&self.active_weights(), self.q_min, candidates)
    }

    /// Feeds the reward observed under [`Self::active_weights`].
    pub fn weight_update(&mut self, reward: f64) -> Weights {
        assert!(reward.is_finite(), "reward must be finite");
        match self.phase {
            Phase::Plus => {
                self.plus_reward = reward;
                self.phase = Phase::Minus;
            }
            Phase::Minus => {
                let diff = self.plus_reward - reward;
                if diff != 0.0 {
                    let mut a = self.weights.as_array();
                    a[self.coord] = (a[self.coord] + self.eta * diff.signum()).max(0.0);
                    self.weights = normalize(a);
                }
                self.coord = (self.coord + 1) % 3;
                self.phase = Phase::Plus;
            }
        }
        self.weights
    }
}

fn normalize(a: [f64; 3]) -> Weights {
    let a = a.map(|w| w.max(0.0));
    let s: f64 = a.iter().sum();
    if s > 0.0 {
        Weights::from_array(a.map(|w| w / s))
    } else {
        Weights::from_array([1.0 / 3.0; 3])
    }
}

/// `R = Θ - λ_q·|Q_target - Q|`.
pub fn selection_reward(throughput: f64, quality: f64, q_target: f64, lambda_q: f64) -> f64 {
    throughput - lambda_q * (q_target - quality).abs()
}

pub const DEPTH_ARMS: [u32; 5] = [1, 2, 4, 8, 16];

/// UCB1 over a fixed arm set with running-mean rewards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BanditState {
    pub arms: Vec<u32>,
    pub means: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub beta_ucb: f64,
}

impl BanditState {
    pub fn new(arms: Vec<u32>, beta_ucb: f64) -> Self {
        let n = arms.len();
        Self {
            arms,
            means: vec![0.0; n],
            counts: vec![0; n],
            total: 0,
            beta_ucb,
        }
    }

    pub fn depth_arms(beta_ucb: f64) -> Self {
        Self::new(DEPTH_ARMS.to_vec(), beta_ucb)
    }

    /// `µ + β·√(2 ln T / N)`; unpulled arms score `+∞`.
    pub fn ucb_score(&self, arm: usize) -> f64 {
        ucb_score(self.means[arm], self.counts[arm], self.total.max(1), self.beta_ucb)
    }

    /// Index of the highest score, lowest index on ties.
    pub fn select(&self) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..self.arms.len() {
            let s = self.ucb_score(i);
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        best
    }

    pub fn record(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        self.total += 1;
        self.means[arm] += (reward - self.means[arm]) / self.counts[arm] as f64;
    }

    pub fn fractions(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

pub fn ucb_score(mean: f64, pulls: u64, total: u64, beta: f64) -> f64 {
    ucb_score_at(mean, pulls, total as f64, beta)
}

/// [`ucb_score`] with a real-valued round count.
pub fn ucb_score_at(mean: f64, pulls: u64, total: f64, beta: f64) -> f64 {
    if pulls == 0 {
        return f64::INFINITY;
    }
    mean + beta * (2.0 * total.ln() / pulls as f64).sqrt()
}
