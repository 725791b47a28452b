use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::{self, stream};

pub type TokenId = u32;

/// Tokens of context a predictor sees.
pub const HISTORY_LEN: usize = 16;
pub const DEFAULT_VOCAB: u32 = 1024;

/// Top-k guesses for the next token, most confident first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictorOutput {
    pub candidates: Vec<TokenId>,
    pub confidences: Vec<f64>,
}

impl PredictorOutput {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn contains(&self, t: TokenId) -> bool {
        self.candidates.contains(&t)
    }

    pub fn rank_of(&self, t: TokenId) -> Option<usize> {
        self.candidates.iter().position(|&c| c == t)
    }

    fn check(&self) {
        debug_assert_eq!(self.candidates.len(), self.confidences.len());
        debug_assert!(self.confidences.windows(2).all(|w| w[0] >= w[1]));
        debug_assert!({
            let mut c = self.candidates.clone();
            c.sort_unstable();
            c.windows(2).all(|w| w[0] != w[1])
        });
    }
}

/// What a predictor may look at for one step.
#[derive(Debug, Clone, Copy)]
pub struct PredictContext<'a> {
    pub req: u64,
    /// Position of the token being predicted.
    pub pos: u32,
    /// Committed tokens, oldest first. Only the last [`HISTORY_LEN`] matter.
    pub history: &'a [TokenId],
    /// The token that will actually be committed. Only oracle variants read it.
    pub truth: TokenId,
}

impl PredictContext<'_> {
    /// The last [`HISTORY_LEN`] tokens, left-padded with `pad`.
    pub fn padded(&self, pad: TokenId) -> [TokenId; HISTORY_LEN] {
        let mut out = [pad; HISTORY_LEN];
        let tail = &self.history[self.history.len().saturating_sub(HISTORY_LEN)..];
        out[HISTORY_LEN - tail.len()..].copy_from_slice(tail);
        out
    }
}

pub trait TokenPredictor: Send {
    fn predict(&mut self, ctx: &PredictContext<'_>, k: usize) -> PredictorOutput;
    fn name(&self) -> &'static str;
}

/// Fills `out` with distinct random tokens not yet present.
fn push_decoys<R: Rng>(rng: &mut R, vocab: u32, exclude: TokenId, out: &mut Vec<TokenId>, k: usize) {
    let k = k.min(vocab as usize - usize::from(exclude < vocab));
    while out.len() < k {
        let t = rng.random_range(0..vocab);
        if t != exclude && !out.contains(&t) {
            out.push(t);
        }
    }
}

/// Oracle with a controlled miss rate.
///
/// The true token's rank `R` has CDF `F(r) = 1 - (1-p)·(4/r)^γ`, so top-4
/// containment is exactly `p`, and `γ = 0` makes it `p` at every depth. One
/// uniform per `(req, pos)` fixes the rank, so deeper lists always contain
/// whatever shallower ones did.
#[derive(Debug, Clone)]
pub struct OracleNoisy {
    pub accuracy: f64,
    pub rank_decay: f64,
    pub vocab: u32,
    seed: u64,
}

pub const ORACLE_REFERENCE_DEPTH: f64 = 4.0;

impl OracleNoisy {
    pub fn new(accuracy: f64, rank_decay: f64, vocab: u32, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&accuracy), "accuracy must lie in [0, 1]");
        assert!(rank_decay >= 0.0, "rank_decay must be >= 0");
        assert!(vocab >= 2, "vocab too small");
        Self {
            accuracy,
            rank_decay,
            vocab,
            seed,
        }
    }

    /// `P(R <= r)`.
    pub fn containment(&self, r: usize) -> f64 {
        if r == 0 {
            return 0.0;
        }
        let tail = (1.0 - self.accuracy) * (ORACLE_REFERENCE_DEPTH / r as f64).powf(self.rank_decay);
        (1.0 - tail).clamp(0.0, 1.0)
    }

    /// Smallest rank whose CDF reaches `u`; `None` when the truth falls
    /// outside every list up to `max_rank`.
    pub fn rank_for(&self, u: f64, max_rank: usize) -> Option<usize> {
        if self.rank_decay == 0.0 {
            return (u < self.accuracy).then_some(1);
        }
        // Closed form, then nudged for float error.
        let one_minus = 1.0 - u;
        if one_minus <= 0.0 {
            return None;
        }
        let est = ORACLE_REFERENCE_DEPTH * ((1.0 - self.accuracy) / one_minus).powf(1.0 / self.rank_decay);
        let mut r = (est.ceil().max(1.0) as usize).min(max_rank + 1);
        while r > 1 && self.containment(r - 1) > u {
            r -= 1;
        }
        while r <= max_rank && self.containment(r) <= u {
            r += 1;
        }
        (r <= max_rank).then_some(r)
    }
}

impl TokenPredictor for OracleNoisy {
    fn predict(&mut self, ctx: &PredictContext<'_>, k: usize) -> PredictorOutput {
        let mut rng = seed::rng_for(self.seed, &[stream::ORACLE, ctx.req, u64::from(ctx.pos)]);
        let u: f64 = rng.random();
        let k = k.min(self.vocab as usize);
        let mut candidates = Vec::with_capacity(k);
        push_decoys(&mut rng, self.vocab, ctx.truth, &mut candidates, k.saturating_sub(1));
        match self.rank_for(u, k) {
            Some(r) => candidates.insert(r - 1, ctx.truth),
            None => push_decoys(&mut rng, self.vocab, ctx.truth, &mut candidates, k),
        }
        let mut confidences: Vec<f64> = (1..=k).map(|r| self.containment(r) - self.containment(r - 1)).collect();
        for i in 1..confidences.len() {
            confidences[i] = confidences[i].min(confidences[i - 1]);
        }
        let out = PredictorOutput {
            candidates,
            confidences,
        };
        out.check();
        out
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

/// Knows the future; each token is independently corrupted (the truth is
/// left out) with probability `corruption`.
#[derive(Debug, Clone)]
pub struct Replay {
    pub corruption: f64,
    pub vocab: u32,
    seed: u64,
}

impl Replay {
    pub fn new(corruption: f64, vocab: u32, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&corruption), "corruption must lie in [0, 1]");
        Self { corruption, vocab, seed }
    }
}

impl TokenPredictor for Replay {
    fn predict(&mut self, ctx: &PredictContext<'_>, k: usize) -> PredictorOutput {
        let mut rng = seed::rng_for(self.seed, &[stream::REPLAY, ctx.req, u64::from(ctx.pos)]);
        let corrupted = rng.random::<f64>() < self.corruption;
        let k = k.min(self.vocab as usize);
        let mut candidates = Vec::with_capacity(k);
        if !corrupted && k > 0 {
            candidates.push(ctx.truth);
        }
        push_decoys(&mut rng, self.vocab, ctx.truth, &mut candidates, k);
        let confidences = (0..candidates.len())
            .map(|i| if i == 0 { 1.0 - self.corruption } else { 0.0 })
            .collect();
        PredictorOutput {
            candidates,
            confidences,
        }
    }

    fn name(&self) -> &'static str {
        "replay"
    }
}

/// Count-based order-N model with backoff to shorter contexts and finally
/// to unigram frequency.
#[derive(Debug, Clone)]
pub struct MarkovOrderN {
    pub order: usize,
    pub vocab: u32,
    /// `tables[j]` holds order-`j` contexts.
    tables: Vec<HashMap<Vec<TokenId>, HashMap<TokenId, u32>>>,
    /// Sorted unigram ranking, rebuilt after training.
    unigram: Option<Vec<(TokenId, f64)>>,
}

/// Confidence multiplier per backoff level.
const BACKOFF_DISCOUNT: f64 = 0.5;

impl MarkovOrderN {
    pub fn new(order: usize, vocab: u32) -> Self {
        assert!((1..=HISTORY_LEN).contains(&order), "order must lie in 1..={HISTORY_LEN}");
        Self {
            order,
            vocab,
            tables: vec![HashMap::new(); order + 1],
            unigram: None,
        }
    }

    pub fn pad(&self) -> TokenId {
        self.vocab
    }

    /// Records `next` following `history`.
    pub fn observe(&mut self, history: &[TokenId], next: TokenId) {
        self.unigram = None;
        for j in 0..=self.order {
            let Some(ctx) = context(history, j, self.pad()) else { break };
            *self.tables[j].entry(ctx).or_default().entry(next).or_insert(0) += 1;
        }
    }

    /// Trains on a whole sequence.
    pub fn train(&mut self, seq: &[TokenId]) {
        for i in 0..seq.len() {
            self.observe(&seq[..i], seq[i]);
        }
    }

    /// At most `n` best successors at level `j`.
    fn ranked(&mut self, j: usize, history: &[TokenId], n: usize) -> Vec<(TokenId, f64)> {
        if j == 0 {
            if self.unigram.is_none() {
                self.unigram = Some(self.rank_level(0, history));
            }
            return self.unigram.as_ref().map_or_else(Vec::new, |u| u[..n.min(u.len())].to_vec());
        }
        self.rank_level(j, history)
    }

    fn rank_level(&self, j: usize, history: &[TokenId]) -> Vec<(TokenId, f64)> {
        let Some(ctx) = context(history, j, self.pad()) else {
            return Vec::new();
        };
        let Some(counts) = self.tables[j].get(&ctx) else {
            return Vec::new();
        };
        let total: u32 = counts.values().sum();
        let mut v: Vec<(TokenId, u32)> = counts.iter().map(|(&t, &c)| (t, c)).collect();
        v.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().map(|(t, c)| (t, f64::from(c) / f64::from(total))).collect()
    }
}

/// Last `j` tokens left-padded, or `None` if `j` exceeds the window.
fn context(history: &[TokenId], j: usize, pad: TokenId) -> Option<Vec<TokenId>> {
    if j > HISTORY_LEN {
        return None;
    }
    let tail = &history[history.len().saturating_sub(j)..];
    let mut ctx = vec![pad; j - tail.len()];
    ctx.extend_from_slice(tail);
    Some(ctx)
}

impl TokenPredictor for MarkovOrderN {
    fn predict(&mut self, ctx: &PredictContext<'_>, k: usize) -> PredictorOutput {
        let k = k.min(self.vocab as usize);
        let mut candidates = Vec::with_capacity(k);
        let mut confidences = Vec::with_capacity(k);
        let mut scale = 1.0;
        for j in (0..=self.order).rev() {
            for (t, p) in self.ranked(j, ctx.history, 2 * k) {
                if candidates.len() == k {
                    break;
                }
                if !candidates.contains(&t) {
                    candidates.push(t);
                    confidences.push(p * scale);
                }
            }
            scale *= BACKOFF_DISCOUNT;
        }
        let mut t = 0;
        while candidates.len() < k {
            if !candidates.contains(&t) {
                candidates.push(t);
                confidences.push(0.0);
            }
            t += 1;
        }
        for i in 1..confidences.len() {
            confidences[i] = confidences[i].min(confidences[i - 1]);
        }
        let out = PredictorOutput {
            candidates,
            confidences,
        };
        out.check();
        out
    }

    fn name(&self) -> &'static str {
        "markov"
    }
}

/// Predictor choice as it appears in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    Oracle { accuracy: f64, rank_decay: f64 },
    Markov { order: usize },
    Replay { corruption: f64 },
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec::Oracle {
            accuracy: 0.95,
            rank_decay: 0.5,
        }
    }
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            PredictorSpec::Oracle { accuracy, rank_decay } => {
                if !(0.0..=1.0).contains(&accuracy) {
                    return Err(format!("predictor.accuracy must lie in [0, 1] (got {accuracy})"));
                }
                if !(rank_decay >= 0.0 && rank_decay.is_finite()) {
                    return Err(format!("predictor.rank_decay must be >= 0 (got {rank_decay})"));
                }
            }
            PredictorSpec::Markov { order } => {
                if !(1..=HISTORY_LEN).contains(&order) {
                    return Err(format!("predictor.order must lie in 1..={HISTORY_LEN} (got {order})"));
                }
            }
            PredictorSpec::Replay { corruption } => {
                if !(0.0..=1.0).contains(&corruption) {
                    return Err(format!("predictor.corruption must lie in [0, 1] (got {corruption})"));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            PredictorSpec::Oracle { .. } => "oracle",
            PredictorSpec::Markov { .. } => "markov",
            PredictorSpec::Replay { .. } => "replay",
        }
    }

    /// Builds the predictor. Markov models are trained on `training`.
    pub fn build(&self, vocab: u32, seed: u64, training: &[TokenId]) -> Box<dyn TokenPredictor> {
        match *self {
            PredictorSpec::Oracle { accuracy, rank_decay } => Box::new(OracleNoisy::new(accuracy, rank_decay, vocab, seed)),
            PredictorSpec::Replay { corruption } => Box::new(Replay::new(corruption, vocab, seed)),
            PredictorSpec::Markov { order } => {
                let mut m = MarkovOrderN::new(order, vocab);
                m.train(training);
                Box::new(m)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(req: u64, pos: u32, history: &[TokenId], truth: TokenId) -> PredictContext<'_> {
        PredictContext {
            req,
            pos,
            history,
            truth,
        }
    }

    #[test]
    fn replay_without_corruption_puts_truth_first() {
        let mut p = Replay::new(0.0, DEFAULT_VOCAB, 3);
        for pos in 0..500 {
            let truth = (pos * 7) % DEFAULT_VOCAB;
            let out = p.predict(&ctx(1, pos, &[], truth), 4);
            assert_eq!(out.candidates[0], truth);
            assert_eq!(out.k(), 4);
        }
    }

    #[test]
    fn oracle_containment_at_reference_depth() {
        let mut p = OracleNoisy::new(0.95, 0.5, DEFAULT_VOCAB, 42);
        let n = 10_000;
        let hits = (0..n)
            .filter(|&i| p.predict(&ctx(i as u64 % 13, i, &[], i % 1000), 4).contains(i % 1000))
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.95).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn oracle_depths_are_nested() {
        let mut p = OracleNoisy::new(0.9, 0.5, DEFAULT_VOCAB, 1);
        for pos in 0..2000 {
            let c = ctx(5, pos, &[], 77);
            let shallow = p.predict(&c, 2);
            let deep = p.predict(&c, 8);
            if shallow.contains(77) {
                assert!(deep.contains(77));
            }
            assert_eq!(&deep.candidates[..1], &shallow.candidates[..1]);
        }
    }

    #[test]
    fn oracle_rank_cdf_matches_closed_form() {
        let p = OracleNoisy::new(0.95, 0.5, DEFAULT_VOCAB, 0);
        assert!((p.containment(1) - 0.9).abs() < 1e-12);
        assert!((p.containment(4) - 0.95).abs() < 1e-12);
        assert!((p.containment(16) - 0.975).abs() < 1e-12);
        for i in 0..1000 {
            let u = i as f64 / 1000.0;
            match p.rank_for(u, 64) {
                Some(r) => {
                    assert!(p.containment(r) > u || (p.containment(r) - u).abs() < 1e-12);
                    assert!(r == 1 || p.containment(r - 1) <= u);
                }
                None => assert!(p.containment(64) <= u),
            }
        }
    }

    #[test]
    fn flat_oracle_ignores_depth() {
        let mut p = OracleNoisy::new(0.8, 0.0, DEFAULT_VOCAB, 9);
        let n = 5000;
        for k in [1, 4, 16] {
            let hits = (0..n).filter(|&i| p.predict(&ctx(0, i, &[], 3), k).contains(3)).count();
            assert!((hits as f64 / n as f64 - 0.8).abs() < 0.02);
        }
    }

    #[test]
    fn markov_learns_alternation() {
        let (a, b) = (10, 11);
        let seq: Vec<TokenId> = (0..200).map(|i| if i % 2 == 0 { a } else { b }).collect();
        let mut m = MarkovOrderN::new(1, DEFAULT_VOCAB);
        m.train(&seq);
        let out = m.predict(&ctx(0, 0, &[a, b, a], 0), 4);
        assert_eq!(out.candidates[0], b);
        assert!(out.confidences[0] > 0.99);
        let out = m.predict(&ctx(0, 0, &[a, b], 0), 2);
        assert_eq!(out.candidates[0], a);
    }

    #[test]
    fn markov_backs_off_to_unigram() {
        let mut m = MarkovOrderN::new(2, DEFAULT_VOCAB);
        m.train(&[1, 2, 3, 1, 2, 3, 5]);
        let out = m.predict(&ctx(0, 0, &[900, 901], 0), 3);
        // Unseen context: falls to the most frequent tokens.
        assert_eq!(out.candidates, vec![1, 2, 3]);
        assert!(out.confidences[0] < 1.0);
    }

    #[test]
    fn padding_fills_from_the_left() {
        let h = [3, 4];
        let c = ctx(0, 0, &h, 0);
        let pad = c.padded(1024);
        assert_eq!(pad[..14], [1024; 14]);
        assert_eq!(pad[14..], [3, 4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn outputs_are_well_formed(seed in any::<u64>(), pos in 0u32..10_000, truth in 0u32..1024, k in 1usize..17) {
                let mut preds: Vec<Box<dyn TokenPredictor>> = vec![
                    Box::new(OracleNoisy::new(0.9, 0.5, DEFAULT_VOCAB, seed)),
                    Box::new(Replay::new(0.3, DEFAULT_VOCAB, seed)),
                    Box::new(MarkovOrderN::new(2, DEFAULT_VOCAB)),
                ];
                for p in &mut preds {
                    let c = ctx(seed % 9, pos, &[1, 2, 3], truth);
                    let out = p.predict(&c, k);
                    prop_assert_eq!(out.k(), k);
                    let mut s = out.candidates.clone();
                    s.sort_unstable();
                    s.dedup();
                    prop_assert_eq!(s.len(), k);
                    prop_assert!(out.confidences.windows(2).all(|w| w[0] >= w[1]));
                    prop_assert!(out.confidences.iter().all(|c| (0.0..=1.0).contains(c)));
                    let again = p.predict(&c, k);
                    prop_assert_eq!(&out, &again);
                }
            }
        }
    }
}
