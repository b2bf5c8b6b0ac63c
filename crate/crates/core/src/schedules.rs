//! Masking and channel-selection schedules.
//!
//! During training the first channel is masked either partially (Bernoulli
//! mask at a cosine-distributed ratio) or completely; one residual level is
//! drawn per batch with rank-decreasing weights. At inference the number of
//! still-masked first-channel positions follows a cosine decay over the
//! iterations.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How the first channel is masked for one training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Bernoulli(p) mask; the unmasked tokens are visible to the model.
    Partial,
    /// Every target position is masked: generation from text and prompt only.
    Full,
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Partial => "partial",
            MaskMode::Full => "full",
        })
    }
}

/// Mask for one codec level over the target frames (`true` = masked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// 1-based codec level.
    pub level: usize,
    pub ratio: f64,
    pub mask: Vec<bool>,
    pub mode: MaskMode,
    pub alpha: f64,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `p = cos(u)` for `u ~ U[0, π/2]`.
pub fn sample_mask_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    mask_ratio_at(rng.random::<f64>() * FRAC_PI_2)
}

#[inline]
pub fn mask_ratio_at(u: f64) -> f64 {
    u.cos().clamp(0.0, 1.0)
}

/// Independent Bernoulli(p) entries.
pub fn sample_mask<R: Rng + ?Sized>(length: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..length).map(|_| rng.random::<f64>() < p).collect()
}

/// Partial with probability `alpha`, full otherwise.
pub fn choose_first_channel_mode<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> MaskMode {
    if rng.random::<f64>() < alpha {
        MaskMode::Partial
    } else {
        MaskMode::Full
    }
}

/// First-channel mask: mode by `alpha`, then a cosine-ratio Bernoulli mask
/// (partial) or an all-true mask (full).
pub fn plan_first_channel<R: Rng + ?Sized>(length: usize, alpha: f64, rng: &mut R) -> MaskPlan {
    let mode = choose_first_channel_mode(alpha, rng);
    let (ratio, mask) = match mode {
        MaskMode::Partial => {
            let p = sample_mask_ratio(rng);
            (p, sample_mask(length, p, rng))
        }
        MaskMode::Full => (1.0, vec![true; length]),
    };
    MaskPlan {
        level: 1,
        ratio,
        mask,
        mode,
        alpha,
    }
}

/// Residual-level mask: always partial at a cosine ratio.
pub fn plan_residual<R: Rng + ?Sized>(level: usize, length: usize, rng: &mut R) -> MaskPlan {
    let p = sample_mask_ratio(rng);
    MaskPlan {
        level,
        ratio: p,
        mask: sample_mask(length, p, rng),
        mode: MaskMode::Partial,
        alpha: 1.0,
    }
}

/// Value of `alpha` over training. The constant form is the default; the
/// linear form interpolates from `start` to `end` across the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaSchedule {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

impl AlphaSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            AlphaSchedule::Constant(a) => a,
            AlphaSchedule::Linear { start, end } => {
                let f = if total_steps == 0 {
                    1.0
                } else {
                    (step as f64 / total_steps as f64).min(1.0)
                };
                start + (end - start) * f
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| (0.0..=1.0).contains(&a);
        match *self {
            AlphaSchedule::Constant(a) if ok(a) => Ok(()),
            AlphaSchedule::Linear { start, end } if ok(start) && ok(end) => Ok(()),
            other => Err(invalid!("alpha must lie in [0, 1], got {other:?}")),
        }
    }
}

/// Strictly decreasing integer repeat counts for residual levels `2..=N`.
///
/// Sampling draws uniformly from the multiset in which level `j` appears
/// `w_j` times, so `P(j) = w_j / Σ w`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankWeights {
    weights: Vec<u32>,
    multiset: Vec<usize>,
}

impl RankWeights {
    /// `weights[0]` belongs to level 2. Values are rounded to integers and
    /// must stay positive and strictly decreasing.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid!("need at least one residual-level weight"));
        }
        if weights.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(invalid!(
                "residual-level weights must be strictly decreasing, got {weights:?}"
            ));
        }
        let rounded: Vec<u32> = weights
            .iter()
            .map(|&w| if w.is_finite() { w.round().max(0.0) as u32 } else { 0 })
            .collect();
        if rounded.iter().any(|&w| w == 0) || rounded.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid!(
                "weights {weights:?} do not round to positive, strictly decreasing integers"
            ));
        }
        let multiset = rounded
            .iter()
            .enumerate()
            .flat_map(|(i, &w)| std::iter::repeat_n(i + 2, w as usize))
            .collect();
        Ok(Self {
            weights: rounded,
            multiset,
        })
    }

    /// `w_j = N - j + 1` for `j = 2..=N`.
    pub fn linear(num_channels: usize) -> Result<Self> {
        if num_channels < 2 {
            return Err(invalid!("need N >= 2 channels, got {num_channels}"));
        }
        let w: Vec<f64> = (2..=num_channels)
            .map(|j| (num_channels - j + 1) as f64)
            .collect();
        Self::new(&w)
    }

    /// Accepts `linear` or a comma-separated list.
    pub fn parse(text: &str, num_channels: usize) -> Result<Self> {
        let text = text.trim();
        let weights = if text == "linear" {
            Self::linear(num_channels)?
        } else {
            let w = text
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| invalid!("p_rank_weights {text:?}: {e}"))?;
            Self::new(&w)?
        };
        if weights.num_levels() + 1 != num_channels {
            return Err(invalid!(
                "p_rank_weights has {} entries, need N-1 = {}",
                weights.num_levels(),
                num_channels - 1
            ));
        }
        Ok(weights)
    }

    pub fn num_levels(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn probability(&self, level: usize) -> f64 {
        if level < 2 || level - 2 >= self.weights.len() {
            return 0.0;
        }
        self.weights[level - 2] as f64 / self.multiset.len() as f64
    }

    pub fn render(&self) -> String {
        self.weights
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Draws a residual level `j ∈ [2, N]`.
pub fn p_rank_sample<R: Rng + ?Sized>(weights: &RankWeights, rng: &mut R) -> usize {
    weights.multiset[rng.random_range(0..weights.multiset.len())]
}

/// Positions still masked after inference step `step` of `iterations`:
/// `floor(M0 · cos(π/2 · i/I))`, and exactly 0 at the last step.
pub fn unmask_count_schedule(total_masked: usize, iterations: usize, step: usize) -> usize {
    assert!(iterations >= 1 && step >= 1 && step <= iterations);
    if step == iterations {
        return 0;
    }
    let frac = (FRAC_PI_2 * step as f64 / iterations as f64).cos();
    ((total_masked as f64 * frac).floor() as usize).min(total_masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ratio_endpoints() {
        assert_eq!(mask_ratio_at(0.0), 1.0);
        assert!(mask_ratio_at(FRAC_PI_2) < 1e-15);
    }

    #[test]
    fn ratio_mean_is_two_over_pi() {
        let mut r = rng(1);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| sample_mask_ratio(&mut r)).sum::<f64>() / n as f64;
        assert!((mean - 2.0 / std::f64::consts::PI).abs() < 0.002, "{mean}");
    }

    #[test]
    fn bernoulli_masks() {
        let mut r = rng(2);
        assert!(sample_mask(100, 1.0, &mut r).iter().all(|&m| m));
        assert!(sample_mask(100, 0.0, &mut r).iter().all(|&m| !m));
        let m = sample_mask(100_000, 0.5, &mut r);
        let f = m.iter().filter(|&&x| x).count() as f64 / 1e5;
        assert!((f - 0.5).abs() < 0.01);
        assert!(sample_mask(0, 0.5, &mut r).is_empty());
    }

    #[test]
    fn mode_frequencies() {
        let mut r = rng(3);
        assert!((0..1000).all(|_| choose_first_channel_mode(1.0, &mut r) == MaskMode::Partial));
        assert!((0..1000).all(|_| choose_first_channel_mode(0.0, &mut r) == MaskMode::Full));
        let n = 100_000;
        let partial = (0..n)
            .filter(|_| choose_first_channel_mode(0.6, &mut r) == MaskMode::Partial)
            .count();
        assert!((partial as f64 / n as f64 - 0.6).abs() < 0.01);
    }

    #[test]
    fn full_mode_masks_everything() {
        let mut r = rng(4);
        let plan = plan_first_channel(37, 0.0, &mut r);
        assert_eq!(plan.mode, MaskMode::Full);
        assert_eq!(plan.masked_count(), 37);
    }

    #[test]
    fn p_rank_single_residual() {
        let w = RankWeights::linear(2).unwrap();
        let mut r = rng(5);
        assert!((0..1000).all(|_| p_rank_sample(&w, &mut r) == 2));
    }

    #[test]
    fn p_rank_matches_multiset_enumeration() {
        // Multiset {2,2,2,3,3,4}.
        let w = RankWeights::new(&[3.0, 2.0, 1.0]).unwrap();
        let mut r = rng(6);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[p_rank_sample(&w, &mut r)] += 1;
        }
        for (level, expect) in [(2, 3.0 / 6.0), (3, 2.0 / 6.0), (4, 1.0 / 6.0)] {
            let f = counts[level] as f64 / n as f64;
            assert!((f - expect).abs() < 0.01, "level {level}: {f}");
        }
    }

    #[test]
    fn p_rank_default_n8() {
        let w = RankWeights::linear(8).unwrap();
        assert_eq!(w.weights(), &[7, 6, 5, 4, 3, 2, 1]);
        assert!((w.probability(2) - 0.25).abs() < 1e-12);
        let mut r = rng(7);
        let n = 100_000;
        let c2 = (0..n).filter(|_| p_rank_sample(&w, &mut r) == 2).count();
        assert!((c2 as f64 / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn p_rank_rejects_non_decreasing() {
        assert!(RankWeights::new(&[1.0, 2.0]).is_err());
        assert!(RankWeights::new(&[2.0, 2.0]).is_err());
        assert!(RankWeights::new(&[2.4, 2.1]).is_err());
        assert!(RankWeights::new(&[1.0, 0.2]).is_err());
        assert!(RankWeights::parse("3,2", 4).is_err());
        assert_eq!(RankWeights::parse("linear", 4).unwrap().weights(), &[3, 2, 1]);
        assert_eq!(RankWeights::parse("5, 2 ,1", 4).unwrap().weights(), &[5, 2, 1]);
    }

    #[test]
    fn unmask_schedule_values() {
        assert_eq!(unmask_count_schedule(100, 8, 8), 0);
        assert_eq!(unmask_count_schedule(100, 8, 4), 70);
        assert_eq!(unmask_count_schedule(100, 1, 1), 0);
        let trace: Vec<usize> = (1..=8).map(|i| unmask_count_schedule(100, 8, i)).collect();
        assert_eq!(trace, vec![98, 92, 83, 70, 55, 38, 19, 0]);
    }

    #[test]
    fn alpha_curriculum() {
        let c = AlphaSchedule::Constant(0.6);
        assert_eq!(c.at(0, 10), 0.6);
        let l = AlphaSchedule::Linear {
            start: 1.0,
            end: 0.5,
        };
        assert_eq!(l.at(0, 10), 1.0);
        assert_eq!(l.at(10, 10), 0.5);
        assert!(AlphaSchedule::Constant(1.5).validate().is_err());
    }
}
