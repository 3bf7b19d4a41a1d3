//! Position-selection policies and sample-axis ranking.
//!
//! A policy turns per-position importance scores into a [`SelectionMask`]:
//! which positions receive supervision and with what weight. Deterministic
//! policies (top-k, random, curriculum) select exactly `ceil(k * (L-1))`
//! positions per sequence; GLS thresholds against a global score queue and
//! may deviate per batch; stochastic position sampling draws with replacement
//! and carries either multiplicity weights or importance-correction factors.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::PositionScore;

/// Supervision bits and per-position weights for one sequence.
///
/// The per-sequence loss reduces as `sum_t weights[t] * loss[t] / weight_norm`:
/// unweighted policies carry weight 1 at selected positions with
/// `weight_norm = selected_count` (a masked mean), stochastic policies carry
/// draw multiplicities or importance-correction factors with the matching
/// normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    bits: Vec<bool>,
    weights: Vec<f64>,
    weight_norm: f64,
    budget_k: f64,
}

impl SelectionMask {
    fn from_selected(len: usize, selected: &[usize], budget_k: f64) -> Self {
        let mut bits = vec![false; len];
        let mut weights = vec![0.0; len];
        for &t in selected {
            bits[t] = true;
            weights[t] = 1.0;
        }
        SelectionMask {
            bits,
            weights,
            weight_norm: selected.len() as f64,
            budget_k,
        }
    }

    /// Mask selecting every position (dense supervision).
    pub fn full(len: usize) -> Self {
        let all: Vec<usize> = (0..len).collect();
        Self::from_selected(len, &all, 1.0)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Normalizer for the weighted per-sequence reduction.
    pub fn weight_norm(&self) -> f64 {
        self.weight_norm
    }

    pub fn budget_k(&self) -> f64 {
        self.budget_k
    }

    pub fn is_selected(&self, t: usize) -> bool {
        self.bits[t]
    }

    pub fn selected_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn selected_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(t, _)| t)
    }
}

/// Number of positions a fractional budget `k` buys out of `len`:
/// `ceil(k * len)`, computed tolerantly so that products like `0.2 * 10`
/// land on the exact integer instead of its float neighbor.
pub fn position_budget(len: usize, k: f64) -> Result<usize> {
    if len == 0 {
        return Err(Error::InvalidInput("empty position sequence".into()));
    }
    if k <= 0.0 || k > 1.0 || k.is_nan() {
        return Err(Error::config("k", format!("budget must be in (0, 1], got {k}")));
    }
    Ok(ceil_tolerant(k * len as f64).clamp(1, len))
}

/// `ceil(x)` that treats values within 1e-9 of an integer as that integer.
fn ceil_tolerant(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

fn validate_scores(scores: &[PositionScore]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty score sequence".into()));
    }
    for s in scores {
        if !s.score.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite score {} at position {}",
                s.score, s.position
            )));
        }
    }
    Ok(())
}

/// Position indices ordered by descending score, ties broken by lower index.
fn descending_order(scores: &[PositionScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .score
            .partial_cmp(&scores[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Selects the `ceil(k * (L-1))` highest-scoring positions.
pub fn select_topk(scores: &[PositionScore], k: f64) -> Result<SelectionMask> {
    validate_scores(scores)?;
    let budget = position_budget(scores.len(), k)?;
    let order = descending_order(scores);
    Ok(SelectionMask::from_selected(scores.len(), &order[..budget], k))
}

/// Selects a uniformly random subset of `ceil(k * (L-1))` positions.
pub fn select_random(len: usize, k: f64, rng: &mut impl Rng) -> Result<SelectionMask> {
    if len == 0 {
        return Err(Error::InvalidInput("empty position sequence".into()));
    }
    let budget = position_budget(len, k)?;
    let chosen = rand::seq::index::sample(rng, len, budget).into_vec();
    Ok(SelectionMask::from_selected(len, &chosen, k))
}

/// Queue length below which GLS falls back to per-sequence top-k; a quantile
/// of a near-empty queue is meaningless.
pub const GLS_COLD_START_MIN: usize = 100;

/// Global-level selection state: a bounded FIFO of recently seen scores from
/// which the selection threshold is estimated.
#[derive(Debug, Clone)]
pub struct GlsState {
    queue: VecDeque<f64>,
    capacity: usize,
    budget_k: f64,
}

impl GlsState {
    /// Default queue capacity (30k recent scores).
    pub const DEFAULT_CAPACITY: usize = 30_000;

    pub fn new(capacity: usize, budget_k: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("gls_capacity", "capacity must be >= 1"));
        }
        if budget_k <= 0.0 || budget_k > 1.0 || budget_k.is_nan() {
            return Err(Error::config(
                "k",
                format!("budget must be in (0, 1], got {budget_k}"),
            ));
        }
        Ok(GlsState {
            queue: VecDeque::with_capacity(capacity),
            capacity,
            budget_k,
        })
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest-to-newest view of the queued scores.
    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.queue.iter().copied()
    }

    /// Nearest-rank global threshold: the smallest score among the top
    /// `ceil(k * queue_len)` queued values, so that `score >= tau` admits the
    /// top k fraction of the queue.
    pub fn threshold(&self) -> Option<f64> {
        if self.queue.is_empty() {
            return None;
        }
        let mut sorted: Vec<f64> = self.queue.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let budget = position_budget(sorted.len(), self.budget_k).ok()?;
        Some(sorted[sorted.len() - budget])
    }

    fn push_all(&mut self, scores: &[PositionScore]) {
        for s in scores {
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back(s.score);
        }
    }
}

/// Global-level selection: thresholds the batch against the queue's current
/// threshold, then feeds the batch scores into the queue.
///
/// Selected counts may deviate from the per-sequence budget (that is the
/// point: the budget holds globally, across batches). While the queue holds
/// fewer than [`GLS_COLD_START_MIN`] scores the batch falls back to
/// per-sequence top-k.
pub fn select_gls(scores: &[PositionScore], state: &mut GlsState) -> Result<SelectionMask> {
    validate_scores(scores)?;
    let mask = if state.len() < GLS_COLD_START_MIN {
        select_topk(scores, state.budget_k)?
    } else {
        let tau = state.threshold().expect("non-empty queue has a threshold");
        let selected: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| s.score >= tau)
            .map(|(t, _)| t)
            .collect();
        SelectionMask::from_selected(scores.len(), &selected, state.budget_k)
    };
    state.push_all(scores);
    Ok(mask)
}

/// Linear ramp of the curriculum window over training steps.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumSchedule {
    pub total_steps: u64,
    pub budget_k: f64,
}

impl CurriculumSchedule {
    pub fn new(total_steps: u64, budget_k: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("curriculum_steps", "must be >= 1"));
        }
        if budget_k <= 0.0 || budget_k > 1.0 || budget_k.is_nan() {
            return Err(Error::config(
                "k",
                format!("budget must be in (0, 1], got {budget_k}"),
            ));
        }
        Ok(CurriculumSchedule {
            total_steps,
            budget_k,
        })
    }

    /// Lower quantile of the selection window at `step`: ramps linearly
    /// from 0 (easiest positions) to `1 - k` (hardest positions).
    pub fn window_start(&self, step: u64) -> f64 {
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        frac * (1.0 - self.budget_k)
    }
}

/// Curriculum selection: a fixed-size window over the within-sequence score
/// ranking that slides from the lowest-scored to the highest-scored positions
/// as training progresses. At `step = 0` this picks the budget's lowest
/// scores; at `step >= total_steps` it coincides with [`select_topk`].
pub fn select_curriculum(
    scores: &[PositionScore],
    step: u64,
    sched: &CurriculumSchedule,
) -> Result<SelectionMask> {
    validate_scores(scores)?;
    let n = scores.len();
    let budget = position_budget(n, sched.budget_k)?;
    // Ascending by score with ties in descending index order: the window's
    // final placement then selects exactly the top-k set, matching
    // select_topk's lower-index tie preference.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .score
            .partial_cmp(&scores[b].score)
            .unwrap()
            .then(b.cmp(&a))
    });
    let start = quantile_index(sched.window_start(step) * n as f64).min(n - budget);
    Ok(SelectionMask::from_selected(
        n,
        &order[start..start + budget],
        sched.budget_k,
    ))
}

/// Floor that snaps values within 1e-9 of an integer to it, so window
/// endpoints like `(1 - k) * n` land exactly.
fn quantile_index(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// Positions drawn with replacement plus the distribution they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDraws {
    /// Drawn position indices, with multiplicity, in draw order.
    pub draws: Vec<usize>,
    /// Sampling probabilities `q(t)` over all positions.
    pub q: Vec<f64>,
}

/// Stochastic position selection: `count` i.i.d. draws from
/// `q(t) proportional to score(t)^(1/smoothing_t)`.
///
/// `smoothing_t > 1` flattens peaked score profiles. All-zero scores fall
/// back to the uniform distribution.
pub fn sample_positions_rs(
    scores: &[PositionScore],
    count: usize,
    rng: &mut impl Rng,
    smoothing_t: f64,
) -> Result<PositionDraws> {
    validate_scores(scores)?;
    if count == 0 {
        return Err(Error::InvalidInput("draw count must be >= 1".into()));
    }
    if smoothing_t <= 0.0 || !smoothing_t.is_finite() {
        return Err(Error::config(
            "smoothing_t",
            format!("must be positive, got {smoothing_t}"),
        ));
    }
    for s in scores {
        if s.score < 0.0 {
            return Err(Error::InvalidInput(format!(
                "negative score {} at position {}",
                s.score, s.position
            )));
        }
    }

    let n = scores.len();
    let weights: Vec<f64> = scores
        .iter()
        .map(|s| s.score.powf(1.0 / smoothing_t))
        .collect();
    let total: f64 = weights.iter().sum();
    let q: Vec<f64> = if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };

    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &p in &q {
        acc += p;
        cdf.push(acc);
    }

    let mut draws = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen();
        let idx = cdf.partition_point(|&c| c <= u).min(n - 1);
        draws.push(idx);
    }
    Ok(PositionDraws { draws, q })
}

/// Importance-correction weights over `n` positions: every draw of position
/// `t` contributes `1 / (k_draws * n * q(t))`, making the weighted loss sum an
/// unbiased estimator of the plain per-position mean.
pub fn importance_correction_weights(
    draws: &[usize],
    q: &[f64],
    k_draws: usize,
    n: usize,
) -> Result<Vec<f64>> {
    if k_draws == 0 || n == 0 {
        return Err(Error::InvalidInput("k_draws and n must be >= 1".into()));
    }
    let mut weights = vec![0.0; n];
    for &t in draws {
        if t >= n {
            return Err(Error::InvalidInput(format!("drawn position {t} >= {n}")));
        }
        if q[t] <= 0.0 {
            return Err(Error::Contract(format!(
                "position {t} drawn with zero sampling probability"
            )));
        }
        weights[t] += 1.0 / (k_draws as f64 * n as f64 * q[t]);
    }
    Ok(weights)
}

/// Builds a [`SelectionMask`] from stochastic draws.
///
/// Uncorrected masks weight each position by its draw multiplicity and
/// normalize by the draw count, reproducing the plain sampled-mean estimator;
/// corrected masks carry the importance-correction factors with normalizer 1,
/// reproducing the full-mean estimator in expectation.
pub fn mask_from_position_draws(
    draws: &PositionDraws,
    budget_k: f64,
    corrected: bool,
) -> Result<SelectionMask> {
    let n = draws.q.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty draw set".into()));
    }
    let k_draws = draws.draws.len();
    let mut bits = vec![false; n];
    let weights;
    let weight_norm;
    if corrected {
        weights = importance_correction_weights(&draws.draws, &draws.q, k_draws, n)?;
        weight_norm = 1.0;
    } else {
        let mut mult = vec![0.0; n];
        for &t in &draws.draws {
            if t >= n {
                return Err(Error::InvalidInput(format!("drawn position {t} >= {n}")));
            }
            mult[t] += 1.0;
        }
        weights = mult;
        weight_norm = k_draws as f64;
    }
    for (t, &w) in weights.iter().enumerate() {
        bits[t] = w > 0.0;
    }
    Ok(SelectionMask {
        bits,
        weights,
        weight_norm,
        budget_k,
    })
}

/// Dense mask whose weights are proportional to the position scores:
/// the per-sequence loss becomes `sum w(t) loss(t) / sum w(t)`.
/// All-zero scores fall back to uniform weighting.
pub fn weighted_mask_from_scores(scores: &[PositionScore]) -> Result<SelectionMask> {
    validate_scores(scores)?;
    for s in scores {
        if s.score < 0.0 {
            return Err(Error::InvalidInput(format!(
                "negative score {} at position {}",
                s.score, s.position
            )));
        }
    }
    let n = scores.len();
    let total: f64 = scores.iter().map(|s| s.score).sum();
    let (weights, weight_norm) = if total > 0.0 {
        (scores.iter().map(|s| s.score).collect::<Vec<f64>>(), total)
    } else {
        (vec![1.0; n], n as f64)
    };
    let bits = weights.iter().map(|&w| w > 0.0).collect();
    Ok(SelectionMask {
        bits,
        weights,
        weight_norm,
        budget_k: 1.0,
    })
}

/// A training sample's identity and its average student entropy
/// over the sample's supervised positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub sample_id: u64,
    pub avg_entropy: f64,
}

/// Sample-axis selection: the `ceil(l * N)` sample ids with the highest
/// average entropy, ties broken toward the lower id. Returned ascending.
pub fn rank_samples(scores: &[SampleScore], l: f64) -> Result<Vec<u64>> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty sample score list".into()));
    }
    for s in scores {
        if !s.avg_entropy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite entropy for sample {}",
                s.sample_id
            )));
        }
    }
    let budget = position_budget(scores.len(), l).map_err(|_| {
        Error::config("sample_l", format!("budget must be in (0, 1], got {l}"))
    })?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .avg_entropy
            .partial_cmp(&scores[a].avg_entropy)
            .unwrap()
            .then(scores[a].sample_id.cmp(&scores[b].sample_id))
    });
    let mut ids: Vec<u64> = order[..budget].iter().map(|&i| scores[i].sample_id).collect();
    ids.sort_unstable();
    Ok(ids)
}

const MANIFEST_MAGIC: &[u8; 4] = b"SKDM";
const MANIFEST_VERSION: u8 = 0x01;

/// Writes a sample manifest: magic "SKDM", version byte 0x01, u64 LE count,
/// then `count` ascending u64 LE sample ids.
pub fn write_sample_manifest(path: &Path, ids: &[u64]) -> Result<()> {
    for w in ids.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidInput(
                "manifest ids must be strictly ascending".into(),
            ));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MANIFEST_MAGIC)?;
    out.write_all(&[MANIFEST_VERSION])?;
    out.write_all(&(ids.len() as u64).to_le_bytes())?;
    for id in ids {
        out.write_all(&id.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a sample manifest written by [`write_sample_manifest`].
pub fn read_sample_manifest(path: &Path) -> Result<Vec<u64>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MANIFEST_MAGIC {
        return Err(Error::Corruption(format!(
            "bad manifest magic {magic:?}, expected {MANIFEST_MAGIC:?}"
        )));
    }
    let mut version = [0u8; 1];
    input.read_exact(&mut version)?;
    if version[0] != MANIFEST_VERSION {
        return Err(Error::Corruption(format!(
            "unsupported manifest version {}",
            version[0]
        )));
    }
    let mut count_bytes = [0u8; 8];
    input.read_exact(&mut count_bytes)?;
    let count = u64::from_le_bytes(count_bytes) as usize;
    let mut ids = Vec::with_capacity(count);
    let mut id_bytes = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut id_bytes)?;
        ids.push(u64::from_le_bytes(id_bytes));
    }
    for w in ids.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Corruption("manifest ids not ascending".into()));
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores_from(values: &[f64]) -> Vec<PositionScore> {
        values
            .iter()
            .enumerate()
            .map(|(position, &score)| PositionScore { position, score })
            .collect()
    }

    #[test]
    fn budget_matches_ceiling_over_sweep_grid() {
        for len in 1..=63usize {
            for &k in &[0.0025, 0.01, 0.05, 0.2, 0.5, 1.0] {
                let expected = ((k * len as f64 * 1e9).round() / 1e9).ceil() as usize;
                let expected = expected.clamp(1, len);
                assert_eq!(
                    position_budget(len, k).unwrap(),
                    expected,
                    "len={len} k={k}"
                );
            }
        }
        assert_eq!(position_budget(10, 0.2).unwrap(), 2);
        assert_eq!(position_budget(3, 0.2).unwrap(), 1);
        assert_eq!(position_budget(10, 1.0).unwrap(), 10);
    }

    #[test]
    fn topk_selects_highest_scores() {
        let scores = scores_from(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mask = select_topk(&scores, 0.2).unwrap();
        assert_eq!(mask.selected_count(), 2);
        assert!(mask.is_selected(8) && mask.is_selected(9));
        assert_eq!(mask.weight_norm(), 2.0);
    }

    #[test]
    fn topk_full_budget_selects_all() {
        let scores = scores_from(&[3.0, 1.0, 2.0]);
        let mask = select_topk(&scores, 1.0).unwrap();
        assert_eq!(mask.selected_count(), 3);
        assert_eq!(mask, SelectionMask::full(3));
    }

    #[test]
    fn topk_ties_break_to_lower_index() {
        let scores = scores_from(&[1.0, 1.0, 1.0, 1.0]);
        let mask = select_topk(&scores, 0.5).unwrap();
        assert!(mask.is_selected(0) && mask.is_selected(1));
        assert!(!mask.is_selected(2) && !mask.is_selected(3));
    }

    #[test]
    fn topk_rejects_empty_and_nan() {
        assert!(select_topk(&[], 0.5).is_err());
        assert!(select_topk(&scores_from(&[f64::NAN]), 0.5).is_err());
    }

    #[test]
    fn random_full_budget_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = select_random(10, 1.0, &mut rng).unwrap();
        assert_eq!(mask.selected_count(), 10);
    }

    #[test]
    fn random_is_deterministic_per_seed() {
        let a = select_random(20, 0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = select_random(20, 0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_selection_frequency_is_binomial() {
        let n = 10;
        let k = 0.2;
        let trials = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0u32; n];
        for _ in 0..trials {
            let mask = select_random(n, k, &mut rng).unwrap();
            for t in mask.selected_positions() {
                counts[t] += 1;
            }
        }
        let p = position_budget(n, k).unwrap() as f64 / n as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (t, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "position {t}: freq {freq} vs p {p} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn gls_threshold_is_nearest_rank() {
        let mut state = GlsState::new(1000, 0.2).unwrap();
        let filler: Vec<PositionScore> = scores_from(
            &(1..=100).map(|v| v as f64).collect::<Vec<_>>(),
        );
        state.push_all(&filler);
        assert_eq!(state.threshold().unwrap(), 81.0);
    }

    #[test]
    fn gls_all_equal_scores_select_everything() {
        let mut state = GlsState::new(1000, 0.2).unwrap();
        state.push_all(&scores_from(&[5.0; 200]));
        let mask = select_gls(&scores_from(&[5.0; 10]), &mut state).unwrap();
        assert_eq!(mask.selected_count(), 10);
    }

    #[test]
    fn gls_cold_start_uses_topk() {
        let mut state = GlsState::new(1000, 0.2).unwrap();
        let scores = scores_from(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mask = select_gls(&scores, &mut state).unwrap();
        assert_eq!(mask.selected_count(), 2);
        assert!(mask.is_selected(9) && mask.is_selected(8));
        assert_eq!(state.len(), 10);
    }

    #[test]
    fn gls_queue_is_bounded_and_holds_latest() {
        let mut state = GlsState::new(50, 0.2).unwrap();
        for batch in 0..40 {
            let scores: Vec<PositionScore> = scores_from(
                &(0..10).map(|i| (batch * 10 + i) as f64).collect::<Vec<_>>(),
            );
            select_gls(&scores, &mut state).unwrap();
            assert!(state.len() <= 50);
        }
        let held: Vec<f64> = state.scores().collect();
        let expected: Vec<f64> = (350..400).map(|v| v as f64).collect();
        assert_eq!(held, expected);
    }

    #[test]
    fn gls_long_run_fraction_approaches_k() {
        let k = 0.2;
        let mut state = GlsState::new(GlsState::DEFAULT_CAPACITY, k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        // warm up past the cold-start window
        for _ in 0..20 {
            let scores: Vec<PositionScore> =
                scores_from(&(0..50).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
            select_gls(&scores, &mut state).unwrap();
        }
        let mut selected = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            let scores: Vec<PositionScore> =
                scores_from(&(0..50).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
            let mask = select_gls(&scores, &mut state).unwrap();
            selected += mask.selected_count();
            total += mask.len();
        }
        let frac = selected as f64 / total as f64;
        assert!(
            (frac - k).abs() / k < 0.02,
            "long-run fraction {frac} not within 2% of {k}"
        );
    }

    #[test]
    fn curriculum_step_zero_selects_lowest() {
        let sched = CurriculumSchedule::new(4000, 0.2).unwrap();
        let scores = scores_from(&[5.0, 1.0, 4.0, 0.0, 3.0, 2.0, 9.0, 8.0, 7.0, 6.0]);
        let mask = select_curriculum(&scores, 0, &sched).unwrap();
        assert_eq!(mask.selected_count(), 2);
        assert!(mask.is_selected(3) && mask.is_selected(1), "{:?}", mask);
    }

    #[test]
    fn curriculum_final_step_matches_topk() {
        let sched = CurriculumSchedule::new(4000, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let scores: Vec<PositionScore> =
                scores_from(&(0..17).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
            let end = select_curriculum(&scores, 4000, &sched).unwrap();
            let beyond = select_curriculum(&scores, 123_456, &sched).unwrap();
            let topk = select_topk(&scores, 0.2).unwrap();
            assert_eq!(end, topk);
            assert_eq!(beyond, topk);
        }
    }

    #[test]
    fn curriculum_midpoint_window() {
        let sched = CurriculumSchedule::new(4000, 0.2).unwrap();
        let scores = scores_from(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mask = select_curriculum(&scores, 2000, &sched).unwrap();
        // window starts at w = 0.5 * 0.8 = 0.4 -> ascending ranks 4 and 5
        assert!(mask.is_selected(4) && mask.is_selected(5), "{:?}", mask);
        assert_eq!(mask.selected_count(), 2);
    }

    #[test]
    fn curriculum_endpoints_have_equal_cardinality() {
        let sched = CurriculumSchedule::new(100, 0.3).unwrap();
        let scores = scores_from(&[2.0, 7.0, 1.0, 9.0, 4.0, 6.0, 0.0]);
        let start = select_curriculum(&scores, 0, &sched).unwrap();
        let end = select_curriculum(&scores, 100, &sched).unwrap();
        assert_eq!(start.selected_count(), end.selected_count());
        // disjoint for distinct scores at this budget
        for t in start.selected_positions() {
            assert!(!end.is_selected(t));
        }
    }

    #[test]
    fn rs_degenerate_mass_draws_single_position() {
        let scores = scores_from(&[1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = sample_positions_rs(&scores, 100, &mut rng, 1.0).unwrap();
        assert_eq!(draws.q, vec![1.0, 0.0, 0.0]);
        assert!(draws.draws.iter().all(|&t| t == 0));
    }

    #[test]
    fn rs_two_equal_scores_split_evenly() {
        let scores = scores_from(&[1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trials = 10_000;
        let draws = sample_positions_rs(&scores, trials, &mut rng, 1.0).unwrap();
        let count0 = draws.draws.iter().filter(|&&t| t == 0).count() as f64;
        let freq = count0 / trials as f64;
        let sigma = (0.25 / trials as f64).sqrt();
        assert!((freq - 0.5).abs() <= 3.0 * sigma, "freq = {freq}");
    }

    #[test]
    fn rs_smoothing_takes_root_of_scores() {
        let scores = scores_from(&[4.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = sample_positions_rs(&scores, 1, &mut rng, 2.0).unwrap();
        assert!((draws.q[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((draws.q[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rs_all_zero_scores_fall_back_to_uniform() {
        let scores = scores_from(&[0.0, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = sample_positions_rs(&scores, 1000, &mut rng, 1.0).unwrap();
        assert_eq!(draws.q, vec![0.25; 4]);
        for t in 0..4 {
            assert!(draws.draws.contains(&t));
        }
    }

    #[test]
    fn ic_weights_uniform_case_collapses_to_plain_mean() {
        let n = 5;
        let q = vec![1.0 / n as f64; n];
        let draws = vec![0, 2, 2, 4];
        let weights = importance_correction_weights(&draws, &q, draws.len(), n).unwrap();
        // each draw contributes 1/(K*N*(1/N)) = 1/K
        assert!((weights[0] - 0.25).abs() < 1e-12);
        assert!((weights[2] - 0.5).abs() < 1e-12);
        assert!((weights[4] - 0.25).abs() < 1e-12);
        assert_eq!(weights[1], 0.0);
    }

    #[test]
    fn ic_single_position_recovers_loss_exactly() {
        let weights = importance_correction_weights(&[0], &[1.0], 1, 1).unwrap();
        let loss = 7.25;
        assert_eq!(weights[0] * loss, loss);
    }

    #[test]
    fn ic_two_position_expectation_enumerated() {
        // N=2, q=[0.8, 0.2], losses [1, 3]: E over the single draw of the
        // estimator sum_t w_t L_t equals (1+3)/2 = 2.
        let q = vec![0.8, 0.2];
        let losses = [1.0, 3.0];
        let mut expect = 0.0;
        for t in 0..2 {
            let w = importance_correction_weights(&[t], &q, 1, 2).unwrap();
            let estimate: f64 = w.iter().zip(losses.iter()).map(|(a, b)| a * b).sum();
            expect += q[t] * estimate;
        }
        assert!((expect - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ic_weights_reject_zero_probability_draws() {
        let err = importance_correction_weights(&[1], &[1.0, 0.0], 1, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rank_samples_rejects_empty_input() {
        assert!(rank_samples(&[], 0.5).is_err());
    }

    #[test]
    fn rs_estimator_is_unbiased_for_weighted_objective() {
        let losses = [1.0, 2.0, 3.0, 4.0];
        let raw = [4.0, 3.0, 2.0, 1.0];
        let scores = scores_from(&raw);
        let total_w: f64 = raw.iter().sum();
        let target: f64 = raw
            .iter()
            .zip(losses.iter())
            .map(|(w, l)| w * l)
            .sum::<f64>()
            / total_w;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 20_000;
        let k_draws = 4;
        let mut acc = 0.0;
        for _ in 0..trials {
            let d = sample_positions_rs(&scores, k_draws, &mut rng, 1.0).unwrap();
            let est: f64 =
                d.draws.iter().map(|&t| losses[t]).sum::<f64>() / k_draws as f64;
            acc += est;
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - target).abs() / target < 0.01,
            "mean {mean} vs target {target}"
        );
    }

    #[test]
    fn corrected_mask_reduces_to_ic_estimator() {
        let scores = scores_from(&[3.0, 1.0]);
        let losses = [1.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let draws = sample_positions_rs(&scores, 8, &mut rng, 1.0).unwrap();
        let mask = mask_from_position_draws(&draws, 0.5, true).unwrap();
        let via_mask: f64 = mask
            .weights()
            .iter()
            .zip(losses.iter())
            .map(|(w, l)| w * l)
            .sum::<f64>()
            / mask.weight_norm();
        let direct: f64 = draws
            .draws
            .iter()
            .map(|&t| losses[t] / draws.q[t])
            .sum::<f64>()
            / (8.0 * 2.0);
        assert!((via_mask - direct).abs() < 1e-12);
    }

    #[test]
    fn weighted_mask_reduces_to_score_weighted_mean() {
        let scores = scores_from(&[3.0, 1.0, 0.0]);
        let losses = [1.0, 5.0, 9.0];
        let mask = weighted_mask_from_scores(&scores).unwrap();
        let loss: f64 = mask
            .weights()
            .iter()
            .zip(losses.iter())
            .map(|(w, l)| w * l)
            .sum::<f64>()
            / mask.weight_norm();
        assert!((loss - 2.0).abs() < 1e-12);
        assert!(!mask.is_selected(2));
    }

    #[test]
    fn rank_samples_full_budget_returns_everything() {
        let scores: Vec<SampleScore> = (0..10)
            .map(|i| SampleScore {
                sample_id: i,
                avg_entropy: i as f64,
            })
            .collect();
        assert_eq!(rank_samples(&scores, 1.0).unwrap().len(), 10);
    }

    #[test]
    fn rank_samples_takes_top_fraction() {
        let scores: Vec<SampleScore> = (0..10)
            .map(|i| SampleScore {
                sample_id: i,
                avg_entropy: i as f64,
            })
            .collect();
        assert_eq!(rank_samples(&scores, 0.2).unwrap(), vec![8, 9]);
    }

    #[test]
    fn rank_samples_ties_prefer_lower_id() {
        let scores: Vec<SampleScore> = (0..10)
            .map(|i| SampleScore {
                sample_id: i,
                avg_entropy: 1.0,
            })
            .collect();
        assert_eq!(rank_samples(&scores, 0.2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn manifest_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.skdm");
        write_sample_manifest(&path, &[2, 5, 1000]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SKDM");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 4 + 1 + 8 + 3 * 8);
        assert_eq!(read_sample_manifest(&path).unwrap(), vec![2, 5, 1000]);
    }

    #[test]
    fn manifest_rejects_unsorted_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.skdm");
        assert!(write_sample_manifest(&path, &[5, 2]).is_err());
    }

    proptest! {
        #[test]
        fn prop_topk_budget_exact(len in 1usize..64, k in 0.001f64..1.0) {
            let scores: Vec<PositionScore> = (0..len)
                .map(|position| PositionScore { position, score: (position as f64 * 13.7) % 5.0 })
                .collect();
            let mask = select_topk(&scores, k).unwrap();
            prop_assert_eq!(mask.selected_count(), position_budget(len, k).unwrap());
        }

        #[test]
        fn prop_topk_invariant_to_positive_scaling(
            len in 2usize..40,
            k in 0.05f64..1.0,
            scale in 0.001f64..1000.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<PositionScore> = (0..len)
                .map(|position| PositionScore { position, score: rng.gen::<f64>() })
                .collect();
            let scaled: Vec<PositionScore> = base
                .iter()
                .map(|s| PositionScore { position: s.position, score: s.score * scale })
                .collect();
            let base_mask = select_topk(&base, k).unwrap();
            let scaled_mask = select_topk(&scaled, k).unwrap();
            prop_assert_eq!(base_mask.bits(), scaled_mask.bits());
        }

        #[test]
        fn prop_weights_zero_off_mask(len in 1usize..32, k in 0.01f64..1.0, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = select_random(len, k, &mut rng).unwrap();
            for (b, w) in mask.bits().iter().zip(mask.weights()) {
                prop_assert!(*b || *w == 0.0);
            }
        }
    }
}
