//! Class-axis sparsification by importance sampling.
//!
//! Instead of distilling against the teacher's full distribution, draw `U`
//! classes with repetition in proportion to the teacher probabilities, build
//! a count-based sparse target on the unique drawn classes, and minimize the
//! KL divergence restricted to that support. The sparse target is unbiased:
//! `E[target(v)] = p(v)` for every class.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::{softmax, CategoricalDistribution, LogitVector, PROB_FLOOR, SUM_TOLERANCE};

/// Largest draw count that fits the cache codec's 7-bit count field.
pub const MAX_DRAW_COUNT: u32 = 127;

/// A sampled sparse teacher target: unique class indices with their
/// probabilities on the sampled support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTarget {
    support: Vec<u32>,
    weights: Vec<f64>,
    draw_count: u32,
}

impl SparseTarget {
    /// Builds a target from `(class, count)` pairs summing to `draw_count`.
    /// This is the canonical count-based form: weights are exact rationals
    /// `count / draw_count`.
    pub fn from_counts(pairs: &[(u32, u32)], draw_count: u32) -> Result<Self> {
        if draw_count == 0 {
            return Err(Error::InvalidInput("draw_count must be >= 1".into()));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty sparse target".into()));
        }
        let mut sorted: Vec<(u32, u32)> = pairs.to_vec();
        sorted.sort_unstable_by_key(|&(class, _)| class);
        let mut total = 0u32;
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidInput(format!(
                    "duplicate class {} in sparse target",
                    w[0].0
                )));
            }
        }
        for &(_, count) in &sorted {
            if count == 0 {
                return Err(Error::InvalidInput("zero count in sparse target".into()));
            }
            total += count;
        }
        if total != draw_count {
            return Err(Error::InvalidInput(format!(
                "counts sum to {total}, expected draw_count {draw_count}"
            )));
        }
        let support = sorted.iter().map(|&(c, _)| c).collect();
        let weights = sorted
            .iter()
            .map(|&(_, count)| count as f64 / draw_count as f64)
            .collect();
        Ok(SparseTarget {
            support,
            weights,
            draw_count,
        })
    }

    /// Builds a target with arbitrary real weights (not multiples of 1/U).
    ///
    /// This is the dense-limit form used to compare the sparse objective
    /// against full-support KL; such targets cannot be cache-encoded.
    pub fn from_weights(support: Vec<u32>, weights: Vec<f64>, draw_count: u32) -> Result<Self> {
        if support.len() != weights.len() || support.is_empty() {
            return Err(Error::InvalidInput(
                "support and weights must be non-empty and aligned".into(),
            ));
        }
        for w in support.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidInput(
                    "support must be strictly ascending".into(),
                ));
            }
        }
        let mut sum = 0.0;
        for &w in &weights {
            if w <= 0.0 || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "sparse weight {w} must be positive"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "sparse weights sum to {sum}, expected 1"
            )));
        }
        Ok(SparseTarget {
            support,
            weights,
            draw_count,
        })
    }

    /// Unique sampled class indices, strictly ascending.
    pub fn support(&self) -> &[u32] {
        &self.support
    }

    /// Probability mass on each support class, aligned with [`support`](Self::support).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The number of draws `U` the target was built from.
    pub fn draw_count(&self) -> u32 {
        self.draw_count
    }

    /// Draw counts per support class, if the weights are exact multiples of
    /// `1 / draw_count` (always true for sampled targets).
    pub fn counts(&self) -> Result<Vec<u32>> {
        let mut counts = Vec::with_capacity(self.support.len());
        for (&class, &w) in self.support.iter().zip(&self.weights) {
            let scaled = w * self.draw_count as f64;
            let count = scaled.round();
            if (scaled - count).abs() > 1e-9 || count < 1.0 {
                return Err(Error::InvalidInput(format!(
                    "weight {w} on class {class} is not a positive multiple of 1/{}",
                    self.draw_count
                )));
            }
            counts.push(count as u32);
        }
        Ok(counts)
    }

    pub fn max_class(&self) -> u32 {
        *self.support.last().expect("non-empty support")
    }
}

/// Draws `u` classes i.i.d. from the teacher distribution (inverse-CDF over
/// the cumulative probabilities) and builds the count-based sparse target.
pub fn sample_classes(
    p: &CategoricalDistribution,
    u: u32,
    rng: &mut impl Rng,
) -> Result<SparseTarget> {
    if u == 0 || u > MAX_DRAW_COUNT {
        return Err(Error::config(
            "class_u",
            format!("draw count must be in [1, {MAX_DRAW_COUNT}], got {u}"),
        ));
    }
    let probs = p.probs();
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &pv in probs {
        acc += pv;
        cdf.push(acc);
    }
    let mut counts: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    for _ in 0..u {
        let x: f64 = rng.gen();
        let idx = cdf.partition_point(|&c| c <= x).min(probs.len() - 1);
        *counts.entry(idx as u32).or_insert(0) += 1;
    }
    let pairs: Vec<(u32, u32)> = counts.into_iter().collect();
    SparseTarget::from_counts(&pairs, u)
}

/// Sparse KL divergence on the sampled support:
/// `sum_{v in support} target(v) * (ln target(v) - ln q(v))`.
///
/// `q` is used as-is (no renormalization over the support) with the usual
/// floor inside the log.
pub fn sparse_kl(target: &SparseTarget, q: &CategoricalDistribution) -> Result<f64> {
    if target.max_class() as usize >= q.len() {
        return Err(Error::InvalidInput(format!(
            "support class {} out of range for vocabulary of {}",
            target.max_class(),
            q.len()
        )));
    }
    let qp = q.probs();
    Ok(target
        .support
        .iter()
        .zip(&target.weights)
        .map(|(&v, &w)| w * (w.ln() - qp[v as usize].max(PROB_FLOOR).ln()))
        .sum())
}

/// Analytic gradient of [`sparse_kl`] with respect to the student logits.
///
/// With `q = softmax(logits / T)` and target mass summing to 1, the gradient
/// is `(q_v - target_v * [v in support]) / T` over all `V` classes.
pub fn sparse_kl_gradient(target: &SparseTarget, student_logits: &LogitVector) -> Result<Vec<f64>> {
    if target.max_class() as usize >= student_logits.logits.len() {
        return Err(Error::InvalidInput(format!(
            "support class {} out of range for vocabulary of {}",
            target.max_class(),
            student_logits.logits.len()
        )));
    }
    let q = softmax(student_logits);
    let mass: f64 = target.weights.iter().sum();
    let inv_t = 1.0 / student_logits.temperature;
    let mut grad: Vec<f64> = q.probs().iter().map(|&qv| qv * mass * inv_t).collect();
    for (&v, &w) in target.support.iter().zip(&target.weights) {
        grad[v as usize] -= w * inv_t;
    }
    Ok(grad)
}
