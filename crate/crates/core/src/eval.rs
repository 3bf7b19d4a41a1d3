//! Held-out evaluation: perplexity, next-token top-1 accuracy, and expected
//! calibration error.

use crate::error::{Error, Result};
use crate::metrics::PROB_FLOOR;
use crate::model::{AutoregressiveModel, SequenceBatch};

/// Number of equal-width confidence bins used for calibration error.
pub const ECE_BINS: usize = 10;

/// Held-out metrics over a token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `exp(mean cross-entropy)`, natural log; always >= 1.
    pub perplexity: f64,
    /// Fraction of positions where the argmax prediction is the next token.
    pub top1_accuracy: f64,
    /// Expected calibration error as a fraction in [0, 1].
    pub ece: f64,
    /// Supervised positions evaluated.
    pub token_count: u64,
}

impl EvalReport {
    /// Line-delimited `key=value` rendering, the on-disk report format.
    pub fn to_kv(&self) -> String {
        format!(
            "perplexity={}\ntop1_accuracy={}\nece={}\ntoken_count={}\n",
            self.perplexity, self.top1_accuracy, self.ece, self.token_count
        )
    }
}

/// Evaluates a model on every supervised position of the held-out batch.
///
/// Read-only over the model; the reduction is order-independent sums, so
/// batching order cannot change the result.
pub fn evaluate(model: &dyn AutoregressiveModel, heldout: &SequenceBatch) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::InvalidInput("empty held-out stream".into()));
    }
    let mut ce_sum = 0.0;
    let mut correct = 0u64;
    let mut count = 0u64;
    let mut confidences: Vec<(f64, bool)> = Vec::with_capacity(heldout.total_positions());
    for seq in heldout.sequences() {
        if let Some(&bad) = seq.iter().find(|&&id| id as usize >= model.vocab_size()) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocabulary {}",
                model.vocab_size()
            )));
        }
        for t in 0..seq.len() - 1 {
            let q = model.dist_at(seq, t, 1.0);
            let label = seq[t + 1] as usize;
            ce_sum += -q.probs()[label].max(PROB_FLOOR).ln();
            let hit = q.argmax() == label;
            if hit {
                correct += 1;
            }
            confidences.push((q.max_prob(), hit));
            count += 1;
        }
    }
    Ok(EvalReport {
        perplexity: (ce_sum / count as f64).exp(),
        top1_accuracy: correct as f64 / count as f64,
        ece: ece_of(&confidences, ECE_BINS)?,
        token_count: count,
    })
}

/// Expected calibration error over `(confidence, correct)` pairs:
/// equal-width bins over [0, 1], `sum_b (n_b / N) * |acc_b - conf_b|`,
/// empty bins contributing nothing.
pub fn ece_of(confidences: &[(f64, bool)], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidInput("bins must be >= 1".into()));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    for &(c, _) in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidInput(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
    }
    let mut bin_count = vec![0u64; bins];
    let mut bin_conf = vec![0.0; bins];
    let mut bin_hits = vec![0u64; bins];
    for &(c, hit) in confidences {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        bin_count[b] += 1;
        bin_conf[b] += c;
        bin_hits[b] += hit as u64;
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        if bin_count[b] == 0 {
            continue;
        }
        let count = bin_count[b] as f64;
        let acc = bin_hits[b] as f64 / count;
        let conf = bin_conf[b] / count;
        ece += (count / n) * (acc - conf).abs();
    }
    Ok(ece)
}
