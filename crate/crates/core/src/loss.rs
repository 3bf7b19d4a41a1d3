//! Distillation objectives with analytic gradients.
//!
//! Per position the loss is `lambda * D(teacher, student) + (1 - lambda) *
//! CE(label, student)`, where `D` is the alignment divergence (forward KL,
//! reverse KL, or forward KL under score weighting) and the teacher side may
//! be a dense distribution or a sampled sparse target. Gradients are taken
//! with respect to the raw student logits, so every objective can drive the
//! factorized student directly and be checked against finite differences.

use crate::class_sampling::{sparse_kl, sparse_kl_gradient, SparseTarget};
use crate::error::{Error, Result};
use crate::metrics::{kl_slices, softmax, CategoricalDistribution, LogitVector, PROB_FLOOR};
use crate::selection::SelectionMask;

/// Teacher-student alignment criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// `KL(p || q)`: mass-covering, the standard distillation objective.
    ForwardKl,
    /// `KL(q || p)`: mode-seeking, used for on-policy distillation.
    ReverseKl,
    /// Forward KL per position with score-proportional position weights
    /// carried by the mask.
    WeightedKl,
}

impl Alignment {
    pub const ALL: [Alignment; 3] = [
        Alignment::ForwardKl,
        Alignment::ReverseKl,
        Alignment::WeightedKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Alignment::ForwardKl => "forward_kl",
            Alignment::ReverseKl => "reverse_kl",
            Alignment::WeightedKl => "weighted_kl",
        }
    }
}

impl std::str::FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Alignment::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("alignment", format!("unknown alignment `{s}`")))
    }
}

impl std::fmt::Display for Alignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Teacher supervision for one position: the full distribution or a sampled
/// sparse target.
#[derive(Debug, Clone, PartialEq)]
pub enum PositionSupervision {
    Dense(CategoricalDistribution),
    Sparse(SparseTarget),
}

/// Forward KL `KL(p || q)` and its gradient `(q - p) / T` w.r.t. student logits.
pub fn forward_kl_loss(
    teacher: &CategoricalDistribution,
    student_logits: &LogitVector,
) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student_logits.logits.len() {
        return Err(Error::InvalidInput(format!(
            "teacher length {} does not match student logits {}",
            teacher.len(),
            student_logits.logits.len()
        )));
    }
    let q = softmax(student_logits);
    let value = kl_slices(teacher.probs(), q.probs());
    let inv_t = 1.0 / student_logits.temperature;
    let grad = q
        .probs()
        .iter()
        .zip(teacher.probs())
        .map(|(&qv, &pv)| (qv - pv) * inv_t)
        .collect();
    Ok((value, grad))
}

/// Reverse KL `KL(q || p)` and its gradient
/// `q_v * (ln q_v - ln p_v - KL(q || p)) / T`.
pub fn reverse_kl_loss(
    teacher: &CategoricalDistribution,
    student_logits: &LogitVector,
) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student_logits.logits.len() {
        return Err(Error::InvalidInput(format!(
            "teacher length {} does not match student logits {}",
            teacher.len(),
            student_logits.logits.len()
        )));
    }
    let q = softmax(student_logits);
    let log_ratio: Vec<f64> = q
        .probs()
        .iter()
        .zip(teacher.probs())
        .map(|(&qv, &pv)| qv.max(PROB_FLOOR).ln() - pv.max(PROB_FLOOR).ln())
        .collect();
    let value: f64 = q
        .probs()
        .iter()
        .zip(&log_ratio)
        .map(|(&qv, &lr)| qv * lr)
        .sum();
    let inv_t = 1.0 / student_logits.temperature;
    let grad = q
        .probs()
        .iter()
        .zip(&log_ratio)
        .map(|(&qv, &lr)| qv * (lr - value) * inv_t)
        .collect();
    Ok((value, grad))
}

/// Label cross-entropy `-ln q_y` and its gradient `(q - onehot(y)) / T`.
pub fn label_ce_loss(label: usize, student_logits: &LogitVector) -> Result<(f64, Vec<f64>)> {
    if label >= student_logits.logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for vocabulary of {}",
            student_logits.logits.len()
        )));
    }
    let q = softmax(student_logits);
    let value = -q.probs()[label].max(PROB_FLOOR).ln();
    let inv_t = 1.0 / student_logits.temperature;
    let mut grad: Vec<f64> = q.probs().iter().map(|&qv| qv * inv_t).collect();
    grad[label] -= inv_t;
    Ok((value, grad))
}

/// One position's combined loss `lambda * D + (1 - lambda) * CE` with its
/// gradient w.r.t. the student logits.
pub fn position_loss(
    supervision: &PositionSupervision,
    alignment: Alignment,
    label: usize,
    student_logits: &LogitVector,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("must be in [0, 1], got {lambda}")));
    }
    let (kd_value, kd_grad) = match (supervision, alignment) {
        (PositionSupervision::Dense(p), Alignment::ForwardKl | Alignment::WeightedKl) => {
            forward_kl_loss(p, student_logits)?
        }
        (PositionSupervision::Dense(p), Alignment::ReverseKl) => {
            reverse_kl_loss(p, student_logits)?
        }
        (PositionSupervision::Sparse(t), Alignment::ForwardKl | Alignment::WeightedKl) => {
            (sparse_kl(t, &softmax(student_logits))?, sparse_kl_gradient(t, student_logits)?)
        }
        (PositionSupervision::Sparse(_), Alignment::ReverseKl) => {
            return Err(Error::config(
                "alignment",
                "sparse class targets support only forward-KL alignment",
            ));
        }
    };
    if lambda == 1.0 {
        return Ok((kd_value, kd_grad));
    }
    let (ce_value, ce_grad) = label_ce_loss(label, student_logits)?;
    let value = lambda * kd_value + (1.0 - lambda) * ce_value;
    let grad = kd_grad
        .iter()
        .zip(&ce_grad)
        .map(|(&g_kd, &g_ce)| lambda * g_kd + (1.0 - lambda) * g_ce)
        .collect();
    Ok((value, grad))
}

/// Gradient of a sequence (or batch) loss at one selected position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrad {
    pub position: usize,
    /// d(loss) / d(student logits at this position), weight and normalizer
    /// already applied.
    pub grad: Vec<f64>,
}

/// Inputs for one sequence's selective loss: supervision and student logits
/// present exactly at the mask's selected positions.
pub struct SequenceLossInput<'a> {
    pub supervision: &'a [Option<PositionSupervision>],
    pub student_logits: &'a [Option<Vec<f64>>],
    pub labels: &'a [usize],
    pub mask: &'a SelectionMask,
}

/// One sequence's selective loss: `sum_t w_t * loss_t / weight_norm` over the
/// mask's selected positions, with gradients scaled the same way.
///
/// Supervision must cover every selected position; a mask that selects
/// nothing is a contract violation (budget rules guarantee at least one).
pub fn sequence_selective_loss(
    input: &SequenceLossInput,
    alignment: Alignment,
    lambda: f64,
    temperature: f64,
) -> Result<(f64, Vec<PositionGrad>)> {
    let mask = input.mask;
    let n = mask.len();
    if input.supervision.len() != n || input.student_logits.len() != n || input.labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "sequence inputs not aligned: mask {n}, supervision {}, logits {}, labels {}",
            input.supervision.len(),
            input.student_logits.len(),
            input.labels.len()
        )));
    }
    if mask.selected_count() == 0 {
        return Err(Error::Contract(
            "selection mask supervises no positions".into(),
        ));
    }
    let norm = mask.weight_norm();
    if norm <= 0.0 || norm.is_nan() {
        return Err(Error::Contract(format!(
            "mask weight normalizer must be positive, got {norm}"
        )));
    }

    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(mask.selected_count());
    for t in mask.selected_positions() {
        let weight = mask.weights()[t];
        let supervision = input.supervision[t].as_ref().ok_or_else(|| {
            Error::Contract(format!("no teacher supervision at selected position {t}"))
        })?;
        let logits = input.student_logits[t].as_ref().ok_or_else(|| {
            Error::Contract(format!("no student logits at selected position {t}"))
        })?;
        let lv = LogitVector::new(logits.clone(), temperature)?;
        let (value, grad) = position_loss(supervision, alignment, input.labels[t], &lv, lambda)?;
        loss += weight * value;
        let scale = weight / norm;
        grads.push(PositionGrad {
            position: t,
            grad: grad.into_iter().map(|g| g * scale).collect(),
        });
    }
    Ok((loss / norm, grads))
}

/// Batch selective loss: the mean of the per-sequence losses, with per-
/// position gradients of that mean (sequence gradients scaled by 1/S).
pub fn selective_kd_loss(
    sequences: &[SequenceLossInput],
    alignment: Alignment,
    lambda: f64,
    temperature: f64,
) -> Result<(f64, Vec<Vec<PositionGrad>>)> {
    if sequences.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / sequences.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(sequences.len());
    for input in sequences {
        let (loss, seq_grads) = sequence_selective_loss(input, alignment, lambda, temperature)?;
        total += loss;
        grads.push(
            seq_grads
                .into_iter()
                .map(|pg| PositionGrad {
                    position: pg.position,
                    grad: pg.grad.into_iter().map(|g| g * scale).collect(),
                })
                .collect(),
        );
    }
    Ok((total * scale, grads))
}
