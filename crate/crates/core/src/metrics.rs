//! Probability-vector primitives and position-importance metrics.
//!
//! Everything here works in natural log. Zero probability mass never reaches
//! a logarithm: `0 * ln 0` terms are dropped and denominators are floored by
//! [`PROB_FLOOR`].

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms (cross-entropy terms and
/// KL denominators) so that zero-mass classes yield large finite penalties
/// instead of infinities.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(probs) == 1` when validating a distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    /// Validates and wraps a probability vector: entries non-negative and
    /// summing to 1 within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "probability at class {i} is {p}, expected finite and >= 0"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1 within {SUM_TOLERANCE}"
            )));
        }
        Ok(Self { probs })
    }

    /// Uniform distribution over `vocab_size` classes.
    pub fn uniform(vocab_size: usize) -> Self {
        assert!(vocab_size > 0);
        Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    /// Point mass on `class`.
    pub fn one_hot(vocab_size: usize, class: usize) -> Self {
        assert!(class < vocab_size);
        let mut probs = vec![0.0; vocab_size];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Largest probability (the confidence of the argmax prediction).
    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

/// Raw pre-softmax scores paired with the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        if let Some(bad) = logits.iter().find(|l| !l.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit: {bad}")));
        }
        if logits.is_empty() {
            return Err(Error::InvalidInput("empty logit vector".into()));
        }
        Ok(Self {
            logits,
            temperature,
        })
    }
}

/// Temperature softmax, stabilized by max-subtraction.
pub fn softmax(l: &LogitVector) -> CategoricalDistribution {
    CategoricalDistribution {
        probs: softmax_slice(&l.logits, l.temperature),
    }
}

/// Softmax over a raw slice; used on hot paths that never build a `LogitVector`.
pub fn softmax_slice(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Shannon entropy `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy(p: &CategoricalDistribution) -> f64 {
    entropy_slice(p.probs())
}

pub(crate) fn entropy_slice(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Cross-entropy of the true label under `p`: `-ln p[label]`, floored.
pub fn cross_entropy(label: usize, p: &CategoricalDistribution) -> Result<f64> {
    if label >= p.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for vocabulary of {}",
            p.len()
        )));
    }
    Ok(-p.probs[label].max(PROB_FLOOR).ln())
}

/// KL divergence `sum_v p_v (ln p_v - ln q_v)`.
///
/// Terms with `p_v = 0` contribute zero; `q_v` is floored by [`PROB_FLOOR`].
pub fn kl(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "distribution length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_slices(p.probs(), q.probs()))
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - qv.max(PROB_FLOOR).ln()))
        .sum()
}

/// A supervised position paired with its importance score `u(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionScore {
    /// 0-based index into the supervised positions of a sequence
    /// (position `t` predicts token `t + 1`, so a length-L sequence has L-1).
    pub position: usize,
    pub score: f64,
}

/// The position-importance metrics: scalar signals that rank positions by how
/// much supervision they deserve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    StudentEntropy,
    TeacherEntropy,
    StudentCe,
    TeacherCe,
    Kl,
    ReverseKl,
    KlPlusStudentEntropy,
    CeRatio,
    CeRatioPlusStudentEntropy,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::StudentEntropy,
        Metric::TeacherEntropy,
        Metric::StudentCe,
        Metric::TeacherCe,
        Metric::Kl,
        Metric::ReverseKl,
        Metric::KlPlusStudentEntropy,
        Metric::CeRatio,
        Metric::CeRatioPlusStudentEntropy,
    ];

    /// Whether scoring needs the teacher's distributions at every position.
    ///
    /// Student-only metrics allow the teacher to skip logit computation at
    /// unselected positions, which is where the selective-head savings come
    /// from.
    pub fn requires_teacher(self) -> bool {
        !matches!(self, Metric::StudentEntropy | Metric::StudentCe)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::StudentEntropy => "student_entropy",
            Metric::TeacherEntropy => "teacher_entropy",
            Metric::StudentCe => "student_ce",
            Metric::TeacherCe => "teacher_ce",
            Metric::Kl => "kl",
            Metric::ReverseKl => "reverse_kl",
            Metric::KlPlusStudentEntropy => "kl_plus_student_entropy",
            Metric::CeRatio => "ce_ratio",
            Metric::CeRatioPlusStudentEntropy => "ce_ratio_plus_student_entropy",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("metric", format!("unknown metric `{s}`")))
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scores every supervised position of one sequence under `metric`.
///
/// `teacher`, `student` and `labels` are aligned over the L-1 supervised
/// positions; `teacher` may be absent for student-only metrics.
pub fn score_positions(
    metric: Metric,
    teacher: Option<&[CategoricalDistribution]>,
    student: &[CategoricalDistribution],
    labels: &[usize],
) -> Result<Vec<PositionScore>> {
    if student.is_empty() {
        return Err(Error::InvalidInput(
            "cannot score an empty position sequence".into(),
        ));
    }
    if labels.len() != student.len() {
        return Err(Error::InvalidInput(format!(
            "labels length {} does not match positions {}",
            labels.len(),
            student.len()
        )));
    }
    let teacher = match (metric.requires_teacher(), teacher) {
        (true, None) => {
            return Err(Error::config(
                "metric",
                format!("metric `{metric}` requires teacher distributions"),
            ))
        }
        (_, t) => t,
    };
    if let Some(t) = teacher {
        if t.len() != student.len() {
            return Err(Error::InvalidInput(format!(
                "teacher length {} does not match student {}",
                t.len(),
                student.len()
            )));
        }
    }

    let mut scores = Vec::with_capacity(student.len());
    for (t, q) in student.iter().enumerate() {
        let p = teacher.map(|td| &td[t]);
        let y = labels[t];
        let score = match metric {
            Metric::StudentEntropy => entropy(q),
            Metric::TeacherEntropy => entropy(p.unwrap()),
            Metric::StudentCe => cross_entropy(y, q)?,
            Metric::TeacherCe => cross_entropy(y, p.unwrap())?,
            Metric::Kl => kl(p.unwrap(), q)?,
            Metric::ReverseKl => kl(q, p.unwrap())?,
            Metric::KlPlusStudentEntropy => kl(p.unwrap(), q)? + entropy(q),
            Metric::CeRatio => ce_ratio(y, p.unwrap(), q)?,
            Metric::CeRatioPlusStudentEntropy => ce_ratio(y, p.unwrap(), q)? + entropy(q),
        };
        scores.push(PositionScore { position: t, score });
    }
    Ok(scores)
}

/// CE ratio `r(t) = CE(y, q) / CE(y, p)`, with the teacher CE floored so
/// teacher-certain tokens do not divide by zero.
fn ce_ratio(label: usize, p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    let student_ce = cross_entropy(label, q)?;
    let teacher_ce = cross_entropy(label, p)?;
    Ok(student_ce / teacher_ce.max(PROB_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(probs: &[f64]) -> CategoricalDistribution {
        CategoricalDistribution::new(probs.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut impl Rng, v: usize) -> CategoricalDistribution {
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        softmax(&LogitVector::new(logits, 1.0).unwrap())
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let d = softmax(&LogitVector::new(vec![0.0; 4], 1.0).unwrap());
        for &p in d.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_two_class() {
        let d = softmax(&LogitVector::new(vec![2.0_f64.ln(), 0.0], 1.0).unwrap());
        assert!((d.probs()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.probs()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_temperature_scaling_identity() {
        let hot = softmax(&LogitVector::new(vec![10.0, 0.0], 10.0).unwrap());
        let ref_ = softmax(&LogitVector::new(vec![1.0, 0.0], 1.0).unwrap());
        for (a, b) in hot.probs().iter().zip(ref_.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(LogitVector::new(vec![f64::NAN, 0.0], 1.0).is_err());
        assert!(LogitVector::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn entropy_uniform_is_ln_v() {
        let e = entropy(&CategoricalDistribution::uniform(4));
        assert!((e - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        assert_eq!(entropy(&CategoricalDistribution::one_hot(5, 2)), 0.0);
    }

    #[test]
    fn entropy_hand_computed() {
        // -0.5 ln 0.5 - 2 * 0.25 ln 0.25 = 1.5 ln 2
        let e = entropy(&dist(&[0.5, 0.25, 0.25]));
        assert!((e - 1.5 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_and_maximized_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let v = rng.gen_range(2..32);
            let d = random_dist(&mut rng, v);
            let e = entropy(&d);
            assert!(e >= -1e-12, "entropy must be non-negative, got {e}");
            assert!(e <= (v as f64).ln() + 1e-12, "entropy above ln V");
        }
        // Perturbing away from uniform strictly decreases entropy.
        let v = 8;
        let h_max = entropy(&CategoricalDistribution::uniform(v));
        for _ in 0..200 {
            let eps: f64 = rng.gen_range(1e-6..0.1);
            let i = rng.gen_range(0..v);
            let j = (i + 1 + rng.gen_range(0..v - 1)) % v;
            let mut probs = vec![1.0 / v as f64; v];
            probs[i] += eps / 2.0;
            probs[j] -= eps / 2.0;
            let e = entropy(&dist(&probs));
            assert!(e < h_max, "perturbed entropy {e} not below uniform {h_max}");
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(
            cross_entropy(0, &CategoricalDistribution::one_hot(3, 0)).unwrap(),
            -0.0
        );
        let ce = cross_entropy(1, &dist(&[0.5, 0.5])).unwrap();
        assert!((ce - 2.0_f64.ln()).abs() < 1e-12);
        let p = (-2.0_f64).exp();
        let ce = cross_entropy(0, &dist(&[p, 1.0 - p])).unwrap();
        assert!((ce - 2.0).abs() < 1e-12);
        assert!(cross_entropy(3, &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = random_dist(&mut rng, 16);
            assert_eq!(kl(&d, &d).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_analytic_values() {
        let v = kl(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert!((v - 2.0_f64.ln()).abs() < 1e-12);
        // 0.75 ln 3 - 0.25 ln 3 = 0.5 ln 3
        let v = kl(&dist(&[0.75, 0.25]), &dist(&[0.25, 0.75])).unwrap();
        assert!((v - 0.5 * 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_non_negative_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let v = rng.gen_range(2..24);
            let p = random_dist(&mut rng, v);
            let q = random_dist(&mut rng, v);
            let d = kl(&p, &q).unwrap();
            assert!(d >= -1e-12, "kl(p, q) = {d} < 0");
        }
    }

    #[test]
    fn kl_length_mismatch_rejected() {
        assert!(kl(&dist(&[0.5, 0.5]), &CategoricalDistribution::uniform(3)).is_err());
    }

    #[test]
    fn ce_equals_neg_log_prob_of_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q = softmax(&LogitVector::new(logits, 1.0).unwrap());
            let y = rng.gen_range(0..8);
            let ce = cross_entropy(y, &q).unwrap();
            assert!((ce + q.probs()[y].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn score_student_entropy_uniform() {
        let student = vec![CategoricalDistribution::uniform(6); 5];
        let labels = vec![0; 5];
        let scores = score_positions(Metric::StudentEntropy, None, &student, &labels).unwrap();
        for s in &scores {
            assert!((s.score - 6.0_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn score_kl_teacher_equals_student_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let seq: Vec<CategoricalDistribution> = (0..6).map(|_| random_dist(&mut rng, 8)).collect();
        let labels = vec![1; 6];
        let scores = score_positions(Metric::Kl, Some(&seq), &seq, &labels).unwrap();
        for s in &scores {
            assert_eq!(s.score, 0.0);
        }
    }

    #[test]
    fn score_ce_ratio_hand_computed() {
        // student CE = 2 ln 2 (label prob 1/4), teacher CE = ln 2 (label prob 1/2)
        let student = vec![dist(&[0.25, 0.75]); 3];
        let teacher = vec![dist(&[0.5, 0.5]); 3];
        let labels = vec![0; 3];
        let scores = score_positions(Metric::CeRatio, Some(&teacher), &student, &labels).unwrap();
        for s in &scores {
            assert!((s.score - 2.0).abs() < 1e-12, "r(t) = {}", s.score);
        }
    }

    #[test]
    fn ce_ratio_survives_teacher_certain_tokens() {
        // teacher puts probability 1 on the label: its CE is 0 and the
        // ratio's denominator is floored rather than dividing by zero
        let teacher = vec![CategoricalDistribution::one_hot(4, 2)];
        let student = vec![dist(&[0.25, 0.25, 0.25, 0.25])];
        let scores = score_positions(Metric::CeRatio, Some(&teacher), &student, &[2]).unwrap();
        assert!(scores[0].score.is_finite());
        assert!(scores[0].score > 0.0);
    }

    #[test]
    fn student_metric_ignores_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let student: Vec<CategoricalDistribution> =
            (0..5).map(|_| random_dist(&mut rng, 10)).collect();
        let teacher_a: Vec<CategoricalDistribution> =
            (0..5).map(|_| random_dist(&mut rng, 10)).collect();
        let teacher_b: Vec<CategoricalDistribution> =
            (0..5).map(|_| random_dist(&mut rng, 10)).collect();
        let labels = vec![2; 5];
        let a =
            score_positions(Metric::StudentEntropy, Some(&teacher_a), &student, &labels).unwrap();
        let b =
            score_positions(Metric::StudentEntropy, Some(&teacher_b), &student, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_metric_without_teacher_is_config_error() {
        let student = vec![CategoricalDistribution::uniform(4); 2];
        let err = score_positions(Metric::Kl, None, &student, &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn combined_metric_is_exact_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let student: Vec<CategoricalDistribution> =
            (0..8).map(|_| random_dist(&mut rng, 12)).collect();
        let teacher: Vec<CategoricalDistribution> =
            (0..8).map(|_| random_dist(&mut rng, 12)).collect();
        let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..12)).collect();
        let combined =
            score_positions(Metric::KlPlusStudentEntropy, Some(&teacher), &student, &labels)
                .unwrap();
        let kl_part = score_positions(Metric::Kl, Some(&teacher), &student, &labels).unwrap();
        let h_part =
            score_positions(Metric::StudentEntropy, Some(&teacher), &student, &labels).unwrap();
        for i in 0..8 {
            assert_eq!(combined[i].score, kl_part[i].score + h_part[i].score);
        }
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("bogus".parse::<Metric>().is_err());
    }
}
