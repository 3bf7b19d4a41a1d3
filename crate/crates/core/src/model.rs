//! Desk-scale autoregressive teacher and trainable student.
//!
//! The teacher is a seeded table of logit rows per context (order 1 or 2);
//! the student factors its logit table through a low-rank bottleneck
//! `logits(x) = A[x] * B` with `rank < V`, so it cannot represent the teacher
//! exactly and selection has real work to do. Both expose the same
//! next-token-model interface for evaluation and generation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::{entropy_slice, softmax_slice, CategoricalDistribution};
use crate::selection::SelectionMask;

/// Anything that predicts a next-token distribution from a prefix.
///
/// Position `t` conditions on tokens up to and including `seq[t]` and
/// predicts `seq[t + 1]`; a length-L sequence has L-1 supervised positions.
pub trait AutoregressiveModel {
    fn vocab_size(&self) -> usize;

    /// Natural (temperature-1) logits for the next token after position `t`.
    fn logits_at(&self, seq: &[u16], t: usize) -> Vec<f64>;

    fn dist_at(&self, seq: &[u16], t: usize, temperature: f64) -> CategoricalDistribution {
        CategoricalDistribution::new(softmax_slice(&self.logits_at(seq, t), temperature))
            .expect("softmax output is a valid distribution")
    }
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    // Box-Muller, cosine branch only
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Frozen lookup-table teacher: one logit row per context tuple.
#[derive(Debug, Clone)]
pub struct TabularTeacher {
    vocab_size: usize,
    order: usize,
    /// `vocab_size.pow(order)` rows of `vocab_size` logits, row-major.
    logit_table: Vec<f64>,
}

impl TabularTeacher {
    /// Seeded teacher with i.i.d. Gaussian logit rows; `sigma` controls how
    /// peaked (and how heterogeneous in entropy) the conditionals are.
    pub fn random(vocab_size: usize, order: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be >= 2"));
        }
        if !(order == 1 || order == 2) {
            return Err(Error::config("teacher_order", "must be 1 or 2"));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::config("teacher_sigma", "must be positive"));
        }
        let rows = vocab_size.pow(order as u32);
        let logit_table = (0..rows * vocab_size)
            .map(|_| gaussian(rng, sigma))
            .collect();
        Ok(TabularTeacher {
            vocab_size,
            order,
            logit_table,
        })
    }

    /// Seeded teacher whose logit table factors through `rank` Gaussian
    /// components, scaled so entries keep stddev `sigma`.
    ///
    /// A rank within the student's capacity makes the teacher realizable, so
    /// supervision allocation stops competing for representation space; the
    /// default i.i.d. table has no such shared structure.
    pub fn random_low_rank(
        vocab_size: usize,
        order: usize,
        sigma: f64,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("teacher_rank", "must be >= 1"));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::config("teacher_sigma", "must be positive"));
        }
        if vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be >= 2"));
        }
        if !(order == 1 || order == 2) {
            return Err(Error::config("teacher_order", "must be 1 or 2"));
        }
        let rows = vocab_size.pow(order as u32);
        // factor entries ~ N(0, sigma / sqrt(rank)) give product entries of
        // variance sigma^2
        let factor_sigma = (sigma / (rank as f64).sqrt()).sqrt();
        let left: Vec<f64> = (0..rows * rank).map(|_| gaussian(rng, factor_sigma)).collect();
        let right: Vec<f64> = (0..rank * vocab_size)
            .map(|_| gaussian(rng, factor_sigma))
            .collect();
        let mut logit_table = vec![0.0; rows * vocab_size];
        for row in 0..rows {
            for r in 0..rank {
                let f = left[row * rank + r];
                let g_row = &right[r * vocab_size..(r + 1) * vocab_size];
                let out_row = &mut logit_table[row * vocab_size..(row + 1) * vocab_size];
                for (o, &g) in out_row.iter_mut().zip(g_row) {
                    *o += f * g;
                }
            }
        }
        Ok(TabularTeacher {
            vocab_size,
            order,
            logit_table,
        })
    }

    /// Teacher with explicit logit rows (row-major, one row per context).
    pub fn from_table(vocab_size: usize, order: usize, logit_table: Vec<f64>) -> Result<Self> {
        let rows = vocab_size.pow(order as u32);
        if logit_table.len() != rows * vocab_size {
            return Err(Error::InvalidInput(format!(
                "logit table has {} entries, expected {}",
                logit_table.len(),
                rows * vocab_size
            )));
        }
        if logit_table.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput("non-finite teacher logit".into()));
        }
        Ok(TabularTeacher {
            vocab_size,
            order,
            logit_table,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Context row index for position `t`. Order-2 contexts at `t = 0` use an
    /// implicit leading token 0.
    fn context_row(&self, seq: &[u16], t: usize) -> usize {
        match self.order {
            1 => seq[t] as usize,
            2 => {
                let prev = if t == 0 { 0 } else { seq[t - 1] as usize };
                prev * self.vocab_size + seq[t] as usize
            }
            _ => unreachable!("order validated at construction"),
        }
    }

    pub fn logit_row(&self, row: usize) -> &[f64] {
        &self.logit_table[row * self.vocab_size..(row + 1) * self.vocab_size]
    }
}

impl AutoregressiveModel for TabularTeacher {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits_at(&self, seq: &[u16], t: usize) -> Vec<f64> {
        let row = self.context_row(seq, t);
        self.logit_row(row).to_vec()
    }
}

/// Low-rank student: `logits(x) = A[x] * B` with `A: V x d`, `B: d x V`.
/// Order-1 context (previous token only) keeps every gradient closed-form.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedStudent {
    vocab_size: usize,
    rank: usize,
    /// V x d, row-major.
    a: Vec<f64>,
    /// d x V, row-major.
    b: Vec<f64>,
}

impl FactorizedStudent {
    /// Small-Gaussian initialization; `rank` below `vocab_size` is the
    /// capacity gap that separates student from teacher.
    pub fn random(vocab_size: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be >= 2"));
        }
        if rank == 0 {
            return Err(Error::config("rank", "must be >= 1"));
        }
        let scale = 0.1;
        Ok(FactorizedStudent {
            vocab_size,
            rank,
            a: (0..vocab_size * rank).map(|_| gaussian(rng, scale)).collect(),
            b: (0..rank * vocab_size).map(|_| gaussian(rng, scale)).collect(),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn a_row(&self, token: usize) -> &[f64] {
        &self.a[token * self.rank..(token + 1) * self.rank]
    }

    /// Logits for the context token (order-1): `A[context] * B`.
    pub fn logits_for_context(&self, context: u16) -> Vec<f64> {
        let a_row = self.a_row(context as usize);
        let mut out = vec![0.0; self.vocab_size];
        for (r, &ar) in a_row.iter().enumerate() {
            let b_row = &self.b[r * self.vocab_size..(r + 1) * self.vocab_size];
            for (v, &bv) in b_row.iter().enumerate() {
                out[v] += ar * bv;
            }
        }
        out
    }

    /// Applies an accumulated gradient with one SGD step: `theta -= lr * g`.
    pub fn apply_gradient(&mut self, grad: &StudentGradient, lr: f64) {
        debug_assert_eq!(grad.a.len(), self.a.len());
        debug_assert_eq!(grad.b.len(), self.b.len());
        for (p, g) in self.a.iter_mut().zip(&grad.a) {
            *p -= lr * g;
        }
        for (p, g) in self.b.iter_mut().zip(&grad.b) {
            *p -= lr * g;
        }
    }

    /// Writes the checkpoint: u32 LE vocab, u32 LE rank, then A and B as
    /// row-major f64 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        out.write_all(&(self.rank as u32).to_le_bytes())?;
        for &x in self.a.iter().chain(self.b.iter()) {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let vocab_size = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if vocab_size < 2 || rank == 0 {
            return Err(Error::Corruption(format!(
                "checkpoint dimensions {vocab_size} x {rank} are invalid"
            )));
        }
        let mut read_matrix = |len: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                input.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let a = read_matrix(vocab_size * rank)?;
        let b = read_matrix(rank * vocab_size)?;
        Ok(FactorizedStudent {
            vocab_size,
            rank,
            a,
            b,
        })
    }
}

impl AutoregressiveModel for FactorizedStudent {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits_at(&self, seq: &[u16], t: usize) -> Vec<f64> {
        self.logits_for_context(seq[t])
    }
}

/// Gradient accumulator matching the student's parameter layout.
#[derive(Debug, Clone)]
pub struct StudentGradient {
    a: Vec<f64>,
    b: Vec<f64>,
    rank: usize,
    vocab_size: usize,
}

impl StudentGradient {
    pub fn zeros_like(student: &FactorizedStudent) -> Self {
        StudentGradient {
            a: vec![0.0; student.a.len()],
            b: vec![0.0; student.b.len()],
            rank: student.rank,
            vocab_size: student.vocab_size,
        }
    }

    /// Accumulates `scale * dL/dlogits` backpropagated through
    /// `logits = A[context] * B`:
    /// `dA[context] += B * g` and `dB += A[context]^T (outer) g`.
    pub fn accumulate(
        &mut self,
        student: &FactorizedStudent,
        context: u16,
        logit_grad: &[f64],
        scale: f64,
    ) {
        debug_assert_eq!(logit_grad.len(), self.vocab_size);
        let a_row = student.a_row(context as usize);
        let ga = &mut self.a[context as usize * self.rank..(context as usize + 1) * self.rank];
        for r in 0..self.rank {
            let b_row = &student.b[r * self.vocab_size..(r + 1) * self.vocab_size];
            let gb = &mut self.b[r * self.vocab_size..(r + 1) * self.vocab_size];
            let ar = a_row[r];
            let mut dot = 0.0;
            for v in 0..self.vocab_size {
                let g = scale * logit_grad[v];
                dot += g * b_row[v];
                gb[v] += g * ar;
            }
            ga[r] += dot;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|&g| g == 0.0)
    }
}

/// Where a batch's sequences came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSource {
    Corpus,
    StudentGenerated,
}

/// Ragged batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    sequences: Vec<Vec<u16>>,
    source: BatchSource,
}

impl SequenceBatch {
    pub fn new(
        sequences: Vec<Vec<u16>>,
        source: BatchSource,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for (i, seq) in sequences.iter().enumerate() {
            if seq.len() < 2 || seq.len() > max_seq_len {
                return Err(Error::InvalidInput(format!(
                    "sequence {i} has length {}, expected 2..={max_seq_len}",
                    seq.len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::InvalidInput(format!(
                    "token id {bad} out of range for vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(SequenceBatch { sequences, source })
    }

    pub fn sequences(&self) -> &[Vec<u16>] {
        &self.sequences
    }

    pub fn source(&self) -> BatchSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total supervised positions, `sum_i (L_i - 1)`.
    pub fn total_positions(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }
}

/// Per-run instrumentation: how much supervision and logit compute a run
/// actually spent. Updated only by the run owner.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ComputeCounters {
    /// Positions that received a gradient-carrying KD term.
    pub supervised_positions: u64,
    /// Teacher logit rows computed (one per queried position).
    pub teacher_queries: u64,
    /// Gradient-carrying student logit rows computed.
    pub student_logit_rows: u64,
    /// Grad-free student logit rows computed while scoring positions.
    pub scoring_logit_rows: u64,
    /// Individual logit scalars currently materialized (scoring passes).
    pub live_logits: u64,
    /// High-water mark of `live_logits`.
    pub peak_live_logits: u64,
}

impl ComputeCounters {
    fn acquire_logits(&mut self, n: u64) {
        self.live_logits += n;
        self.peak_live_logits = self.peak_live_logits.max(self.live_logits);
    }

    fn release_logits(&mut self, n: u64) {
        self.live_logits -= n;
    }
}

/// Teacher distributions for every supervised position of every sequence.
pub fn teacher_forward(
    teacher: &TabularTeacher,
    batch: &SequenceBatch,
    temperature: f64,
    counters: &mut ComputeCounters,
) -> Result<Vec<Vec<CategoricalDistribution>>> {
    batch
        .sequences()
        .iter()
        .map(|seq| {
            if let Some(&bad) = seq.iter().find(|&&id| id as usize >= teacher.vocab_size()) {
                return Err(Error::InvalidInput(format!(
                    "token id {bad} out of range for teacher vocabulary {}",
                    teacher.vocab_size()
                )));
            }
            Ok((0..seq.len() - 1)
                .map(|t| {
                    counters.teacher_queries += 1;
                    teacher.dist_at(seq, t, temperature)
                })
                .collect())
        })
        .collect()
}

/// Student logits over one sequence's supervised positions.
///
/// With a mask, logits are computed only at selected positions (`None`
/// elsewhere) and the gradient-carrying row counter advances by the selected
/// count, not by L-1. Values at selected positions are identical to the
/// unmasked forward.
pub fn student_forward(
    student: &FactorizedStudent,
    seq: &[u16],
    mask: Option<&SelectionMask>,
    counters: &mut ComputeCounters,
) -> Result<Vec<Option<Vec<f64>>>> {
    let n = seq.len() - 1;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::InvalidInput(format!(
                "mask length {} does not match {} supervised positions",
                m.len(),
                n
            )));
        }
    }
    if let Some(&bad) = seq.iter().find(|&&id| id as usize >= student.vocab_size()) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of range for student vocabulary {}",
            student.vocab_size()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (t, &context) in seq[..n].iter().enumerate() {
        if mask.is_none_or(|m| m.is_selected(t)) {
            counters.student_logit_rows += 1;
            out.push(Some(student.logits_for_context(context)));
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

/// Per-position student entropies computed `chunk_size` positions at a time,
/// so at most `chunk_size * V` logit scalars are ever live; the peak-logit
/// counter asserts exactly that.
pub fn chunked_entropy(
    student: &FactorizedStudent,
    seq: &[u16],
    chunk_size: usize,
    counters: &mut ComputeCounters,
) -> Result<Vec<f64>> {
    if chunk_size == 0 {
        return Err(Error::InvalidInput("chunk_size must be >= 1".into()));
    }
    if let Some(&bad) = seq.iter().find(|&&id| id as usize >= student.vocab_size()) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of range for student vocabulary {}",
            student.vocab_size()
        )));
    }
    let n = seq.len() - 1;
    let v = student.vocab_size();
    let mut entropies = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk_size).min(n);
        let chunk_logits: Vec<Vec<f64>> = (start..end)
            .map(|t| student.logits_for_context(seq[t]))
            .collect();
        let live = (chunk_logits.len() * v) as u64;
        counters.acquire_logits(live);
        counters.scoring_logit_rows += chunk_logits.len() as u64;
        for logits in &chunk_logits {
            entropies.push(entropy_slice(&softmax_slice(logits, 1.0)));
        }
        counters.release_logits(live);
        start = end;
    }
    Ok(entropies)
}

/// Ancestral sampling continuation: `length` tokens appended after `prompt`
/// at temperature 1.
pub fn generate(
    model: &dyn AutoregressiveModel,
    prompt: &[u16],
    length: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u16>> {
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must be non-empty".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&id| id as usize >= model.vocab_size()) {
        return Err(Error::InvalidInput(format!(
            "prompt token {bad} out of range for vocabulary {}",
            model.vocab_size()
        )));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..length {
        let t = seq.len() - 1;
        let probs = softmax_slice(&model.logits_at(&seq, t), 1.0);
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cdf.push(acc);
        }
        let x: f64 = rng.gen();
        let token = cdf.partition_point(|&c| c <= x).min(probs.len() - 1);
        seq.push(token as u16);
    }
    Ok(seq)
}

/// Synthesizes a corpus by ancestral sampling from the teacher: uniform
/// initial tokens, sequences of `max_seq_len`, `n_tokens` in total.
pub fn synthesize_corpus(
    teacher: &TabularTeacher,
    n_tokens: usize,
    max_seq_len: usize,
    rng: &mut impl Rng,
) -> Result<SequenceBatch> {
    if max_seq_len < 2 {
        return Err(Error::config("max_seq_len", "must be >= 2"));
    }
    if n_tokens < 2 {
        return Err(Error::config("train_tokens", "must be >= 2"));
    }
    let mut sequences = Vec::new();
    let mut produced = 0usize;
    while produced < n_tokens {
        let len = max_seq_len.min(n_tokens - produced).max(2);
        let first = rng.gen_range(0..teacher.vocab_size()) as u16;
        let seq = generate(teacher, &[first], len - 1, rng)?;
        produced += seq.len();
        sequences.push(seq);
    }
    SequenceBatch::new(sequences, BatchSource::Corpus, teacher.vocab_size(), max_seq_len)
}

/// Loads a flat u16 LE token stream and chunks it into sequences of
/// `max_seq_len`; a trailing chunk shorter than 2 tokens is dropped.
pub fn load_token_file(
    path: &Path,
    vocab_size: usize,
    max_seq_len: usize,
) -> Result<SequenceBatch> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Corruption(format!(
            "token file has odd byte length {}",
            bytes.len()
        )));
    }
    let tokens: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let sequences: Vec<Vec<u16>> = tokens
        .chunks(max_seq_len)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect();
    if sequences.is_empty() {
        return Err(Error::InvalidInput(
            "token file yields no usable sequences".into(),
        ));
    }
    SequenceBatch::new(sequences, BatchSource::Corpus, vocab_size, max_seq_len)
}

/// Writes a batch back out as a flat u16 LE token stream.
pub fn save_token_file(path: &Path, batch: &SequenceBatch) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for seq in batch.sequences() {
        for &token in seq {
            out.write_all(&token.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::entropy;
    use crate::selection::{select_topk, SelectionMask};
    use crate::metrics::PositionScore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_teacher(seed: u64, vocab: usize) -> TabularTeacher {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TabularTeacher::random(vocab, 1, 2.0, &mut rng).unwrap()
    }

    fn toy_student(seed: u64, vocab: usize, rank: usize) -> FactorizedStudent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FactorizedStudent::random(vocab, rank, &mut rng).unwrap()
    }

    #[test]
    fn teacher_identical_contexts_identical_distributions() {
        let teacher = toy_teacher(1, 8);
        let seq = vec![3u16, 0, 3, 1];
        let a = teacher.logits_at(&seq, 0);
        let b = teacher.logits_at(&seq, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_uniform_rows_give_uniform_outputs() {
        let teacher = TabularTeacher::from_table(4, 1, vec![0.0; 16]).unwrap();
        let mut counters = ComputeCounters::default();
        let batch = SequenceBatch::new(vec![vec![0, 1, 2, 3]], BatchSource::Corpus, 4, 8).unwrap();
        let dists = teacher_forward(&teacher, &batch, 1.0, &mut counters).unwrap();
        for d in &dists[0] {
            for &p in d.probs() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
        assert_eq!(counters.teacher_queries, 3);
    }

    #[test]
    fn length_two_sequence_has_one_supervised_position() {
        let teacher = toy_teacher(2, 8);
        let batch = SequenceBatch::new(vec![vec![1, 5]], BatchSource::Corpus, 8, 8).unwrap();
        let mut counters = ComputeCounters::default();
        let dists = teacher_forward(&teacher, &batch, 1.0, &mut counters).unwrap();
        assert_eq!(dists[0].len(), 1);
    }

    #[test]
    fn order_two_teacher_uses_both_context_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let teacher = TabularTeacher::random(4, 2, 2.0, &mut rng).unwrap();
        // same current token, different previous token
        let a = teacher.logits_at(&[0, 2, 1], 1);
        let b = teacher.logits_at(&[3, 2, 1], 1);
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let teacher = toy_teacher(4, 8);
        let batch = SequenceBatch::new(vec![vec![1, 9]], BatchSource::Corpus, 16, 8).unwrap();
        let mut counters = ComputeCounters::default();
        assert!(teacher_forward(&teacher, &batch, 1.0, &mut counters).is_err());
        assert!(SequenceBatch::new(vec![vec![1, 9]], BatchSource::Corpus, 8, 8).is_err());
    }

    #[test]
    fn student_masked_forward_matches_unmasked_at_selected() {
        let student = toy_student(5, 16, 4);
        let seq: Vec<u16> = vec![0, 3, 7, 11, 2, 9, 14, 1, 8, 15, 4];
        let n = seq.len() - 1;
        let mut counters = ComputeCounters::default();
        let full = student_forward(&student, &seq, None, &mut counters).unwrap();
        assert_eq!(counters.student_logit_rows, n as u64);

        let scores: Vec<PositionScore> = (0..n)
            .map(|position| PositionScore {
                position,
                score: (position as f64 * 7.3) % 3.0,
            })
            .collect();
        let mask = select_topk(&scores, 0.2).unwrap();
        let mut counters = ComputeCounters::default();
        let masked = student_forward(&student, &seq, Some(&mask), &mut counters).unwrap();
        assert_eq!(counters.student_logit_rows, mask.selected_count() as u64);
        for t in 0..n {
            if mask.is_selected(t) {
                assert_eq!(masked[t], full[t]);
            } else {
                assert!(masked[t].is_none());
            }
        }

        let all = SelectionMask::full(n);
        let mut counters = ComputeCounters::default();
        let via_mask = student_forward(&student, &seq, Some(&all), &mut counters).unwrap();
        assert_eq!(via_mask, full);
    }

    #[test]
    fn chunked_entropy_matches_dense_for_every_chunk_size() {
        let student = toy_student(7, 12, 3);
        let seq: Vec<u16> = vec![0, 5, 9, 2, 7, 11, 3, 1, 10, 4, 8];
        let n = seq.len() - 1;
        let mut counters = ComputeCounters::default();
        let dense: Vec<f64> = student_forward(&student, &seq, None, &mut counters)
            .unwrap()
            .into_iter()
            .map(|l| {
                entropy(
                    &CategoricalDistribution::new(softmax_slice(&l.unwrap(), 1.0)).unwrap(),
                )
            })
            .collect();
        for chunk_size in 1..=n + 2 {
            let mut counters = ComputeCounters::default();
            let chunked = chunked_entropy(&student, &seq, chunk_size, &mut counters).unwrap();
            assert_eq!(chunked.len(), dense.len());
            for (a, b) in chunked.iter().zip(&dense) {
                assert!((a - b).abs() < 1e-12, "chunk_size {chunk_size}: {a} vs {b}");
            }
            assert!(
                counters.peak_live_logits <= (chunk_size * student.vocab_size()) as u64,
                "peak {} exceeds chunk budget",
                counters.peak_live_logits
            );
            assert_eq!(counters.live_logits, 0);
        }
    }

    #[test]
    fn chunked_entropy_uniform_student_is_ln_v() {
        // rank-1 student with zero B gives uniform predictions
        let student = FactorizedStudent {
            vocab_size: 6,
            rank: 1,
            a: vec![1.0; 6],
            b: vec![0.0; 6],
        };
        let mut counters = ComputeCounters::default();
        let e = chunked_entropy(&student, &[0, 1, 2, 3], 2, &mut counters).unwrap();
        for &h in &e {
            assert!((h - 6.0_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_is_deterministic_for_peaked_model() {
        // near-one-hot teacher rows: next token = (context + 1) mod V
        let v = 5;
        let mut table = vec![-1e3; v * v];
        for c in 0..v {
            table[c * v + (c + 1) % v] = 1e3;
        }
        let teacher = TabularTeacher::from_table(v, 1, table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = generate(&teacher, &[0], 6, &mut rng).unwrap();
        assert_eq!(seq, vec![0, 1, 2, 3, 4, 0, 1]);
    }

    #[test]
    fn generated_tokens_stay_in_vocabulary() {
        let teacher = toy_teacher(11, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = generate(&teacher, &[3], 500, &mut rng).unwrap();
        assert!(seq.iter().all(|&t| (t as usize) < 8));
    }

    #[test]
    fn generated_frequencies_match_teacher_conditionals() {
        let v = 4;
        let teacher = toy_teacher(13, v);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let total = 100_000;
        let seq = generate(&teacher, &[0], total, &mut rng).unwrap();
        // bigram conditional frequencies vs the teacher table
        let mut counts = vec![vec![0u32; v]; v];
        for w in seq.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1;
        }
        for c in 0..v {
            let n_c: u32 = counts[c].iter().sum();
            assert!(n_c > 1000, "context {c} seen only {n_c} times");
            let p = softmax_slice(teacher.logit_row(c), 1.0);
            for t in 0..v {
                let freq = counts[c][t] as f64 / n_c as f64;
                let sigma = (p[t] * (1.0 - p[t]) / n_c as f64).sqrt();
                assert!(
                    (freq - p[t]).abs() <= 3.0 * sigma + 1e-9,
                    "context {c} token {t}: freq {freq} vs p {} (n={n_c})",
                    p[t]
                );
            }
        }
    }

    #[test]
    fn corpus_synthesis_and_token_file_round_trip() {
        let teacher = toy_teacher(17, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus = synthesize_corpus(&teacher, 1000, 16, &mut rng).unwrap();
        assert!(corpus.sequences().iter().all(|s| s.len() <= 16 && s.len() >= 2));
        let total: usize = corpus.sequences().iter().map(|s| s.len()).sum();
        assert!(total >= 1000);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.bin");
        save_token_file(&path, &corpus).unwrap();
        let loaded = load_token_file(&path, 8, 16).unwrap();
        // all sequences are full-width here, so chunking reproduces them
        assert_eq!(loaded.sequences(), corpus.sequences());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let student = toy_student(19, 10, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.bin");
        student.save(&path).unwrap();
        let loaded = FactorizedStudent::load(&path).unwrap();
        assert_eq!(loaded, student);
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            8 + (10 * 3 + 3 * 10) as u64 * 8
        );
    }

    #[test]
    fn gradient_accumulator_applies_sgd_step() {
        let mut student = toy_student(23, 6, 2);
        let before = student.clone();
        let mut grad = StudentGradient::zeros_like(&student);
        assert!(grad.is_zero());
        grad.accumulate(&student, 3, &[1.0, -1.0, 0.5, 0.0, 0.0, -0.5], 1.0);
        assert!(!grad.is_zero());
        student.apply_gradient(&grad, 0.0);
        assert_eq!(student, before);
        student.apply_gradient(&grad, 0.1);
        assert_ne!(student, before);
    }
}
