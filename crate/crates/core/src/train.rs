//! The distillation training loop.
//!
//! One step: score positions with a gradient-free student pass, turn scores
//! into a mask under the configured policy, fetch teacher supervision (live
//! distributions, freshly sampled sparse targets, or cache replay) at the
//! selected positions only, evaluate the selective loss, and apply one SGD
//! update. Everything is deterministic given the run seed.

use rand_chacha::ChaCha8Rng;

use crate::cache::CacheReader;
use crate::class_sampling::sample_classes;
use crate::config::{DistillRun, Policy};
use crate::error::{Error, Result};
use crate::loss::{
    sequence_selective_loss, Alignment, PositionGrad, PositionSupervision, SequenceLossInput,
};
use crate::metrics::{
    score_positions, softmax_slice, CategoricalDistribution, Metric, PositionScore,
};
use crate::model::{
    chunked_entropy, generate, student_forward, AutoregressiveModel, ComputeCounters,
    FactorizedStudent, StudentGradient, TabularTeacher,
};
use crate::rng::{class_sampling_stream, role_stream, StreamRole};
use crate::selection::{
    mask_from_position_draws, position_budget, sample_positions_rs, select_curriculum, select_gls,
    select_random, select_topk, weighted_mask_from_scores, CurriculumSchedule, GlsState,
    SelectionMask,
};

/// Metrics of a single optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Batch selective loss (mean over contributing sequences).
    pub loss: f64,
    /// Positions supervised in this step.
    pub supervised_positions: u64,
    /// Sequences that contributed loss (GLS may zero out a sequence).
    pub contributing_sequences: usize,
}

/// Mutable training state: models, policy state, counters, and the run's
/// random streams.
pub struct TrainState {
    pub teacher: TabularTeacher,
    pub student: FactorizedStudent,
    pub counters: ComputeCounters,
    pub step: u64,
    gls: Option<GlsState>,
    curriculum: CurriculumSchedule,
    policy_rng: ChaCha8Rng,
    generation_rng: ChaCha8Rng,
    seed: u64,
    /// Corpus positions whose teacher row has been computed. The teacher is
    /// frozen, so revisiting a position costs nothing; queries count the
    /// distinct rows a run needs. On-policy text is fresh every step and
    /// bypasses this.
    queried_positions: std::collections::HashSet<(u64, u32)>,
}

impl TrainState {
    /// Builds teacher, student, and policy state from a validated config.
    pub fn new(cfg: &DistillRun) -> Result<Self> {
        let mut teacher_rng = role_stream(cfg.seed, StreamRole::TeacherInit);
        let teacher = match cfg.teacher_rank {
            Some(rank) => TabularTeacher::random_low_rank(
                cfg.vocab_size,
                cfg.teacher_order,
                cfg.teacher_sigma,
                rank,
                &mut teacher_rng,
            )?,
            None => TabularTeacher::random(
                cfg.vocab_size,
                cfg.teacher_order,
                cfg.teacher_sigma,
                &mut teacher_rng,
            )?,
        };
        let mut student_rng = role_stream(cfg.seed, StreamRole::StudentInit);
        let student = FactorizedStudent::random(cfg.vocab_size, cfg.rank, &mut student_rng)?;
        let gls = if cfg.policy == Policy::Gls {
            Some(GlsState::new(cfg.gls_capacity, cfg.k)?)
        } else {
            None
        };
        Ok(TrainState {
            teacher,
            student,
            counters: ComputeCounters::default(),
            step: 0,
            gls,
            curriculum: CurriculumSchedule::new(cfg.curriculum_steps, cfg.k)?,
            policy_rng: role_stream(cfg.seed, StreamRole::PositionPolicy),
            generation_rng: role_stream(cfg.seed, StreamRole::Generation),
            seed: cfg.seed,
            queried_positions: std::collections::HashSet::new(),
        })
    }

    fn note_teacher_query(&mut self, sample_key: Option<u64>, t: usize) {
        let fresh = match sample_key {
            Some(id) => self.queried_positions.insert((id, t as u32)),
            None => true,
        };
        if fresh {
            self.counters.teacher_queries += 1;
        }
    }
}

/// Per-sequence teacher distribution memo. Returns whether the row was
/// freshly computed so the caller can account the query.
struct TeacherMemo {
    temperature: f64,
    rows: Vec<Option<CategoricalDistribution>>,
}

impl TeacherMemo {
    fn new(positions: usize, temperature: f64) -> Self {
        TeacherMemo {
            temperature,
            rows: vec![None; positions],
        }
    }

    fn get<'m>(
        &'m mut self,
        teacher: &TabularTeacher,
        seq: &[u16],
        t: usize,
    ) -> (&'m CategoricalDistribution, bool) {
        let fresh = self.rows[t].is_none();
        if fresh {
            self.rows[t] = Some(
                CategoricalDistribution::new(softmax_slice(
                    &teacher.logits_at(seq, t),
                    self.temperature,
                ))
                .expect("softmax output is a valid distribution"),
            );
        }
        (self.rows[t].as_ref().unwrap(), fresh)
    }
}

/// Grad-free student distributions at every position, one row live at a time.
fn score_student_dists(
    student: &FactorizedStudent,
    seq: &[u16],
    counters: &mut ComputeCounters,
) -> Vec<CategoricalDistribution> {
    let v = student.vocab_size() as u64;
    (0..seq.len() - 1)
        .map(|t| {
            counters.live_logits += v;
            counters.peak_live_logits = counters.peak_live_logits.max(counters.live_logits);
            counters.scoring_logit_rows += 1;
            let logits = student.logits_for_context(seq[t]);
            let dist = CategoricalDistribution::new(softmax_slice(&logits, 1.0))
                .expect("softmax output is a valid distribution");
            counters.live_logits -= v;
            dist
        })
        .collect()
}

fn score_sequence(
    state: &mut TrainState,
    cfg: &DistillRun,
    sample_key: Option<u64>,
    seq: &[u16],
    labels: &[usize],
    teacher_memo: &mut TeacherMemo,
) -> Result<Vec<PositionScore>> {
    if cfg.metric == Metric::StudentEntropy {
        // entropy never needs the full logit tensor; stream it in chunks
        let entropies = chunked_entropy(&state.student, seq, cfg.chunk_size, &mut state.counters)?;
        return Ok(entropies
            .into_iter()
            .enumerate()
            .map(|(position, score)| PositionScore { position, score })
            .collect());
    }
    let student_dists = score_student_dists(&state.student, seq, &mut state.counters);
    let teacher_dists = if cfg.metric.requires_teacher() {
        let mut dists = Vec::with_capacity(seq.len() - 1);
        for t in 0..seq.len() - 1 {
            let (dist, fresh) = teacher_memo.get(&state.teacher, seq, t);
            let dist = dist.clone();
            if fresh {
                state.note_teacher_query(sample_key, t);
            }
            dists.push(dist);
        }
        Some(dists)
    } else {
        None
    };
    score_positions(cfg.metric, teacher_dists.as_deref(), &student_dists, labels)
}

fn build_mask(
    state: &mut TrainState,
    cfg: &DistillRun,
    scores: Option<&[PositionScore]>,
    n: usize,
) -> Result<SelectionMask> {
    if cfg.alignment == Alignment::WeightedKl {
        return weighted_mask_from_scores(scores.expect("weighted alignment scores"));
    }
    match cfg.policy {
        Policy::Full => Ok(SelectionMask::full(n)),
        Policy::Random => select_random(n, cfg.k, &mut state.policy_rng),
        Policy::Topk => select_topk(scores.expect("scored policy"), cfg.k),
        Policy::Gls => select_gls(
            scores.expect("scored policy"),
            state.gls.as_mut().expect("gls state initialized"),
        ),
        Policy::Curriculum => select_curriculum(
            scores.expect("scored policy"),
            state.step,
            &state.curriculum,
        ),
        Policy::PosRs | Policy::PosRsCorrected => {
            let scores = scores.expect("scored policy");
            let draws = sample_positions_rs(
                scores,
                position_budget(n, cfg.k)?,
                &mut state.policy_rng,
                cfg.smoothing_t,
            )?;
            mask_from_position_draws(&draws, cfg.k, cfg.policy == Policy::PosRsCorrected)
        }
    }
}

/// One training step over `batch`: `(sample_id, tokens)` pairs. Returns the
/// step metrics; the student is updated in place.
pub fn train_step(
    state: &mut TrainState,
    cfg: &DistillRun,
    batch: &[(u64, Vec<u16>)],
    mut cache: Option<&mut CacheReader>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }

    // On-policy mode swaps in student-generated continuations of each
    // sequence's first token; supervision lands on the student's own text.
    let owned_batch: Vec<(u64, Vec<u16>)> = if cfg.on_policy {
        batch
            .iter()
            .map(|(id, seq)| {
                let generated = generate(
                    &state.student,
                    &seq[..1],
                    cfg.max_seq_len - 1,
                    &mut state.generation_rng,
                )?;
                Ok((*id, generated))
            })
            .collect::<Result<_>>()?
    } else {
        batch.to_vec()
    };

    struct SequenceWork {
        context_tokens: Vec<u16>,
        grads: Vec<PositionGrad>,
        loss: f64,
    }
    let mut work: Vec<SequenceWork> = Vec::with_capacity(owned_batch.len());
    let mut supervised = 0u64;

    for (sample_id, seq) in &owned_batch {
        let n = seq.len() - 1;
        let labels: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let mut teacher_memo = TeacherMemo::new(n, cfg.temperature);
        let sample_key = if cfg.on_policy { None } else { Some(*sample_id) };

        let scores = if cfg.policy.needs_scores() || cfg.alignment == Alignment::WeightedKl {
            Some(score_sequence(state, cfg, sample_key, seq, &labels, &mut teacher_memo)?)
        } else {
            None
        };
        let mask = build_mask(state, cfg, scores.as_deref(), n)?;
        if mask.selected_count() == 0 {
            // GLS may threshold out an entire sequence; it contributes
            // nothing this step.
            continue;
        }
        supervised += mask.selected_count() as u64;
        state.counters.supervised_positions += mask.selected_count() as u64;

        let mut supervision: Vec<Option<PositionSupervision>> = vec![None; n];
        for t in mask.selected_positions() {
            let target = if let Some(reader) = cache.as_deref_mut() {
                PositionSupervision::Sparse(reader.read_position(*sample_id, t)?)
            } else {
                let (dist, fresh) = teacher_memo.get(&state.teacher, seq, t);
                let dist = dist.clone();
                if fresh {
                    state.note_teacher_query(sample_key, t);
                }
                if let Some(u) = cfg.class_u {
                    let mut rng = class_sampling_stream(state.seed, *sample_id, t);
                    PositionSupervision::Sparse(sample_classes(&dist, u, &mut rng)?)
                } else {
                    PositionSupervision::Dense(dist)
                }
            };
            supervision[t] = Some(target);
        }

        let student_logits = student_forward(&state.student, seq, Some(&mask), &mut state.counters)?;
        let input = SequenceLossInput {
            supervision: &supervision,
            student_logits: &student_logits,
            labels: &labels,
            mask: &mask,
        };
        let (loss, grads) =
            sequence_selective_loss(&input, cfg.alignment, cfg.lambda, cfg.temperature)?;
        work.push(SequenceWork {
            context_tokens: seq[..n].to_vec(),
            grads,
            loss,
        });
    }

    let contributing = work.len();
    let mut batch_loss = 0.0;
    if contributing > 0 {
        let scale = 1.0 / contributing as f64;
        let mut grad = StudentGradient::zeros_like(&state.student);
        for sw in &work {
            batch_loss += sw.loss;
            for pg in &sw.grads {
                grad.accumulate(&state.student, sw.context_tokens[pg.position], &pg.grad, scale);
            }
        }
        batch_loss *= scale;
        state.student.apply_gradient(&grad, cfg.lr);
    }

    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss: batch_loss,
        supervised_positions: supervised,
        contributing_sequences: contributing,
    })
}
