//! Experiment orchestration: single runs, budget sweeps, Monte Carlo
//! estimator verification, and offline cache construction.
//!
//! A run is fully determined by its configuration: the teacher, corpus,
//! student initialization, policy randomness, and class sampling all derive
//! from the run seed, so identical configs produce bit-identical artifacts.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::cache::{CacheReader, CacheWriter};
use crate::class_sampling::sample_classes;
use crate::config::DistillRun;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::metrics::{softmax_slice, CategoricalDistribution, PositionScore};
use crate::model::{
    chunked_entropy, load_token_file, synthesize_corpus, AutoregressiveModel, ComputeCounters,
    FactorizedStudent, SequenceBatch, TabularTeacher,
};
use crate::rng::{class_sampling_stream, role_stream, StreamRole};
use crate::selection::{
    rank_samples, sample_positions_rs, write_sample_manifest, SampleScore,
};
use crate::train::{train_step, StepMetrics, TrainState};

/// Everything a finished run produces.
pub struct RunArtifacts {
    pub config: DistillRun,
    pub report: EvalReport,
    pub counters: ComputeCounters,
    pub trajectory: Vec<StepMetrics>,
    pub student: FactorizedStudent,
    /// Train-split sample ids kept by sample selection, when active.
    pub selected_samples: Option<Vec<u64>>,
}

/// Train/held-out corpus split; sample ids index the train slice.
pub struct CorpusSplit {
    pub train: Vec<Vec<u16>>,
    pub heldout: SequenceBatch,
}

/// Loads or synthesizes the corpus for a config and splits off the held-out
/// tail.
pub fn prepare_corpus(cfg: &DistillRun, teacher: &TabularTeacher) -> Result<CorpusSplit> {
    let corpus = match &cfg.corpus_path {
        Some(path) => load_token_file(path, cfg.vocab_size, cfg.max_seq_len)?,
        None => {
            let mut rng = role_stream(cfg.seed, StreamRole::CorpusSynthesis);
            synthesize_corpus(teacher, cfg.train_tokens, cfg.max_seq_len, &mut rng)?
        }
    };
    let n = corpus.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "corpus must yield at least two sequences to split off a held-out set".into(),
        ));
    }
    let heldout_count = ((cfg.heldout_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let sequences = corpus.sequences();
    let train = sequences[..n - heldout_count].to_vec();
    let heldout = SequenceBatch::new(
        sequences[n - heldout_count..].to_vec(),
        crate::model::BatchSource::Corpus,
        cfg.vocab_size,
        cfg.max_seq_len,
    )?;
    Ok(CorpusSplit { train, heldout })
}

/// Average student entropy per train sequence from a single pass of the
/// frozen (initial) student, then top-`l` ranking.
fn select_samples(
    cfg: &DistillRun,
    student: &FactorizedStudent,
    train: &[Vec<u16>],
    counters: &mut ComputeCounters,
) -> Result<Option<Vec<u64>>> {
    let Some(l) = cfg.sample_l else {
        return Ok(None);
    };
    let scores: Vec<SampleScore> = train
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let entropies = chunked_entropy(student, seq, cfg.chunk_size, counters)?;
            Ok(SampleScore {
                sample_id: i as u64,
                avg_entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Some(rank_samples(&scores, l)?))
}

/// Executes one experiment: train for `steps`, evaluate on the held-out
/// split, and (optionally) write the run directory.
pub fn run_experiment(cfg: DistillRun, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    let cfg = cfg.validated()?;
    let mut state = TrainState::new(&cfg)?;
    let split = prepare_corpus(&cfg, &state.teacher)?;

    let selected = select_samples(&cfg, &state.student, &split.train, &mut state.counters)?;
    let active: Vec<(u64, Vec<u16>)> = match &selected {
        Some(ids) => ids
            .iter()
            .map(|&id| (id, split.train[id as usize].clone()))
            .collect(),
        None => split
            .train
            .iter()
            .enumerate()
            .map(|(i, seq)| (i as u64, seq.clone()))
            .collect(),
    };
    if active.is_empty() {
        return Err(Error::config("sample_l", "sample selection kept no sequences"));
    }

    let mut cache = match &cfg.cache_path {
        Some(path) => {
            let reader = CacheReader::open(path)?;
            if reader.header().vocab_size as usize != cfg.vocab_size {
                return Err(Error::config(
                    "cache_path",
                    format!(
                        "cache vocabulary {} does not match run vocabulary {}",
                        reader.header().vocab_size,
                        cfg.vocab_size
                    ),
                ));
            }
            Some(reader)
        }
        None => None,
    };

    let mut trajectory = Vec::with_capacity(cfg.steps as usize);
    let mut cursor = 0usize;
    for _ in 0..cfg.steps {
        let batch: Vec<(u64, Vec<u16>)> = (0..cfg.batch_size)
            .map(|i| active[(cursor + i) % active.len()].clone())
            .collect();
        cursor = (cursor + cfg.batch_size) % active.len();
        trajectory.push(train_step(&mut state, &cfg, &batch, cache.as_mut())?);
    }

    let report = evaluate(&state.student, &split.heldout)?;

    let artifacts = RunArtifacts {
        config: cfg,
        report,
        counters: state.counters,
        trajectory,
        student: state.student,
        selected_samples: selected,
    };
    if let Some(dir) = out_dir {
        write_run_dir(dir, &artifacts)?;
    }
    Ok(artifacts)
}

fn counters_kv(c: &ComputeCounters) -> String {
    format!(
        "supervised_positions={}\nteacher_queries={}\nstudent_logit_rows={}\nscoring_logit_rows={}\npeak_live_logits={}\n",
        c.supervised_positions,
        c.teacher_queries,
        c.student_logit_rows,
        c.scoring_logit_rows,
        c.peak_live_logits
    )
}

fn trajectory_tsv(trajectory: &[StepMetrics]) -> String {
    let mut out = String::from("step\tloss\tsupervised_positions\tcontributing_sequences\n");
    for m in trajectory {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            m.step, m.loss, m.supervised_positions, m.contributing_sequences
        ));
    }
    out
}

/// Writes the run directory: config echo, report, counters, loss trajectory,
/// student checkpoint, and the sample manifest when sample selection ran.
/// Config plus seed reproduce every byte.
pub fn write_run_dir(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.kv"), artifacts.config.to_kv())?;
    std::fs::write(dir.join("report.kv"), artifacts.report.to_kv())?;
    std::fs::write(dir.join("counters.kv"), counters_kv(&artifacts.counters))?;
    std::fs::write(dir.join("trajectory.tsv"), trajectory_tsv(&artifacts.trajectory))?;
    artifacts.student.save(&dir.join("student.bin"))?;
    if let Some(ids) = &artifacts.selected_samples {
        write_sample_manifest(&dir.join("samples.skdm"), ids)?;
    }
    Ok(())
}

/// Budget axis swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Position budget `k`.
    K,
    /// Sample budget `l`.
    L,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "l" => Ok(SweepAxis::L),
            other => Err(Error::config("axis", format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// One sweep point aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub budget: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_perplexity: f64,
    pub std_perplexity: f64,
    pub seeds: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the base config once per `(budget, seed)` pair and aggregates
/// held-out accuracy and perplexity per budget. The grid is sorted ascending.
pub fn sweep(
    base: &DistillRun,
    axis: SweepAxis,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("grid", "sweep grid must be non-empty"));
    }
    if seeds.is_empty() {
        return Err(Error::config("seeds", "seed list must be non-empty"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::with_capacity(grid.len());
    for &budget in &grid {
        let mut accs = Vec::with_capacity(seeds.len());
        let mut ppls = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match axis {
                SweepAxis::K => cfg.k = budget,
                SweepAxis::L => cfg.sample_l = Some(budget),
            }
            let artifacts = run_experiment(cfg, None)?;
            accs.push(artifacts.report.top1_accuracy);
            ppls.push(artifacts.report.perplexity);
        }
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let (mean_perplexity, std_perplexity) = mean_std(&ppls);
        rows.push(SweepRow {
            budget,
            mean_accuracy,
            std_accuracy,
            mean_perplexity,
            std_perplexity,
            seeds: seeds.len(),
        });
    }
    Ok(rows)
}

/// Plot-ready tab-separated rendering of sweep results.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("budget\tmean_accuracy\tstd_accuracy\tmean_perplexity\tstd_perplexity\tseeds\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.budget, r.mean_accuracy, r.std_accuracy, r.mean_perplexity, r.std_perplexity, r.seeds
        ));
    }
    out
}

/// Outcome of one Monte Carlo estimator check.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCheck {
    pub name: String,
    pub target: f64,
    pub measured: f64,
    /// Relative error for the loss estimators, absolute for target masses.
    pub error: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Report of the estimator verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub trials: u64,
    pub seed: u64,
    pub checks: Vec<EstimatorCheck>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut out = format!("trials={} seed={}\n", self.trials, self.seed);
        for c in &self.checks {
            out.push_str(&format!(
                "{}: target={:.6} measured={:.6} error={:.3e} threshold={:.1e} [{}]\n",
                c.name,
                c.target,
                c.measured,
                c.error,
                c.threshold,
                if c.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Relative-error tolerance for the stochastic-position loss estimators.
pub const ESTIMATOR_REL_TOLERANCE: f64 = 0.005;
/// Absolute per-class tolerance for sampled-target unbiasedness.
pub const TARGET_ABS_TOLERANCE: f64 = 0.01;

/// Monte Carlo verification: stochastic position selection is an unbiased
/// estimator of the score-weighted objective, its importance-corrected
/// variant is unbiased for the plain mean, and sampled class targets are
/// unbiased for the teacher distribution.
pub fn verify_estimators(trials: u64, seed: u64) -> Result<VerificationReport> {
    if trials < 10_000 {
        return Err(Error::config("trials", "must be at least 10000"));
    }
    let mut checks = Vec::new();

    // fixed loss/weight instances, including the uniform-weight case where
    // both estimators share a target
    let instances: [(&str, Vec<f64>, Vec<f64>); 3] = [
        ("uniform_weights", vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 1.0, 1.0, 1.0]),
        ("descending_weights", vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]),
        ("two_position", vec![1.0, 5.0], vec![3.0, 1.0]),
    ];

    for (idx, (name, losses, weights)) in instances.iter().enumerate() {
        let n = losses.len();
        let scores: Vec<PositionScore> = weights
            .iter()
            .enumerate()
            .map(|(position, &score)| PositionScore { position, score })
            .collect();
        let weight_sum: f64 = weights.iter().sum();
        let weighted_target: f64 = weights
            .iter()
            .zip(losses.iter())
            .map(|(w, l)| w * l)
            .sum::<f64>()
            / weight_sum;
        let mean_target: f64 = losses.iter().sum::<f64>() / n as f64;

        let mut rng = role_stream(seed ^ ((idx as u64 + 1) << 32), StreamRole::PositionPolicy);
        // enough draws per trial that the 0.5% band sits several sigma out
        // at the minimum trial count
        let k_draws = (4 * n).max(16);
        let mut plain_acc = 0.0;
        let mut corrected_acc = 0.0;
        for _ in 0..trials {
            let draws = sample_positions_rs(&scores, k_draws, &mut rng, 1.0)?;
            let plain: f64 =
                draws.draws.iter().map(|&t| losses[t]).sum::<f64>() / k_draws as f64;
            plain_acc += plain;
            let corrected: f64 = draws
                .draws
                .iter()
                .map(|&t| losses[t] / draws.q[t])
                .sum::<f64>()
                / (k_draws as f64 * n as f64);
            corrected_acc += corrected;
        }
        let plain_mean = plain_acc / trials as f64;
        let corrected_mean = corrected_acc / trials as f64;

        let error = (plain_mean - weighted_target).abs() / weighted_target;
        checks.push(EstimatorCheck {
            name: format!("pos_rs_weighted/{name}"),
            target: weighted_target,
            measured: plain_mean,
            error,
            threshold: ESTIMATOR_REL_TOLERANCE,
            pass: error < ESTIMATOR_REL_TOLERANCE,
        });
        let error = (corrected_mean - mean_target).abs() / mean_target;
        checks.push(EstimatorCheck {
            name: format!("pos_rs_corrected/{name}"),
            target: mean_target,
            measured: corrected_mean,
            error,
            threshold: ESTIMATOR_REL_TOLERANCE,
            pass: error < ESTIMATOR_REL_TOLERANCE,
        });
    }

    // sampled-target unbiasedness at the two cached draw counts
    let vocab = 64;
    let mut dist_rng = role_stream(seed, StreamRole::TeacherInit);
    let logits: Vec<f64> = (0..vocab).map(|_| dist_rng.gen_range(-2.0..2.0)).collect();
    let teacher = CategoricalDistribution::new(softmax_slice(&logits, 1.0))?;
    for &u in &[12u32, 64] {
        let mut rng = role_stream(seed ^ u as u64, StreamRole::ClassSampling);
        let mut mass = vec![0.0; vocab];
        for _ in 0..trials {
            let target = sample_classes(&teacher, u, &mut rng)?;
            for (&v, &w) in target.support().iter().zip(target.weights()) {
                mass[v as usize] += w;
            }
        }
        let mut worst = 0.0f64;
        let mut worst_class = 0;
        for (v, (&m, &p)) in mass.iter().zip(teacher.probs()).enumerate() {
            let err = (m / trials as f64 - p).abs();
            if err > worst {
                worst = err;
                worst_class = v;
            }
        }
        checks.push(EstimatorCheck {
            name: format!("class_target_unbiased/U={u}"),
            target: teacher.probs()[worst_class],
            measured: mass[worst_class] / trials as f64,
            error: worst,
            threshold: TARGET_ABS_TOLERANCE,
            pass: worst < TARGET_ABS_TOLERANCE,
        });
    }

    Ok(VerificationReport {
        trials,
        seed,
        checks,
    })
}

/// Summary of an offline cache build.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheBuildSummary {
    pub cache_path: PathBuf,
    pub manifest_path: Option<PathBuf>,
    pub samples: u64,
    pub positions: u64,
    pub bytes: u64,
}

/// Default classes sampled per position when a cache build does not say.
pub const DEFAULT_CLASS_DRAWS: u32 = 64;

/// Builds the offline teacher cache for a config: every train-split sample
/// that the run would touch gets all of its positions sampled and stored,
/// with `class_u` draws per position (64 when unset).
///
/// Draws come from the same per-(sample, position) streams the online run
/// uses, so replaying the cache reproduces the online run exactly.
pub fn build_cache(cfg: &DistillRun, out_path: &Path) -> Result<CacheBuildSummary> {
    let cfg = cfg.clone().validated()?;
    let u = cfg.class_u.unwrap_or(DEFAULT_CLASS_DRAWS);
    let mut state = TrainState::new(&cfg)?;
    let split = prepare_corpus(&cfg, &state.teacher)?;
    let selected = select_samples(&cfg, &state.student, &split.train, &mut state.counters)?;
    let ids: Vec<u64> = match &selected {
        Some(ids) => ids.clone(),
        None => (0..split.train.len() as u64).collect(),
    };

    let mut writer = CacheWriter::create(out_path, cfg.vocab_size as u32, u as u16)?;
    let mut positions = 0u64;
    for &id in &ids {
        let seq = &split.train[id as usize];
        let targets: Vec<_> = (0..seq.len() - 1)
            .map(|t| {
                let dist = state.teacher.dist_at(seq, t, cfg.temperature);
                let mut rng = class_sampling_stream(cfg.seed, id, t);
                sample_classes(&dist, u, &mut rng)
            })
            .collect::<Result<_>>()?;
        positions += targets.len() as u64;
        writer.append_sample(id, &targets)?;
    }
    writer.finish()?;

    let manifest_path = if selected.is_some() {
        let path = out_path.with_extension("skdm");
        write_sample_manifest(&path, &ids)?;
        Some(path)
    } else {
        None
    };
    Ok(CacheBuildSummary {
        cache_path: out_path.to_path_buf(),
        manifest_path,
        samples: ids.len() as u64,
        positions,
        bytes: std::fs::metadata(out_path)?.len(),
    })
}
