//! Experiment runner for the selective distillation laboratory.
//!
//! Exit codes: 0 on success, 1 on configuration (or other) errors, 2 when
//! estimator verification fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selkd_core::cache::{estimate_storage, CacheReader, StorageMethod};
use selkd_core::config::DistillRun;
use selkd_core::error::Error;
use selkd_core::eval::evaluate;
use selkd_core::model::{load_token_file, AutoregressiveModel, FactorizedStudent};
use selkd_core::runner::{
    build_cache, run_experiment, sweep, sweep_tsv, verify_estimators, SweepAxis,
};

#[derive(Parser)]
#[command(
    name = "selkd",
    about = "Selective knowledge distillation laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one distillation experiment and report held-out metrics
    Run(RunArgs),
    /// Sweep a budget axis over a grid, averaged over seeds
    Sweep(SweepArgs),
    /// Monte Carlo verification of the sampling estimators
    Verify(VerifyArgs),
    /// Offline teacher cache operations
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
    /// Evaluate a student checkpoint on a token file
    Eval(EvalArgs),
}

/// Configuration source and field overrides; flags mirror the config keys.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file to start from
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long = "sample-l")]
    sample_l: Option<String>,
    #[arg(long = "class-u")]
    class_u: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    alignment: Option<String>,
    /// Distill on student-generated continuations instead of corpus text
    #[arg(long = "on-policy")]
    on_policy: bool,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "batch-size")]
    batch_size: Option<String>,
    #[arg(long = "max-seq-len")]
    max_seq_len: Option<String>,
    /// Offline cache to replay instead of querying the teacher
    #[arg(long = "cache")]
    cache_path: Option<PathBuf>,
    #[arg(long = "vocab-size")]
    vocab_size: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long = "teacher-order")]
    teacher_order: Option<String>,
    #[arg(long = "teacher-sigma")]
    teacher_sigma: Option<String>,
    #[arg(long = "teacher-rank")]
    teacher_rank: Option<String>,
    #[arg(long = "train-tokens")]
    train_tokens: Option<String>,
    /// Flat u16 LE token file; omitted means synthesize from the teacher
    #[arg(long = "corpus")]
    corpus_path: Option<PathBuf>,
    #[arg(long = "heldout-fraction")]
    heldout_fraction: Option<String>,
    #[arg(long = "curriculum-steps")]
    curriculum_steps: Option<String>,
    #[arg(long = "gls-capacity")]
    gls_capacity: Option<String>,
    #[arg(long = "smoothing-t")]
    smoothing_t: Option<String>,
    #[arg(long = "chunk-size")]
    chunk_size: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<DistillRun, Error> {
        let mut cfg = match &self.config {
            Some(path) => DistillRun::load_kv_file(path)?,
            None => DistillRun::default(),
        };
        let overrides: [(&str, &Option<String>); 22] = [
            ("seed", &self.seed),
            ("metric", &self.metric),
            ("policy", &self.policy),
            ("k", &self.k),
            ("sample_l", &self.sample_l),
            ("class_u", &self.class_u),
            ("lambda", &self.lambda),
            ("temperature", &self.temperature),
            ("alignment", &self.alignment),
            ("steps", &self.steps),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("max_seq_len", &self.max_seq_len),
            ("vocab_size", &self.vocab_size),
            ("rank", &self.rank),
            ("teacher_order", &self.teacher_order),
            ("teacher_sigma", &self.teacher_sigma),
            ("teacher_rank", &self.teacher_rank),
            ("train_tokens", &self.train_tokens),
            ("heldout_fraction", &self.heldout_fraction),
            ("curriculum_steps", &self.curriculum_steps),
            ("gls_capacity", &self.gls_capacity),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(v) = &self.smoothing_t {
            cfg.set("smoothing_t", v)?;
        }
        if let Some(v) = &self.chunk_size {
            cfg.set("chunk_size", v)?;
        }
        if self.on_policy {
            cfg.on_policy = true;
        }
        if let Some(path) = &self.cache_path {
            cfg.cache_path = Some(path.clone());
        }
        if let Some(path) = &self.corpus_path {
            cfg.corpus_path = Some(path.clone());
        }
        cfg.validated()
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory for config echo, report, counters, trajectory,
    /// checkpoint, and sample manifest
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Budget axis: k (positions) or l (samples)
    #[arg(long)]
    axis: String,
    /// Comma-separated budget fractions, e.g. 0.01,0.05,0.2,1.0
    #[arg(long)]
    grid: String,
    /// Comma-separated seeds averaged per grid point
    #[arg(long, default_value = "1337,1338,1339")]
    seeds: String,
    /// File for the tab-separated results (also printed as a table)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Monte Carlo trials per estimator check (minimum 10000)
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 1337)]
    seed: u64,
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Sample teacher targets for the run's train split and store them
    Build {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output cache file
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a cache file's header and per-sample layout
    Inspect { path: PathBuf },
    /// Offline storage footprint per supervision strategy
    Estimate {
        /// full_kd, rs_kd, se_kd_3x, or vanilla_ce; omitted prints all
        #[arg(long)]
        method: Option<String>,
        /// Training tokens (positions) covered by the cache
        #[arg(long, default_value_t = 100e9)]
        tokens: f64,
        #[arg(long, default_value_t = 100_000)]
        vocab: u64,
        /// Sampled classes per position
        #[arg(long, default_value_t = 64)]
        u: u32,
        /// Sample-selection fraction applied by se_kd_3x
        #[arg(long, default_value_t = 0.2)]
        l: f64,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Student checkpoint produced by `run`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Flat u16 LE token file to evaluate on
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long = "max-seq-len", default_value_t = 512)]
    max_seq_len: usize,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config.resolve()?;
            let artifacts = run_experiment(cfg, args.out.as_deref())?;
            print!("{}", artifacts.report.to_kv());
            println!("supervised_positions={}", artifacts.counters.supervised_positions);
            println!("teacher_queries={}", artifacts.counters.teacher_queries);
            println!("student_logit_rows={}", artifacts.counters.student_logit_rows);
            if let Some(dir) = &args.out {
                println!("run_dir={}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            let base = args.config.resolve()?;
            let axis: SweepAxis = args.axis.parse()?;
            let grid = parse_f64_list("grid", &args.grid)?;
            let seeds = parse_u64_list("seeds", &args.seeds)?;
            let rows = sweep(&base, axis, &grid, &seeds)?;
            let tsv = sweep_tsv(&rows);
            print!("{tsv}");
            if let Some(path) = &args.out {
                std::fs::write(path, &tsv)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify(args) => {
            let report = verify_estimators(args.trials, args.seed)?;
            print!("{}", report.render());
            if report.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::Cache { command } => run_cache(command),
        Command::Eval(args) => {
            let student = FactorizedStudent::load(&args.checkpoint)?;
            let heldout = load_token_file(&args.corpus, student.vocab_size(), args.max_seq_len)?;
            let report = evaluate(&student, &heldout)?;
            print!("{}", report.to_kv());
            if let Some(path) = &args.out {
                std::fs::write(path, report.to_kv())?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_cache(command: CacheCommand) -> Result<ExitCode, Error> {
    match command {
        CacheCommand::Build { config, out } => {
            let cfg = config.resolve()?;
            let summary = build_cache(&cfg, &out)?;
            println!("cache={}", summary.cache_path.display());
            println!("samples={}", summary.samples);
            println!("positions={}", summary.positions);
            println!("bytes={}", summary.bytes);
            if let Some(manifest) = &summary.manifest_path {
                println!("manifest={}", manifest.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        CacheCommand::Inspect { path } => {
            let reader = CacheReader::open(&path)?;
            let header = reader.header();
            println!("vocab_size={}", header.vocab_size);
            println!("slots_per_position={}", header.slots_per_position);
            println!("sample_count={}", header.sample_count);
            let mut positions = 0u64;
            for (id, count) in reader.samples() {
                println!("sample {id}: {count} positions");
                positions += count as u64;
            }
            println!("total_positions={positions}");
            Ok(ExitCode::SUCCESS)
        }
        CacheCommand::Estimate {
            method,
            tokens,
            vocab,
            u,
            l,
        } => {
            let methods: Vec<StorageMethod> = match method {
                Some(name) => vec![name.parse()?],
                None => StorageMethod::ALL.to_vec(),
            };
            println!("method\tbytes_per_position\tterabytes");
            let mut notes = Vec::new();
            for m in methods {
                let est = estimate_storage(m, tokens, vocab, u, l)?;
                let marker = if est.assumption.is_some() { "*" } else { "" };
                println!(
                    "{}{marker}\t{}\t{}",
                    est.method, est.bytes_per_position, est.total_terabytes
                );
                if let Some(note) = est.assumption {
                    notes.push(format!("* {}: {note}", est.method));
                }
            }
            for note in notes {
                println!("{note}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_f64_list(field: &str, text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config {
                    field: field.to_string(),
                    reason: format!("cannot parse `{s}` as a number"),
                })
        })
        .collect()
}

fn parse_u64_list(field: &str, text: &str) -> Result<Vec<u64>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config {
                    field: field.to_string(),
                    reason: format!("cannot parse `{s}` as an integer"),
                })
        })
        .collect()
}
