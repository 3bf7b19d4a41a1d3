//! Run configuration: every knob of a distillation experiment, its
//! validation rules, and a flat diff-able `key=value` file format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::Alignment;
use crate::metrics::Metric;

/// How position scores become supervision masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Topk,
    Random,
    Gls,
    Curriculum,
    /// Stochastic draws proportional to score; weights by draw multiplicity.
    PosRs,
    /// As `PosRs`, reweighted by inverse sampling probability.
    PosRsCorrected,
    /// Dense supervision at every position.
    Full,
}

impl Policy {
    pub const ALL: [Policy; 7] = [
        Policy::Topk,
        Policy::Random,
        Policy::Gls,
        Policy::Curriculum,
        Policy::PosRs,
        Policy::PosRsCorrected,
        Policy::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Topk => "topk",
            Policy::Random => "random",
            Policy::Gls => "gls",
            Policy::Curriculum => "curriculum",
            Policy::PosRs => "pos_rs",
            Policy::PosRsCorrected => "pos_rs_corrected",
            Policy::Full => "full",
        }
    }

    /// Whether the policy consumes position scores at all.
    pub fn needs_scores(self) -> bool {
        !matches!(self, Policy::Random | Policy::Full)
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("policy", format!("unknown policy `{s}`")))
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full configuration of one distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillRun {
    pub seed: u64,
    pub metric: Metric,
    pub policy: Policy,
    /// Position budget fraction.
    pub k: f64,
    /// Sample budget fraction; absent means every sample trains.
    pub sample_l: Option<f64>,
    /// Classes sampled per position; absent means dense teacher targets.
    pub class_u: Option<u32>,
    pub lambda: f64,
    pub temperature: f64,
    pub alignment: Alignment,
    pub on_policy: bool,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub cache_path: Option<PathBuf>,

    // toy-model shape and data source
    pub vocab_size: usize,
    pub rank: usize,
    pub teacher_order: usize,
    pub teacher_sigma: f64,
    /// Factor the teacher's logit table through this rank; absent means
    /// i.i.d. Gaussian rows with no shared structure.
    pub teacher_rank: Option<usize>,
    pub train_tokens: usize,
    /// Flat u16 LE token file; absent means synthesize from the teacher.
    pub corpus_path: Option<PathBuf>,
    /// Fraction of sequences held out for evaluation.
    pub heldout_fraction: f64,

    // policy hyperparameters
    pub curriculum_steps: u64,
    pub gls_capacity: usize,
    /// Smoothing temperature for stochastic position sampling.
    pub smoothing_t: f64,
    /// Entropy chunk width for the scoring pass.
    pub chunk_size: usize,
}

impl Default for DistillRun {
    fn default() -> Self {
        DistillRun {
            seed: 1337,
            metric: Metric::StudentEntropy,
            policy: Policy::Topk,
            k: 0.2,
            sample_l: None,
            class_u: None,
            lambda: 1.0,
            temperature: 1.0,
            alignment: Alignment::ForwardKl,
            on_policy: false,
            steps: 500,
            lr: 0.1,
            batch_size: 16,
            max_seq_len: 21,
            cache_path: None,
            vocab_size: 64,
            rank: 8,
            teacher_order: 1,
            teacher_sigma: 2.0,
            teacher_rank: None,
            train_tokens: 50_000,
            corpus_path: None,
            heldout_fraction: 0.1,
            curriculum_steps: 4000,
            gls_capacity: 30_000,
            smoothing_t: 1.0,
            chunk_size: 8,
        }
    }
}

impl DistillRun {
    /// Checks field ranges and cross-field rules, coercing `k` to 1 under the
    /// full policy. Every violation names the offending field.
    pub fn validated(mut self) -> Result<Self> {
        if self.policy == Policy::Full {
            self.k = 1.0;
        }
        if self.k <= 0.0 || self.k > 1.0 || self.k.is_nan() {
            return Err(Error::config("k", format!("must be in (0, 1], got {}", self.k)));
        }
        if let Some(l) = self.sample_l {
            if l <= 0.0 || l > 1.0 || l.is_nan() {
                return Err(Error::config("sample_l", format!("must be in (0, 1], got {l}")));
            }
        }
        if let Some(u) = self.class_u {
            if u == 0 || u > crate::class_sampling::MAX_DRAW_COUNT {
                return Err(Error::config(
                    "class_u",
                    format!("must be in [1, {}], got {u}", crate::class_sampling::MAX_DRAW_COUNT),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("must be in [0, 1], got {}", self.lambda)));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::config("temperature", "must be positive and finite"));
        }
        if self.on_policy && self.cache_path.is_some() {
            return Err(Error::config(
                "cache_path",
                "offline class caches are incompatible with on-policy generation",
            ));
        }
        if self.alignment == Alignment::WeightedKl && self.policy != Policy::Full {
            return Err(Error::config(
                "alignment",
                "weighted_kl weights every position by its score and requires policy=full",
            ));
        }
        let sparse_classes = self.class_u.is_some() || self.cache_path.is_some();
        if sparse_classes && self.alignment == Alignment::ReverseKl {
            return Err(Error::config(
                "alignment",
                "sparse class targets support only forward-KL alignment",
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be >= 2"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be >= 2"));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::config("vocab_size", "must fit 16-bit token ids"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank", "must be >= 1"));
        }
        if !(self.teacher_order == 1 || self.teacher_order == 2) {
            return Err(Error::config("teacher_order", "must be 1 or 2"));
        }
        if self.teacher_sigma <= 0.0 || self.teacher_sigma.is_nan() {
            return Err(Error::config("teacher_sigma", "must be positive"));
        }
        if let Some(r) = self.teacher_rank {
            if r == 0 {
                return Err(Error::config("teacher_rank", "must be >= 1"));
            }
        }
        if self.train_tokens < 2 * self.max_seq_len {
            return Err(Error::config(
                "train_tokens",
                "must cover at least two sequences",
            ));
        }
        if self.heldout_fraction <= 0.0 || self.heldout_fraction >= 1.0 || self.heldout_fraction.is_nan() {
            return Err(Error::config("heldout_fraction", "must be in (0, 1)"));
        }
        if self.curriculum_steps == 0 {
            return Err(Error::config("curriculum_steps", "must be >= 1"));
        }
        if self.gls_capacity == 0 {
            return Err(Error::config("gls_capacity", "must be >= 1"));
        }
        if self.smoothing_t <= 0.0 || !self.smoothing_t.is_finite() {
            return Err(Error::config("smoothing_t", "must be positive"));
        }
        if self.chunk_size == 0 {
            return Err(Error::config("chunk_size", "must be >= 1"));
        }
        Ok(self)
    }

    /// Serializes to the flat `key=value` format, keys sorted.
    pub fn to_kv(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("seed", self.seed.to_string());
        kv.insert("metric", self.metric.to_string());
        kv.insert("policy", self.policy.to_string());
        kv.insert("k", format_f64(self.k));
        if let Some(l) = self.sample_l {
            kv.insert("sample_l", format_f64(l));
        }
        if let Some(u) = self.class_u {
            kv.insert("class_u", u.to_string());
        }
        kv.insert("lambda", format_f64(self.lambda));
        kv.insert("temperature", format_f64(self.temperature));
        kv.insert("alignment", self.alignment.to_string());
        kv.insert("on_policy", self.on_policy.to_string());
        kv.insert("steps", self.steps.to_string());
        kv.insert("lr", format_f64(self.lr));
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("max_seq_len", self.max_seq_len.to_string());
        if let Some(p) = &self.cache_path {
            kv.insert("cache_path", p.display().to_string());
        }
        kv.insert("vocab_size", self.vocab_size.to_string());
        kv.insert("rank", self.rank.to_string());
        kv.insert("teacher_order", self.teacher_order.to_string());
        kv.insert("teacher_sigma", format_f64(self.teacher_sigma));
        if let Some(r) = self.teacher_rank {
            kv.insert("teacher_rank", r.to_string());
        }
        kv.insert("train_tokens", self.train_tokens.to_string());
        if let Some(p) = &self.corpus_path {
            kv.insert("corpus_path", p.display().to_string());
        }
        kv.insert("heldout_fraction", format_f64(self.heldout_fraction));
        kv.insert("curriculum_steps", self.curriculum_steps.to_string());
        kv.insert("gls_capacity", self.gls_capacity.to_string());
        kv.insert("smoothing_t", format_f64(self.smoothing_t));
        kv.insert("chunk_size", self.chunk_size.to_string());
        let mut out = String::new();
        for (key, value) in kv {
            out.push_str(key);
            out.push('=');
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// Applies `key=value` assignments on top of `self`. Lines may be blank
    /// or `#` comments; unknown keys are configuration errors.
    pub fn apply_kv(mut self, text: &str) -> Result<Self> {
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    "config",
                    format!("line {}: expected key=value, got `{line}`", line_no + 1),
                ));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(self)
    }

    /// Sets a single field from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "metric" => self.metric = value.parse()?,
            "policy" => self.policy = value.parse()?,
            "k" => self.k = parse(key, value)?,
            "sample_l" => self.sample_l = parse_optional(key, value)?,
            "class_u" => self.class_u = parse_optional(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "alignment" => self.alignment = value.parse()?,
            "on_policy" => self.on_policy = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "cache_path" => {
                self.cache_path = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "rank" => self.rank = parse(key, value)?,
            "teacher_order" => self.teacher_order = parse(key, value)?,
            "teacher_sigma" => self.teacher_sigma = parse(key, value)?,
            "teacher_rank" => self.teacher_rank = parse_optional(key, value)?,
            "train_tokens" => self.train_tokens = parse(key, value)?,
            "corpus_path" => {
                self.corpus_path = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "heldout_fraction" => self.heldout_fraction = parse(key, value)?,
            "curriculum_steps" => self.curriculum_steps = parse(key, value)?,
            "gls_capacity" => self.gls_capacity = parse(key, value)?,
            "smoothing_t" => self.smoothing_t = parse(key, value)?,
            "chunk_size" => self.chunk_size = parse(key, value)?,
            other => {
                return Err(Error::config(other, "unknown configuration key"));
            }
        }
        Ok(())
    }

    pub fn load_kv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        DistillRun::default().apply_kv(&text)
    }
}

fn format_f64(x: f64) -> String {
    // round-trippable float formatting
    let mut s = format!("{x}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        return Ok(None);
    }
    parse(key, value).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        DistillRun::default().validated().unwrap();
    }

    #[test]
    fn full_policy_forces_unit_budget() {
        let cfg = DistillRun {
            policy: Policy::Full,
            k: 0.2,
            ..DistillRun::default()
        };
        assert_eq!(cfg.validated().unwrap().k, 1.0);
    }

    #[test]
    fn on_policy_forbids_cache() {
        let cfg = DistillRun {
            on_policy: true,
            cache_path: Some(PathBuf::from("targets.skdc")),
            alignment: Alignment::ForwardKl,
            ..DistillRun::default()
        };
        let err = cfg.validated().unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "cache_path"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn sparse_classes_reject_reverse_kl() {
        let cfg = DistillRun {
            class_u: Some(64),
            alignment: Alignment::ReverseKl,
            ..DistillRun::default()
        };
        assert!(matches!(
            cfg.validated(),
            Err(Error::Config { field, .. }) if field == "alignment"
        ));
    }

    #[test]
    fn weighted_kl_requires_full_policy() {
        let cfg = DistillRun {
            alignment: Alignment::WeightedKl,
            policy: Policy::Topk,
            ..DistillRun::default()
        };
        assert!(cfg.validated().is_err());
        let cfg = DistillRun {
            alignment: Alignment::WeightedKl,
            policy: Policy::Full,
            ..DistillRun::default()
        };
        assert!(cfg.validated().is_ok());
    }

    #[test]
    fn kv_round_trip_preserves_config() {
        let cfg = DistillRun {
            seed: 99,
            metric: Metric::Kl,
            policy: Policy::Curriculum,
            k: 0.05,
            sample_l: Some(0.2),
            class_u: Some(12),
            lambda: 0.75,
            cache_path: None,
            ..DistillRun::default()
        };
        let text = cfg.to_kv();
        let back = DistillRun::default().apply_kv(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn kv_parser_rejects_unknown_keys_and_garbage() {
        assert!(DistillRun::default().apply_kv("bogus_key=1").is_err());
        assert!(DistillRun::default().apply_kv("no_equals_here").is_err());
        assert!(DistillRun::default().apply_kv("k=not_a_number").is_err());
        // comments and blanks are fine
        let cfg = DistillRun::default()
            .apply_kv("# comment\n\nk=0.5\n")
            .unwrap();
        assert_eq!(cfg.k, 0.5);
    }

    #[test]
    fn config_errors_name_their_field() {
        let cases: Vec<(DistillRun, &str)> = vec![
            (DistillRun { k: 0.0, ..Default::default() }, "k"),
            (DistillRun { k: 1.5, ..Default::default() }, "k"),
            (DistillRun { sample_l: Some(0.0), ..Default::default() }, "sample_l"),
            (DistillRun { class_u: Some(200), ..Default::default() }, "class_u"),
            (DistillRun { lambda: 1.5, ..Default::default() }, "lambda"),
            (DistillRun { temperature: 0.0, ..Default::default() }, "temperature"),
            (DistillRun { steps: 0, ..Default::default() }, "steps"),
            (DistillRun { batch_size: 0, ..Default::default() }, "batch_size"),
            (DistillRun { max_seq_len: 1, ..Default::default() }, "max_seq_len"),
            (DistillRun { vocab_size: 1, ..Default::default() }, "vocab_size"),
            (DistillRun { rank: 0, ..Default::default() }, "rank"),
            (DistillRun { teacher_order: 3, ..Default::default() }, "teacher_order"),
            (DistillRun { heldout_fraction: 1.0, ..Default::default() }, "heldout_fraction"),
        ];
        for (cfg, field) in cases {
            match cfg.validated() {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error on `{field}`, got {other:?}"),
            }
        }
    }
}
