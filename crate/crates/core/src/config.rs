//! Experiment configuration in a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [task]
//! k_source = 6
//! k_target = 3
//! ```
//!
//! Every key is optional and falls back to its default. Unknown sections,
//! unknown keys and repeated keys are parse errors; out-of-range values are
//! validation errors.

use std::fmt::{Debug, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bilevel::{BalanceMode, BilevelConfig, CostKind, KernelMode};
use crate::error::{Error, Result};
use crate::sim::{Experiment, TaskParams, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("buot-out"),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, format: OutputFormat) -> bool {
        self.formats.contains(&format)
    }
}

/// Seeds, parallelism and the axes of the multi-run commands.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// Empty means every value from 1 to `k_source`.
    pub k_target_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub shift_values: Vec<f64>,
    /// Batch sizes of the contraction timing benchmark.
    pub timing_batch_sizes: Vec<usize>,
    /// Class count of the contraction timing benchmark.
    pub timing_classes: usize,
    pub timing_repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            workers: 1,
            k_target_values: Vec::new(),
            lambda_values: vec![10.0, 1.0, 0.5, 0.1, 0.05, 0.01],
            shift_values: vec![0.5, 1.0, 2.0, 3.0],
            timing_batch_sizes: vec![100, 200, 300, 400, 500],
            timing_classes: 31,
            timing_repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuotConfig {
    pub task: TaskParams,
    pub solver: BilevelConfig,
    pub training: TrainConfig,
    pub experiment: ExperimentConfig,
    pub output: OutputConfig,
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::ConfigParse(format!("line {line}: {msg}"))
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| parse_err(line, format!("bad value {raw:?} for {key}: {e}")))
}

fn list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|item| value(line, key, item.trim())).collect()
}

fn join<T: Debug>(items: &[T]) -> String {
    items.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")
}

fn cost_name(kind: CostKind) -> &'static str {
    match kind {
        CostKind::LabelAware => "label_aware",
        CostKind::SquaredEuclidean => "squared_euclidean",
    }
}

fn balance_name(mode: BalanceMode) -> &'static str {
    match mode {
        BalanceMode::Uot => "uot",
        BalanceMode::Ot => "ot",
    }
}

fn kernel_name(mode: KernelMode) -> &'static str {
    match mode {
        KernelMode::Fast => "fast",
        KernelMode::Oracle => "oracle",
    }
}

fn format_name(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    }
}

impl BuotConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses without range checks.
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        let mut cfg = BuotConfig::default();
        let mut section: Option<String> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') || content.starts_with(';') {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(line, "unterminated section header"))?
                    .trim();
                if !["task", "solver", "training", "experiment", "output"].contains(&name) {
                    return Err(parse_err(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, val) = content
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected key = value, got {content:?}")))?;
            let (key, val) = (key.trim(), val.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| parse_err(line, format!("key {key:?} appears before any section")))?;
            if seen.iter().any(|(s, k)| s == sec && k == key) {
                return Err(parse_err(line, format!("duplicate key {key:?} in [{sec}]")));
            }
            seen.push((sec.to_string(), key.to_string()));
            cfg.set(sec, key, val, line)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, raw: &str, line: usize) -> Result<()> {
        let task = &mut self.task;
        let solver = &mut self.solver;
        let training = &mut self.training;
        let exp = &mut self.experiment;
        match (section, key) {
            ("task", "k_source") => task.k_source = value(line, key, raw)?,
            ("task", "k_target") => task.k_target = value(line, key, raw)?,
            ("task", "n_s") => task.n_s = value(line, key, raw)?,
            ("task", "n_t") => task.n_t = value(line, key, raw)?,
            ("task", "d") => task.d = value(line, key, raw)?,
            ("task", "shift_scale") => task.shift_scale = value(line, key, raw)?,
            ("task", "task_seed") => task.seed = value(line, key, raw)?,

            ("solver", "lambda1") => solver.lambda1 = value(line, key, raw)?,
            ("solver", "lambda2") => solver.lambda2 = value(line, key, raw)?,
            ("solver", "beta1") => solver.beta1 = value(line, key, raw)?,
            ("solver", "beta2") => solver.beta2 = value(line, key, raw)?,
            ("solver", "t_uot") => solver.t_uot = value(line, key, raw)?,
            ("solver", "inner_tol") => solver.inner_tol = value(line, key, raw)?,
            ("solver", "inner_max_iter") => solver.inner_max_iter = value(line, key, raw)?,
            ("solver", "cost_mode") => {
                solver.cost = match raw {
                    "label_aware" => CostKind::LabelAware,
                    "squared_euclidean" => CostKind::SquaredEuclidean,
                    _ => return Err(parse_err(line, format!("cost_mode must be label_aware or squared_euclidean, got {raw:?}"))),
                }
            }
            ("solver", "balance_mode") => {
                solver.balance = match raw {
                    "uot" => BalanceMode::Uot,
                    "ot" => BalanceMode::Ot,
                    _ => return Err(parse_err(line, format!("balance_mode must be uot or ot, got {raw:?}"))),
                }
            }
            ("solver", "kernel_mode") => {
                solver.kernel = match raw {
                    "fast" => KernelMode::Fast,
                    "oracle" => KernelMode::Oracle,
                    _ => return Err(parse_err(line, format!("kernel_mode must be fast or oracle, got {raw:?}"))),
                }
            }

            ("training", "lambda") => training.lambda = value(line, key, raw)?,
            ("training", "lambda_t") => training.lambda_t = value(line, key, raw)?,
            ("training", "eta") => training.eta = value(line, key, raw)?,
            ("training", "t_warm") => training.t_warm = value(line, key, raw)?,
            ("training", "t_max") => training.t_max = value(line, key, raw)?,
            ("training", "batch_s") => training.batch_s = value(line, key, raw)?,
            ("training", "batch_t") => training.batch_t = value(line, key, raw)?,
            ("training", "train_seed") => training.train_seed = value(line, key, raw)?,
            ("training", "log_interval") => training.log_interval = value(line, key, raw)?,
            ("training", "use_weights") => training.use_weights = value(line, key, raw)?,
            ("training", "mean_reduction") => training.mean_reduction = value(line, key, raw)?,
            ("training", "init_scale") => training.init_scale = value(line, key, raw)?,

            ("experiment", "seeds") => exp.seeds = list(line, key, raw)?,
            ("experiment", "workers") => exp.workers = value(line, key, raw)?,
            ("experiment", "k_target_values") => exp.k_target_values = list(line, key, raw)?,
            ("experiment", "lambda_values") => exp.lambda_values = list(line, key, raw)?,
            ("experiment", "shift_values") => exp.shift_values = list(line, key, raw)?,
            ("experiment", "timing_batch_sizes") => exp.timing_batch_sizes = list(line, key, raw)?,
            ("experiment", "timing_classes") => exp.timing_classes = value(line, key, raw)?,
            ("experiment", "timing_repeats") => exp.timing_repeats = value(line, key, raw)?,

            ("output", "directory") => {
                if raw.is_empty() {
                    return Err(parse_err(line, "output directory is empty"));
                }
                self.output.directory = PathBuf::from(raw);
            }
            ("output", "formats") => {
                self.output.formats = raw
                    .split(',')
                    .map(|f| match f.trim() {
                        "csv" => Ok(OutputFormat::Csv),
                        "json" => Ok(OutputFormat::Json),
                        other => Err(parse_err(line, format!("unknown output format {other:?}"))),
                    })
                    .collect::<Result<_>>()?;
            }
            _ => return Err(parse_err(line, format!("unknown key {key:?} in [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: Error| match e {
            Error::InvalidArgument(msg) => Error::ConfigValidation(msg),
            other => other,
        };
        self.experiment_template().validate().map_err(invalid)?;

        let bad = |msg: String| Err(Error::ConfigValidation(msg));
        let exp = &self.experiment;
        if exp.seeds.is_empty() {
            return bad("experiment.seeds must list at least one seed".into());
        }
        if exp.workers == 0 {
            return bad("experiment.workers must be at least 1".into());
        }
        if let Some(k) = exp.k_target_values.iter().find(|&&k| k == 0 || k > self.task.k_source) {
            return bad(format!("k_target value {k} outside [1, {}]", self.task.k_source));
        }
        if let Some(l) = exp.lambda_values.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return bad(format!("lambda value {l} must be finite and >= 0"));
        }
        if let Some(v) = exp.shift_values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return bad(format!("shift value {v} must be finite and >= 0"));
        }
        if exp.timing_batch_sizes.contains(&0) {
            return bad("timing batch sizes must be positive".into());
        }
        if exp.timing_classes < 2 || exp.timing_repeats == 0 {
            return bad("timing_classes must be >= 2 and timing_repeats >= 1".into());
        }
        if self.output.formats.is_empty() {
            return bad("output.formats must name at least one format".into());
        }
        Ok(())
    }

    /// Configured k_target values, always including the non-partial anchor `k_source`.
    pub fn k_target_values(&self) -> Vec<usize> {
        if self.experiment.k_target_values.is_empty() {
            return (1..=self.task.k_source).collect();
        }
        let mut values = self.experiment.k_target_values.clone();
        if !values.contains(&self.task.k_source) {
            values.push(self.task.k_source);
        }
        values
    }

    /// The single run described by the task and training seeds.
    pub fn experiment_template(&self) -> Experiment {
        Experiment {
            task: self.task.clone(),
            training: self.training.clone(),
            solver: self.solver.clone(),
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let t = &self.task;
        let s = &self.solver;
        let tr = &self.training;
        let e = &self.experiment;
        // Writing to a String cannot fail.
        let _ = write!(
            out,
            "[task]\n\
             k_source = {}\nk_target = {}\nn_s = {}\nn_t = {}\nd = {}\nshift_scale = {:?}\ntask_seed = {}\n\n\
             [solver]\n\
             lambda1 = {:?}\nlambda2 = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\nt_uot = {}\ninner_tol = {:?}\ninner_max_iter = {}\n\
             cost_mode = {}\nbalance_mode = {}\nkernel_mode = {}\n\n\
             [training]\n\
             lambda = {:?}\nlambda_t = {:?}\neta = {:?}\nt_warm = {}\nt_max = {}\nbatch_s = {}\nbatch_t = {}\n\
             train_seed = {}\nlog_interval = {}\nuse_weights = {}\nmean_reduction = {}\ninit_scale = {:?}\n\n\
             [experiment]\n\
             seeds = {}\nworkers = {}\nk_target_values = {}\nlambda_values = {}\nshift_values = {}\ntiming_batch_sizes = {}\n\
             timing_classes = {}\ntiming_repeats = {}\n\n\
             [output]\n\
             directory = {}\nformats = {}\n",
            t.k_source,
            t.k_target,
            t.n_s,
            t.n_t,
            t.d,
            t.shift_scale,
            t.seed,
            s.lambda1,
            s.lambda2,
            s.beta1,
            s.beta2,
            s.t_uot,
            s.inner_tol,
            s.inner_max_iter,
            cost_name(s.cost),
            balance_name(s.balance),
            kernel_name(s.kernel),
            tr.lambda,
            tr.lambda_t,
            tr.eta,
            tr.t_warm,
            tr.t_max,
            tr.batch_s,
            tr.batch_t,
            tr.train_seed,
            tr.log_interval,
            tr.use_weights,
            tr.mean_reduction,
            tr.init_scale,
            join(&e.seeds),
            e.workers,
            join(&e.k_target_values),
            join(&e.lambda_values),
            join(&e.shift_values),
            join(&e.timing_batch_sizes),
            e.timing_classes,
            e.timing_repeats,
            self.output.directory.display(),
            self.output.formats.iter().map(|f| format_name(*f)).collect::<Vec<_>>().join(", "),
        );
        out
    }
}

impl std::fmt::Display for CostKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(cost_name(*self))
    }
}

impl std::fmt::Display for BalanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(balance_name(*self))
    }
}

impl std::fmt::Display for KernelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(kernel_name(*self))
    }
}
