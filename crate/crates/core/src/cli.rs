//! Experiment orchestration and the files each command writes.
//!
//! Every command writes `manifest.json` last, listing the other files it wrote
//! with their SHA-256 checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bilevel::{contract_fast, contract_oracle, BalanceMode, Contraction, CostKind, KernelMode, PredictionMatrix};
use crate::config::{BuotConfig, OutputFormat};
use crate::error::{Error, Result};
use crate::ot::TransportPlan;
use crate::sim::{evaluate, generate_task, outlier_weight, parallel_map, std_dev, sweep, train, Experiment, SweepAxis};

pub const SCHEMA_VERSION: u32 = 1;

pub const REPORT_HEADER: [&str; 8] = ["iter", "acc_s", "acc_t", "ce", "rce", "ent", "buot", "total"];

pub const ABLATION_HEADER: [&str; 15] = [
    "group",
    "cell",
    "balance_mode",
    "cost_mode",
    "use_weights",
    "lambda",
    "lambda_t",
    "kernel_mode",
    "batch_size",
    "seeds",
    "mean_acc_t",
    "std_acc_t",
    "mean_outlier_weight",
    "mean_kernel_ms",
    "status",
];

pub const SWEEP_HEADER: [&str; 6] = ["axis", "value", "seed", "accuracy", "baseline_accuracy", "outlier_weight"];

pub const SWEEP_SUMMARY_HEADER: [&str; 8] = [
    "axis",
    "value",
    "seeds",
    "mean_accuracy",
    "ci95_accuracy",
    "mean_baseline",
    "ci95_baseline",
    "mean_margin",
];

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ConfigParse(_) => 1,
        Error::ConfigValidation(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 2,
        Error::Numerical(_) | Error::Infeasible(_) => 3,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub schema_version: u32,
    /// Resolved configuration in its canonical text form.
    pub config: String,
    pub timings_secs: BTreeMap<String, f64>,
    pub files: Vec<FileEntry>,
    pub summary: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects emitted files and their checksums.
struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.root.join(name), bytes)?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn finish(self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.files = self.files;
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.root.join("manifest.json"), bytes)?;
        Ok(manifest)
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn finite(context: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite value in {context}; refusing to write it")));
    }
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn matrix_json(name: &str, a: &Array2<f64>) -> Result<Value> {
    finite(name, a.iter().copied())?;
    Ok(json!({
        "shape": [a.nrows(), a.ncols()],
        "data": a.iter().copied().collect::<Vec<f64>>(),
    }))
}

fn manifest(command: &str, cfg: &BuotConfig, timings: BTreeMap<String, f64>, summary: Value) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        schema_version: SCHEMA_VERSION,
        config: cfg.to_text(),
        timings_secs: timings,
        files: Vec::new(),
        summary,
    }
}

/// Trains one model and writes `report.csv`, `weights.json`, `plans.json` and `manifest.json`.
pub fn run_single(cfg: &BuotConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let task = generate_task(&cfg.task)?;
    timings.insert("generate".to_string(), t.elapsed().as_secs_f64());

    let report = train(&task, &cfg.training, &cfg.solver)?;
    timings.insert("warmup".to_string(), report.stage_times.warmup_secs);
    timings.insert("buot".to_string(), report.stage_times.buot_secs);

    let t = Instant::now();
    let metrics = evaluate(&report.model, &task, &report.final_weights)?;
    timings.insert("evaluate".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut dir = OutputDir::create(out)?;
    if cfg.output.wants(OutputFormat::Csv) {
        let mut rows = Vec::with_capacity(report.records.len());
        for r in &report.records {
            let l = &r.losses;
            finite("report row", [r.acc_s, r.acc_t, l.ce, l.rce, l.ent, l.buot, l.total])?;
            rows.push(vec![
                r.iter.to_string(),
                num(r.acc_s),
                num(r.acc_t),
                num(l.ce),
                num(l.rce),
                num(l.ent),
                num(l.buot),
                num(l.total),
            ]);
        }
        dir.write("report.csv", &csv_bytes(&REPORT_HEADER, &rows)?)?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        let omega = report.final_weights.omega();
        finite("class weights", omega.iter().copied())?;
        let classes: Vec<Value> = omega
            .iter()
            .enumerate()
            .map(|(c, w)| {
                json!({
                    "class": c,
                    "weight": w,
                    "tag": if task.is_shared(c) { "shared" } else { "outlier" },
                })
            })
            .collect();
        let outlier = outlier_weight(&task, &report.final_weights);
        dir.write_json(
            "weights.json",
            &json!({
                "schema_version": SCHEMA_VERSION,
                "classes": classes,
                "shared_mass": 1.0 - outlier,
                "outlier_mass": outlier,
                "degenerate": report.final_weights.is_degenerate(),
                "reweighted": cfg.training.use_weights,
            }),
        )?;

        let plans = match &report.plans {
            Some(p) => json!({
                "schema_version": SCHEMA_VERSION,
                "gamma1": matrix_json("gamma1", p.gamma1.values())?,
                "gamma2": matrix_json("gamma2", p.gamma2.values())?,
                "gamma1_recovered": matrix_json("gamma1_recovered", p.gamma1_recovered.values())?,
                "gamma2_recovered": matrix_json("gamma2_recovered", p.gamma2_recovered.values())?,
            }),
            None => json!({
                "schema_version": SCHEMA_VERSION,
                "gamma1": null,
                "gamma2": null,
                "gamma1_recovered": null,
                "gamma2_recovered": null,
            }),
        };
        dir.write_json("plans.json", &plans)?;
    }
    timings.insert("write".to_string(), t.elapsed().as_secs_f64());
    timings.insert("total".to_string(), started.elapsed().as_secs_f64());

    finite(
        "metrics",
        [metrics.acc_s, metrics.acc_t, metrics.weighted_source_risk, metrics.generalization_gap],
    )?;
    let summary = json!({
        "acc_s": metrics.acc_s,
        "acc_t": metrics.acc_t,
        "per_class_acc_t": metrics.per_class_t,
        "weighted_source_risk": metrics.weighted_source_risk,
        "target_risk": metrics.target_risk,
        "generalization_gap": metrics.generalization_gap,
        "outlier_weight": outlier_weight(&task, &report.final_weights),
        "counters": report.counters,
        "kernel_secs": report.kernel_time.as_secs_f64(),
        "kernel_calls": report.kernel_calls,
    });
    dir.finish(manifest("run", cfg, timings, summary))
}

/// Runs one config per seed, each in its own `seed_<n>` subdirectory.
pub fn run_seeds(cfg: &BuotConfig, seeds: &[u64], out: &Path) -> Result<Vec<RunManifest>> {
    seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.task.seed = s;
            c.training.train_seed = s;
            run_single(&c, &out.join(format!("seed_{s}")))
        })
        .collect()
}

#[derive(Debug, Clone)]
struct AblationCell {
    group: &'static str,
    name: String,
    experiment: Experiment,
}

#[derive(Debug, Clone, Copy)]
struct CellRun {
    acc_t: f64,
    outlier: f64,
    kernel_ms: Option<f64>,
}

fn ablation_cells(base: &Experiment) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for balance in [BalanceMode::Uot, BalanceMode::Ot] {
        for cost in [CostKind::LabelAware, CostKind::SquaredEuclidean] {
            for weights in [true, false] {
                let mut e = base.clone();
                e.solver.balance = balance;
                e.solver.cost = cost;
                e.training.use_weights = weights;
                let name = format!("{balance}/{cost}/weights_{}", if weights { "on" } else { "off" });
                cells.push(AblationCell { group: "grid", name, experiment: e });
            }
        }
    }
    let full = Experiment {
        training: crate::sim::TrainConfig {
            use_weights: true,
            ..base.training.clone()
        },
        ..base.clone()
    };
    let mut weights_only = full.clone();
    weights_only.training.lambda = 0.0;
    let mut buot_only = full.clone();
    buot_only.training.use_weights = false;
    for (name, e) in [
        ("full", full.clone()),
        ("weights_only", weights_only),
        ("buot_loss_only", buot_only),
        ("none", full.source_only()),
    ] {
        cells.push(AblationCell {
            group: "components",
            name: name.to_string(),
            experiment: e,
        });
    }
    for kernel in [KernelMode::Fast, KernelMode::Oracle] {
        let mut e = full.clone();
        e.solver.kernel = kernel;
        cells.push(AblationCell {
            group: "kernel",
            name: kernel.to_string(),
            experiment: e,
        });
    }
    cells
}

/// Wall time of one contraction in each direction, averaged over repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelTiming {
    pub batch_size: usize,
    pub classes: usize,
    pub fast: Duration,
    pub oracle: Duration,
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_simple_fn((n, k), || rng.random_range(0.01..1.0));
    for mut row in a.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    a
}

/// Times both contraction kernels on random predictions with square batches.
pub fn kernel_timings(batch_sizes: &[usize], classes: usize, repeats: usize, seed: u64) -> Result<Vec<KernelTiming>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_sizes.len());
    for &n in batch_sizes {
        let ps = PredictionMatrix::source(random_rows(&mut rng, n, classes))?;
        let pt = PredictionMatrix::target(random_rows(&mut rng, n, classes))?;
        let gamma1 = TransportPlan::new(random_rows(&mut rng, n, n) / n as f64)?;
        let gamma2 = TransportPlan::new(random_rows(&mut rng, classes, classes) / classes as f64)?;
        let time = |f: &dyn Fn(&TransportPlan, Contraction) -> Result<crate::ot::CostMatrix>| -> Result<Duration> {
            let mut total = Duration::ZERO;
            for _ in 0..repeats {
                let t = Instant::now();
                f(&gamma1, Contraction::Samples)?;
                f(&gamma2, Contraction::Classes)?;
                total += t.elapsed();
            }
            Ok(total / repeats as u32)
        };
        let fast = time(&|p, over| contract_fast(&ps, &pt, p, over))?;
        let oracle = time(&|p, over| contract_oracle(&ps, &pt, p, over))?;
        log::info!("contraction timing n={n} K={classes}: fast {fast:?} oracle {oracle:?}");
        out.push(KernelTiming {
            batch_size: n,
            classes,
            fast,
            oracle,
        });
    }
    Ok(out)
}

/// Runs the ablation battery over the configured seeds and writes `ablation.csv`.
pub fn run_ablation(cfg: &BuotConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let base = cfg.experiment_template();
    let seeds = &cfg.experiment.seeds;
    let cells = ablation_cells(&base);

    // Identical experiments are run once.
    let mut unique: Vec<Experiment> = Vec::new();
    let index: Vec<Vec<usize>> = cells
        .iter()
        .map(|cell| {
            seeds
                .iter()
                .map(|&s| {
                    let e = cell.experiment.with_seed(s);
                    match unique.iter().position(|u| *u == e) {
                        Some(i) => i,
                        None => {
                            unique.push(e);
                            unique.len() - 1
                        }
                    }
                })
                .collect()
        })
        .collect();
    log::info!("ablation: {} cells, {} distinct runs", cells.len(), unique.len());
    let runs: Vec<std::result::Result<CellRun, String>> = parallel_map(&unique, cfg.experiment.workers, |e| {
        e.run()
            .map(|o| CellRun {
                acc_t: o.report.final_acc_t,
                outlier: outlier_weight(&o.task, &o.report.final_weights),
                kernel_ms: o.report.mean_kernel_time().map(|d| d.as_secs_f64() * 1e3),
            })
            .map_err(|e| e.to_string())
    });
    let train_secs = started.elapsed().as_secs_f64();

    let mut rows = Vec::new();
    let mut cell_summaries = Vec::new();
    for (cell, idx) in cells.iter().zip(&index) {
        let e = &cell.experiment;
        let results: Vec<&std::result::Result<CellRun, String>> = idx.iter().map(|&i| &runs[i]).collect();
        let failure = results.iter().find_map(|r| r.as_ref().err());
        let mut row = vec![
            cell.group.to_string(),
            cell.name.clone(),
            e.solver.balance.to_string(),
            e.solver.cost.to_string(),
            e.training.use_weights.to_string(),
            num(e.training.lambda),
            num(e.training.lambda_t),
            e.solver.kernel.to_string(),
            e.training.batch_s.to_string(),
            seeds.len().to_string(),
        ];
        match failure {
            Some(msg) => {
                log::warn!("ablation cell {} failed: {msg}", cell.name);
                row.extend(["".into(), "".into(), "".into(), "".into(), format!("failed: {msg}")]);
                cell_summaries.push(json!({"group": cell.group, "cell": cell.name, "status": "failed"}));
            }
            None => {
                let ok: Vec<CellRun> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
                let acc: Vec<f64> = ok.iter().map(|r| r.acc_t).collect();
                let mean = acc.iter().sum::<f64>() / acc.len() as f64;
                let outlier = ok.iter().map(|r| r.outlier).sum::<f64>() / ok.len() as f64;
                let kernel: Vec<f64> = ok.iter().filter_map(|r| r.kernel_ms).collect();
                let kernel_ms = (!kernel.is_empty()).then(|| kernel.iter().sum::<f64>() / kernel.len() as f64);
                finite("ablation cell", [mean, outlier, kernel_ms.unwrap_or(0.0)])?;
                row.extend([
                    num(mean),
                    num(std_dev(&acc)),
                    num(outlier),
                    kernel_ms.map(num).unwrap_or_default(),
                    "ok".to_string(),
                ]);
                cell_summaries.push(json!({
                    "group": cell.group,
                    "cell": cell.name,
                    "status": "ok",
                    "accuracies": acc,
                }));
            }
        }
        rows.push(row);
    }

    let t = Instant::now();
    let exp = &cfg.experiment;
    let timings = kernel_timings(&exp.timing_batch_sizes, exp.timing_classes, exp.timing_repeats, cfg.task.seed)?;
    for timing in &timings {
        for (mode, d) in [(KernelMode::Fast, timing.fast), (KernelMode::Oracle, timing.oracle)] {
            rows.push(vec![
                "kernel_timing".to_string(),
                format!("{mode}/n{}", timing.batch_size),
                String::new(),
                CostKind::LabelAware.to_string(),
                String::new(),
                String::new(),
                String::new(),
                mode.to_string(),
                timing.batch_size.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                num(d.as_secs_f64() * 1e3),
                "ok".to_string(),
            ]);
        }
    }
    let timing_secs = t.elapsed().as_secs_f64();

    let mut dir = OutputDir::create(out)?;
    dir.write("ablation.csv", &csv_bytes(&ABLATION_HEADER, &rows)?)?;
    let mut secs = BTreeMap::new();
    secs.insert("training".to_string(), train_secs);
    secs.insert("kernel_timing".to_string(), timing_secs);
    secs.insert("total".to_string(), started.elapsed().as_secs_f64());
    let timing_json: Vec<Value> = timings
        .iter()
        .map(|t| {
            json!({
                "batch_size": t.batch_size,
                "classes": t.classes,
                "fast_ms": t.fast.as_secs_f64() * 1e3,
                "oracle_ms": t.oracle.as_secs_f64() * 1e3,
            })
        })
        .collect();
    let summary = json!({ "cells": cell_summaries, "kernel_timing": timing_json });
    dir.finish(manifest("ablate", cfg, secs, summary))
}

/// Sweeps one axis over the configured seeds; writes `sweep.csv` and `sweep_summary.csv`.
pub fn run_sweep(cfg: &BuotConfig, axis: SweepAxis, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let values: Vec<f64> = match axis {
        SweepAxis::KTarget => cfg.k_target_values().into_iter().map(|k| k as f64).collect(),
        SweepAxis::Lambda => cfg.experiment.lambda_values.clone(),
        SweepAxis::ShiftScale => cfg.experiment.shift_values.clone(),
    };
    if values.is_empty() {
        return Err(Error::ConfigValidation(format!("no values configured for the {} axis", axis.name())));
    }
    let table = sweep(
        &cfg.experiment_template(),
        axis,
        &values,
        &cfg.experiment.seeds,
        cfg.experiment.workers,
    )?;

    let mut rows = Vec::with_capacity(table.cells.len());
    for c in &table.cells {
        finite("sweep cell", [c.value, c.accuracy, c.baseline_accuracy, c.outlier_weight])?;
        rows.push(vec![
            axis.name().to_string(),
            num(c.value),
            c.seed.to_string(),
            num(c.accuracy),
            num(c.baseline_accuracy),
            num(c.outlier_weight),
        ]);
    }
    let mut summary_rows = Vec::with_capacity(table.summary.len());
    for s in &table.summary {
        finite(
            "sweep summary",
            [s.mean_accuracy, s.ci95_accuracy, s.mean_baseline, s.ci95_baseline, s.mean_margin],
        )?;
        summary_rows.push(vec![
            axis.name().to_string(),
            num(s.value),
            cfg.experiment.seeds.len().to_string(),
            num(s.mean_accuracy),
            num(s.ci95_accuracy),
            num(s.mean_baseline),
            num(s.ci95_baseline),
            num(s.mean_margin),
        ]);
    }

    let mut extra = serde_json::Map::new();
    extra.insert("trend_correlation".into(), json!(table.trend_correlation));
    if axis == SweepAxis::Lambda {
        let means: Vec<f64> = table
            .summary
            .iter()
            .filter(|s| (0.1..=1.0).contains(&s.value))
            .map(|s| s.mean_accuracy)
            .collect();
        if !means.is_empty() {
            let spread = means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - means.iter().copied().fold(f64::INFINITY, f64::min);
            if spread > 0.10 {
                log::warn!("mean accuracy varies by {:.1} points across lambda in [0.1, 1]", spread * 100.0);
            } else {
                log::info!("mean accuracy varies by {:.1} points across lambda in [0.1, 1]", spread * 100.0);
            }
            extra.insert("lambda_spread_0p1_to_1".into(), json!(spread));
        }
    }
    finite("trend correlation", [table.trend_correlation])?;

    let mut dir = OutputDir::create(out)?;
    dir.write("sweep.csv", &csv_bytes(&SWEEP_HEADER, &rows)?)?;
    dir.write("sweep_summary.csv", &csv_bytes(&SWEEP_SUMMARY_HEADER, &summary_rows)?)?;
    let mut secs = BTreeMap::new();
    secs.insert("total".to_string(), started.elapsed().as_secs_f64());
    dir.finish(manifest("sweep", cfg, secs, Value::Object(extra)))
}

/// Recomputes every listed checksum; returns the paths that do not match.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let value: Value = serde_json::from_str(&text)?;
    let files = value["files"]
        .as_array()
        .ok_or_else(|| Error::InvalidArgument("manifest has no file list".into()))?;
    let mut bad = Vec::new();
    for f in files {
        let path = f["path"].as_str().unwrap_or_default();
        let expected = f["sha256"].as_str().unwrap_or_default();
        match fs::read(dir.join(path)) {
            Ok(bytes) if sha256_hex(&bytes) == expected => {}
            _ => bad.push(path.to_string()),
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn csv_quotes_fields_that_need_it() {
        let bytes = csv_bytes(&["a", "b"], &[vec!["x,y".into(), "say \"hi\"".into()]]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
    }

    #[test]
    fn non_finite_values_are_refused() {
        assert!(matches!(finite("x", [1.0, f64::NAN]), Err(Error::Numerical(_))));
        assert!(matrix_json("m", &ndarray::array![[1.0, f64::INFINITY]]).is_err());
        let m = matrix_json("m", &ndarray::array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m["shape"], json!([2, 2]));
        assert_eq!(m["data"], json!([1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::ConfigParse("x".into())), 1);
        assert_eq!(exit_code(&Error::ConfigValidation("x".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
    }

    #[test]
    fn ablation_grid_covers_every_combination() {
        let cells = ablation_cells(&BuotConfig::default().experiment_template());
        let grid: Vec<_> = cells.iter().filter(|c| c.group == "grid").collect();
        assert_eq!(grid.len(), 8);
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                assert_ne!(grid[i].experiment, grid[j].experiment);
            }
        }
        let none = cells.iter().find(|c| c.name == "none").unwrap();
        assert_eq!(none.experiment, BuotConfig::default().experiment_template().source_only());
    }
}
