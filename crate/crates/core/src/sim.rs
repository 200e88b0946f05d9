//! Synthetic partial domain adaptation tasks and the two-stage training loop.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bilevel::{solve_bilevel, BilevelConfig, PredictionRole};
use crate::error::{Error, Result};
use crate::model::{adam_step, grad_total, AdamState, Batch, LossBreakdown, ObjectiveWeights, Reduction, SoftmaxPredictor};
use crate::ot::TransportPlan;
use crate::recovery::{bilevel_weights, indicator_from_labels, recover_class_plan, recover_sample_plan, ClassWeights};

/// Radius of the circle holding the class means.
pub const MEAN_RADIUS: f64 = 4.0;

/// Generator parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskParams {
    pub k_source: usize,
    pub k_target: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub d: usize,
    pub shift_scale: f64,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            k_source: 6,
            k_target: 3,
            n_s: 300,
            n_t: 150,
            d: 8,
            shift_scale: 1.0,
            seed: 0,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_target == 0 || self.k_target > self.k_source {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= k_target <= k_source, got k_target={} k_source={}",
                self.k_target, self.k_source
            )));
        }
        if self.d < 2 {
            return Err(Error::InvalidArgument(format!("need d >= 2, got {}", self.d)));
        }
        if self.n_s < self.k_source {
            return Err(Error::InvalidArgument(format!(
                "n_s={} cannot cover {} source classes",
                self.n_s, self.k_source
            )));
        }
        if self.n_t < self.k_target {
            return Err(Error::InvalidArgument(format!(
                "n_t={} cannot cover {} target classes",
                self.n_t, self.k_target
            )));
        }
        if !(self.shift_scale >= 0.0 && self.shift_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("shift_scale must be finite and >= 0, got {}", self.shift_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPdaTask {
    pub params: TaskParams,
    pub source_x: Array2<f64>,
    pub source_y: Vec<usize>,
    pub target_x: Array2<f64>,
    /// Used for evaluation only.
    pub target_y: Vec<usize>,
    pub class_means: Array2<f64>,
    pub shift: Array1<f64>,
}

impl SyntheticPdaTask {
    pub fn k_source(&self) -> usize {
        self.params.k_source
    }

    pub fn k_target(&self) -> usize {
        self.params.k_target
    }

    /// Classes present in the target domain.
    pub fn shared_classes(&self) -> Vec<usize> {
        (0..self.params.k_target).collect()
    }

    pub fn is_shared(&self, class: usize) -> bool {
        class < self.params.k_target
    }
}

/// Spherical unit-variance clusters with means on a circle in the first two coordinates.
///
/// Labels are assigned round-robin so every class present in a domain gets at
/// least one sample. Target samples come from the first `k_target` classes and
/// are translated by a shift of norm `shift_scale` lying in the plane of the means.
pub fn generate_task(params: &TaskParams) -> Result<SyntheticPdaTask> {
    params.validate()?;
    let TaskParams { k_source, k_target, n_s, n_t, d, shift_scale, seed } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut class_means = Array2::zeros((k_source, d));
    for k in 0..k_source {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / k_source as f64;
        class_means[[k, 0]] = MEAN_RADIUS * angle.cos();
        class_means[[k, 1]] = MEAN_RADIUS * angle.sin();
    }
    let direction: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let mut shift = Array1::zeros(d);
    shift[0] = shift_scale * direction.cos();
    shift[1] = shift_scale * direction.sin();

    let mut draw = |labels: &[usize], offset: &Array1<f64>| -> Array2<f64> {
        let mut x = Array2::zeros((labels.len(), d));
        for (mut row, &label) in x.rows_mut().into_iter().zip(labels) {
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                row[j] = class_means[[label, j]] + offset[j] + noise;
            }
        }
        x
    };
    let source_y: Vec<usize> = (0..n_s).map(|i| i % k_source).collect();
    let target_y: Vec<usize> = (0..n_t).map(|i| i % k_target).collect();
    let source_x = draw(&source_y, &Array1::zeros(d));
    let target_x = draw(&target_y, &shift);

    Ok(SyntheticPdaTask {
        params: params.clone(),
        source_x,
        source_y,
        target_x,
        target_y,
        class_means,
        shift,
    })
}

/// Hyper-parameters of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Weight of the BUOT loss.
    pub lambda: f64,
    /// Weight of the target entropy.
    pub lambda_t: f64,
    /// Adam learning rate.
    pub eta: f64,
    pub t_warm: usize,
    pub t_max: usize,
    pub batch_s: usize,
    pub batch_t: usize,
    pub train_seed: u64,
    pub log_interval: usize,
    /// Reweight the source loss by the bi-level class weights.
    pub use_weights: bool,
    pub mean_reduction: bool,
    /// Standard deviation of the initial predictor weights.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            lambda_t: 0.1,
            eta: 0.01,
            t_warm: 100,
            t_max: 1000,
            batch_s: 64,
            batch_t: 64,
            train_seed: 0,
            log_interval: 10,
            use_weights: true,
            mean_reduction: false,
            init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_warm >= self.t_max {
            return Err(Error::InvalidArgument(format!(
                "t_warm ({}) must be smaller than t_max ({})",
                self.t_warm, self.t_max
            )));
        }
        if self.batch_s == 0 || self.batch_t == 0 || self.log_interval == 0 {
            return Err(Error::InvalidArgument("batch sizes and log_interval must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        for (name, v) in [("lambda", self.lambda), ("lambda_t", self.lambda_t), ("init_scale", self.init_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Plain source cross-entropy: uniform weights, no BUOT loss, no target entropy.
    pub fn source_only(&self) -> Self {
        TrainConfig {
            lambda: 0.0,
            lambda_t: 0.0,
            use_weights: false,
            ..self.clone()
        }
    }

    fn objective(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda: self.lambda,
            lambda_t: self.lambda_t,
            reduction: if self.mean_reduction { Reduction::Mean } else { Reduction::Sum },
        }
    }

    fn needs_plans(&self) -> bool {
        self.use_weights || self.lambda != 0.0
    }
}

/// Shuffles once per epoch and hands out disjoint batches until the epoch runs out.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        batch
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    WarmUp,
    Buot,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iter: usize,
    pub stage: Stage,
    pub acc_s: f64,
    pub acc_t: f64,
    pub losses: LossBreakdown,
    /// Class weights in use at this iteration; absent during warm-up.
    pub omega: Option<Vec<f64>>,
}

/// Counts of what the loop touched, split by stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TrainCounters {
    pub warmup_iterations: usize,
    pub buot_iterations: usize,
    pub bilevel_solves: usize,
    pub weight_computations: usize,
    pub buot_loss_evaluations: usize,
    pub warmup_bilevel_solves: usize,
    pub warmup_weight_reads: usize,
    pub warmup_buot_loss_evaluations: usize,
    /// Inner scaling solves that hit their iteration cap in the last alternation round.
    pub unconverged_solves: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalPlans {
    pub gamma1: TransportPlan,
    pub gamma2: TransportPlan,
    pub gamma1_recovered: TransportPlan,
    pub gamma2_recovered: TransportPlan,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    /// BUOT loss at every learning-stage iteration where it was evaluated.
    pub buot_trace: Vec<(usize, f64)>,
    pub final_weights: ClassWeights,
    pub final_acc_t: f64,
    pub final_acc_s: f64,
    pub model: SoftmaxPredictor,
    pub plans: Option<FinalPlans>,
    pub counters: TrainCounters,
    pub kernel_time: Duration,
    /// Number of contraction calls timed by `kernel_time`.
    pub kernel_calls: usize,
    pub stage_times: StageTimes,
}

impl TrainReport {
    /// Mean wall time of one contraction call.
    pub fn mean_kernel_time(&self) -> Option<Duration> {
        (self.kernel_calls > 0).then(|| self.kernel_time / self.kernel_calls as u32)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub warmup_secs: f64,
    pub buot_secs: f64,
}

fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn accuracy(model: &SoftmaxPredictor, x: &Array2<f64>, y: &[usize]) -> Result<f64> {
    let pred = model.classify(x)?;
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Warm-up on source cross-entropy, then the BUOT learning stage.
pub fn train(task: &SyntheticPdaTask, cfg: &TrainConfig, solver: &BilevelConfig) -> Result<TrainReport> {
    cfg.validate()?;
    solver.validate()?;
    let k = task.k_source();
    let d = task.params.d;
    if cfg.batch_s > task.params.n_s || cfg.batch_t > task.params.n_t {
        return Err(Error::InvalidArgument(format!(
            "batch sizes {}/{} exceed domain sizes {}/{}",
            cfg.batch_s, cfg.batch_t, task.params.n_s, task.params.n_t
        )));
    }

    let mut init_rng = stream(cfg.train_seed, 0);
    let mut model = SoftmaxPredictor::random(d, k, cfg.init_scale, &mut init_rng);
    let mut adam = AdamState::new(&model);
    let mut source_batches = EpochSampler::new(task.params.n_s, stream(cfg.train_seed, 1));
    let mut target_batches = EpochSampler::new(task.params.n_t, stream(cfg.train_seed, 2));

    let objective = cfg.objective();
    let warm_objective = ObjectiveWeights {
        lambda: 0.0,
        lambda_t: 0.0,
        ..objective
    };
    let uniform = ClassWeights::uniform(k);

    let mut records = Vec::new();
    let mut buot_trace = Vec::new();
    let mut counters = TrainCounters::default();
    let mut final_weights = uniform.clone();
    let mut plans = None;
    let mut kernel_time = Duration::ZERO;
    let mut kernel_calls = 0;
    let mut stage_times = StageTimes::default();
    let started = Instant::now();

    for iter in 1..=cfg.t_max {
        let warm = iter <= cfg.t_warm;
        if iter == cfg.t_warm + 1 {
            stage_times.warmup_secs = started.elapsed().as_secs_f64();
        }
        let s_idx = source_batches.next_batch(cfg.batch_s);
        let xs = gather_rows(&task.source_x, &s_idx);
        let s_labels: Vec<usize> = s_idx.iter().map(|&i| task.source_y[i]).collect();
        let ys = indicator_from_labels(&s_labels, k)?;

        let (grads, losses, omega) = if warm {
            counters.warmup_iterations += 1;
            let batch = Batch { xs: &xs, ys: &ys, xt: None };
            let (g, l) = grad_total(&model, batch, None, &uniform, &warm_objective, solver)?;
            (g, l, None)
        } else {
            counters.buot_iterations += 1;
            let t_idx = target_batches.next_batch(cfg.batch_t);
            let xt = gather_rows(&task.target_x, &t_idx);
            let batch = Batch { xs: &xs, ys: &ys, xt: Some(&xt) };
            let (sol, weights) = if cfg.needs_plans() {
                let ps = model.predict(&xs, PredictionRole::Source)?;
                let pt = model.predict(&xt, PredictionRole::Target)?;
                let sol = solve_bilevel(&ps, &pt, solver)?;
                counters.bilevel_solves += 1;
                if !sol.converged {
                    counters.unconverged_solves += 1;
                }
                kernel_time += sol.kernel_time;
                kernel_calls += 2 * solver.t_uot;

                let pseudo = indicator_from_labels(&pt.pseudo_labels(), k)?;
                let g2r = recover_class_plan(&sol.gamma1, &sol.gamma2, &ys, &pseudo)?;
                let weights = if cfg.use_weights {
                    counters.weight_computations += 1;
                    bilevel_weights(&g2r)
                } else {
                    uniform.clone()
                };
                let g1r = recover_sample_plan(&sol.gamma1, &sol.gamma2, &ys, &pseudo)?;
                plans = Some(FinalPlans {
                    gamma1: sol.gamma1.clone(),
                    gamma2: sol.gamma2.clone(),
                    gamma1_recovered: g1r,
                    gamma2_recovered: g2r,
                });
                (Some(sol), weights)
            } else {
                (None, uniform.clone())
            };
            let (g, l) = grad_total(&model, batch, sol.as_ref(), &weights, &objective, solver)?;
            if sol.is_some() {
                counters.buot_loss_evaluations += 1;
                buot_trace.push((iter, l.buot));
            }
            let omega = weights.omega().to_vec();
            final_weights = weights;
            (g, l, Some(omega))
        };

        if !losses.is_finite() || !grads.is_finite() {
            log::error!("non-finite state at iteration {iter}: {losses:?}");
            return Err(Error::Numerical(format!("non-finite loss or gradient at iteration {iter}: {losses:?}")));
        }
        adam_step(&mut model, &grads, &mut adam, cfg.eta)?;

        if iter % cfg.log_interval == 0 || iter == cfg.t_warm || iter == cfg.t_max {
            let acc_s = accuracy(&model, &task.source_x, &task.source_y)?;
            let acc_t = accuracy(&model, &task.target_x, &task.target_y)?;
            log::debug!(
                "iter {iter} acc_s {acc_s:.4} acc_t {acc_t:.4} total {:.6} buot {:.6}",
                losses.total,
                losses.buot
            );
            records.push(IterationRecord {
                iter,
                stage: if warm { Stage::WarmUp } else { Stage::Buot },
                acc_s,
                acc_t,
                losses,
                omega,
            });
        }
    }
    stage_times.buot_secs = started.elapsed().as_secs_f64() - stage_times.warmup_secs;

    let final_acc_s = accuracy(&model, &task.source_x, &task.source_y)?;
    let final_acc_t = accuracy(&model, &task.target_x, &task.target_y)?;
    log::info!(
        "trained seed {} ({} warm-up + {} BUOT iterations): acc_s {final_acc_s:.4} acc_t {final_acc_t:.4}",
        cfg.train_seed,
        counters.warmup_iterations,
        counters.buot_iterations
    );
    Ok(TrainReport {
        records,
        buot_trace,
        final_weights,
        final_acc_t,
        final_acc_s,
        model,
        plans,
        counters,
        kernel_time,
        kernel_calls,
        stage_times,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub acc_s: f64,
    pub acc_t: f64,
    /// Target accuracy per class; `None` for classes absent from the target.
    pub per_class_t: Vec<Option<f64>>,
    /// `confusion[true][predicted]` over the target set.
    pub confusion: Vec<Vec<usize>>,
    /// Source error rate per class weighted by the class weights.
    pub weighted_source_risk: f64,
    pub target_risk: f64,
    pub generalization_gap: f64,
}

pub fn evaluate(model: &SoftmaxPredictor, task: &SyntheticPdaTask, weights: &ClassWeights) -> Result<Metrics> {
    let k = task.k_source();
    if model.n_classes() != k || weights.len() != k {
        return Err(Error::shape("evaluation classes", k, (model.n_classes(), weights.len())));
    }
    let pred_s = model.classify(&task.source_x)?;
    let pred_t = model.classify(&task.target_x)?;

    let mut confusion = vec![vec![0usize; k]; k];
    for (&truth, &p) in task.target_y.iter().zip(&pred_t) {
        confusion[truth][p] += 1;
    }
    let per_class_t = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let hits_t: usize = (0..k).map(|c| confusion[c][c]).sum();
    let acc_t = hits_t as f64 / pred_t.len() as f64;

    let mut errors = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&truth, &p) in task.source_y.iter().zip(&pred_s) {
        counts[truth] += 1;
        if truth != p {
            errors[truth] += 1;
        }
    }
    let hits_s = counts.iter().sum::<usize>() - errors.iter().sum::<usize>();
    let acc_s = hits_s as f64 / pred_s.len() as f64;
    let weighted_source_risk = (0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| weights.omega()[c] * errors[c] as f64 / counts[c] as f64)
        .sum::<f64>();
    let target_risk = 1.0 - acc_t;

    Ok(Metrics {
        acc_s,
        acc_t,
        per_class_t,
        confusion,
        weighted_source_risk,
        target_risk,
        generalization_gap: (weighted_source_risk - target_risk).abs(),
    })
}

/// A fully specified single run.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub task: TaskParams,
    pub training: TrainConfig,
    pub solver: BilevelConfig,
}

pub struct RunOutcome {
    pub task: SyntheticPdaTask,
    pub report: TrainReport,
    pub metrics: Metrics,
}

impl Experiment {
    /// Same experiment with both the task and training seeds set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut e = self.clone();
        e.task.seed = seed;
        e.training.train_seed = seed;
        e
    }

    pub fn source_only(&self) -> Self {
        Experiment {
            training: self.training.source_only(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.training.validate()?;
        self.solver.validate()?;
        if self.training.batch_s > self.task.n_s || self.training.batch_t > self.task.n_t {
            return Err(Error::InvalidArgument(format!(
                "batch sizes {}/{} exceed domain sizes {}/{}",
                self.training.batch_s, self.training.batch_t, self.task.n_s, self.task.n_t
            )));
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunOutcome> {
        let task = generate_task(&self.task)?;
        let report = train(&task, &self.training, &self.solver)?;
        let metrics = evaluate(&report.model, &task, &report.final_weights)?;
        Ok(RunOutcome { task, report, metrics })
    }
}

/// Applies `f` to every item on up to `workers` threads; results keep item order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot poisoned").expect("every item processed"))
        .collect()
}

/// Mean and half-width of the two-sided 95% Student-t interval.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

/// Sample standard deviation; zero below two values.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KTarget,
    Lambda,
    /// Domain shift magnitude; large values give poor warm-up predictions.
    ShiftScale,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::KTarget => "k_target",
            SweepAxis::Lambda => "lambda",
            SweepAxis::ShiftScale => "shift_scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "k_target" => Some(SweepAxis::KTarget),
            "lambda" => Some(SweepAxis::Lambda),
            "shift_scale" => Some(SweepAxis::ShiftScale),
            _ => None,
        }
    }

    pub fn apply(self, base: &Experiment, value: f64) -> Result<Experiment> {
        let mut e = base.clone();
        match self {
            SweepAxis::KTarget => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("k_target must be a positive integer, got {value}")));
                }
                e.task.k_target = value as usize;
            }
            SweepAxis::Lambda => e.training.lambda = value,
            SweepAxis::ShiftScale => e.task.shift_scale = value,
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub outlier_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub value: f64,
    pub mean_accuracy: f64,
    pub ci95_accuracy: f64,
    pub mean_baseline: f64,
    pub ci95_baseline: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
    /// Correlation between the axis value and the BUOT-minus-baseline margin.
    pub trend_correlation: f64,
}

/// Total class weight on classes absent from the target.
pub fn outlier_weight(task: &SyntheticPdaTask, weights: &ClassWeights) -> f64 {
    weights
        .omega()
        .iter()
        .enumerate()
        .filter(|(c, _)| !task.is_shared(*c))
        .map(|(_, w)| w)
        .sum()
}

/// Runs every `(value, seed)` cell and its source-only counterpart.
///
/// Baselines are shared between cells whose source-only experiment is identical.
pub fn sweep(base: &Experiment, axis: SweepAxis, values: &[f64], seeds: &[u64], workers: usize) -> Result<SweepTable> {
    let mut cells = Vec::new();
    for &v in values {
        let e = axis.apply(base, v)?;
        e.validate()?;
        for &s in seeds {
            cells.push((v, s, e.with_seed(s)));
        }
    }
    let mut baselines: Vec<Experiment> = Vec::new();
    let baseline_of: Vec<usize> = cells
        .iter()
        .map(|(_, _, e)| {
            let b = e.source_only();
            match baselines.iter().position(|x| *x == b) {
                Some(i) => i,
                None => {
                    baselines.push(b);
                    baselines.len() - 1
                }
            }
        })
        .collect();

    let runs = parallel_map(&cells, workers, |(_, _, e)| {
        e.run().map(|o| (o.report.final_acc_t, outlier_weight(&o.task, &o.report.final_weights)))
    });
    let base_runs = parallel_map(&baselines, workers, |e| e.run().map(|o| o.report.final_acc_t));

    let mut out = Vec::with_capacity(cells.len());
    for (((v, s, _), run), b) in cells.iter().zip(runs).zip(baseline_of) {
        let (accuracy, outlier) = run?;
        let baseline_accuracy = match &base_runs[b] {
            Ok(a) => *a,
            Err(e) => return Err(Error::Numerical(format!("baseline run failed: {e}"))),
        };
        out.push(SweepCell {
            value: *v,
            seed: *s,
            accuracy,
            baseline_accuracy,
            outlier_weight: outlier,
        });
    }

    let mut summary = Vec::new();
    for &v in values {
        let acc: Vec<f64> = out.iter().filter(|c| c.value == v).map(|c| c.accuracy).collect();
        let base: Vec<f64> = out.iter().filter(|c| c.value == v).map(|c| c.baseline_accuracy).collect();
        let (mean_accuracy, ci95_accuracy) = mean_ci95(&acc);
        let (mean_baseline, ci95_baseline) = mean_ci95(&base);
        summary.push(SweepSummary {
            value: v,
            mean_accuracy,
            ci95_accuracy,
            mean_baseline,
            ci95_baseline,
            mean_margin: mean_accuracy - mean_baseline,
        });
    }
    let xs: Vec<f64> = summary.iter().map(|s| s.value).collect();
    let margins: Vec<f64> = summary.iter().map(|s| s.mean_margin).collect();
    Ok(SweepTable {
        axis,
        cells: out,
        summary,
        trend_correlation: pearson(&xs, &margins),
    })
}

pub fn sweep_target_classes(base: &Experiment, k_targets: &[usize], seeds: &[u64], workers: usize) -> Result<SweepTable> {
    let values: Vec<f64> = k_targets.iter().map(|&k| k as f64).collect();
    sweep(base, SweepAxis::KTarget, &values, seeds, workers)
}
