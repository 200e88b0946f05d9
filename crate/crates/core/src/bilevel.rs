//! Label-aware cost, the sample/class tensor contraction and the alternating
//! bi-level UOT solver.
//!
//! The 4-order cost tensor `C[i1, j1, i2, j2] = c(Ps[i1, i2], Pt[j1, j2], i2 == j2)`
//! is never materialized. [`contract_oracle`] evaluates the contraction with a
//! quadruple loop; [`contract_fast`] uses the decomposition
//! `c(a, b) = a^2 + b^2 - 2 M[i2, j2] a b` to reduce it to matrix products.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::ot::{
    entropy_of, frobenius, generalized_kl, CostMatrix, Histogram, ScalingSolver, TransportPlan,
};

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionRole {
    Source,
    Target,
}

/// Row-stochastic matrix of softmax outputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    values: Array2<f64>,
    role: PredictionRole,
}

impl PredictionMatrix {
    pub fn new(values: Array2<f64>, role: PredictionRole) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument("prediction matrix must be nonempty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "prediction entries must lie in [0, 1], found {bad}"
            )));
        }
        for (i, row) in values.rows().into_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "prediction row {i} sums to {s}, not 1"
                )));
            }
        }
        Ok(PredictionMatrix { values, role })
    }

    pub fn source(values: Array2<f64>) -> Result<Self> {
        Self::new(values, PredictionRole::Source)
    }

    pub fn target(values: Array2<f64>) -> Result<Self> {
        Self::new(values, PredictionRole::Target)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn role(&self) -> PredictionRole {
        self.role
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Row-wise argmax; ties go to the lowest class index.
    pub fn pseudo_labels(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// `K x K` matrix with `+1` on the diagonal and `-1` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSignMatrix {
    k: usize,
}

impl LabelSignMatrix {
    pub fn new(k: usize) -> Self {
        LabelSignMatrix { k }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            -1.0
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.k, self.k), |(i, j)| self.get(i, j))
    }
}

/// Scalar ground cost between two prediction entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostKind {
    /// `(a - b)^2` for matching class indices, `(a + b)^2` otherwise.
    #[default]
    LabelAware,
    /// `(a - b)^2` regardless of class indices.
    SquaredEuclidean,
}

impl CostKind {
    pub fn eval(self, a: f64, b: f64, same_class: bool) -> f64 {
        match self {
            CostKind::LabelAware if !same_class => (a + b) * (a + b),
            _ => (a - b) * (a - b),
        }
    }

    /// Sign of the cross term `-2 s a b` for class pair `(i, j)`.
    fn cross_sign(self, i: usize, j: usize) -> f64 {
        match self {
            CostKind::LabelAware => LabelSignMatrix::new(0).get(i, j),
            CostKind::SquaredEuclidean => 1.0,
        }
    }

    fn sign_matrix(self, k: usize) -> Array2<f64> {
        Array2::from_shape_fn((k, k), |(i, j)| self.cross_sign(i, j))
    }
}

/// The label-aware cost on two probabilities.
pub fn label_aware_cost(a: f64, b: f64, same_class: bool) -> Result<f64> {
    for v in [a, b] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "label-aware cost inputs must lie in [0, 1], got {v}"
            )));
        }
    }
    Ok(CostKind::LabelAware.eval(a, b, same_class))
}

/// Which index pair of the cost tensor gets summed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contraction {
    /// Plan is `n_s x n_t`; output is the `K x K` class cost.
    Samples,
    /// Plan is `K x K`; output is the `n_s x n_t` sample cost.
    Classes,
}

fn check_shapes(ps: &PredictionMatrix, pt: &PredictionMatrix, plan: &TransportPlan, over: Contraction) -> Result<()> {
    if ps.n_classes() != pt.n_classes() {
        return Err(Error::shape("contraction class count", ps.n_classes(), pt.n_classes()));
    }
    let expected = match over {
        Contraction::Samples => (ps.n_samples(), pt.n_samples()),
        Contraction::Classes => (ps.n_classes(), pt.n_classes()),
    };
    if plan.shape() != expected {
        return Err(Error::shape("contraction plan", expected, plan.shape()));
    }
    Ok(())
}

/// Quadruple-loop reference contraction with the label-aware cost.
pub fn contract_oracle(
    ps: &PredictionMatrix,
    pt: &PredictionMatrix,
    plan: &TransportPlan,
    over: Contraction,
) -> Result<CostMatrix> {
    contract_oracle_with(CostKind::LabelAware, ps, pt, plan, over)
}

pub fn contract_oracle_with(
    kind: CostKind,
    ps: &PredictionMatrix,
    pt: &PredictionMatrix,
    plan: &TransportPlan,
    over: Contraction,
) -> Result<CostMatrix> {
    check_shapes(ps, pt, plan, over)?;
    let (s, t, g) = (ps.values(), pt.values(), plan.values());
    let (ns, nt, k) = (ps.n_samples(), pt.n_samples(), ps.n_classes());
    let out = match over {
        Contraction::Samples => Array2::from_shape_fn((k, k), |(i2, j2)| {
            let mut acc = 0.0;
            for i1 in 0..ns {
                for j1 in 0..nt {
                    acc += kind.eval(s[[i1, i2]], t[[j1, j2]], i2 == j2) * g[[i1, j1]];
                }
            }
            acc
        }),
        Contraction::Classes => Array2::from_shape_fn((ns, nt), |(i1, j1)| {
            let mut acc = 0.0;
            for i2 in 0..k {
                for j2 in 0..k {
                    acc += kind.eval(s[[i1, i2]], t[[j1, j2]], i2 == j2) * g[[i2, j2]];
                }
            }
            acc
        }),
    };
    CostMatrix::new(out)
}

/// Matrix-product contraction with the label-aware cost.
///
/// The quadratic terms use the plan's actual marginals, so the result equals
/// the oracle for unbalanced plans too.
pub fn contract_fast(
    ps: &PredictionMatrix,
    pt: &PredictionMatrix,
    plan: &TransportPlan,
    over: Contraction,
) -> Result<CostMatrix> {
    contract_fast_with(CostKind::LabelAware, ps, pt, plan, over)
}

pub fn contract_fast_with(
    kind: CostKind,
    ps: &PredictionMatrix,
    pt: &PredictionMatrix,
    plan: &TransportPlan,
    over: Contraction,
) -> Result<CostMatrix> {
    check_shapes(ps, pt, plan, over)?;
    let (s, t, g) = (ps.values(), pt.values(), plan.values());
    let r = plan.row_marginal().as_array();
    let c = plan.col_marginal().as_array();
    let s2 = s.mapv(|v| v * v);
    let t2 = t.mapv(|v| v * v);
    let signs = kind.sign_matrix(ps.n_classes());
    let out = match over {
        Contraction::Samples => {
            // (Ps^2)^T r 1^T + 1 c^T Pt^2 - 2 M ⊙ (Ps^T Γ Pt)
            let src: Array1<f64> = s2.t().dot(r);
            let tgt: Array1<f64> = t2.t().dot(c);
            let cross = s.t().dot(g).dot(t);
            let mut out = cross * &signs * -2.0;
            out += &src.insert_axis(Axis(1));
            out += &tgt.insert_axis(Axis(0));
            out
        }
        Contraction::Classes => {
            // Ps^2 r 1^T + 1 c^T (Pt^2)^T - 2 Ps (M ⊙ Γ) Pt^T
            let src: Array1<f64> = s2.dot(r);
            let tgt: Array1<f64> = t2.dot(c);
            let signed = g * &signs;
            let cross = s.dot(&signed).dot(&t.t());
            let mut out = cross * -2.0;
            out += &src.insert_axis(Axis(1));
            out += &tgt.insert_axis(Axis(0));
            out
        }
    };
    CostMatrix::from_clamped(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalanceMode {
    #[default]
    Uot,
    Ot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    #[default]
    Fast,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelConfig {
    /// Entropic weight on the sample-level plan.
    pub lambda1: f64,
    /// Entropic weight on the class-level plan.
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Alternation rounds.
    pub t_uot: usize,
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    pub cost: CostKind,
    pub balance: BalanceMode,
    pub kernel: KernelMode,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            lambda1: 0.05,
            lambda2: 0.05,
            beta1: 1.0,
            beta2: 1.0,
            t_uot: 5,
            inner_max_iter: crate::ot::DEFAULT_MAX_ITER,
            inner_tol: crate::ot::DEFAULT_TOL,
            cost: CostKind::LabelAware,
            balance: BalanceMode::Uot,
            kernel: KernelMode::Fast,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("inner_tol", self.inner_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.t_uot == 0 {
            return Err(Error::InvalidArgument("t_uot must be at least 1".into()));
        }
        if self.inner_max_iter == 0 {
            return Err(Error::InvalidArgument("inner_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    fn solver(&self, epsilon: f64, beta: f64) -> ScalingSolver {
        let solver = match self.balance {
            BalanceMode::Uot => ScalingSolver::unbalanced(epsilon, beta),
            BalanceMode::Ot => ScalingSolver::balanced(epsilon),
        };
        solver.max_iter(self.inner_max_iter).tol(self.inner_tol)
    }

    pub fn contract(
        &self,
        ps: &PredictionMatrix,
        pt: &PredictionMatrix,
        plan: &TransportPlan,
        over: Contraction,
    ) -> Result<CostMatrix> {
        match self.kernel {
            KernelMode::Fast => contract_fast_with(self.cost, ps, pt, plan, over),
            KernelMode::Oracle => contract_oracle_with(self.cost, ps, pt, plan, over),
        }
    }
}

/// Sample-level `(mu1, nu1)` and class-level `(mu2, nu2)` histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct BilevelMarginals {
    pub mu1: Histogram,
    pub nu1: Histogram,
    pub mu2: Histogram,
    pub nu2: Histogram,
}

impl BilevelMarginals {
    pub fn uniform(n_s: usize, n_t: usize, k: usize) -> Self {
        BilevelMarginals {
            mu1: Histogram::uniform(n_s),
            nu1: Histogram::uniform(n_t),
            mu2: Histogram::uniform(k),
            nu2: Histogram::uniform(k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BilevelSolution {
    /// Sample-level plan, `n_s x n_t`.
    pub gamma1: TransportPlan,
    /// Class-level plan, `K x K`.
    pub gamma2: TransportPlan,
    /// BUOT objective after each alternation round.
    pub objective_trace: Vec<f64>,
    /// Every inner solve of the final round met its tolerance.
    pub converged: bool,
    /// Wall time spent inside the tensor contractions.
    pub kernel_time: Duration,
}

/// Value of the bi-level objective at `(gamma1, gamma2)`.
pub fn buot_objective(
    ps: &PredictionMatrix,
    pt: &PredictionMatrix,
    gamma1: &TransportPlan,
    gamma2: &TransportPlan,
    marginals: &BilevelMarginals,
    cfg: &BilevelConfig,
) -> Result<f64> {
    let class_cost = contract_fast_with(cfg.cost, ps, pt, gamma1, Contraction::Samples)?;
    let transport = frobenius(class_cost.values(), gamma2.values());
    let entropy = cfg.lambda1 * entropy_of(gamma1.values()) + cfg.lambda2 * entropy_of(gamma2.values());
    let relax1 = generalized_kl(gamma1.row_marginal().as_slice(), marginals.mu1.as_slice())?
        + generalized_kl(gamma1.col_marginal().as_slice(), marginals.nu1.as_slice())?;
    let relax2 = generalized_kl(gamma2.row_marginal().as_slice(), marginals.mu2.as_slice())?
        + generalized_kl(gamma2.col_marginal().as_slice(), marginals.nu2.as_slice())?;
    Ok(transport - entropy + cfg.beta1 * relax1 + cfg.beta2 * relax2)
}

/// Alternating solve with uniform marginals.
pub fn solve_bilevel(ps: &PredictionMatrix, pt: &PredictionMatrix, cfg: &BilevelConfig) -> Result<BilevelSolution> {
    let marginals = BilevelMarginals::uniform(ps.n_samples(), pt.n_samples(), ps.n_classes());
    solve_bilevel_with_marginals(ps, pt, &marginals, cfg)
}

pub fn solve_bilevel_with_marginals(
    ps: &PredictionMatrix,
    pt: &PredictionMatrix,
    marginals: &BilevelMarginals,
    cfg: &BilevelConfig,
) -> Result<BilevelSolution> {
    cfg.validate()?;
    if ps.n_classes() != pt.n_classes() {
        return Err(Error::shape("bilevel class count", ps.n_classes(), pt.n_classes()));
    }
    let expected = (ps.n_samples(), pt.n_samples(), ps.n_classes(), ps.n_classes());
    let actual = (marginals.mu1.len(), marginals.nu1.len(), marginals.mu2.len(), marginals.nu2.len());
    if expected != actual {
        return Err(Error::shape("bilevel marginals", expected, actual));
    }

    let mut gamma1 = TransportPlan::outer(&marginals.mu1, &marginals.nu1);
    let mut gamma2 = TransportPlan::outer(&marginals.mu2, &marginals.nu2);
    let sample_solver = cfg.solver(cfg.lambda1, cfg.beta1);
    let class_solver = cfg.solver(cfg.lambda2, cfg.beta2);

    let mut trace = Vec::with_capacity(cfg.t_uot);
    let mut kernel_time = Duration::ZERO;
    let mut converged = false;
    for round in 0..cfg.t_uot {
        let start = Instant::now();
        let sample_cost = cfg.contract(ps, pt, &gamma2, Contraction::Classes)?;
        kernel_time += start.elapsed();
        let first = sample_solver.solve(&marginals.mu1, &marginals.nu1, &sample_cost)?;
        gamma1 = first.plan;

        let start = Instant::now();
        let class_cost = cfg.contract(ps, pt, &gamma1, Contraction::Samples)?;
        kernel_time += start.elapsed();
        let second = class_solver.solve(&marginals.mu2, &marginals.nu2, &class_cost)?;
        gamma2 = second.plan;

        converged = first.converged && second.converged;
        let objective = buot_objective(ps, pt, &gamma1, &gamma2, marginals, cfg)?;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "bilevel objective is {objective} after round {}",
                round + 1
            )));
        }
        trace.push(objective);
    }

    Ok(BilevelSolution {
        gamma1,
        gamma2,
        objective_trace: trace,
        converged,
        kernel_time,
    })
}
