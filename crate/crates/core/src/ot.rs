//! Dense histograms, transport plans and the entropic OT / UOT scaling solvers.
//!
//! Both solvers run the multiplicative scaling iteration on a stabilized Gibbs
//! kernel `K_ij = exp((alpha_i + beta_j - C_ij) / eps)`. Whenever a scaling
//! vector leaves `[exp(-threshold), exp(threshold)]` it is folded into the dual
//! potentials `alpha`/`beta` and the kernel is rebuilt, so small `eps` does not
//! under- or overflow.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability histogram.
pub const PROBABILITY_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_ABSORB_THRESHOLD: f64 = 50.0;

/// Nonnegative mass vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram(Array1<f64>);

impl Histogram {
    pub fn new(mass: impl Into<Array1<f64>>) -> Result<Self> {
        let mass = mass.into();
        if mass.is_empty() {
            return Err(Error::InvalidArgument("histogram must be nonempty".into()));
        }
        if let Some(bad) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "histogram entries must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Histogram(mass))
    }

    /// Histogram whose entries sum to one.
    pub fn probability(mass: impl Into<Array1<f64>>) -> Result<Self> {
        let h = Self::new(mass)?;
        let total = h.total_mass();
        if (total - 1.0).abs() > PROBABILITY_TOL {
            return Err(Error::InvalidArgument(format!(
                "probability histogram sums to {total}, not 1"
            )));
        }
        Ok(h)
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform histogram needs at least one entry");
        Histogram(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.0.sum()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("histogram storage is contiguous")
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// Dense nonnegative coupling with its two marginals.
///
/// The marginals are recomputed from `values` on construction and there is no
/// mutable access to `values`, so they never go stale.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: Array2<f64>,
    row_marginal: Histogram,
    col_marginal: Histogram,
}

impl TransportPlan {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument("transport plan must be nonempty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "transport plan entries must be finite and nonnegative, found {bad}"
            )));
        }
        let row_marginal = Histogram(values.sum_axis(Axis(1)));
        let col_marginal = Histogram(values.sum_axis(Axis(0)));
        Ok(TransportPlan {
            values,
            row_marginal,
            col_marginal,
        })
    }

    /// Product coupling `mu nu^T`.
    pub fn outer(mu: &Histogram, nu: &Histogram) -> Self {
        let values = Array2::from_shape_fn((mu.len(), nu.len()), |(i, j)| mu.0[i] * nu.0[j]);
        TransportPlan::new(values).expect("outer product of histograms is a valid plan")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TransportPlan::new(Array2::zeros((rows, cols))).expect("zero plan is valid")
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn row_marginal(&self) -> &Histogram {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &Histogram {
        &self.col_marginal
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }

    pub fn transpose(&self) -> Self {
        TransportPlan {
            values: self.values.t().to_owned(),
            row_marginal: self.col_marginal.clone(),
            col_marginal: self.row_marginal.clone(),
        }
    }

    /// `max(|Γ1 - mu|_inf, |Γ^T 1 - nu|_inf)`.
    pub fn marginal_residual(&self, mu: &Histogram, nu: &Histogram) -> f64 {
        let rows = max_abs_diff(self.row_marginal.0.view(), mu.0.view());
        let cols = max_abs_diff(self.col_marginal.0.view(), nu.0.view());
        rows.max(cols)
    }
}

/// Pairwise cost with finite nonnegative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost entries must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(CostMatrix(values))
    }

    /// Clamps round-off negatives to zero. Used for costs that are
    /// nonnegative in exact arithmetic but come out of cancelling sums.
    pub fn from_clamped(mut values: Array2<f64>) -> Result<Self> {
        values.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
        Self::new(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Result of a scaling solve.
#[derive(Debug, Clone)]
pub struct ScalingOutcome {
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
    /// Marginal residual for balanced solves, last scaling change for UOT.
    pub residual: f64,
    /// `(iteration, objective)` checkpoints when tracing is enabled.
    pub objective_trace: Vec<(usize, f64)>,
}

/// Configurable scaling solver. `marginal_penalty == None` solves balanced
/// entropic OT; `Some(beta)` solves KL-relaxed UOT.
#[derive(Debug, Clone)]
pub struct ScalingSolver {
    pub epsilon: f64,
    pub marginal_penalty: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub absorb_threshold: f64,
    pub trace_every: Option<usize>,
}

impl ScalingSolver {
    pub fn balanced(epsilon: f64) -> Self {
        ScalingSolver {
            epsilon,
            marginal_penalty: None,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            absorb_threshold: DEFAULT_ABSORB_THRESHOLD,
            trace_every: None,
        }
    }

    pub fn unbalanced(epsilon: f64, beta: f64) -> Self {
        ScalingSolver {
            marginal_penalty: Some(beta),
            ..Self::balanced(epsilon)
        }
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn absorb_threshold(mut self, threshold: f64) -> Self {
        self.absorb_threshold = threshold;
        self
    }

    pub fn trace_every(mut self, every: usize) -> Self {
        self.trace_every = Some(every.max(1));
        self
    }

    fn check(&self, mu: &Histogram, nu: &Histogram, cost: &CostMatrix) -> Result<()> {
        if cost.shape() != (mu.len(), nu.len()) {
            return Err(Error::shape("scaling solver cost", (mu.len(), nu.len()), cost.shape()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if let Some(beta) = self.marginal_penalty {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn solve(&self, mu: &Histogram, nu: &Histogram, cost: &CostMatrix) -> Result<ScalingOutcome> {
        self.check(mu, nu, cost)?;
        if self.marginal_penalty.is_none() {
            let gap = (mu.total_mass() - nu.total_mass()).abs();
            if gap > self.tol {
                return Err(Error::Infeasible(format!(
                    "balanced transport needs equal masses, got {} vs {} (gap {gap:e} exceeds tol {:e})",
                    mu.total_mass(),
                    nu.total_mass(),
                    self.tol
                )));
            }
            if mu.total_mass() == 0.0 {
                return Err(Error::Infeasible("histograms carry no mass".into()));
            }
        }

        let mut state = KernelState::new(mu, nu, cost, self.epsilon);
        let exponent = match self.marginal_penalty {
            Some(beta) => beta / (beta + self.epsilon),
            None => 1.0,
        };

        let mut trace = Vec::new();
        let mut converged = false;
        let mut residual = f64::INFINITY;
        let mut iterations = 0;

        for it in 1..=self.max_iter {
            iterations = it;
            let change_a = state.update_rows(exponent, self.absorb_threshold)?;
            let change_b = state.update_cols(exponent, self.absorb_threshold)?;

            if self.marginal_penalty.is_some() {
                residual = change_a.max(change_b);
                if residual <= self.tol {
                    converged = true;
                }
            } else {
                // Columns are exact after the column update; only rows drift.
                residual = state.row_residual()?;
                if residual <= self.tol {
                    converged = true;
                }
            }

            if let Some(every) = self.trace_every {
                if it % every == 0 || converged {
                    let plan = state.plan()?;
                    trace.push((it, self.objective(&plan, mu, nu, cost)));
                }
            }
            if converged {
                break;
            }
        }

        let plan = state.plan()?;
        if self.marginal_penalty.is_none() {
            residual = plan.marginal_residual(mu, nu);
            converged = residual <= self.tol;
        }
        Ok(ScalingOutcome {
            plan,
            converged,
            iterations,
            residual,
            objective_trace: trace,
        })
    }

    /// Primal objective matching this solver's problem.
    pub fn objective(&self, plan: &TransportPlan, mu: &Histogram, nu: &Histogram, cost: &CostMatrix) -> f64 {
        match self.marginal_penalty {
            Some(beta) => uot_objective(plan, mu, nu, cost, self.epsilon, beta),
            None => frobenius(cost.values(), plan.values()) - self.epsilon * plan_entropy(plan),
        }
    }
}

/// Scaling state on the stabilized kernel.
struct KernelState<'a> {
    mu: &'a Histogram,
    nu: &'a Histogram,
    cost: &'a CostMatrix,
    epsilon: f64,
    alpha: Array1<f64>,
    beta: Array1<f64>,
    /// Log scaling vectors; `-inf` marks zero-mass entries.
    log_a: Array1<f64>,
    log_b: Array1<f64>,
    kernel: Array2<f64>,
}

impl<'a> KernelState<'a> {
    fn new(mu: &'a Histogram, nu: &'a Histogram, cost: &'a CostMatrix, epsilon: f64) -> Self {
        let c = cost.values();
        // Start with potentials that put each kernel row's maximum at 1.
        let alpha: Array1<f64> = c
            .rows()
            .into_iter()
            .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let beta: Array1<f64> = (0..c.ncols())
            .map(|j| {
                c.column(j)
                    .iter()
                    .zip(alpha.iter())
                    .map(|(cij, ai)| cij - ai)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let log_a = mu.0.mapv(|m| if m > 0.0 { 0.0 } else { f64::NEG_INFINITY });
        let log_b = nu.0.mapv(|m| if m > 0.0 { 0.0 } else { f64::NEG_INFINITY });
        let mut state = KernelState {
            mu,
            nu,
            cost,
            epsilon,
            alpha,
            beta,
            log_a,
            log_b,
            kernel: Array2::zeros(c.dim()),
        };
        state.rebuild_kernel();
        state
    }

    fn rebuild_kernel(&mut self) {
        let eps = self.epsilon;
        let c = self.cost.values();
        let (alpha, beta) = (&self.alpha, &self.beta);
        self.kernel = Array2::from_shape_fn(c.dim(), |(i, j)| ((alpha[i] + beta[j] - c[[i, j]]) / eps).exp());
    }

    fn log_kernel(&self, i: usize, j: usize) -> f64 {
        (self.alpha[i] + self.beta[j] - self.cost.values()[[i, j]]) / self.epsilon
    }

    /// `ln (K b)_i` from a precomputed product, falling back to log-sum-exp when it underflowed.
    fn log_kb(&self, i: usize, kb: f64) -> f64 {
        if kb.is_normal() {
            return kb.ln();
        }
        log_sum_exp((0..self.nu.len()).map(|j| self.log_kernel(i, j) + self.log_b[j]))
    }

    fn log_kta(&self, j: usize, kta: f64) -> f64 {
        if kta.is_normal() {
            return kta.ln();
        }
        log_sum_exp((0..self.mu.len()).map(|i| self.log_kernel(i, j) + self.log_a[i]))
    }

    /// Updates the row scaling; returns the largest change in `ln a` (full potential).
    fn update_rows(&mut self, exponent: f64, threshold: f64) -> Result<f64> {
        let kb = self.kernel.dot(&self.log_b.mapv(f64::exp));
        let eps = self.epsilon;
        let mut change: f64 = 0.0;
        let mut new_log_a = Array1::zeros(self.mu.len());
        for i in 0..self.mu.len() {
            let m = self.mu.0[i];
            if m == 0.0 {
                new_log_a[i] = f64::NEG_INFINITY;
                continue;
            }
            let lkb = self.log_kb(i, kb[i]);
            if !lkb.is_finite() {
                return Err(Error::Numerical(format!(
                    "row {i} of the Gibbs kernel vanished even after log-domain absorption"
                )));
            }
            let la = exponent * (m.ln() - lkb) - (1.0 - exponent) * self.alpha[i] / eps;
            change = change.max((la - self.log_a[i]).abs());
            new_log_a[i] = la;
        }
        self.log_a = new_log_a;
        if max_finite_abs(self.log_a.view()) > threshold {
            self.absorb();
        }
        Ok(change)
    }

    fn update_cols(&mut self, exponent: f64, threshold: f64) -> Result<f64> {
        let kta = self.kernel.t().dot(&self.log_a.mapv(f64::exp));
        let eps = self.epsilon;
        let mut change: f64 = 0.0;
        let mut new_log_b = Array1::zeros(self.nu.len());
        for j in 0..self.nu.len() {
            let m = self.nu.0[j];
            if m == 0.0 {
                new_log_b[j] = f64::NEG_INFINITY;
                continue;
            }
            let lka = self.log_kta(j, kta[j]);
            if !lka.is_finite() {
                return Err(Error::Numerical(format!(
                    "column {j} of the Gibbs kernel vanished even after log-domain absorption"
                )));
            }
            let lb = exponent * (m.ln() - lka) - (1.0 - exponent) * self.beta[j] / eps;
            change = change.max((lb - self.log_b[j]).abs());
            new_log_b[j] = lb;
        }
        self.log_b = new_log_b;
        if max_finite_abs(self.log_b.view()) > threshold {
            self.absorb();
        }
        Ok(change)
    }

    /// Folds both scaling vectors into the potentials and rebuilds the kernel.
    fn absorb(&mut self) {
        let eps = self.epsilon;
        for (alpha, la) in self.alpha.iter_mut().zip(self.log_a.iter_mut()) {
            if la.is_finite() {
                *alpha += eps * *la;
                *la = 0.0;
            }
        }
        for (beta, lb) in self.beta.iter_mut().zip(self.log_b.iter_mut()) {
            if lb.is_finite() {
                *beta += eps * *lb;
                *lb = 0.0;
            }
        }
        self.rebuild_kernel();
    }

    fn row_residual(&self) -> Result<f64> {
        let kb = self.kernel.dot(&self.log_b.mapv(f64::exp));
        let mut worst: f64 = 0.0;
        for i in 0..self.mu.len() {
            let r = if self.log_a[i].is_finite() {
                (self.log_a[i] + self.log_kb(i, kb[i])).exp()
            } else {
                0.0
            };
            worst = worst.max((r - self.mu.0[i]).abs());
        }
        if worst.is_nan() {
            return Err(Error::Numerical("marginal residual is NaN".into()));
        }
        Ok(worst)
    }

    fn plan(&self) -> Result<TransportPlan> {
        let values = Array2::from_shape_fn(self.kernel.dim(), |(i, j)| {
            let (la, lb) = (self.log_a[i], self.log_b[j]);
            if la == f64::NEG_INFINITY || lb == f64::NEG_INFINITY {
                0.0
            } else {
                (la + self.log_kernel(i, j) + lb).exp()
            }
        });
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("transport plan overflowed".into()));
        }
        TransportPlan::new(values)
    }
}

/// Balanced entropic OT.
pub fn sinkhorn_balanced(
    mu: &Histogram,
    nu: &Histogram,
    cost: &CostMatrix,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<ScalingOutcome> {
    ScalingSolver::balanced(epsilon)
        .max_iter(max_iter)
        .tol(tol)
        .solve(mu, nu, cost)
}

/// Entropic UOT with both marginals relaxed by `beta * KL`.
pub fn scaling_uot(
    mu: &Histogram,
    nu: &Histogram,
    cost: &CostMatrix,
    epsilon: f64,
    beta: f64,
    max_iter: usize,
    tol: f64,
) -> Result<ScalingOutcome> {
    ScalingSolver::unbalanced(epsilon, beta)
        .max_iter(max_iter)
        .tol(tol)
        .solve(mu, nu, cost)
}

/// `-sum Γ (ln Γ - 1)` with `0 ln 0 = 0`.
pub fn plan_entropy(plan: &TransportPlan) -> f64 {
    entropy_of(plan.values())
}

pub(crate) fn entropy_of(values: &Array2<f64>) -> f64 {
    values
        .iter()
        .filter(|v| **v > 0.0)
        .map(|&v| -v * (v.ln() - 1.0))
        .sum()
}

/// Generalized KL `sum p ln(p/q) - p + q`; `+inf` when `p` is not dominated by `q`.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    generalized_kl(p.as_slice(), q.as_slice())
}

pub fn generalized_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", p.len(), q.len()));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 || pi.is_nan() || qi.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "kl_divergence needs nonnegative entries, found p={pi}, q={qi}"
            )));
        }
        if pi == 0.0 {
            total += qi;
        } else if qi == 0.0 {
            return Ok(f64::INFINITY);
        } else {
            total += pi * (pi / qi).ln() - pi + qi;
        }
    }
    Ok(total.max(0.0))
}

/// `<C, Γ> - eps H(Γ) + beta (KL(Γ1 | mu) + KL(Γ^T 1 | nu))`.
pub fn uot_objective(
    plan: &TransportPlan,
    mu: &Histogram,
    nu: &Histogram,
    cost: &CostMatrix,
    epsilon: f64,
    beta: f64,
) -> f64 {
    let kl_rows = generalized_kl(plan.row_marginal().as_slice(), mu.as_slice()).unwrap_or(f64::INFINITY);
    let kl_cols = generalized_kl(plan.col_marginal().as_slice(), nu.as_slice()).unwrap_or(f64::INFINITY);
    frobenius(cost.values(), plan.values()) - epsilon * plan_entropy(plan) + beta * (kl_rows + kl_cols)
}

pub(crate) fn frobenius(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn max_abs_diff(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_finite_abs(v: ArrayView1<f64>) -> f64 {
    v.iter().filter(|x| x.is_finite()).map(|x| x.abs()).fold(0.0, f64::max)
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Histogram, Histogram, CostMatrix) {
        let mut mu: Array1<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut nu: Array1<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        mu /= mu.sum();
        nu /= nu.sum();
        let cost = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..1.0));
        (
            Histogram::new(mu).unwrap(),
            Histogram::new(nu).unwrap(),
            CostMatrix::new(cost).unwrap(),
        )
    }

    /// Plain Sinkhorn on the raw kernel, no stabilization.
    fn naive_sinkhorn(mu: &Histogram, nu: &Histogram, cost: &CostMatrix, eps: f64, iters: usize) -> Array2<f64> {
        let k = cost.values().mapv(|c| (-c / eps).exp());
        let mut u = Array1::<f64>::ones(mu.len());
        let mut v = Array1::<f64>::ones(nu.len());
        for _ in 0..iters {
            let kv = k.dot(&v);
            u = mu.as_array() / &kv;
            let ktu = k.t().dot(&u);
            v = nu.as_array() / &ktu;
        }
        Array2::from_shape_fn(k.dim(), |(i, j)| u[i] * k[[i, j]] * v[j])
    }

    #[test]
    fn single_point_mass() {
        let h = Histogram::probability(array![1.0]).unwrap();
        let cost = CostMatrix::new(array![[0.0]]).unwrap();
        let out = sinkhorn_balanced(&h, &h, &cost, 0.1, 100, 1e-12).unwrap();
        assert!(out.converged);
        assert!((out.plan.values()[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_diagonal() {
        let h = Histogram::probability(array![0.5, 0.5]).unwrap();
        let cost = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let out = sinkhorn_balanced(&h, &h, &cost, 0.01, 1000, 1e-12).unwrap();
        let expected = array![[0.5, 0.0], [0.0, 0.5]];
        for (a, b) in out.plan.values().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(out.plan.values().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn matches_naive_sinkhorn_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mu, nu, cost) = random_problem(&mut rng, 5, 7);
        let eps = 0.2;
        let reference = naive_sinkhorn(&mu, &nu, &cost, eps, 5000);
        let out = sinkhorn_balanced(&mu, &nu, &cost, eps, 5000, 1e-14).unwrap();
        let worst = out
            .plan
            .values()
            .iter()
            .zip(reference.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-8, "max deviation {worst}");
    }

    #[test]
    fn balanced_residual_below_tol_when_converged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(1..=20);
            let m = rng.random_range(1..=20);
            let (mu, nu, cost) = random_problem(&mut rng, n, m);
            let out = sinkhorn_balanced(&mu, &nu, &cost, 0.05, 2000, 1e-9).unwrap();
            if out.converged {
                assert!(out.plan.marginal_residual(&mu, &nu) <= 1e-9);
            }
            assert!(out.plan.values().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn underflowing_kernel_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mu, nu, cost) = random_problem(&mut rng, 6, 6);
        // exp(-C / eps) underflows to zero everywhere for the raw kernel.
        let shifted = CostMatrix::new(cost.values().mapv(|c| 800.0 + c)).unwrap();
        assert!(shifted.values().iter().all(|c| (-c / 1.0f64).exp() == 0.0));
        let out = sinkhorn_balanced(&mu, &nu, &shifted, 1.0, 5000, 1e-10).unwrap();
        assert!(out.converged);
        let plain = sinkhorn_balanced(&mu, &nu, &cost, 1.0, 5000, 1e-10).unwrap();
        for (a, b) in out.plan.values().iter().zip(plain.plan.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let out = scaling_uot(&mu, &nu, &CostMatrix::new(cost.values() * 40.0).unwrap(), 1e-3, 1.0, 5000, 1e-9).unwrap();
        assert!(out.plan.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_mass_rows_stay_zero() {
        let mu = Histogram::probability(array![0.5, 0.0, 0.5]).unwrap();
        let nu = Histogram::probability(array![0.25, 0.75]).unwrap();
        let cost = CostMatrix::new(array![[0.1, 0.4], [0.2, 0.3], [0.9, 0.0]]).unwrap();
        let out = sinkhorn_balanced(&mu, &nu, &cost, 0.1, 1000, 1e-10).unwrap();
        assert!(out.plan.values().row(1).iter().all(|v| *v == 0.0));
        let out = scaling_uot(&mu, &nu, &cost, 0.1, 1.0, 1000, 1e-10).unwrap();
        assert!(out.plan.values().row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn balanced_rejects_mass_gap() {
        let mu = Histogram::new(array![1.0, 1.0]).unwrap();
        let nu = Histogram::new(array![1.0]).unwrap();
        let cost = CostMatrix::new(array![[0.0], [0.0]]).unwrap();
        assert!(matches!(
            sinkhorn_balanced(&mu, &nu, &cost, 0.1, 10, 1e-9),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn argument_errors() {
        let h = Histogram::uniform(2);
        let cost = CostMatrix::new(Array2::zeros((2, 3))).unwrap();
        assert!(matches!(
            sinkhorn_balanced(&h, &h, &cost, 0.1, 10, 1e-9),
            Err(Error::DimensionMismatch { .. })
        ));
        let cost = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        assert!(sinkhorn_balanced(&h, &h, &cost, 0.0, 10, 1e-9).is_err());
        assert!(scaling_uot(&h, &h, &cost, 0.1, -1.0, 10, 1e-9).is_err());
        assert!(Histogram::new(array![0.5, -0.1]).is_err());
        assert!(Histogram::probability(array![0.5, 0.4]).is_err());
        assert!(CostMatrix::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn uot_large_beta_matches_balanced_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let (mu, nu, cost) = random_problem(&mut rng, 6, 8);
            let out = scaling_uot(&mu, &nu, &cost, 0.1, 1e6, 5000, 1e-10).unwrap();
            assert!(out.plan.marginal_residual(&mu, &nu) <= 1e-3);
        }
    }

    /// Minimizer of the 2x1 outlier problem on a log-spaced mesh.
    fn mesh_minimizer_2x1(mu: &Histogram, nu: &Histogram, cost: &CostMatrix, eps: f64, beta: f64) -> (f64, f64) {
        let grid: Vec<f64> = (0..=600).map(|k| 10f64.powf(-12.0 + 12.3 * k as f64 / 600.0)).collect();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for &x in &grid {
            for &y in &grid {
                let plan = TransportPlan::new(array![[x], [y]]).unwrap();
                let obj = uot_objective(&plan, mu, nu, cost, eps, beta);
                if obj < best.0 {
                    best = (obj, x, y);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn outlier_row_ships_almost_nothing() {
        let mu = Histogram::new(array![1.0, 0.01]).unwrap();
        let nu = Histogram::new(array![1.0]).unwrap();
        let cost = CostMatrix::new(array![[0.0], [10.0]]).unwrap();
        let (eps, beta) = (0.05, 1.0);
        let out = scaling_uot(&mu, &nu, &cost, eps, beta, 1000, 1e-12).unwrap();
        let shipped = out.plan.values()[[1, 0]];
        assert!(shipped < 0.01 * 0.01, "outlier ships {shipped}");
        let (x, y) = mesh_minimizer_2x1(&mu, &nu, &cost, eps, beta);
        assert!((out.plan.values()[[0, 0]] - x).abs() / x < 0.05);
        assert!(y < 1e-4 && shipped < 1e-4);
    }

    /// Exponentiated-gradient descent on the UOT primal.
    fn mirror_descent_uot(mu: &Histogram, nu: &Histogram, cost: &CostMatrix, eps: f64, beta: f64) -> TransportPlan {
        let (n, m) = cost.shape();
        let mut g = Array2::from_elem((n, m), 1.0 / (n * m) as f64);
        let step = 0.2;
        for _ in 0..200_000 {
            let r = g.sum_axis(Axis(1));
            let c = g.sum_axis(Axis(0));
            let grad = Array2::from_shape_fn((n, m), |(i, j)| {
                cost.values()[[i, j]]
                    + eps * g[[i, j]].ln()
                    + beta * (r[i] / mu.as_array()[i]).ln()
                    + beta * (c[j] / nu.as_array()[j]).ln()
            });
            g.zip_mut_with(&grad, |gij, d| *gij *= (-step * d).exp());
        }
        TransportPlan::new(g).unwrap()
    }

    #[test]
    fn uot_objective_matches_mirror_descent_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mu, nu, cost) = random_problem(&mut rng, 4, 4);
        let (eps, beta) = (0.05, 1.0);
        let out = scaling_uot(&mu, &nu, &cost, eps, beta, 10_000, 1e-12).unwrap();
        let reference = mirror_descent_uot(&mu, &nu, &cost, eps, beta);
        let ours = uot_objective(&out.plan, &mu, &nu, &cost, eps, beta);
        let theirs = uot_objective(&reference, &mu, &nu, &cost, eps, beta);
        assert!((ours - theirs).abs() <= 1e-3 * theirs.abs(), "{ours} vs {theirs}");
        assert!(ours <= theirs + 1e-9);
    }

    #[test]
    fn uot_objective_trace_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let (mu, nu, cost) = random_problem(&mut rng, 7, 5);
            let out = ScalingSolver::unbalanced(0.05, 1.0)
                .tol(1e-12)
                .max_iter(500)
                .trace_every(10)
                .solve(&mu, &nu, &cost)
                .unwrap();
            for w in out.objective_trace.windows(2) {
                assert!(w[1].1 <= w[0].1 + 1e-9, "{:?}", out.objective_trace);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let one = TransportPlan::new(array![[1.0]]).unwrap();
        assert!((plan_entropy(&one) - 1.0).abs() < 1e-15);
        assert_eq!(plan_entropy(&TransportPlan::zeros(2, 2)), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..1.0));
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = g[[i, j]];
                oracle -= v * (v.ln() - 1.0);
            }
        }
        let plan = TransportPlan::new(g).unwrap();
        assert!((plan_entropy(&plan) - oracle).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let p = Histogram::new(array![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let p = Histogram::new(array![1.0, 0.0]).unwrap();
        let q = Histogram::new(array![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Histogram::new(array![0.2]).unwrap();
        let q = Histogram::new(array![0.4]).unwrap();
        let expected = 0.2 * 0.5f64.ln() - 0.2 + 0.4;
        assert!((kl_divergence(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.0614).abs() < 1e-4);
        let q = Histogram::new(array![1.0, 0.0]).unwrap();
        let p = Histogram::new(array![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&p, &q).unwrap(), f64::INFINITY);
        assert!(generalized_kl(&[-0.1], &[0.1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_nonnegative_and_zero_iff_equal(
                p in proptest::collection::vec(0.0f64..2.0, 1..12),
                shift in proptest::collection::vec(-0.5f64..0.5, 12),
            ) {
                let q: Vec<f64> = p.iter().zip(&shift).map(|(a, s)| (a + s).abs() + 1e-3).collect();
                let kl = generalized_kl(&p, &q).unwrap();
                prop_assert!(kl >= 0.0);
                let same = generalized_kl(&q, &q).unwrap();
                prop_assert!(same == 0.0);
                let max_diff = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if max_diff > 1e-14 {
                    prop_assert!(kl > 0.0);
                }
            }
        }
    }
}
