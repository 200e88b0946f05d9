//! Linear softmax predictor, the training losses with analytic gradients, and Adam.
//!
//! The representation learner is the identity, so `P = softmax(X W + b)`.
//! Transport plans are treated as constants when differentiating: gradients
//! reach the BUOT term only through `Ps` and `Pt`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bilevel::{buot_objective, BilevelConfig, BilevelMarginals, BilevelSolution, CostKind, PredictionMatrix, PredictionRole};
use crate::error::{Error, Result};
use crate::recovery::{ClassWeights, IndicatorMatrix};

/// Floor applied to probabilities before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// One-hot source labels `Y^s`.
pub type LabelMatrix = IndicatorMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPredictor {
    /// `d x K`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl SoftmaxPredictor {
    pub fn zeros(d: usize, k: usize) -> Self {
        SoftmaxPredictor {
            weights: Array2::zeros((d, k)),
            bias: Array1::zeros(k),
        }
    }

    /// Weights drawn from `N(0, scale^2)`, zero bias.
    pub fn random<R: Rng + ?Sized>(d: usize, k: usize, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale).expect("scale is finite and nonnegative");
        SoftmaxPredictor {
            weights: Array2::from_shape_simple_fn((d, k), || normal.sample(rng)),
            bias: Array1::zeros(k),
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check_features(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.n_features() {
            return Err(Error::shape("predictor features", self.n_features(), x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        Ok(())
    }

    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_features(x)?;
        Ok(x.dot(&self.weights) + &self.bias)
    }

    pub fn predict(&self, x: &Array2<f64>, role: PredictionRole) -> Result<PredictionMatrix> {
        let logits = self.logits(x)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("predictor logits overflowed".into()));
        }
        PredictionMatrix::new(softmax_rows(logits), role)
    }

    /// Argmax class per row.
    pub fn classify(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(self.predict(x, PredictionRole::Target)?.pseudo_labels())
    }
}

pub fn predict(model: &SoftmaxPredictor, x: &Array2<f64>) -> Result<PredictionMatrix> {
    model.predict(x, PredictionRole::Source)
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_CLAMP).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Sum over samples.
    #[default]
    Sum,
    /// Mean over samples in the batch.
    Mean,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

fn check_labels(p: &PredictionMatrix, y: &LabelMatrix) -> Result<()> {
    if p.values().dim() != y.values().dim() {
        return Err(Error::shape("loss labels", p.values().dim(), y.values().dim()));
    }
    Ok(())
}

/// `sum_ij -Y_ij ln P_ij`.
pub fn loss_ce(p: &PredictionMatrix, y: &LabelMatrix) -> Result<f64> {
    check_labels(p, y)?;
    Ok(y.labels()
        .iter()
        .enumerate()
        .map(|(i, &c)| -clamped_ln(p.values()[[i, c]]))
        .sum())
}

/// `sum_ij -w_j Y_ij ln P_ij` with `w = K * omega`.
pub fn loss_rce(p: &PredictionMatrix, y: &LabelMatrix, w: &ClassWeights) -> Result<f64> {
    check_labels(p, y)?;
    if w.len() != p.n_classes() {
        return Err(Error::shape("class weights", p.n_classes(), w.len()));
    }
    let scale = w.loss_scale();
    Ok(y.labels()
        .iter()
        .enumerate()
        .map(|(i, &c)| -scale[c] * clamped_ln(p.values()[[i, c]]))
        .sum())
}

/// `sum_ij -P_ij ln P_ij`.
pub fn loss_entropy(p: &PredictionMatrix) -> f64 {
    p.values().iter().map(|&v| -v * clamped_ln(v)).sum()
}

/// Bi-level objective at the solved plans, with uniform marginals.
pub fn loss_buot(ps: &PredictionMatrix, pt: &PredictionMatrix, sol: &BilevelSolution, cfg: &BilevelConfig) -> Result<f64> {
    let marginals = BilevelMarginals::uniform(ps.n_samples(), pt.n_samples(), ps.n_classes());
    let value = buot_objective(ps, pt, &sol.gamma1, &sol.gamma2, &marginals, cfg)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("BUOT loss is {value}")));
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub rce: f64,
    pub ent: f64,
    pub buot: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.rce, self.ent, self.buot, self.total].iter().all(|v| v.is_finite())
    }
}

/// Trade-offs of the overall objective `L = L_RCE + lambda_t L_Ent + lambda L_BUOT`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub lambda_t: f64,
    pub reduction: Reduction,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            lambda: 1.0,
            lambda_t: 0.1,
            reduction: Reduction::Sum,
        }
    }
}

/// One minibatch with everything the objective needs.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub xs: &'a Array2<f64>,
    pub ys: &'a LabelMatrix,
    /// Target features; `None` during warm-up.
    pub xt: Option<&'a Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &SoftmaxPredictor) -> Self {
        Gradients {
            weights: Array2::zeros(model.weights.raw_dim()),
            bias: Array1::zeros(model.bias.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn accumulate(&mut self, x: &Array2<f64>, dz: &Array2<f64>) {
        self.weights += &x.t().dot(dz);
        self.bias += &dz.sum_axis(Axis(0));
    }
}

/// Backprop `dL/dP` through the row softmax.
fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let inner = (dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(dp - &inner)
}

/// `dL_RCE / dPs`.
fn rce_grad_p(ps: &PredictionMatrix, y: &LabelMatrix, scale: &Array1<f64>) -> Array2<f64> {
    let mut g = Array2::zeros(ps.values().raw_dim());
    for (i, &c) in y.labels().iter().enumerate() {
        let p = ps.values()[[i, c]];
        if p > PROB_CLAMP {
            g[[i, c]] = -scale[c] / p;
        }
    }
    g
}

/// `dL_Ent / dPt`.
fn entropy_grad_p(pt: &PredictionMatrix) -> Array2<f64> {
    pt.values().mapv(|p| if p > PROB_CLAMP { -(p.ln() + 1.0) } else { -PROB_CLAMP.ln() })
}

/// Gradients of `<C ⊗ Γ1, Γ2>` with respect to `Ps` and `Pt`, plans fixed.
pub fn transport_grad_p(
    ps: &PredictionMatrix,
    pt: &PredictionMatrix,
    sol: &BilevelSolution,
    cost: CostKind,
) -> (Array2<f64>, Array2<f64>) {
    let (s, t) = (ps.values(), pt.values());
    let g1 = sol.gamma1.values();
    let r1 = sol.gamma1.row_marginal().as_array();
    let c1 = sol.gamma1.col_marginal().as_array();
    let r2 = sol.gamma2.row_marginal().as_array();
    let c2 = sol.gamma2.col_marginal().as_array();
    let k = ps.n_classes();
    let signed = Array2::from_shape_fn((k, k), |(i, j)| {
        let sign = match cost {
            CostKind::LabelAware if i != j => -1.0,
            _ => 1.0,
        };
        sign * sol.gamma2.values()[[i, j]]
    });

    let mut d_s = g1.dot(t).dot(&signed.t()) * -2.0;
    Zip::indexed(&mut d_s).and(s).for_each(|(i, j), d, &p| *d += 2.0 * p * r1[i] * r2[j]);
    let mut d_t = g1.t().dot(s).dot(&signed) * -2.0;
    Zip::indexed(&mut d_t).and(t).for_each(|(i, j), d, &p| *d += 2.0 * p * c1[i] * c2[j]);
    (d_s, d_t)
}

/// Loss values and parameter gradients of the overall objective.
///
/// `sol == None` or `lambda == 0` drops the BUOT term; `xt == None` or
/// `lambda_t == 0` drops the target entropy. Terms with a zero coefficient are
/// skipped entirely rather than multiplied by zero.
pub fn grad_total(
    model: &SoftmaxPredictor,
    batch: Batch<'_>,
    sol: Option<&BilevelSolution>,
    weights: &ClassWeights,
    objective: &ObjectiveWeights,
    bilevel: &BilevelConfig,
) -> Result<(Gradients, LossBreakdown)> {
    let ps = model.predict(batch.xs, PredictionRole::Source)?;
    check_labels(&ps, batch.ys)?;
    if weights.len() != model.n_classes() {
        return Err(Error::shape("class weights", model.n_classes(), weights.len()));
    }
    let src_factor = objective.reduction.factor(ps.n_samples());
    let mut grads = Gradients::zeros_like(model);
    let mut losses = LossBreakdown {
        ce: loss_ce(&ps, batch.ys)? * src_factor,
        rce: loss_rce(&ps, batch.ys, weights)? * src_factor,
        ..Default::default()
    };

    let mut d_ps = rce_grad_p(&ps, batch.ys, &weights.loss_scale());
    if src_factor != 1.0 {
        d_ps *= src_factor;
    }
    losses.total = losses.rce;

    let pt = match batch.xt {
        Some(xt) => Some((xt, model.predict(xt, PredictionRole::Target)?)),
        None => None,
    };
    if let Some((xt, pt)) = &pt {
        let mut d_pt: Option<Array2<f64>> = None;
        if objective.lambda_t != 0.0 {
            let tgt_factor = objective.reduction.factor(pt.n_samples());
            losses.ent = loss_entropy(pt) * tgt_factor;
            losses.total += objective.lambda_t * losses.ent;
            d_pt = Some(entropy_grad_p(pt) * (objective.lambda_t * tgt_factor));
        }
        if let Some(sol) = sol {
            losses.buot = loss_buot(&ps, pt, sol, bilevel)?;
            if objective.lambda != 0.0 {
                losses.total += objective.lambda * losses.buot;
                let (gs, gt) = transport_grad_p(&ps, pt, sol, bilevel.cost);
                d_ps.scaled_add(objective.lambda, &gs);
                d_pt = Some(match d_pt {
                    Some(mut d) => {
                        d.scaled_add(objective.lambda, &gt);
                        d
                    }
                    None => gt * objective.lambda,
                });
            }
        }
        if let Some(d_pt) = d_pt {
            grads.accumulate(xt, &softmax_backward(pt.values(), &d_pt));
        }
    }
    grads.accumulate(batch.xs, &softmax_backward(ps.values(), &d_ps));

    if !losses.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {losses:?}")));
    }
    Ok((grads, losses))
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta_m: f64,
    pub beta_v: f64,
    pub eps: f64,
    pub step: u32,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(model: &SoftmaxPredictor) -> Self {
        AdamState {
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut SoftmaxPredictor, grads: &Gradients, state: &mut AdamState, eta: f64) -> Result<()> {
    if grads.weights.dim() != model.weights.dim() || grads.bias.dim() != model.bias.dim() {
        return Err(Error::shape("adam gradients", model.weights.dim(), grads.weights.dim()));
    }
    if state.m.weights.dim() != model.weights.dim() {
        return Err(Error::shape("adam state", model.weights.dim(), state.m.weights.dim()));
    }
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient passed to adam".into()));
    }
    state.step += 1;
    let (bm, bv, eps) = (state.beta_m, state.beta_v, state.eps);
    let correct_m = 1.0 - bm.powi(state.step as i32);
    let correct_v = 1.0 - bv.powi(state.step as i32);
    let update = |param: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = bm * *m + (1.0 - bm) * g;
        *v = bv * *v + (1.0 - bv) * g * g;
        let m_hat = *m / correct_m;
        let v_hat = *v / correct_v;
        *param -= eta * m_hat / (v_hat.sqrt() + eps);
    };
    Zip::from(&mut model.weights)
        .and(&grads.weights)
        .and(&mut state.m.weights)
        .and(&mut state.v.weights)
        .for_each(update);
    Zip::from(&mut model.bias)
        .and(&grads.bias)
        .and(&mut state.m.bias)
        .and(&mut state.v.bias)
        .for_each(update);
    Ok(())
}
