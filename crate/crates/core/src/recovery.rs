//! Indicator matrices, cross-informed plan recovery and class weights.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::ot::TransportPlan;

/// One-hot sample-to-class assignment, `n x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    values: Array2<f64>,
    labels: Vec<usize>,
}

impl IndicatorMatrix {
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("indicator needs at least one class".into()));
        }
        let mut values = Array2::zeros((labels.len(), k));
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {label} at position {i} is outside [0, {k})"
                )));
            }
            values[[i, label]] = 1.0;
        }
        Ok(IndicatorMatrix {
            values,
            labels: labels.to_vec(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }
}

pub fn indicator_from_labels(labels: &[usize], k: usize) -> Result<IndicatorMatrix> {
    IndicatorMatrix::from_labels(labels, k)
}

fn check(gamma1: &TransportPlan, gamma2: &TransportPlan, s: &IndicatorMatrix, t: &IndicatorMatrix) -> Result<()> {
    let k = s.n_classes();
    if t.n_classes() != k {
        return Err(Error::shape("recovery indicator classes", k, t.n_classes()));
    }
    if gamma2.shape() != (k, k) {
        return Err(Error::shape("recovery class plan", (k, k), gamma2.shape()));
    }
    if gamma1.shape() != (s.n_samples(), t.n_samples()) {
        return Err(Error::shape(
            "recovery sample plan",
            (s.n_samples(), t.n_samples()),
            gamma1.shape(),
        ));
    }
    Ok(())
}

/// `W1 = S Γ2 T^T`: class-level mass between the labels of each sample pair.
pub fn sample_weight_matrix(gamma2: &TransportPlan, s: &IndicatorMatrix, t: &IndicatorMatrix) -> Array2<f64> {
    s.values().dot(gamma2.values()).dot(&t.values().t())
}

/// `W2 = S^T Γ1 T`: sample-level mass grouped by source label and target pseudo-label.
pub fn class_weight_matrix(gamma1: &TransportPlan, s: &IndicatorMatrix, t: &IndicatorMatrix) -> Array2<f64> {
    s.values().t().dot(gamma1.values()).dot(t.values())
}

/// `(S Γ2 T^T) ⊙ Γ1`.
pub fn recover_sample_plan(
    gamma1: &TransportPlan,
    gamma2: &TransportPlan,
    s: &IndicatorMatrix,
    t: &IndicatorMatrix,
) -> Result<TransportPlan> {
    check(gamma1, gamma2, s, t)?;
    let w1 = sample_weight_matrix(gamma2, s, t);
    TransportPlan::new(w1 * gamma1.values())
}

/// `(S^T Γ1 T) ⊙ Γ2`.
pub fn recover_class_plan(
    gamma1: &TransportPlan,
    gamma2: &TransportPlan,
    s: &IndicatorMatrix,
    t: &IndicatorMatrix,
) -> Result<TransportPlan> {
    check(gamma1, gamma2, s, t)?;
    let w2 = class_weight_matrix(gamma1, s, t);
    TransportPlan::new(w2 * gamma2.values())
}

/// Per-source-class weights, normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    omega: Array1<f64>,
    /// Set when the recovered plan carried no mass and uniform weights were substituted.
    degenerate: bool,
    uniform: bool,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights {
            omega: Array1::from_elem(k, 1.0 / k as f64),
            degenerate: false,
            uniform: true,
        }
    }

    pub fn from_normalized(omega: Array1<f64>) -> Result<Self> {
        if omega.is_empty() || omega.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("class weights must be finite and nonnegative".into()));
        }
        let total = omega.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("class weights sum to {total}, not 1")));
        }
        Ok(ClassWeights {
            omega,
            degenerate: false,
            uniform: false,
        })
    }

    pub fn omega(&self) -> &Array1<f64> {
        &self.omega
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Weights as used in the reweighted loss: `K * omega`, so uniform weights are all ones.
    pub fn loss_scale(&self) -> Array1<f64> {
        if self.uniform {
            return Array1::ones(self.omega.len());
        }
        let k = self.omega.len() as f64;
        self.omega.mapv(|w| w * k)
    }
}

/// Row sums of the recovered class plan (mass leaving each source class), normalized.
pub fn bilevel_weights(gamma2_recovered: &TransportPlan) -> ClassWeights {
    let (k, cols) = gamma2_recovered.shape();
    debug_assert_eq!(k, cols);
    // Sorted summation makes the weights independent of class order.
    let rows: Array1<f64> = gamma2_recovered
        .values()
        .rows()
        .into_iter()
        .map(|r| sorted_sum(r.iter().copied()))
        .collect();
    let total = sorted_sum(rows.iter().copied());
    if !(total > 0.0) || !total.is_finite() {
        log::warn!("recovered class plan has no mass; falling back to uniform class weights");
        return ClassWeights {
            degenerate: true,
            ..ClassWeights::uniform(k)
        };
    }
    ClassWeights {
        omega: rows / total,
        degenerate: false,
        uniform: false,
    }
}

fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plan(rng: &mut ChaCha8Rng, n: usize, m: usize) -> TransportPlan {
        TransportPlan::new(Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..1.0))).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..k)).collect()
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(
            indicator_from_labels(&[0, 1], 2).unwrap().values(),
            &array![[1.0, 0.0], [0.0, 1.0]]
        );
        assert_eq!(
            indicator_from_labels(&[2, 2, 2], 3).unwrap().values(),
            &array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]
        );
        assert_eq!(
            indicator_from_labels(&[1, 0, 1], 2).unwrap().values(),
            &array![[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]
        );
        assert!(indicator_from_labels(&[0, 3], 3).is_err());
    }

    #[test]
    fn diagonal_class_plan_masks_cross_class_pairs() {
        let s = indicator_from_labels(&[0, 1, 2], 3).unwrap();
        let t = indicator_from_labels(&[2, 1, 0], 3).unwrap();
        let g2 = TransportPlan::new(Array2::eye(3) * 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g1 = random_plan(&mut rng, 3, 3);
        let rec = recover_sample_plan(&g1, &g2, &s, &t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if s.labels()[i] == t.labels()[j] { 0.5 * g1.values()[[i, j]] } else { 0.0 };
                assert_eq!(rec.values()[[i, j]], expected);
            }
        }
    }

    #[test]
    fn zero_sample_plan_recovers_zero() {
        let s = indicator_from_labels(&[0, 1, 1], 2).unwrap();
        let t = indicator_from_labels(&[1, 0], 2).unwrap();
        let g2 = TransportPlan::new(array![[0.3, 0.1], [0.2, 0.4]]).unwrap();
        let rec = recover_sample_plan(&TransportPlan::zeros(3, 2), &g2, &s, &t).unwrap();
        assert!(rec.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sample_plan_fixture() {
        // Hand-multiplied: W1[i, j] = Γ2[label_s(i), label_t(j)].
        let s = indicator_from_labels(&[0, 1, 1], 2).unwrap();
        let t = indicator_from_labels(&[1, 0], 2).unwrap();
        let g1 = TransportPlan::new(array![[0.1, 0.2], [0.3, 0.05], [0.15, 0.2]]).unwrap();
        let g2 = TransportPlan::new(array![[0.3, 0.1], [0.2, 0.4]]).unwrap();
        let rec = recover_sample_plan(&g1, &g2, &s, &t).unwrap();
        let expected = array![[0.1 * 0.1, 0.2 * 0.3], [0.3 * 0.4, 0.05 * 0.2], [0.15 * 0.4, 0.2 * 0.2]];
        for (a, b) in rec.values().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_sample_plan_gives_constant_class_weight() {
        let s = indicator_from_labels(&[0, 0, 1, 1], 2).unwrap();
        let t = indicator_from_labels(&[0, 1, 0, 1], 2).unwrap();
        let g1 = TransportPlan::new(Array2::from_elem((4, 4), 1.0 / 16.0)).unwrap();
        let w2 = class_weight_matrix(&g1, &s, &t);
        assert!(w2.iter().all(|w| (w - 0.25).abs() < 1e-15));
        let g2 = TransportPlan::new(array![[0.4, 0.1], [0.2, 0.3]]).unwrap();
        let rec = recover_class_plan(&g1, &g2, &s, &t).unwrap();
        for (a, b) in rec.values().iter().zip(g2.values().iter()) {
            assert!((a - 0.25 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn class_zero_support_masks_other_rows() {
        let s = indicator_from_labels(&[0, 1, 2, 0], 3).unwrap();
        let t = indicator_from_labels(&[1, 2], 3).unwrap();
        let g1 = TransportPlan::new(array![[0.2, 0.1], [0.0, 0.0], [0.0, 0.0], [0.3, 0.4]]).unwrap();
        let w2 = class_weight_matrix(&g1, &s, &t);
        assert!(w2.rows().into_iter().skip(1).all(|r| r.iter().all(|v| *v == 0.0)));
        assert!(w2.row(0).sum() > 0.0);
    }

    /// Sums Γ1 over sample pairs grouped by (source label, target label).
    fn loop_w2(g1: &TransportPlan, sl: &[usize], tl: &[usize], k: usize) -> Array2<f64> {
        let mut out = Array2::zeros((k, k));
        for (i1, &a) in sl.iter().enumerate() {
            for (j1, &b) in tl.iter().enumerate() {
                out[[a, b]] += g1.values()[[i1, j1]];
            }
        }
        out
    }

    #[test]
    fn class_plan_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (ns, nt, k) = (4, 4, 3);
        let sl = random_labels(&mut rng, ns, k);
        let tl = random_labels(&mut rng, nt, k);
        let s = indicator_from_labels(&sl, k).unwrap();
        let t = indicator_from_labels(&tl, k).unwrap();
        let g1 = random_plan(&mut rng, ns, nt);
        let g2 = random_plan(&mut rng, k, k);
        let rec = recover_class_plan(&g1, &g2, &s, &t).unwrap();
        let oracle = loop_w2(&g1, &sl, &tl, k) * g2.values();
        for (a, b) in rec.values().iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn weights_examples() {
        let w = bilevel_weights(&TransportPlan::new(array![[0.6, 0.0], [0.0, 0.4]]).unwrap());
        assert!((w.omega()[0] - 0.6).abs() < 1e-15 && (w.omega()[1] - 0.4).abs() < 1e-15);

        let w = bilevel_weights(&TransportPlan::new(array![[0.2, 0.1, 0.0], [0.0, 0.0, 0.0], [0.1, 0.0, 0.3]]).unwrap());
        assert_eq!(w.omega()[1], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_plan(&mut rng, 3, 3);
        let w = bilevel_weights(&g);
        let total: f64 = g.values().iter().sum();
        for k in 0..3 {
            let row: f64 = (0..3).map(|j| g.values()[[k, j]]).sum();
            assert!((w.omega()[k] - row / total).abs() <= 1e-15);
        }
        assert!((w.omega().sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_plan_falls_back_to_uniform() {
        let w = bilevel_weights(&TransportPlan::zeros(4, 4));
        assert!(w.is_degenerate());
        assert!(w.omega().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn loss_scale_of_uniform_is_one() {
        for k in 1..20 {
            let w = ClassWeights::uniform(k);
            let scaled = w.loss_scale();
            assert!(scaled.iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (ns, nt, k) = (8, 6, 4);
        let sl = random_labels(&mut rng, ns, k);
        let tl = random_labels(&mut rng, nt, k);
        let g1 = random_plan(&mut rng, ns, nt);
        let g2 = random_plan(&mut rng, k, k);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);

        let base = {
            let s = indicator_from_labels(&sl, k).unwrap();
            let t = indicator_from_labels(&tl, k).unwrap();
            bilevel_weights(&recover_class_plan(&g1, &g2, &s, &t).unwrap())
        };
        let relabeled = {
            let sl: Vec<usize> = sl.iter().map(|&c| perm[c]).collect();
            let tl: Vec<usize> = tl.iter().map(|&c| perm[c]).collect();
            let mut g2p = Array2::zeros((k, k));
            for a in 0..k {
                for b in 0..k {
                    g2p[[perm[a], perm[b]]] = g2.values()[[a, b]];
                }
            }
            let s = indicator_from_labels(&sl, k).unwrap();
            let t = indicator_from_labels(&tl, k).unwrap();
            bilevel_weights(&recover_class_plan(&g1, &TransportPlan::new(g2p).unwrap(), &s, &t).unwrap())
        };
        for c in 0..k {
            assert_eq!(relabeled.omega()[perm[c]], base.omega()[c]);
        }
    }

    #[test]
    fn unhit_class_with_empty_row_gets_zero_weight() {
        let s = indicator_from_labels(&[0, 1, 2, 2], 3).unwrap();
        let t = indicator_from_labels(&[0, 1, 1], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g1 = random_plan(&mut rng, 4, 3);
        let mut g2 = random_plan(&mut rng, 3, 3).into_values();
        g2.row_mut(2).fill(0.0);
        let rec = recover_class_plan(&g1, &TransportPlan::new(g2).unwrap(), &s, &t).unwrap();
        assert_eq!(bilevel_weights(&rec).omega()[2], 0.0);
    }

    #[test]
    fn mass_conservation_against_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (ns, nt, k) = (5, 4, 3);
        let sl = random_labels(&mut rng, ns, k);
        let tl = random_labels(&mut rng, nt, k);
        let s = indicator_from_labels(&sl, k).unwrap();
        let t = indicator_from_labels(&tl, k).unwrap();
        let g1 = random_plan(&mut rng, ns, nt);
        let g2 = random_plan(&mut rng, k, k);
        let mut oracle = 0.0;
        for i1 in 0..ns {
            for j1 in 0..nt {
                for i2 in 0..k {
                    for j2 in 0..k {
                        oracle += g1.values()[[i1, j1]] * g2.values()[[i2, j2]] * s.values()[[i1, i2]] * t.values()[[j1, j2]];
                    }
                }
            }
        }
        let rec = recover_class_plan(&g1, &g2, &s, &t).unwrap();
        assert!((rec.total_mass() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = indicator_from_labels(&[0, 1], 2).unwrap();
        let t = indicator_from_labels(&[0], 2).unwrap();
        let g2 = TransportPlan::zeros(2, 2);
        assert!(recover_class_plan(&TransportPlan::zeros(2, 2), &g2, &s, &t).is_err());
        assert!(recover_sample_plan(&TransportPlan::zeros(2, 1), &TransportPlan::zeros(3, 3), &s, &t).is_err());
    }
}
