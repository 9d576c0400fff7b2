//! Representation losses: weighted supervised contrastive (real-anchor
//! emphasis), plain supervised contrastive, SimCLR and cross-entropy.
//!
//! Embeddings are row-major `n × dim` slices of `f64`. Every loss comes in a
//! value-only form and a `*_with_grad` form returning the gradient with
//! respect to its input.
//!
//! For anchor `i` with positives `P(i)` (other views sharing its label) and
//! candidates `A(i)` (every other view), the per-anchor term is
//!
//! ```text
//! l_i = -1/|P(i)| * sum_{p in P(i)} log( exp(z_i·z_p/τ) / sum_{a in A(i)} exp(z_i·z_a/τ) )
//! ```
//!
//! The weighted variant reduces with anchor weights `w_i = α` for real
//! anchors and `1` otherwise, `L = sum_i w_i l_i / sum_i w_i`; the plain
//! variant is the `α = 1` case (a mean over anchors).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    WeightedSupcon,
    Supcon,
    Simclr,
    CrossEntropy,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Supcon,
        LossVariant::CrossEntropy,
        LossVariant::Simclr,
        LossVariant::WeightedSupcon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::WeightedSupcon => "weighted_supcon",
            LossVariant::Supcon => "supcon",
            LossVariant::Simclr => "simclr",
            LossVariant::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            alpha: 1.21,
            variant: LossVariant::WeightedSupcon,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_embeddings(z: &[f64], dim: usize, n: usize) -> Result<()> {
    if dim == 0 || z.len() != n * dim {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding values do not form {n} rows of width {dim}",
            z.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput("contrastive losses need at least two views".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite embedding value".into()));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")))
    }
}

/// Shared kernel: anchor-weighted supervised contrastive loss.
fn contrastive(
    z: &[f64],
    dim: usize,
    labels: &[usize],
    anchor_weights: &[f64],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    check_embeddings(z, dim, n)?;
    check_temperature(tau)?;
    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    if let Some(index) = positives.iter().position(|&p| p == 0) {
        return Err(Error::NoPositive { index });
    }
    let total_weight: f64 = anchor_weights.iter().sum();
    let row = |i: usize| &z[i * dim..(i + 1) * dim];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; z.len()] } else { Vec::new() };
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let zi = row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                logits[j] = dot(zi, row(j)) / tau;
                max = max.max(logits[j]);
            }
        }
        let sum_exp: f64 = (0..n).filter(|&j| j != i).map(|j| (logits[j] - max).exp()).sum();
        let log_denominator = max + sum_exp.ln();
        let p_count = positives[i] as f64;
        let positive_sum: f64 = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| logits[j] - log_denominator)
            .sum();
        let weight = anchor_weights[i] / total_weight;
        loss -= weight * positive_sum / p_count;

        if want_grad {
            // d l_i / d s_ij = softmax_ij - [j in P(i)] / |P(i)|
            for j in 0..n {
                if j == i {
                    continue;
                }
                let soft = (logits[j] - log_denominator).exp();
                let target = if labels[j] == labels[i] { 1.0 / p_count } else { 0.0 };
                let g = weight * (soft - target) / tau;
                if g == 0.0 {
                    continue;
                }
                for k in 0..dim {
                    grad[i * dim + k] += g * z[j * dim + k];
                    grad[j * dim + k] += g * z[i * dim + k];
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Supervised contrastive loss, mean-reduced over anchors.
pub fn supcon_loss(z: &[f64], dim: usize, labels: &[usize], tau: f64) -> Result<f64> {
    supcon_loss_with_grad(z, dim, labels, tau).map(|(l, _)| l)
}

pub fn supcon_loss_with_grad(z: &[f64], dim: usize, labels: &[usize], tau: f64) -> Result<(f64, Vec<f64>)> {
    let weights = vec![1.0; labels.len()];
    contrastive(z, dim, labels, &weights, tau, true)
}

fn real_weights(is_real: &[bool], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    Ok(is_real.iter().map(|&r| if r { alpha } else { 1.0 }).collect())
}

/// Supervised contrastive loss with real anchors weighted by `alpha`.
pub fn weighted_supcon_loss(
    z: &[f64],
    dim: usize,
    labels: &[usize],
    is_real: &[bool],
    tau: f64,
    alpha: f64,
) -> Result<f64> {
    weighted_supcon_loss_with_grad(z, dim, labels, is_real, tau, alpha).map(|(l, _)| l)
}

pub fn weighted_supcon_loss_with_grad(
    z: &[f64],
    dim: usize,
    labels: &[usize],
    is_real: &[bool],
    tau: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if is_real.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} real flags for {} labels",
            is_real.len(),
            labels.len()
        )));
    }
    let weights = real_weights(is_real, alpha)?;
    contrastive(z, dim, labels, &weights, tau, true)
}

/// NT-Xent: the only positive of a view is the other view of its source.
pub fn simclr_loss(z: &[f64], dim: usize, origin_index: &[usize], tau: f64) -> Result<f64> {
    simclr_loss_with_grad(z, dim, origin_index, tau).map(|(l, _)| l)
}

pub fn simclr_loss_with_grad(z: &[f64], dim: usize, origin_index: &[usize], tau: f64) -> Result<(f64, Vec<f64>)> {
    for (i, o) in origin_index.iter().enumerate() {
        let siblings = origin_index.iter().filter(|x| *x == o).count();
        if siblings != 2 {
            return Err(Error::UnpairedView { index: i });
        }
    }
    supcon_loss_with_grad(z, dim, origin_index, tau)
}

/// Mean negative log-likelihood of the true class under a softmax.
pub fn cross_entropy_loss(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    cross_entropy_loss_with_grad(logits, classes, labels).map(|(l, _)| l)
}

pub fn cross_entropy_loss_with_grad(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let m = labels.len();
    if m == 0 || classes == 0 || logits.len() != m * classes {
        return Err(Error::ShapeMismatch(format!(
            "{} logits do not form {m} rows of {classes} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            grad[r * classes + c] = (p - if c == y { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    Ok((loss / m as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_rows(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        let mut z: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in z.chunks_exact_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        z
    }

    /// Literal triple loop over anchors, positives and candidates.
    fn brute_force_supcon(z: &[f64], dim: usize, labels: &[usize], tau: f64) -> f64 {
        let n = labels.len();
        let dot = |i: usize, j: usize| (0..dim).map(|k| z[i * dim + k] * z[j * dim + k]).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let p: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            let mut inner = 0.0;
            for &pp in &p {
                let mut denom = 0.0;
                for a in 0..n {
                    if a != i {
                        denom += (dot(i, a) / tau).exp();
                    }
                }
                inner += ((dot(i, pp) / tau).exp() / denom).ln();
            }
            total += -inner / p.len() as f64;
        }
        total / n as f64
    }

    #[test]
    fn identical_pair_is_zero() {
        let z = vec![0.6, 0.8, 0.6, 0.8];
        assert!(supcon_loss(&z, 2, &[0, 0], 0.1).unwrap().abs() < 1e-15);
        assert!(simclr_loss(&z, 2, &[0, 0], 0.1).unwrap().abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_on_four_samples() {
        let z = unit_rows(8, 5, 1);
        let labels = [0, 0, 1, 1, 0, 0, 1, 1];
        let got = supcon_loss(&z, 5, &labels, 0.5).unwrap();
        let want = brute_force_supcon(&z, 5, &labels, 0.5);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn missing_positive_is_rejected_with_index() {
        let z = unit_rows(3, 4, 2);
        match supcon_loss(&z, 4, &[0, 0, 1], 0.1) {
            Err(Error::NoPositive { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weighted_without_real_anchors_equals_plain() {
        let z = unit_rows(6, 4, 3);
        let labels = [0, 0, 1, 1, 1, 1];
        let plain = supcon_loss(&z, 4, &labels, 0.1).unwrap();
        for alpha in [0.5, 1.21, 4.0] {
            let w = weighted_supcon_loss(&z, 4, &labels, &[false; 6], 0.1, alpha).unwrap();
            assert!((w - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_is_continuous_in_alpha() {
        let z = unit_rows(8, 4, 4);
        let labels = [0, 0, 1, 1, 2, 2, 0, 0];
        let real = [true, true, false, false, false, false, true, true];
        let f = |a: f64| weighted_supcon_loss(&z, 4, &labels, &real, 0.2, a).unwrap();
        for a in [0.5, 1.0, 1.21, 2.25, 4.0] {
            assert!((f(a + 1e-7) - f(a)).abs() < 1e-5);
        }
        assert!((f(1.0) - f(4.0)).abs() > 1e-6);
    }

    #[test]
    fn simclr_rejects_unpaired_views() {
        let z = unit_rows(3, 4, 5);
        assert!(matches!(simclr_loss(&z, 4, &[0, 0, 1], 0.1), Err(Error::UnpairedView { index: 2 })));
        let z = unit_rows(4, 4, 5);
        assert!(simclr_loss(&z, 4, &[0, 0, 0, 1], 0.1).is_err());
    }

    #[test]
    fn simclr_equals_supcon_with_unique_labels() {
        for seed in 0..10 {
            let z = unit_rows(10, 6, seed);
            let origin: Vec<usize> = (0..5).flat_map(|k| [k, k]).collect();
            let a = simclr_loss(&z, 6, &origin, 0.1).unwrap();
            let b = supcon_loss(&z, 6, &origin, 0.1).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let k = 5;
        let uniform = vec![0.3; 2 * k];
        let l = cross_entropy_loss(&uniform, k, &[0, 3]).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);
        let dominant = vec![60.0, 0.0, 0.0];
        assert!(cross_entropy_loss(&dominant, 3, &[0]).unwrap() < 1e-20);
        // softmax of (1, 2, 3) at class 2 = e^3 / (e + e^2 + e^3)
        let e = std::f64::consts::E;
        let want = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
        let got = cross_entropy_loss(&[1.0, 2.0, 3.0], 3, &[2]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(&[1.0, 2.0], 2, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    fn check_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-4;
        let mut num = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            num[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        let diff: f64 = num.iter().zip(grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = seed::rng(7);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = [0, 2, 1, 0];
        let (_, g) = cross_entropy_loss_with_grad(&logits, 3, &labels).unwrap();
        check_gradient(|x| cross_entropy_loss(x, 3, &labels).unwrap(), &logits, &g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..1000, shift in 1usize..7) {
            let n = 8;
            let dim = 4;
            let z = unit_rows(n, dim, seed);
            let labels = [0, 0, 1, 1, 2, 2, 1, 1];
            let real = [true, true, false, false, false, false, false, false];
            let origin: Vec<usize> = (0..4).flat_map(|k| [k, k]).collect();
            let perm: Vec<usize> = (0..n).map(|i| (i * 3 + shift) % n).collect();
            let pz: Vec<f64> = perm.iter().flat_map(|&i| z[i * dim..(i + 1) * dim].to_vec()).collect();
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let pr: Vec<bool> = perm.iter().map(|&i| real[i]).collect();
            let po: Vec<usize> = perm.iter().map(|&i| origin[i]).collect();
            let a = weighted_supcon_loss(&z, dim, &labels, &real, 0.1, 2.0).unwrap();
            let b = weighted_supcon_loss(&pz, dim, &pl, &pr, 0.1, 2.0).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            let a = simclr_loss(&z, dim, &origin, 0.1).unwrap();
            let b = simclr_loss(&pz, dim, &po, 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            let logits: Vec<f64> = z.iter().map(|v| v * 3.0).collect();
            let cl: Vec<usize> = labels.iter().map(|l| l % dim).collect();
            let pcl: Vec<usize> = perm.iter().map(|&i| cl[i]).collect();
            let a = cross_entropy_loss(&logits, dim, &cl).unwrap();
            let b = cross_entropy_loss(&pz.iter().map(|v| v * 3.0).collect::<Vec<_>>(), dim, &pcl).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn weighted_at_alpha_one_equals_plain(seed in 0u64..1000) {
            let z = unit_rows(8, 5, seed);
            let labels = [0, 0, 1, 1, 0, 0, 2, 2];
            let real = [true, true, false, false, true, true, false, false];
            let a = weighted_supcon_loss(&z, 5, &labels, &real, 0.1, 1.0).unwrap();
            let b = supcon_loss(&z, 5, &labels, 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
