//! Retrieval losses over a batch of matched ground/aerial descriptors.
//!
//! Row `i` of the ground batch matches row `i` of the aerial batch, so the
//! diagonal of the distance matrix holds positive pairs. An optional
//! exclusion mask removes semi-positive pairs from the negative set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every in-batch negative, both retrieval directions.
    Exhaustive,
    /// Closest negative beyond the positive distance, per anchor.
    SemiHard,
    InfoNce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub strategy: Strategy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            tau: 0.02,
            strategy: Strategy::Exhaustive,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.tau > 0.0) {
            return Err(Error::contract(format!(
                "alpha ({}) and tau ({}) must be positive",
                self.alpha, self.tau
            )));
        }
        Ok(())
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Weighted soft-margin triplet term `log(1 + exp(alpha * (d_pos - d_neg)))`.
pub fn soft_margin_triplet(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    softplus(alpha * (d_pos - d_neg))
}

/// Index of the semi-hard negative: the smallest distance strictly greater
/// than `d_pos`, or the largest distance when none exceeds it.
pub fn semi_hard_index<T: Scalar>(d_pos: T, negatives: &[T]) -> Result<usize> {
    if negatives.is_empty() {
        return Err(Error::contract("semi-hard selection needs at least one negative"));
    }
    let mut best: Option<usize> = None;
    for (i, &d) in negatives.iter().enumerate() {
        if d > d_pos && best.is_none_or(|b| d < negatives[b]) {
            best = Some(i);
        }
    }
    Ok(best.unwrap_or_else(|| {
        let mut hardest = 0;
        for (i, &d) in negatives.iter().enumerate() {
            if d > negatives[hardest] {
                hardest = i;
            }
        }
        hardest
    }))
}

pub fn semi_hard_select(d_pos: f64, negatives: &[f64]) -> Result<f64> {
    Ok(negatives[semi_hard_index(d_pos, negatives)?])
}

/// Square matrix `d[i][j] = ||ground_i - aerial_j||`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::dim(format!("{n}x{n} matrix needs {} entries, got {}", n * n, d.len())));
        }
        Ok(Self { n, d })
    }

    pub fn from_descriptors(ground: &[Vec<f64>], aerial: &[Vec<f64>]) -> Result<Self> {
        if ground.len() != aerial.len() {
            return Err(Error::dim("ground and aerial batches differ in size"));
        }
        let n = ground.len();
        let mut d = Vec::with_capacity(n * n);
        for g in ground {
            for a in aerial {
                if g.len() != a.len() {
                    return Err(Error::dim("descriptor widths differ"));
                }
                d.push(g.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
            }
        }
        Ok(Self { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }
}

/// `mask[i * n + j] == true` drops pair `(i, j)` from the negatives.
pub type ExclusionMask = [bool];

fn check_batch(n: usize, len: usize, mask: Option<&ExclusionMask>) -> Result<()> {
    if n < 2 {
        return Err(Error::contract(format!("batch losses need N >= 2, got {n}")));
    }
    if len != n * n || mask.is_some_and(|m| m.len() != n * n) {
        return Err(Error::dim("distance matrix or mask is not N x N"));
    }
    Ok(())
}

fn excluded(mask: Option<&ExclusionMask>, idx: usize) -> bool {
    mask.is_some_and(|m| m[idx])
}

/// Exhaustive soft-margin triplet loss and its gradient with respect to the
/// flattened distance matrix.
pub fn triplet_exhaustive_grad<T: Scalar>(
    d: &[T],
    n: usize,
    alpha: T,
    mask: Option<&ExclusionMask>,
) -> Result<(T, Vec<T>)> {
    check_batch(n, d.len(), mask)?;
    let mut terms: Vec<(usize, usize, T)> = Vec::with_capacity(2 * n * (n - 1));
    for i in 0..n {
        let pos = i * n + i;
        for j in 0..n {
            if j == i {
                continue;
            }
            // ground anchor i against aerial j, aerial anchor i against ground j
            for neg in [i * n + j, j * n + i] {
                if !excluded(mask, neg) {
                    let z = alpha * (d[pos] - d[neg]);
                    terms.push((pos, neg, z));
                }
            }
        }
    }
    finish_triplets(d.len(), alpha, &terms)
}

/// Semi-hard soft-margin triplet loss: one negative per anchor, 2N anchors.
pub fn triplet_semi_hard_grad<T: Scalar>(
    d: &[T],
    n: usize,
    alpha: T,
    mask: Option<&ExclusionMask>,
) -> Result<(T, Vec<T>)> {
    check_batch(n, d.len(), mask)?;
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        let pos = i * n + i;
        let rows: Vec<usize> = (0..n).filter(|&j| j != i).map(|j| i * n + j).collect();
        let cols: Vec<usize> = (0..n).filter(|&j| j != i).map(|j| j * n + i).collect();
        for candidates in [rows, cols] {
            let candidates: Vec<usize> = candidates.into_iter().filter(|&c| !excluded(mask, c)).collect();
            if candidates.is_empty() {
                continue;
            }
            let values: Vec<T> = candidates.iter().map(|&c| d[c]).collect();
            let neg = candidates[semi_hard_index(d[pos], &values)?];
            terms.push((pos, neg, alpha * (d[pos] - d[neg])));
        }
    }
    finish_triplets(d.len(), alpha, &terms)
}

fn finish_triplets<T: Scalar>(len: usize, alpha: T, terms: &[(usize, usize, T)]) -> Result<(T, Vec<T>)> {
    if terms.is_empty() {
        return Err(Error::contract("no valid triplets in batch"));
    }
    let count = T::from_usize_lossy(terms.len());
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); len];
    for &(pos, neg, z) in terms {
        loss = loss + softplus(z);
        let s = alpha * sigmoid(z) / count;
        grad[pos] = grad[pos] + s;
        grad[neg] = grad[neg] - s;
    }
    Ok((loss / count, grad))
}

pub fn batch_triplet_exhaustive(d: &DistanceMatrix, alpha: f64, mask: Option<&ExclusionMask>) -> Result<f64> {
    Ok(triplet_exhaustive_grad(&d.d, d.n, alpha, mask)?.0)
}

pub fn batch_triplet_semi_hard(d: &DistanceMatrix, alpha: f64, mask: Option<&ExclusionMask>) -> Result<f64> {
    Ok(triplet_semi_hard_grad(&d.d, d.n, alpha, mask)?.0)
}

/// Symmetric InfoNCE over a similarity matrix (ground rows, aerial columns)
/// and its gradient. Each direction is a row-max-stabilized cross-entropy
/// with the diagonal as target; the two directions are averaged.
pub fn info_nce_grad<T: Scalar>(s: &[T], n: usize, tau: T) -> Result<(T, Vec<T>)> {
    if n == 0 || s.len() != n * n {
        return Err(Error::dim("similarity matrix is not N x N"));
    }
    if !(tau > T::zero()) {
        return Err(Error::contract("tau must be positive"));
    }
    let half_over_n = T::lit(0.5) / T::from_usize_lossy(n);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * n];
    for transposed in [false, true] {
        let at = |i: usize, k: usize| if transposed { k * n + i } else { i * n + k };
        for i in 0..n {
            let logits: Vec<T> = (0..n).map(|k| s[at(i, k)] / tau).collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            // -log p_i; when the positive is the max, ln_1p keeps the tiny
            // remainder that lse - logit_i would cancel away
            let row_loss = if logits[i] == max {
                let rest: T = (0..n).filter(|&k| k != i).map(|k| (logits[k] - max).exp()).sum();
                rest.ln_1p()
            } else {
                (max - logits[i]) + sum.ln()
            };
            loss = loss + row_loss * half_over_n;
            for k in 0..n {
                let p = (logits[k] - lse).exp();
                let target = if k == i { T::one() } else { T::zero() };
                let idx = at(i, k);
                grad[idx] = grad[idx] + (p - target) / tau * half_over_n;
            }
        }
    }
    Ok((loss, grad))
}

pub fn info_nce(s: &[f64], n: usize, tau: f64) -> Result<f64> {
    Ok(info_nce_grad(s, n, tau)?.0)
}

struct PairwiseL2;

impl<T: Scalar> CustomOp<T> for PairwiseL2 {
    fn name(&self) -> &str {
        "pairwise_l2"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, g: &[T]) -> Vec<Vec<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, m, dim) = (a.shape()[0], b.shape()[0], a.shape()[1]);
        let mut ga = vec![T::zero(); a.numel()];
        let mut gb = vec![T::zero(); b.numel()];
        for i in 0..n {
            for j in 0..m {
                let dist = output.data()[i * m + j];
                if dist <= T::zero() {
                    continue;
                }
                let coef = g[i * m + j] / dist;
                for k in 0..dim {
                    let diff = a.data()[i * dim + k] - b.data()[j * dim + k];
                    ga[i * dim + k] = ga[i * dim + k] + coef * diff;
                    gb[j * dim + k] = gb[j * dim + k] - coef * diff;
                }
            }
        }
        vec![ga, gb]
    }
}

/// `[n, d] x [m, d] -> [n, m]` Euclidean distances.
pub fn pairwise_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::dim(format!("pairwise distance {sa:?} vs {sb:?}")));
    }
    let (n, m, dim) = (sa[0], sb[0], sa[1]);
    let (ad, bd) = (g.value(a).data(), g.value(b).data());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let s: T = (0..dim)
                .map(|k| {
                    let diff = ad[i * dim + k] - bd[j * dim + k];
                    diff * diff
                })
                .sum();
            out.push(s.sqrt());
        }
    }
    let t = Tensor::from_vec(&[n, m], out)?;
    Ok(g.custom(&[a, b], t, Box::new(PairwiseL2)))
}

struct MatrixLoss<T> {
    name: &'static str,
    grad: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for MatrixLoss<T> {
    fn name(&self) -> &str {
        self.name
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T]) -> Vec<Vec<T>> {
        vec![self.grad.iter().map(|&v| v * g[0]).collect()]
    }
}

fn square_extent<T: Scalar>(g: &Graph<T>, m: Var) -> Result<usize> {
    match *g.shape(m) {
        [r, c] if r == c => Ok(r),
        ref s => Err(Error::dim(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Triplet loss node over a distance matrix.
pub fn triplet_loss<T: Scalar>(
    g: &mut Graph<T>,
    distances: Var,
    alpha: f64,
    strategy: Strategy,
    mask: Option<&ExclusionMask>,
) -> Result<Var> {
    let n = square_extent(g, distances)?;
    let d = g.value(distances).data();
    let (loss, grad) = match strategy {
        Strategy::Exhaustive => triplet_exhaustive_grad(d, n, T::lit(alpha), mask)?,
        Strategy::SemiHard => triplet_semi_hard_grad(d, n, T::lit(alpha), mask)?,
        Strategy::InfoNce => return Err(Error::contract("InfoNCE is not a triplet strategy")),
    };
    Ok(g.custom(
        &[distances],
        Tensor::scalar(loss),
        Box::new(MatrixLoss { name: "triplet", grad }),
    ))
}

/// InfoNCE node over a similarity matrix.
pub fn info_nce_loss<T: Scalar>(g: &mut Graph<T>, similarity: Var, tau: f64) -> Result<Var> {
    let n = square_extent(g, similarity)?;
    let (loss, grad) = info_nce_grad(g.value(similarity).data(), n, T::lit(tau))?;
    Ok(g.custom(
        &[similarity],
        Tensor::scalar(loss),
        Box::new(MatrixLoss { name: "info_nce", grad }),
    ))
}

/// Loss over matched descriptor batches `[n, d]` per `config`.
pub fn retrieval_loss<T: Scalar>(
    g: &mut Graph<T>,
    ground: Var,
    aerial: Var,
    config: &LossConfig,
    mask: Option<&ExclusionMask>,
) -> Result<Var> {
    config.validate()?;
    match config.strategy {
        Strategy::InfoNce => {
            let at = g.transpose(aerial)?;
            let s = g.matmul(ground, at)?;
            info_nce_loss(g, s, config.tau)
        }
        strategy => {
            let d = pairwise_distance(g, ground, aerial)?;
            triplet_loss(g, d, config.alpha, strategy, mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_distances_give_ln2() {
        assert!((soft_margin_triplet(0.4, 0.4, 10.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn scalar_oracle_value() {
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((soft_margin_triplet(0.5, 0.6, 10.0) - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn large_margin_does_not_overflow() {
        let v = soft_margin_triplet(5.0, 0.0, 10.0);
        assert!((v - 50.0).abs() < 1e-12);
        let v = soft_margin_triplet(1e3, 0.0, 10.0);
        assert!(v.is_finite() && (v - 1e4).abs() < 1e-9);
    }

    #[test]
    fn semi_hard_cases() {
        assert_eq!(semi_hard_select(0.5, &[0.3, 0.55, 0.9]).unwrap(), 0.55);
        assert_eq!(semi_hard_select(0.1, &[0.3, 0.55, 0.9]).unwrap(), 0.3);
        assert_eq!(semi_hard_select(1.0, &[0.3, 0.55, 0.9]).unwrap(), 0.9);
        assert!(semi_hard_select(1.0, &[]).is_err());
    }

    #[test]
    fn batch_needs_two_pairs() {
        let d = DistanceMatrix::new(1, vec![0.0]).unwrap();
        assert!(matches!(batch_triplet_exhaustive(&d, 10.0, None), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_info_nce_is_ln_n() {
        let s = vec![0.3; 16];
        assert!((info_nce(&s, 4, 0.02).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_info_nce_is_tiny() {
        let v = info_nce(&[1.0, 0.0, 0.0, 1.0], 2, 0.02).unwrap();
        let expected = (-50f64).exp().ln_1p();
        assert!((v - expected).abs() < 1e-30);
        assert!(v > 0.0 && v < 2e-22);
    }

    #[test]
    fn masked_negatives_are_skipped() {
        let d = DistanceMatrix::new(2, vec![0.2, 0.9, 0.8, 0.3]).unwrap();
        let mask = [false, true, true, false];
        assert!(batch_triplet_exhaustive(&d, 10.0, Some(&mask)).is_err());
        let mask = [false, true, false, false];
        let v = batch_triplet_exhaustive(&d, 10.0, Some(&mask)).unwrap();
        // remaining: ground 1 vs aerial 0, and aerial 0 vs ground 1
        let expected = (soft_margin_triplet(0.3, 0.8, 10.0) + soft_margin_triplet(0.2, 0.8, 10.0)) / 2.0;
        assert!((v - expected).abs() < 1e-15);
    }
}
