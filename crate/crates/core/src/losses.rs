//! Contrastive objectives and their gradients.
//!
//! All losses take unit-norm embeddings (rows of an [`EmbeddingMatrix`]) and use
//! plain dot products as the similarity. Gradients are with respect to those
//! embedding rows and the prototype columns; the encoder backpropagates them
//! through its own L2 normalization.
//!
//! Soft weights and the sampling distribution are constants within a step: they
//! are inputs to the loss functions, never differentiated.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::ContrastMasks;
use crate::error::{HsclError, Result};
use crate::types::{EmbeddingMatrix, HsclConfig, LabelStatus, PrototypeBank, WeightVector};

/// Per-step loss values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ss: f64,
    pub l_sp: f64,
    pub l_na: f64,
    pub total: f64,
    pub n_sampled_positives: usize,
    pub skipped_na: bool,
}

/// Combines the three terms as `l_ss + λ1·l_sp + λ2·l_na`.
pub fn total_loss(
    l_ss: f64,
    l_sp: f64,
    l_na: f64,
    config: &HsclConfig,
    n_sampled_positives: usize,
    skipped_na: bool,
) -> Result<LossBreakdown> {
    let l_na = if skipped_na { 0.0 } else { l_na };
    for (name, v) in [("l_ss", l_ss), ("l_sp", l_sp), ("l_na", l_na)] {
        if !v.is_finite() {
            return Err(HsclError::LossDivergence {
                epoch: 0,
                step: 0,
                detail: format!("{name} = {v} (l_ss={l_ss}, l_sp={l_sp}, l_na={l_na})"),
            });
        }
    }
    Ok(LossBreakdown {
        l_ss,
        l_sp,
        l_na,
        total: l_ss + config.lambda1 * l_sp + config.lambda2 * l_na,
        n_sampled_positives,
        skipped_na,
    })
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// InfoNCE for one anchor:
/// `-(1/n_norm) · log(Σ_P exp(s/τ) / Σ_{P∪N} exp(s/τ))`.
pub fn info_nce(
    anchor: usize,
    z: &EmbeddingMatrix,
    positives: &[bool],
    negatives: &[bool],
    tau: f64,
    n_norm: usize,
) -> Result<f64> {
    let m = z.len();
    if anchor >= m || positives.len() != m || negatives.len() != m {
        return Err(HsclError::ShapeMismatch(format!(
            "anchor {anchor} / mask lengths {} {} for {m} views",
            positives.len(),
            negatives.len()
        )));
    }
    if n_norm == 0 {
        return Err(HsclError::InvalidInput("n_norm must be at least 1".into()));
    }
    let za = z.row(anchor);
    let logit = |j: usize| za.dot(&z.row(j)) / tau;
    let pos: Vec<f64> = (0..m).filter(|&j| j != anchor && positives[j]).map(logit).collect();
    if pos.is_empty() {
        return Err(HsclError::AnchorWithoutPositives(anchor));
    }
    let all: Vec<f64> = (0..m)
        .filter(|&j| j != anchor && (positives[j] || negatives[j]))
        .map(logit)
        .collect();
    let loss = log_sum_exp(all.iter().copied()) - log_sum_exp(pos.iter().copied());
    Ok(loss.max(0.0) / n_norm as f64)
}

/// Mean InfoNCE over every view as anchor.
pub fn sample_to_sample_loss(z: &EmbeddingMatrix, masks: &ContrastMasks, tau: f64) -> Result<f64> {
    Ok(sample_to_sample_with_grad(z, masks, tau)?.0)
}

/// Sample-to-sample loss and its gradient with respect to the embedding rows.
pub fn sample_to_sample_with_grad(
    z: &EmbeddingMatrix,
    masks: &ContrastMasks,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let m = z.len();
    if masks.len() != m {
        return Err(HsclError::ShapeMismatch(format!("masks for {} views, embeddings for {m}", masks.len())));
    }
    let zv = z.view();
    let logits = zv.dot(&zv.t()) / tau;
    let mut coef = Array2::<f64>::zeros((m, m));
    let mut total = 0.0;
    for a in 0..m {
        let row = logits.row(a);
        let pos = masks.positive.row(a);
        let neg = masks.negative.row(a);
        let lse_pos = log_sum_exp((0..m).filter(|&j| pos[j]).map(|j| row[j]));
        if lse_pos == f64::NEG_INFINITY {
            return Err(HsclError::AnchorWithoutPositives(a));
        }
        let lse_all = log_sum_exp((0..m).filter(|&j| pos[j] || neg[j]).map(|j| row[j]));
        total += lse_all - lse_pos;
        for j in 0..m {
            if pos[j] || neg[j] {
                let q = (row[j] - lse_all).exp();
                let p = if pos[j] { (row[j] - lse_pos).exp() } else { 0.0 };
                coef[[a, j]] = (q - p) / (tau * m as f64);
            }
        }
    }
    let grad = coef.dot(&zv) + coef.t().dot(&zv);
    Ok((total / m as f64, grad))
}

/// Soft weights: 1 for labeled normals, `(max_k zᵀV_k + 1) / 2` for unlabeled views.
pub fn soft_weights(
    z_nu: &EmbeddingMatrix,
    status: &[LabelStatus],
    prototypes: &PrototypeBank,
    w_delta: f64,
) -> Result<WeightVector> {
    if status.len() != z_nu.len() {
        return Err(HsclError::ShapeMismatch(format!(
            "{} statuses for {} embeddings",
            status.len(),
            z_nu.len()
        )));
    }
    let w = status
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            LabelStatus::NormalLabeled => Ok(1.0),
            LabelStatus::Unlabeled => {
                let (m, _) = prototypes.max_similarity(z_nu.row(i));
                Ok(((m + 1.0) / 2.0).clamp(0.0, 1.0))
            }
            LabelStatus::AbnormalLabeled => Err(HsclError::InvalidInput(
                "soft weights are defined only over normal-labeled and unlabeled views".into(),
            )),
        })
        .collect::<Result<Array1<f64>>>()?;
    WeightVector::new(w, w_delta)
}

/// Gradients of the sample-to-prototype loss, split into its two terms.
#[derive(Clone, Debug)]
pub struct PrototypeLossGrad {
    pub attraction: f64,
    pub repulsion: f64,
    pub d_nu: Array2<f64>,
    pub d_a: Array2<f64>,
    pub d_v: Array2<f64>,
}

impl PrototypeLossGrad {
    pub fn loss(&self) -> f64 {
        self.attraction + self.repulsion
    }
}

/// Weighted sample-to-prototype loss:
/// `Σ_i w_i (1 - m_i)² / ‖w‖₁ + Σ_j [m_j]_+² / N_a` with `m = max_k zᵀV_k`.
pub fn sample_to_prototype_loss(
    z_nu: &EmbeddingMatrix,
    z_a: &EmbeddingMatrix,
    w: &WeightVector,
    prototypes: &PrototypeBank,
) -> Result<f64> {
    Ok(sample_to_prototype_with_grad(z_nu, z_a, w, prototypes, true, true)?.loss())
}

/// Loss and gradients; either term can be switched off.
pub fn sample_to_prototype_with_grad(
    z_nu: &EmbeddingMatrix,
    z_a: &EmbeddingMatrix,
    w: &WeightVector,
    prototypes: &PrototypeBank,
    attraction: bool,
    repulsion: bool,
) -> Result<PrototypeLossGrad> {
    let d = prototypes.dim();
    if w.len() != z_nu.len() {
        return Err(HsclError::ShapeMismatch(format!("{} weights for {} embeddings", w.len(), z_nu.len())));
    }
    for z in [z_nu, z_a] {
        if !z.is_empty() && z.dim() != d {
            return Err(HsclError::ShapeMismatch(format!("embedding dim {} vs prototype dim {d}", z.dim())));
        }
    }
    let norm = w.l1();
    if attraction && !(norm > 0.0) {
        return Err(HsclError::AllZeroWeights);
    }
    let mut out = PrototypeLossGrad {
        attraction: 0.0,
        repulsion: 0.0,
        d_nu: Array2::zeros((z_nu.len(), d)),
        d_a: Array2::zeros((z_a.len(), d)),
        d_v: Array2::zeros((d, prototypes.k())),
    };
    if attraction {
        for (i, &wi) in w.values().iter().enumerate() {
            let zi = z_nu.row(i);
            let (m, k) = prototypes.max_similarity(zi);
            let r = 1.0 - m;
            out.attraction += wi * r * r;
            let c = -2.0 * wi * r / norm;
            out.d_nu.row_mut(i).scaled_add(c, &prototypes.column(k));
            out.d_v.column_mut(k).scaled_add(c, &zi);
        }
        out.attraction /= norm;
    }
    if repulsion && !z_a.is_empty() {
        let n_a = z_a.len() as f64;
        for j in 0..z_a.len() {
            let zj = z_a.row(j);
            let (m, k) = prototypes.max_similarity(zj);
            if m > 0.0 {
                out.repulsion += m * m;
                let c = 2.0 * m / n_a;
                out.d_a.row_mut(j).scaled_add(c, &prototypes.column(k));
                out.d_v.column_mut(k).scaled_add(c, &zj);
            }
        }
        out.repulsion /= n_a;
    }
    Ok(out)
}

/// Unweighted form over labeled data only:
/// `‖1 - max_k Z_nᵀV_k‖² / N_n + ‖[max_k Z_aᵀV_k]_+‖² / N_a`.
pub fn labeled_prototype_loss(z_n: &EmbeddingMatrix, z_a: &EmbeddingMatrix, prototypes: &PrototypeBank) -> Result<f64> {
    if z_n.is_empty() {
        return Err(HsclError::InvalidInput("labeled prototype loss needs normal samples".into()));
    }
    let max_sim = |z: &EmbeddingMatrix| -> Array1<f64> {
        let sims = z.view().dot(&prototypes.view());
        sims.map_axis(Axis(1), |row| {
            row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
    };
    let residual = 1.0 - max_sim(z_n);
    let mut loss = residual.dot(&residual) / z_n.len() as f64;
    if !z_a.is_empty() {
        let clamped = max_sim(z_a).mapv(|m| m.max(0.0));
        loss += clamped.dot(&clamped) / z_a.len() as f64;
    }
    Ok(loss)
}

/// Thresholded sampling distribution over normal-labeled and unlabeled views.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingDistribution {
    p: Array1<f64>,
    support: usize,
}

impl SamplingDistribution {
    pub fn probabilities(&self) -> &Array1<f64> {
        &self.p
    }

    /// Number of entries with nonzero probability.
    pub fn support(&self) -> usize {
        self.support
    }
}

/// `p_i ∝ 1[w_i > w_δ]·w_i`. `None` when no weight clears the threshold.
pub fn sampling_distribution(w: &WeightVector) -> Option<SamplingDistribution> {
    let masked = w.values().mapv(|v| if v > w.threshold() { v } else { 0.0 });
    let support = masked.iter().filter(|&&v| v > 0.0).count();
    let total = masked.sum();
    if support == 0 || !(total > 0.0) {
        return None;
    }
    Some(SamplingDistribution {
        p: masked / total,
        support,
    })
}

/// Draws `n_pairs` (anchor, positive) index pairs from `dist`; the positive is drawn
/// from `dist` with the anchor excluded. `None` when the support is smaller than 2.
pub fn draw_pairs<R: Rng + ?Sized>(dist: &SamplingDistribution, n_pairs: usize, rng: &mut R) -> Option<Vec<(usize, usize)>> {
    if dist.support < 2 || n_pairs == 0 {
        return None;
    }
    let p = dist.p.as_slice()?;
    let anchors = WeightedIndex::new(p).ok()?;
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut rest = p.to_vec();
    for _ in 0..n_pairs {
        let a = anchors.sample(rng);
        let saved = rest[a];
        rest[a] = 0.0;
        let pos = WeightedIndex::new(&rest).ok()?.sample(rng);
        rest[a] = saved;
        pairs.push((a, pos));
    }
    Some(pairs)
}

/// Outcome of the normal-to-abnormal term for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum NormalToAbnormal {
    /// No abnormal views, or fewer than two candidates above the threshold.
    Skipped,
    Computed { loss: f64, pairs: Vec<(usize, usize)> },
}

impl NormalToAbnormal {
    pub fn loss(&self) -> f64 {
        match self {
            NormalToAbnormal::Skipped => 0.0,
            NormalToAbnormal::Computed { loss, .. } => *loss,
        }
    }

    pub fn is_skipped(&self) -> bool {
        matches!(self, NormalToAbnormal::Skipped)
    }
}

/// Normal-to-abnormal contrastive loss: anchors and positives drawn from `dist`,
/// every abnormal view a negative.
pub fn normal_to_abnormal_loss<R: Rng + ?Sized>(
    z_nu: &EmbeddingMatrix,
    z_a: &EmbeddingMatrix,
    dist: Option<&SamplingDistribution>,
    tau: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<NormalToAbnormal> {
    let Some(dist) = dist else {
        return Ok(NormalToAbnormal::Skipped);
    };
    if z_a.is_empty() {
        return Ok(NormalToAbnormal::Skipped);
    }
    if dist.p.len() != z_nu.len() {
        return Err(HsclError::ShapeMismatch(format!(
            "distribution over {} entries for {} embeddings",
            dist.p.len(),
            z_nu.len()
        )));
    }
    let Some(pairs) = draw_pairs(dist, n_pairs, rng) else {
        return Ok(NormalToAbnormal::Skipped);
    };
    let (loss, _, _) = normal_to_abnormal_with_grad(z_nu, z_a, &pairs, tau)?;
    Ok(NormalToAbnormal::Computed { loss, pairs })
}

/// Mean pair loss for fixed pairs, with gradients for both embedding sets.
pub fn normal_to_abnormal_with_grad(
    z_nu: &EmbeddingMatrix,
    z_a: &EmbeddingMatrix,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if pairs.is_empty() || z_a.is_empty() {
        return Err(HsclError::InvalidInput("normal-to-abnormal loss needs pairs and abnormal views".into()));
    }
    let d = z_nu.dim();
    let mut d_nu = Array2::zeros((z_nu.len(), d));
    let mut d_a = Array2::zeros((z_a.len(), d));
    let neg_logits = |anchor: ArrayView1<'_, f64>| -> Array1<f64> { z_a.view().dot(&anchor) / tau };
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for &(a, p) in pairs {
        if a == p || a >= z_nu.len() || p >= z_nu.len() {
            return Err(HsclError::InvalidInput(format!("invalid pair ({a}, {p})")));
        }
        let za = z_nu.row(a);
        let zp = z_nu.row(p);
        let pos_logit = za.dot(&zp) / tau;
        let negs = neg_logits(za);
        let lse = log_sum_exp(std::iter::once(pos_logit).chain(negs.iter().copied()));
        total += lse - pos_logit;
        let cp = ((pos_logit - lse).exp() - 1.0) / tau * scale;
        let mut ga = zp.to_owned() * cp;
        d_nu.row_mut(p).scaled_add(cp, &za);
        for (j, &l) in negs.iter().enumerate() {
            let cj = (l - lse).exp() / tau * scale;
            ga.scaled_add(cj, &z_a.row(j));
            d_a.row_mut(j).scaled_add(cj, &za);
        }
        d_nu.row_mut(a).scaled_add(1.0, &ga);
    }
    Ok((total * scale, d_nu, d_a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::masks_from_keys;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(rows: Array2<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::normalized(rows).unwrap()
    }

    fn bank(cols: Array2<f64>) -> PrototypeBank {
        PrototypeBank::new(cols).unwrap()
    }

    #[test]
    fn info_nce_without_negatives_is_zero() {
        let z = emb(array![[1.0, 0.0], [0.6, 0.8]]);
        let l = info_nce(0, &z, &[false, true], &[false, false], 0.5, 1).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn info_nce_equal_similarity_is_ln2() {
        let z = emb(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let l = info_nce(0, &z, &[false, true, false], &[false, false, true], 0.5, 1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn info_nce_one_positive_one_orthogonal_negative() {
        // positive sim 1, negative sim 0, tau 0.5: -log(e^2 / (e^2 + 1)) = ln(1 + e^-2)
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((expected - 0.126928).abs() < 1e-6);
        let z = emb(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let l = info_nce(0, &z, &[false, true, false], &[false, false, true], 0.5, 1).unwrap();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn info_nce_requires_positive() {
        let z = emb(array![[1.0, 0.0], [0.0, 1.0]]);
        let err = info_nce(0, &z, &[false, false], &[false, true], 0.5, 1).unwrap_err();
        assert!(err.to_string().contains("anchor without positives"));
    }

    #[test]
    fn sample_to_sample_identical_pair_is_zero() {
        let z = emb(array![[0.0, 1.0], [0.0, 1.0]]);
        let masks = masks_from_keys(&[0, 0], &[0, 0]);
        assert_eq!(sample_to_sample_loss(&z, &masks, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn sample_to_sample_orthogonal_samples_match_scalar_evaluation() {
        // n samples, both views of sample i at e_i: 1 positive (sim 1) and k = 2(n-1)
        // orthogonal negatives per anchor.
        let n = 4;
        let rows = Array::from_shape_fn((2 * n, n), |(r, c)| if r / 2 == c { 1.0 } else { 0.0 });
        let ids: Vec<u64> = (0..2 * n).map(|r| (r / 2) as u64).collect();
        let masks = masks_from_keys(&ids, &vec![0; 2 * n]);
        let loss = sample_to_sample_loss(&emb(rows), &masks, 0.5).unwrap();
        let k = (2 * (n - 1)) as f64;
        let e2 = (2.0f64).exp();
        let expected = -(e2 / (e2 + k)).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn sample_to_sample_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = Array::from_shape_fn((6, 3), |_| rng.random::<f64>() - 0.5);
        let ids = [0u64, 0, 1, 1, 2, 2];
        let perm = [3usize, 0, 5, 2, 1, 4];
        let z = emb(rows.clone());
        let zp = emb(rows.select(Axis(0), &perm));
        let idp: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
        let a = sample_to_sample_loss(&z, &masks_from_keys(&ids, &[0; 6]), 0.5).unwrap();
        let b = sample_to_sample_loss(&zp, &masks_from_keys(&idp, &[0; 6]), 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn soft_weight_cases() {
        let v = bank(array![[1.0], [0.0]]);
        let z = emb(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [-1.0, 0.0]]);
        let status = [
            LabelStatus::Unlabeled,
            LabelStatus::Unlabeled,
            LabelStatus::Unlabeled,
            LabelStatus::NormalLabeled,
        ];
        let w = soft_weights(&z, &status, &v, 0.4).unwrap();
        assert_eq!(w.values().to_vec(), vec![1.0, 0.5, 0.0, 1.0]);
        let bad = soft_weights(&z.select(&[0]), &[LabelStatus::AbnormalLabeled], &v, 0.4);
        assert!(bad.is_err());
    }

    #[test]
    fn prototype_loss_cases() {
        let v = bank(array![[1.0], [0.0]]);
        let empty = EmbeddingMatrix::from_array_unchecked(Array2::zeros((0, 2)));
        let one = WeightVector::new(array![1.0], 0.4).unwrap();
        let z = emb(array![[1.0, 0.0]]);
        assert_eq!(sample_to_prototype_loss(&z, &empty, &one, &v).unwrap(), 0.0);

        let anomaly = emb(array![[0.6, 0.8]]);
        let g = sample_to_prototype_with_grad(&z, &anomaly, &one, &v, true, true).unwrap();
        assert!((g.repulsion - 0.36).abs() < 1e-12);
        assert_eq!(g.attraction, 0.0);

        let anomaly = emb(array![[-0.2, (1.0f64 - 0.04).sqrt()]]);
        let g = sample_to_prototype_with_grad(&z, &anomaly, &one, &v, true, true).unwrap();
        assert_eq!(g.repulsion, 0.0);
    }

    #[test]
    fn prototype_loss_rejects_zero_weights() {
        let v = bank(array![[1.0], [0.0]]);
        let z = emb(array![[-1.0, 0.0]]);
        let empty = EmbeddingMatrix::from_array_unchecked(Array2::zeros((0, 2)));
        let w = WeightVector::new(array![0.0], 0.4).unwrap();
        let err = sample_to_prototype_loss(&z, &empty, &w, &v).unwrap_err();
        assert!(err.to_string().contains("all-zero weights"));
    }

    #[test]
    fn sampling_distribution_cases() {
        let w = WeightVector::new(array![1.0, 0.5, 0.3], 0.4).unwrap();
        let p = sampling_distribution(&w).unwrap();
        let expected = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, b) in p.probabilities().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(p.support(), 2);
        assert!(sampling_distribution(&WeightVector::new(array![0.2, 0.1], 0.4).unwrap()).is_none());
        let single = sampling_distribution(&WeightVector::new(array![0.9], 0.4).unwrap()).unwrap();
        assert_eq!(single.probabilities().to_vec(), vec![1.0]);
    }

    #[test]
    fn normal_to_abnormal_antipodal_anomalies() {
        // Two identical normals along e1, three anomalies at -e1.
        let z_nu = emb(array![[1.0, 0.0], [1.0, 0.0]]);
        let z_a = emb(array![[-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]]);
        let w = WeightVector::new(array![1.0, 1.0], 0.4).unwrap();
        let dist = sampling_distribution(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = normal_to_abnormal_loss(&z_nu, &z_a, Some(&dist), 0.5, 4, &mut rng).unwrap();
        let e2 = (2.0f64).exp();
        let expected = -(e2 / (e2 + 3.0 * (-2.0f64).exp())).ln();
        assert!((out.loss() - expected).abs() < 1e-12);
        match out {
            NormalToAbnormal::Computed { pairs, .. } => {
                assert_eq!(pairs.len(), 4);
                assert!(pairs.iter().all(|(a, p)| a != p));
            }
            NormalToAbnormal::Skipped => panic!("expected a computed loss"),
        }
    }

    #[test]
    fn normal_to_abnormal_skips() {
        let z_nu = emb(array![[1.0, 0.0], [0.0, 1.0]]);
        let empty = EmbeddingMatrix::from_array_unchecked(Array2::zeros((0, 2)));
        let w = WeightVector::new(array![1.0, 1.0], 0.4).unwrap();
        let dist = sampling_distribution(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(normal_to_abnormal_loss(&z_nu, &empty, Some(&dist), 0.5, 1, &mut rng).unwrap().is_skipped());
        let conc = sampling_distribution(&WeightVector::new(array![1.0, 0.1], 0.4).unwrap()).unwrap();
        let z_a = emb(array![[-1.0, 0.0]]);
        assert!(normal_to_abnormal_loss(&z_nu, &z_a, Some(&conc), 0.5, 1, &mut rng).unwrap().is_skipped());
        assert!(normal_to_abnormal_loss(&z_nu, &z_a, None, 0.5, 1, &mut rng).unwrap().is_skipped());
    }

    #[test]
    fn total_loss_cases() {
        let c = HsclConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &c, 1, false).unwrap().total, 6.0);
        assert_eq!(total_loss(0.7, 0.0, 0.0, &c, 0, true).unwrap().total, 0.7);
        let c2 = HsclConfig {
            lambda1: 0.5,
            lambda2: 2.0,
            ..c.clone()
        };
        assert_eq!(total_loss(1.0, 2.0, 1.0, &c2, 1, false).unwrap().total, 4.0);
        let err = total_loss(f64::NAN, 0.0, 0.0, &c, 0, true).unwrap_err();
        assert!(err.to_string().contains("loss divergence"));
        let skipped = total_loss(1.0, 1.0, 5.0, &c, 0, true).unwrap();
        assert_eq!(skipped.l_na, 0.0);
    }
}
