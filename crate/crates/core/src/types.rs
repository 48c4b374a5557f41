//! Domain types shared by every stage of the pipeline.
//!
//! Embeddings and prototypes are unit vectors; the constructors here check that
//! invariant so downstream code can use plain dot products as cosine similarity.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HsclError, Result};

/// Tolerance for the unit-norm invariant of embeddings and prototypes.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Norms below this are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

pub type SampleId = u64;

/// Which training subset a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelStatus {
    NormalLabeled,
    AbnormalLabeled,
    Unlabeled,
}

impl LabelStatus {
    /// Normal-labeled and unlabeled samples form the weighted pool of the prototype loss.
    pub fn is_normal_or_unlabeled(self) -> bool {
        !matches!(self, LabelStatus::AbnormalLabeled)
    }
}

/// A datum together with its label status.
///
/// The ground-truth class is kept for evaluation only; the training path works on
/// [`TrainingView`]s, which do not carry it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    id: SampleId,
    datum: ArrayD<f64>,
    status: LabelStatus,
    true_label: Option<i64>,
}

impl LabeledSample {
    pub fn new(id: SampleId, datum: ArrayD<f64>, status: LabelStatus, true_label: Option<i64>) -> Self {
        Self {
            id,
            datum,
            status,
            true_label,
        }
    }

    pub fn id(&self) -> SampleId {
        self.id
    }

    pub fn datum(&self) -> &ArrayD<f64> {
        &self.datum
    }

    pub fn status(&self) -> LabelStatus {
        self.status
    }

    pub fn with_status(mut self, status: LabelStatus) -> Self {
        self.status = status;
        self
    }

    /// Ground-truth class. Evaluation code only.
    pub fn evaluation_label(&self) -> Option<i64> {
        self.true_label
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            id: self.id,
            datum: &self.datum,
            status: self.status,
        }
    }
}

/// Label-free view of a [`LabeledSample`] consumed by augmentation and training.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub id: SampleId,
    pub datum: &'a ArrayD<f64>,
    pub status: LabelStatus,
}

/// Augmented copies of a batch of samples.
///
/// `views` has shape `[M, ...datum shape]`; the metadata vectors all have length `M`.
/// `shift_index` is 0 for unrotated views and 1..=3 for rotations by 90/180/270 degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub views: ArrayD<f64>,
    pub origin_id: Vec<SampleId>,
    pub shift_index: Vec<u8>,
    pub status: Vec<LabelStatus>,
}

impl AugmentedBatch {
    pub fn len(&self) -> usize {
        self.origin_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_id.is_empty()
    }

    /// Checks the metadata lengths, shift range and equal view counts per origin.
    pub fn validate(&self) -> Result<()> {
        let m = self.origin_id.len();
        if self.views.shape().first() != Some(&m) || self.shift_index.len() != m || self.status.len() != m {
            return Err(HsclError::ShapeMismatch(format!(
                "augmented batch metadata lengths disagree with {} views",
                self.views.shape().first().copied().unwrap_or(0)
            )));
        }
        if let Some(bad) = self.shift_index.iter().find(|&&s| s > 3) {
            return Err(HsclError::InvalidInput(format!("shift index {bad} outside 0..=3")));
        }
        let mut counts = std::collections::BTreeMap::new();
        for id in &self.origin_id {
            *counts.entry(*id).or_insert(0usize) += 1;
        }
        let mut it = counts.values();
        if let Some(first) = it.next() {
            if it.any(|c| c != first) {
                return Err(HsclError::InvalidInput(
                    "origin samples contribute different numbers of views".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Unit-norm embeddings, one row per view (`[M, D]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    /// Wraps rows that must already have unit norm.
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        check_unit_rows(rows.view(), "embedding")?;
        Ok(Self(rows))
    }

    /// L2-normalizes every row.
    pub fn normalized(mut rows: Array2<f64>) -> Result<Self> {
        for mut row in rows.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            if !(n > NORM_EPS) {
                return Err(HsclError::DegenerateEmbedding(n));
            }
            row.mapv_inplace(|v| v / n);
        }
        Ok(Self(rows))
    }

    /// Skips the unit-norm check. Used by gradient checks that perturb coordinates.
    pub fn from_array_unchecked(rows: Array2<f64>) -> Self {
        Self(rows)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    /// Embeddings of the selected rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self(self.0.select(Axis(0), rows))
    }
}

/// `K` learnable unit-norm prototypes stored as the columns of a `[D, K]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank(Array2<f64>);

impl PrototypeBank {
    pub fn new(columns: Array2<f64>) -> Result<Self> {
        if columns.ncols() == 0 {
            return Err(HsclError::InvalidInput("prototype bank needs at least one column".into()));
        }
        check_unit_rows(columns.t(), "prototype")?;
        Ok(Self(columns))
    }

    pub fn from_array_unchecked(columns: Array2<f64>) -> Self {
        Self(columns)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, k: usize) -> ArrayView1<'_, f64> {
        self.0.column(k)
    }

    /// Rescales every column back to unit length.
    pub fn renormalize(&mut self) -> Result<()> {
        for mut col in self.0.axis_iter_mut(Axis(1)) {
            let n = col.dot(&col).sqrt();
            if !(n > NORM_EPS) {
                return Err(HsclError::DegenerateEmbedding(n));
            }
            col.mapv_inplace(|v| v / n);
        }
        Ok(())
    }

    /// `max_k zᵀV_k` and the winning column; ties go to the lowest index.
    pub fn max_similarity(&self, z: ArrayView1<'_, f64>) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, col) in self.0.axis_iter(Axis(1)).enumerate() {
            let s = z.dot(&col);
            if s > best.0 {
                best = (s, k);
            }
        }
        best
    }

    /// Nested `[D][K]` rows, the layout used in checkpoint manifests.
    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        self.0.outer_iter().map(|r| r.to_vec()).collect()
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(HsclError::ShapeMismatch("ragged prototype matrix".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((d, k), flat)
            .map_err(|e| HsclError::ShapeMismatch(e.to_string()))?;
        Self::new(arr)
    }
}

/// Per-view soft weights over the normal-labeled and unlabeled views of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    w: Array1<f64>,
    threshold: f64,
}

impl WeightVector {
    pub fn new(w: Array1<f64>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(HsclError::InvalidInput(format!("w_delta {threshold} outside (0, 1)")));
        }
        if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(HsclError::InvalidInput(format!("weight {bad} outside [0, 1]")));
        }
        Ok(Self { w, threshold })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.w
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn l1(&self) -> f64 {
        self.w.sum()
    }
}

/// Which terms of the total loss are active. All on for the full model; the
/// ablation grid switches them off one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub sample_to_sample: bool,
    pub sample_to_prototype: bool,
    pub normal_to_abnormal: bool,
    /// First term of the prototype loss (pull normal views toward prototypes).
    pub prototype_attraction: bool,
    /// Second term of the prototype loss (push anomalies away).
    pub prototype_repulsion: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            sample_to_sample: true,
            sample_to_prototype: true,
            normal_to_abnormal: true,
            prototype_attraction: true,
            prototype_repulsion: true,
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsclConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    pub d: usize,
    pub w_delta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Number of (anchor, positive) draws for the normal-to-abnormal loss.
    /// `None` uses the number of labeled abnormal views in the batch (at least 1).
    pub na_pairs: Option<usize>,
    /// Permit training without any labeled normal sample.
    pub allow_unlabeled_only: bool,
    pub terms: LossTerms,
}

impl Default for HsclConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            k: 1,
            d: 128,
            w_delta: 0.4,
            batch_size: 256,
            epochs: 250,
            lr: 1e-3,
            warmup_epochs: 10,
            seed: 0,
            na_pairs: None,
            allow_unlabeled_only: false,
            terms: LossTerms::default(),
        }
    }
}

impl HsclConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HsclError::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("lambda1/lambda2 must be non-negative, got {}/{}", self.lambda1, self.lambda2));
        }
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if self.d < 1 {
            return bad("d must be at least 1".into());
        }
        if !(self.w_delta > 0.0 && self.w_delta < 1.0) {
            return bad(format!("w_delta must lie in (0, 1), got {}", self.w_delta));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.na_pairs == Some(0) {
            return bad("na_pairs must be at least 1".into());
        }
        Ok(())
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HsclError::ShapeMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > NORM_EPS) {
        return Err(HsclError::DegenerateEmbedding(na));
    }
    if !(nb > NORM_EPS) {
        return Err(HsclError::DegenerateEmbedding(nb));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_unit_rows(rows: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    for (i, row) in rows.outer_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(HsclError::InvalidInput(format!("{what} {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}
