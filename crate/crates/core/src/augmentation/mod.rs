//! Stochastic view generation and the positive/negative structure of the
//! sample-to-sample loss.
//!
//! Every sample yields `views_per_sample` independently augmented copies (shift
//! index 0). Each copy is additionally rotated by every angle in
//! `rotations`, giving shifted instances with shift index 1..=3. Two views are
//! positives when they share both origin and shift; all other pairs are negatives.

pub mod image;

use ndarray::{Array2, ArrayD, Axis, Ix3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HsclError, Result};
use crate::types::{AugmentedBatch, TrainingView};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropParams {
    /// Range of the crop area as a fraction of the image area.
    pub scale: [f64; 2],
    /// Range of the crop aspect ratio (width / height).
    pub ratio: [f64; 2],
    /// Output side length; `None` keeps the input size.
    pub size: Option<usize>,
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            scale: [0.08, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
            size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Probability of applying the jitter at all.
    pub prob: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            prob: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub crop: CropParams,
    pub hflip_prob: f64,
    pub color_jitter: ColorJitter,
    pub grayscale_prob: f64,
    /// Shifting rotations in degrees; a subset of {90, 180, 270}.
    pub rotations: Vec<u32>,
    pub views_per_sample: usize,
    /// Vector data: standard deviation of additive Gaussian noise.
    pub vector_noise_std: f64,
    /// Vector data: probability of zeroing each coordinate.
    pub vector_drop_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop: CropParams::default(),
            hflip_prob: 0.5,
            color_jitter: ColorJitter::default(),
            grayscale_prob: 0.2,
            rotations: vec![90, 180, 270],
            views_per_sample: 2,
            vector_noise_std: 0.5,
            vector_drop_prob: 0.0,
        }
    }
}

impl AugmentationPolicy {
    /// Shift-free policy for feature-vector data.
    pub fn vector_default() -> Self {
        Self {
            rotations: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HsclError::InvalidConfig(msg));
        if self.views_per_sample < 2 {
            return bad(format!("views_per_sample must be at least 2, got {}", self.views_per_sample));
        }
        let mut seen = Vec::new();
        for &r in &self.rotations {
            if ![90, 180, 270].contains(&r) {
                return bad(format!("rotation {r} not in {{90, 180, 270}}"));
            }
            if seen.contains(&r) {
                return bad(format!("rotation {r} listed twice"));
            }
            seen.push(r);
        }
        let probs = [
            ("hflip_prob", self.hflip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("color_jitter.prob", self.color_jitter.prob),
            ("vector_drop_prob", self.vector_drop_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let [lo, hi] = self.crop.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop.scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop.scale));
        }
        let [lo, hi] = self.crop.ratio;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("crop.ratio must satisfy 0 < lo <= hi, got {:?}", self.crop.ratio));
        }
        if !(self.vector_noise_std >= 0.0) {
            return bad("vector_noise_std must be non-negative".into());
        }
        Ok(())
    }

    /// Number of shifts including the identity.
    pub fn n_shifts(&self) -> usize {
        1 + self.rotations.len()
    }

    /// Views produced per origin sample.
    pub fn views_per_origin(&self) -> usize {
        self.views_per_sample * self.n_shifts()
    }
}

/// Builds the augmented batch. View `((i * views) + v) * shifts + s` is view `v` of
/// sample `i` under shift `s`.
pub fn augment_batch<R: Rng + ?Sized>(
    batch: &[TrainingView<'_>],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    policy.validate()?;
    let first = batch
        .first()
        .ok_or_else(|| HsclError::InvalidInput("cannot augment an empty batch".into()))?;
    let shape = first.datum.shape().to_vec();
    if let Some(bad) = batch.iter().find(|s| s.datum.shape() != shape.as_slice()) {
        return Err(HsclError::ShapeMismatch(format!(
            "sample {} has shape {:?}, batch expects {:?}",
            bad.id,
            bad.datum.shape(),
            shape
        )));
    }
    let is_image = shape.len() == 3;
    if !policy.rotations.is_empty() && !(is_image && shape[1] == shape[2]) {
        return Err(HsclError::InvalidInput(format!(
            "rotations require square images, got datum shape {shape:?}"
        )));
    }
    if !(is_image || shape.len() == 1) {
        return Err(HsclError::ShapeMismatch(format!(
            "datum must be a vector or a [C, H, W] image, got {shape:?}"
        )));
    }
    let out_size = if is_image { policy.crop.size.unwrap_or(shape[1].min(shape[2])) } else { 0 };
    let view_shape: Vec<usize> = if is_image {
        vec![shape[0], out_size, out_size]
    } else {
        shape.clone()
    };

    let shifts: Vec<u8> = std::iter::once(0)
        .chain(policy.rotations.iter().map(|r| (r / 90) as u8))
        .collect();
    let m = batch.len() * policy.views_per_sample * shifts.len();
    let per_view: usize = view_shape.iter().product();
    let mut data = Vec::with_capacity(m * per_view);
    let mut origin_id = Vec::with_capacity(m);
    let mut shift_index = Vec::with_capacity(m);
    let mut status = Vec::with_capacity(m);

    for sample in batch {
        for _ in 0..policy.views_per_sample {
            if is_image {
                let img = sample
                    .datum
                    .view()
                    .into_dimensionality::<Ix3>()
                    .map_err(|e| HsclError::ShapeMismatch(e.to_string()))?;
                let base = simclr_image(img, policy, out_size, rng);
                for &shift in &shifts {
                    let v = image::rotate90(base.view(), shift);
                    data.extend(v.iter().copied());
                    origin_id.push(sample.id);
                    shift_index.push(shift);
                    status.push(sample.status);
                }
            } else {
                let v = jitter_vector(sample.datum, policy, rng)?;
                data.extend(v.iter().copied());
                origin_id.push(sample.id);
                shift_index.push(0);
                status.push(sample.status);
            }
        }
    }

    let mut full_shape = vec![m];
    full_shape.extend(&view_shape);
    let views = ArrayD::from_shape_vec(full_shape, data).map_err(|e| HsclError::ShapeMismatch(e.to_string()))?;
    Ok(AugmentedBatch {
        views,
        origin_id,
        shift_index,
        status,
    })
}

fn simclr_image<R: Rng + ?Sized>(
    img: ndarray::ArrayView3<'_, f64>,
    policy: &AugmentationPolicy,
    out: usize,
    rng: &mut R,
) -> ndarray::Array3<f64> {
    let mut v = image::random_resized_crop(img, &policy.crop, out, rng);
    if rng.random::<f64>() < policy.hflip_prob {
        v = image::hflip(v.view());
    }
    if rng.random::<f64>() < policy.color_jitter.prob {
        image::color_jitter(&mut v, &policy.color_jitter, rng);
    }
    if rng.random::<f64>() < policy.grayscale_prob {
        v = image::grayscale(v.view());
    }
    v
}

fn jitter_vector<R: Rng + ?Sized>(datum: &ArrayD<f64>, policy: &AugmentationPolicy, rng: &mut R) -> Result<ArrayD<f64>> {
    let noise = Normal::new(0.0, policy.vector_noise_std).map_err(|e| HsclError::InvalidConfig(e.to_string()))?;
    let mut v = datum.clone();
    for x in v.iter_mut() {
        if policy.vector_drop_prob > 0.0 && rng.random::<f64>() < policy.vector_drop_prob {
            *x = 0.0;
        } else if policy.vector_noise_std > 0.0 {
            *x += noise.sample(rng);
        }
    }
    Ok(v)
}

/// Boolean positive and negative masks over the views of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastMasks {
    pub positive: Array2<bool>,
    pub negative: Array2<bool>,
}

impl ContrastMasks {
    pub fn len(&self) -> usize {
        self.positive.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.nrows() == 0
    }
}

/// `P[i, j]` iff `i ≠ j` and the views share origin and shift; `N` is the rest of
/// the off-diagonal.
pub fn positive_negative_masks(batch: &AugmentedBatch) -> ContrastMasks {
    masks_from_keys(&batch.origin_id, &batch.shift_index)
}

pub fn masks_from_keys(origin_id: &[u64], shift_index: &[u8]) -> ContrastMasks {
    let m = origin_id.len();
    let positive = Array2::from_shape_fn((m, m), |(i, j)| {
        i != j && origin_id[i] == origin_id[j] && shift_index[i] == shift_index[j]
    });
    let mut negative = positive.mapv(|p| !p);
    for i in 0..m {
        negative[[i, i]] = false;
    }
    ContrastMasks { positive, negative }
}

/// Rows of the views tensor as flat feature rows `[M, prod(shape)]`.
pub fn flatten_views(views: &ArrayD<f64>) -> Array2<f64> {
    let m = views.len_of(Axis(0));
    let f = if m == 0 { 0 } else { views.len() / m };
    let flat: Vec<f64> = views.iter().copied().collect();
    Array2::from_shape_vec((m, f), flat).expect("row-major flatten")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LabelStatus, LabeledSample};
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, side: usize) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|i| {
                let d = Array::from_shape_fn(vec![3, side, side], |_| rng.random::<f64>());
                LabeledSample::new(i as u64, d, LabelStatus::Unlabeled, None)
            })
            .collect()
    }

    fn views(s: &[LabeledSample]) -> Vec<TrainingView<'_>> {
        s.iter().map(LabeledSample::training_view).collect()
    }

    #[test]
    fn counts_with_rotations() {
        let samples = images(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = augment_batch(&views(&samples), &AugmentationPolicy::default(), &mut rng).unwrap();
        assert_eq!(b.len(), 32);
        assert_eq!(b.shift_index.iter().filter(|&&s| s == 0).count(), 8);
        assert_eq!(b.views.shape(), &[32, 3, 6, 6]);
        b.validate().unwrap();
    }

    #[test]
    fn counts_without_rotations() {
        let samples = images(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = AugmentationPolicy {
            rotations: vec![],
            ..Default::default()
        };
        let b = augment_batch(&views(&samples), &policy, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        assert!(b.shift_index.iter().all(|&s| s == 0));
    }

    #[test]
    fn same_seed_same_batch() {
        let samples = images(3, 5);
        let p = AugmentationPolicy::default();
        let a = augment_batch(&views(&samples), &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = augment_batch(&views(&samples), &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let c = augment_batch(&views(&samples), &p, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_ne!(a.views, c.views);
    }

    #[test]
    fn rotated_views_are_rotations_of_their_base() {
        let samples = images(1, 5);
        let b = augment_batch(&views(&samples), &AugmentationPolicy::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let base = b.views.index_axis(Axis(0), 0).into_dimensionality::<Ix3>().unwrap();
        for s in 1..4usize {
            let rot = b.views.index_axis(Axis(0), s).into_dimensionality::<Ix3>().unwrap();
            assert_eq!(rot, image::rotate90(base, s as u8));
        }
    }

    #[test]
    fn rejects_empty_and_non_square() {
        let p = AugmentationPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_batch(&[], &p, &mut rng).is_err());
        let rect = LabeledSample::new(0, ArrayD::zeros(vec![3, 4, 6]), LabelStatus::Unlabeled, None);
        assert!(augment_batch(&[rect.training_view()], &p, &mut rng).is_err());
        let vec = LabeledSample::new(0, ArrayD::zeros(vec![5]), LabelStatus::Unlabeled, None);
        assert!(augment_batch(&[vec.training_view()], &p, &mut rng).is_err());
        assert!(augment_batch(&[vec.training_view()], &AugmentationPolicy::vector_default(), &mut rng).is_ok());
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentationPolicy::default();
        p.rotations = vec![45];
        assert!(p.validate().is_err());
        p.rotations = vec![90];
        p.views_per_sample = 1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn two_views_no_rotation_antidiagonal() {
        let m = masks_from_keys(&[7, 7], &[0, 0]);
        assert_eq!(m.positive, ndarray::array![[false, true], [true, false]]);
        assert_eq!(m.negative, ndarray::array![[false, false], [false, false]]);
    }

    #[test]
    fn rotated_copy_is_negative() {
        let m = masks_from_keys(&[7, 7], &[0, 1]);
        assert!(m.negative[[0, 1]] && !m.positive[[0, 1]]);
    }

    #[test]
    fn distinct_samples_are_negative() {
        let m = masks_from_keys(&[1, 2], &[0, 0]);
        assert!(m.negative[[0, 1]] && !m.positive[[0, 1]]);
    }

    #[test]
    fn masks_partition_off_diagonal() {
        let samples = images(3, 4);
        let b = augment_batch(&views(&samples), &AugmentationPolicy::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let m = positive_negative_masks(&b);
        for i in 0..b.len() {
            assert!(!m.positive[[i, i]] && !m.negative[[i, i]]);
            for j in 0..b.len() {
                assert_eq!(m.positive[[i, j]], m.positive[[j, i]]);
                if i != j {
                    assert!(m.positive[[i, j]] ^ m.negative[[i, j]]);
                }
            }
            // two unrotated views per shift and origin -> exactly one positive
            assert_eq!(m.positive.row(i).iter().filter(|&&p| p).count(), 1);
        }
    }
}
