//! Normality scoring, AUROC, and embedding export.

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HsclError, Result};
use crate::model::Encoder;
use crate::scenarios::ScenarioSpec;
use crate::trainer::TrainState;
use crate::types::{EmbeddingMatrix, LabeledSample, PrototypeBank, SampleId};

/// Samples encoded per forward pass.
pub const EVAL_CHUNK: usize = 256;
/// Neighbors used by the k-NN score.
pub const KNN_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: SampleId,
    /// Higher is more normal.
    pub score: f64,
    #[serde(rename = "truth")]
    pub is_abnormal_truth: bool,
}

fn stack(samples: &[LabeledSample]) -> Result<ArrayD<f64>> {
    let views: Vec<_> = samples.iter().map(|s| s.datum().view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views).map_err(|e| HsclError::ShapeMismatch(e.to_string()))
}

/// Evaluation-mode embeddings, one row per sample. Chunks run in parallel; the
/// result does not depend on the chunking.
pub fn embed(encoder: &Encoder, samples: &[LabeledSample]) -> Result<EmbeddingMatrix> {
    if samples.is_empty() {
        return Ok(EmbeddingMatrix::from_array_unchecked(Array2::zeros((0, encoder.spec().projection_dim))));
    }
    let parts = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| encoder.encode(&stack(chunk)?).map(EmbeddingMatrix::into_inner))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(EmbeddingMatrix::from_array_unchecked(
        concatenate(Axis(0), &views).map_err(|e| HsclError::ShapeMismatch(e.to_string()))?,
    ))
}

/// `max_k zᵀV_k` for each row.
pub fn prototype_scores(z: &EmbeddingMatrix, prototypes: &PrototypeBank) -> Vec<f64> {
    (0..z.len()).map(|i| prototypes.max_similarity(z.row(i)).0).collect()
}

fn check_usable(state: &TrainState) -> Result<()> {
    if !state.is_trained() {
        return Err(HsclError::Untrained);
    }
    state.encoder.check_finite()?;
    if state.prototypes.view().iter().any(|v| !v.is_finite()) {
        return Err(HsclError::NonFinite("prototypes".into()));
    }
    Ok(())
}

fn zip_scores(samples: &[LabeledSample], truth: &[bool], scores: Vec<f64>) -> Result<Vec<ScoredSample>> {
    if truth.len() != samples.len() {
        return Err(HsclError::ShapeMismatch(format!("{} truth flags for {} samples", truth.len(), samples.len())));
    }
    Ok(samples
        .iter()
        .zip(truth)
        .zip(scores)
        .map(|((s, &t), score)| ScoredSample {
            id: s.id(),
            score,
            is_abnormal_truth: t,
        })
        .collect())
}

/// Prototype normality score of each sample: one evaluation-mode forward pass,
/// no augmentation, `max_k f(x)ᵀV_k`.
pub fn normality_score(state: &TrainState, samples: &[LabeledSample], truth: &[bool]) -> Result<Vec<ScoredSample>> {
    check_usable(state)?;
    let z = embed(&state.encoder, samples)?;
    zip_scores(samples, truth, prototype_scores(&z, &state.prototypes))
}

/// Mean cosine similarity to the `k` most similar reference embeddings.
pub fn knn_scores(reference: &EmbeddingMatrix, queries: &EmbeddingMatrix, k: usize) -> Result<Vec<f64>> {
    if reference.is_empty() || k == 0 {
        return Err(HsclError::InvalidInput("k-NN scoring needs reference embeddings and k >= 1".into()));
    }
    let sims = queries.view().dot(&reference.view().t());
    let k = k.min(reference.len());
    Ok(sims
        .outer_iter()
        .map(|row| {
            let mut v = row.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            v[..k].iter().sum::<f64>() / k as f64
        })
        .collect())
}

/// k-NN normality score against the embeddings of `reference` samples.
pub fn knn_normality_score(
    state: &TrainState,
    reference: &[LabeledSample],
    samples: &[LabeledSample],
    truth: &[bool],
    k: usize,
) -> Result<Vec<ScoredSample>> {
    check_usable(state)?;
    let r = embed(&state.encoder, reference)?;
    let z = embed(&state.encoder, samples)?;
    zip_scores(samples, truth, knn_scores(&r, &z, k)?)
}

/// Area under the ROC curve with normal as the positive class:
/// `P(score_normal > score_abnormal) + ½·P(tie)`, from midranks in O(n log n).
pub fn auroc(scored: &[ScoredSample]) -> Result<f64> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let abnormal: Vec<bool> = scored.iter().map(|s| s.is_abnormal_truth).collect();
    auroc_from(&scores, &abnormal)
}

pub fn auroc_from(scores: &[f64], abnormal: &[bool]) -> Result<f64> {
    if scores.len() != abnormal.len() {
        return Err(HsclError::ShapeMismatch(format!("{} scores for {} labels", scores.len(), abnormal.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(HsclError::NonFinite(format!("score {s}")));
    }
    let n_abn = abnormal.iter().filter(|&&a| a).count();
    let n_norm = abnormal.len() - n_abn;
    if n_abn == 0 || n_norm == 0 {
        return Err(HsclError::InvalidInput(format!(
            "AUROC needs both classes, got {n_norm} normal and {n_abn} abnormal"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| !abnormal[k]).count() as f64;
        i = j + 1;
    }
    let n = n_norm as f64;
    Ok((rank_sum - n * (n + 1.0) / 2.0) / (n * n_abn as f64))
}

/// Scores CSV: `id,score,truth` with `truth` = 1 for abnormal.
pub fn write_scores_csv(path: &Path, scored: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "score", "truth"])?;
    for s in scored {
        w.write_record([s.id.to_string(), s.score.to_string(), (s.is_abnormal_truth as u8).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| HsclError::InvalidInput(format!("short scores row {rec:?}")));
        let parse_err = |e: &dyn std::fmt::Display| HsclError::InvalidInput(format!("bad scores row {rec:?}: {e}"));
        out.push(ScoredSample {
            id: field(0)?.parse().map_err(|e| parse_err(&e))?,
            score: field(1)?.parse().map_err(|e| parse_err(&e))?,
            is_abnormal_truth: field(2)? == "1",
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auroc: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// `prototype` or `knn`.
    pub score_kind: String,
    pub scenario: ScenarioSpec,
}

impl EvalSummary {
    pub fn new(scored: &[ScoredSample], score_kind: &str, scenario: ScenarioSpec) -> Result<Self> {
        let n_abnormal = scored.iter().filter(|s| s.is_abnormal_truth).count();
        Ok(Self {
            auroc: auroc(scored)?,
            n_normal: scored.len() - n_abnormal,
            n_abnormal,
            score_kind: score_kind.into(),
            scenario,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reducer {
    None,
    Tsne,
}

/// t-SNE settings; defaults are perplexity 30 and 1000 iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

/// Minimum sample count for t-SNE.
pub const TSNE_MIN_SAMPLES: usize = 5;

/// Conditional affinities for one row with the precision found by bisection so
/// the row entropy matches `ln(perplexity)`.
fn row_affinities(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..100 {
        let min = d2.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (j, &v) in d2.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-(v - min) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if j != i && *pj > 0.0 {
                h -= *pj * pj.ln();
            }
        }
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE into two dimensions. The perplexity is capped at `(n - 1) / 3`
/// so small inputs stay well posed.
pub fn tsne(x: &Array2<f64>, params: &TsneParams) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < TSNE_MIN_SAMPLES {
        return Err(HsclError::InvalidInput(format!("t-SNE needs at least {TSNE_MIN_SAMPLES} samples, got {n}")));
    }
    let perplexity = params.perplexity.min((n - 1) as f64 / 3.0);
    let sq: Vec<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
    let gram = x.dot(&x.t());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d2: Vec<f64> = (0..n).map(|j| (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0)).collect();
            row_affinities(&d2, i, perplexity)
        })
        .collect();
    let mut p = Array2::from_shape_fn((n, n), |(i, j)| (rows[i][j] + rows[j][i]) / (2.0 * n as f64));
    p.mapv_inplace(|v| v.max(1e-12));

    let lr = params.learning_rate.unwrap_or((n as f64 / params.early_exaggeration / 4.0).max(50.0));
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y = Array2::from_shape_simple_fn((n, 2), || 1e-4 * rng.sample::<f64, _>(StandardNormal));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    for it in 0..params.iterations {
        let exaggeration = if it < params.exaggeration_iters { params.early_exaggeration } else { 1.0 };
        let momentum = if it < params.exaggeration_iters { 0.5 } else { 0.8 };
        let mut num = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dx = y[[i, 0]] - y[[j, 0]];
                    let dy = y[[i, 1]] - y[[j, 1]];
                    num[[i, j]] = 1.0 / (1.0 + dx * dx + dy * dy);
                }
            }
        }
        let z = num.sum();
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let c = 4.0 * (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                    grad[[i, 0]] += c * (y[[i, 0]] - y[[j, 0]]);
                    grad[[i, 1]] += c * (y[[i, 1]] - y[[j, 1]]);
                }
            }
        }
        ndarray::Zip::from(&mut gains).and(&grad).and(&update).for_each(|g, &dg, &u| {
            *g = if (dg > 0.0) != (u > 0.0) { *g + 0.2 } else { (*g * 0.8).max(0.01) };
        });
        update = &update * momentum - &(&gains * &grad) * lr;
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("n > 0");
        y -= &mean;
    }
    Ok(y)
}

/// One row per sample: id, abnormal flag, coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<SampleId>,
    pub abnormal: Vec<bool>,
    pub coords: Array2<f64>,
}

impl EmbeddingTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "truth".to_string()];
        header.extend((0..self.coords.ncols()).map(|c| format!("c{c}")));
        w.write_record(&header)?;
        for (i, row) in self.coords.outer_iter().enumerate() {
            let mut rec = vec![self.ids[i].to_string(), (self.abnormal[i] as u8).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Renders the first two coordinates as a PNG scatter plot: normal samples
    /// blue, abnormal red.
    pub fn render_scatter(&self, path: &Path, size: u32) -> Result<()> {
        if self.coords.ncols() < 2 {
            return Err(HsclError::InvalidInput("scatter plot needs two coordinates".into()));
        }
        let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
        let col = |c: usize| {
            let v = self.coords.column(c);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, (hi - lo).max(1e-12))
        };
        let ((x0, xs), (y0, ys)) = (col(0), col(1));
        let margin = 8.0;
        let span = size as f64 - 2.0 * margin;
        for (i, row) in self.coords.outer_iter().enumerate() {
            let px = (margin + (row[0] - x0) / xs * span) as i64;
            let py = (margin + (1.0 - (row[1] - y0) / ys) * span) as i64;
            let color = if self.abnormal[i] { image::Rgb([214, 39, 40]) } else { image::Rgb([31, 119, 180]) };
            for dx in -2..=2 {
                for dy in -2..=2 {
                    let (x, y) = (px + dx, py + dy);
                    if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
        img.save(path)?;
        Ok(())
    }
}

/// Raw embeddings (`NONE`) or their 2-D t-SNE map (`TSNE`).
pub fn export_embeddings(
    state: &TrainState,
    samples: &[LabeledSample],
    truth: &[bool],
    reducer: Reducer,
    tsne_params: &TsneParams,
) -> Result<EmbeddingTable> {
    check_usable(state)?;
    if truth.len() != samples.len() {
        return Err(HsclError::ShapeMismatch(format!("{} truth flags for {} samples", truth.len(), samples.len())));
    }
    if reducer == Reducer::Tsne && samples.len() < TSNE_MIN_SAMPLES {
        return Err(HsclError::InvalidInput(format!(
            "t-SNE needs at least {TSNE_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let z = embed(&state.encoder, samples)?.into_inner();
    let coords = match reducer {
        Reducer::None => z,
        Reducer::Tsne => tsne(&z, tsne_params)?,
    };
    Ok(EmbeddingTable {
        ids: samples.iter().map(|s| s.id()).collect(),
        abnormal: truth.to_vec(),
        coords,
    })
}
