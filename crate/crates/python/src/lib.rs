//! Python bindings: losses, weights and scores on plain nested lists, plus a
//! synthetic end-to-end run.

use hscl::augmentation::{masks_from_keys, AugmentationPolicy};
use hscl::eval::{auroc_from, normality_score, prototype_scores};
use hscl::losses::{sample_to_sample_loss, soft_weights};
use hscl::model::EncoderSpec;
use hscl::scenarios::{build_scenario, make_synthetic_blobs, ScenarioKind, ScenarioSpec};
use hscl::trainer::{fit, EpochMetrics, FitOptions};
use hscl::{EmbeddingMatrix, HsclConfig, HsclError, LabelStatus, PrototypeBank, Result};
use ndarray::Array2;

fn matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(HsclError::ShapeMismatch("ragged rows".into()));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| HsclError::ShapeMismatch(e.to_string()))
}

/// `prototypes` is given as D rows of K entries, one column per prototype.
fn bank(prototypes: &[Vec<f64>]) -> Result<PrototypeBank> {
    PrototypeBank::new(matrix(prototypes)?)
}

pub fn ss_loss(z: &[Vec<f64>], origin: &[u64], shift: &[u8], tau: f64) -> Result<f64> {
    if origin.len() != z.len() || shift.len() != z.len() {
        return Err(HsclError::ShapeMismatch("origin/shift length differs from the number of rows".into()));
    }
    let masks = masks_from_keys(origin, shift);
    sample_to_sample_loss(&EmbeddingMatrix::new(matrix(z)?)?, &masks, tau)
}

pub fn weights(z: &[Vec<f64>], labeled_normal: &[bool], prototypes: &[Vec<f64>], w_delta: f64) -> Result<Vec<f64>> {
    let status: Vec<LabelStatus> = labeled_normal
        .iter()
        .map(|&n| if n { LabelStatus::NormalLabeled } else { LabelStatus::Unlabeled })
        .collect();
    let w = soft_weights(&EmbeddingMatrix::new(matrix(z)?)?, &status, &bank(prototypes)?, w_delta)?;
    Ok(w.values().to_vec())
}

pub fn scores(z: &[Vec<f64>], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(prototype_scores(&EmbeddingMatrix::new(matrix(z)?)?, &bank(prototypes)?))
}

/// Synthetic blobs with one normal class; returns the test AUROC and the metrics rows.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_run(
    n_classes: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    gamma_l: f64,
    gamma_p: f64,
    epochs: usize,
    hidden: Vec<usize>,
    d: usize,
    seed: u64,
) -> Result<(f64, Vec<EpochMetrics>)> {
    let ds = make_synthetic_blobs(n_classes, dim, separation, n_per_class, seed)?;
    let kind = if gamma_p > 0.0 { ScenarioKind::S2Contaminated } else { ScenarioKind::S1Semi };
    let split = build_scenario(&ScenarioSpec::new(kind, 0, gamma_l, gamma_p, seed), &ds, None)?;
    let config = HsclConfig {
        d,
        epochs,
        warmup_epochs: (epochs / 20).max(1).min(epochs),
        seed,
        ..HsclConfig::default()
    };
    let spec = EncoderSpec::mlp(dim, hidden, d);
    let state = fit(&split, &config, &spec, &AugmentationPolicy::vector_default(), &FitOptions::default())?;
    let scored = normality_score(&state, &split.test, &split.test_truth())?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let truth: Vec<bool> = scored.iter().map(|s| s.is_abnormal_truth).collect();
    Ok((auroc_from(&scores, &truth)?, state.history))
}

#[pyo3::pymodule]
mod pyhscl {
    use pyo3::exceptions::{PyArithmeticError, PyValueError};
    use pyo3::prelude::*;
    use pyo3::types::{PyDict, PyList};

    fn to_py(e: hscl::HsclError) -> PyErr {
        if e.is_numerical() {
            PyArithmeticError::new_err(e.to_string())
        } else {
            PyValueError::new_err(e.to_string())
        }
    }

    #[pyfunction]
    fn version() -> &'static str {
        env!("CARGO_PKG_VERSION")
    }

    /// AUROC with normal as the positive class; ties count one half.
    #[pyfunction]
    fn auroc(scores: Vec<f64>, abnormal: Vec<bool>) -> PyResult<f64> {
        hscl::eval::auroc_from(&scores, &abnormal).map_err(to_py)
    }

    /// Mean InfoNCE over unit-norm rows; positives share origin and shift.
    #[pyfunction]
    #[pyo3(signature = (z, origin, shift, tau = 0.5))]
    fn sample_to_sample_loss(z: Vec<Vec<f64>>, origin: Vec<u64>, shift: Vec<u8>, tau: f64) -> PyResult<f64> {
        super::ss_loss(&z, &origin, &shift, tau).map_err(to_py)
    }

    /// Soft weights of normal-or-unlabeled rows; `prototypes` is D x K.
    #[pyfunction]
    #[pyo3(signature = (z, labeled_normal, prototypes, w_delta = 0.4))]
    fn soft_weights(
        z: Vec<Vec<f64>>,
        labeled_normal: Vec<bool>,
        prototypes: Vec<Vec<f64>>,
        w_delta: f64,
    ) -> PyResult<Vec<f64>> {
        super::weights(&z, &labeled_normal, &prototypes, w_delta).map_err(to_py)
    }

    /// `max_k zᵀV_k` per row.
    #[pyfunction]
    fn normality_scores(z: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        super::scores(&z, &prototypes).map_err(to_py)
    }

    /// Trains on synthetic blobs (class 0 normal) and returns
    /// `{"auroc": float, "metrics": [dict per epoch]}`.
    #[pyfunction]
    #[pyo3(signature = (n_classes = 10, dim = 32, separation = 6.0, n_per_class = 300, gamma_l = 0.05,
                        gamma_p = 0.05, epochs = 20, hidden = vec![128], d = 128, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn run_synthetic<'py>(
        py: Python<'py>,
        n_classes: usize,
        dim: usize,
        separation: f64,
        n_per_class: usize,
        gamma_l: f64,
        gamma_p: f64,
        epochs: usize,
        hidden: Vec<usize>,
        d: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (auroc, history) = py
            .detach(|| {
                super::synthetic_run(n_classes, dim, separation, n_per_class, gamma_l, gamma_p, epochs, hidden, d, seed)
            })
            .map_err(to_py)?;
        let rows = PyList::empty(py);
        for m in &history {
            let row = PyDict::new(py);
            row.set_item("epoch", m.epoch)?;
            row.set_item("l_ss", m.l_ss)?;
            row.set_item("l_sp", m.l_sp)?;
            row.set_item("l_na", m.l_na)?;
            row.set_item("total", m.total)?;
            row.set_item("lr", m.lr)?;
            row.set_item("skipped_na_count", m.skipped_na_count)?;
            rows.append(row)?;
        }
        let out = PyDict::new(py);
        out.set_item("auroc", auroc)?;
        out.set_item("metrics", rows)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_and_scores_on_lists() {
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let l = ss_loss(&z, &[0, 0, 1, 1], &[0; 4], 0.5).unwrap();
        // Each anchor: positive at cos 1, two negatives at cos 0.
        let expected = (2f64.exp() + 2.0).ln() - 2.0;
        assert!((l - expected).abs() < 1e-12);
        let v = vec![vec![1.0], vec![0.0]];
        assert_eq!(scores(&z, &v).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(weights(&z, &[true, false, false, false], &v, 0.4).unwrap(), vec![1.0, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn ragged_and_mismatched_inputs_fail() {
        assert!(matrix(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(ss_loss(&[vec![1.0, 0.0]], &[0, 1], &[0], 0.5).is_err());
    }

    #[test]
    fn tiny_synthetic_run() {
        let (a, history) = synthetic_run(3, 4, 6.0, 40, 0.1, 0.0, 2, vec![16], 8, 0).unwrap();
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(history.len(), 2);
    }
}
