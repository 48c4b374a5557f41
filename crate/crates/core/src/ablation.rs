//! Ablation grids: loss-term removals crossed with `w_δ` and prototype-count sweeps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationPolicy;
use crate::error::{HsclError, Result};
use crate::eval::{auroc, knn_normality_score, normality_score, KNN_K};
use crate::model::EncoderSpec;
use crate::scenarios::ScenarioSplit;
use crate::trainer::{fit, FitOptions};
use crate::types::{HsclConfig, LossTerms};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKey {
    Full,
    /// Without the sample-to-sample term.
    WoSs,
    /// Without the sample-to-prototype term; scored by k-NN instead of prototypes.
    WoSp,
    /// Without the normal-to-abnormal term.
    WoNa,
    /// Without the attraction term of the prototype loss.
    WoSpPos,
    /// Without the repulsion term of the prototype loss.
    WoSpNeg,
}

impl AblationKey {
    pub const ALL: [AblationKey; 6] = [
        AblationKey::Full,
        AblationKey::WoSs,
        AblationKey::WoSp,
        AblationKey::WoNa,
        AblationKey::WoSpPos,
        AblationKey::WoSpNeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKey::Full => "full",
            AblationKey::WoSs => "wo_ss",
            AblationKey::WoSp => "wo_sp",
            AblationKey::WoNa => "wo_na",
            AblationKey::WoSpPos => "wo_sp_pos",
            AblationKey::WoSpNeg => "wo_sp_neg",
        }
    }

    pub fn terms(self) -> LossTerms {
        let mut t = LossTerms::default();
        match self {
            AblationKey::Full => {}
            AblationKey::WoSs => t.sample_to_sample = false,
            AblationKey::WoSp => t.sample_to_prototype = false,
            AblationKey::WoNa => t.normal_to_abnormal = false,
            AblationKey::WoSpPos => t.prototype_attraction = false,
            AblationKey::WoSpNeg => t.prototype_repulsion = false,
        }
        t
    }

    /// Whether the prototype score is meaningful for this setting.
    pub fn uses_prototype_score(self) -> bool {
        self != AblationKey::WoSp
    }
}

impl fmt::Display for AblationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKey {
    type Err = HsclError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let known: Vec<_> = Self::ALL.iter().map(|k| k.as_str()).collect();
            HsclError::InvalidConfig(format!("unknown ablation key {s:?}; expected one of {}", known.join(", ")))
        })
    }
}

/// Cartesian grid. Empty `w_delta` or `k` lists mean "the base config's value".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub settings: Vec<String>,
    #[serde(default)]
    pub w_delta: Vec<f64>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationCell {
    pub setting: AblationKey,
    pub w_delta: f64,
    pub k: usize,
    pub seed: u64,
}

impl AblationGrid {
    /// Cells in row-major order: settings, then `w_delta`, then `k`, then seeds.
    pub fn cells(&self, base: &HsclConfig) -> Result<Vec<AblationCell>> {
        let settings = self.settings.iter().map(|s| s.parse()).collect::<Result<Vec<AblationKey>>>()?;
        if settings.is_empty() || self.seeds.is_empty() {
            return Err(HsclError::InvalidConfig("ablation grid needs settings and seeds".into()));
        }
        let w_deltas = if self.w_delta.is_empty() { vec![base.w_delta] } else { self.w_delta.clone() };
        let ks = if self.k.is_empty() { vec![base.k] } else { self.k.clone() };
        let mut cells = Vec::new();
        for &setting in &settings {
            for &w_delta in &w_deltas {
                for &k in &ks {
                    for &seed in &self.seeds {
                        cells.push(AblationCell { setting, w_delta, k, seed });
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub w_delta: f64,
    pub k: usize,
    pub seed: u64,
    pub auroc: f64,
}

/// Config for one cell: the base config with the cell's terms, `w_δ`, `K` and seed.
pub fn cell_config(base: &HsclConfig, cell: &AblationCell) -> HsclConfig {
    HsclConfig {
        terms: cell.setting.terms(),
        w_delta: cell.w_delta,
        k: cell.k,
        seed: cell.seed,
        ..base.clone()
    }
}

/// Trains and scores one cell on `split`.
pub fn run_cell(
    split: &ScenarioSplit,
    base: &HsclConfig,
    encoder: &EncoderSpec,
    policy: &AugmentationPolicy,
    cell: &AblationCell,
) -> Result<AblationRow> {
    let config = cell_config(base, cell);
    let state = fit(split, &config, encoder, policy, &FitOptions::default())?;
    let truth = split.test_truth();
    let scored = if cell.setting.uses_prototype_score() {
        normality_score(&state, &split.test, &truth)?
    } else {
        let reference = if split.x_n.is_empty() { &split.x_u } else { &split.x_n };
        knn_normality_score(&state, reference, &split.test, &truth, KNN_K)?
    };
    Ok(AblationRow {
        setting: cell.setting.to_string(),
        w_delta: cell.w_delta,
        k: cell.k,
        seed: cell.seed,
        auroc: auroc(&scored)?,
    })
}

/// Runs every cell in parallel; `split_for_seed` supplies the data of each seed.
/// Rows come back in grid order.
pub fn run_ablation<F>(
    grid: &AblationGrid,
    base: &HsclConfig,
    encoder: &EncoderSpec,
    policy: &AugmentationPolicy,
    split_for_seed: F,
) -> Result<Vec<AblationRow>>
where
    F: Fn(u64) -> Result<ScenarioSplit> + Sync,
{
    let cells = grid.cells(base)?;
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let splits = seeds
        .iter()
        .map(|&s| split_for_seed(s).map(|sp| (s, sp)))
        .collect::<Result<std::collections::BTreeMap<_, _>>>()?;
    cells
        .par_iter()
        .map(|cell| run_cell(&splits[&cell.seed], base, encoder, policy, cell))
        .collect()
}

/// Mean AUROC per setting, in first-appearance order.
pub fn mean_by_setting(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(s, _, _)| *s == r.setting) {
            Some((_, sum, n)) => {
                *sum += r.auroc;
                *n += 1;
            }
            None => out.push((r.setting.clone(), r.auroc, 1)),
        }
    }
    out.into_iter().map(|(s, sum, n)| (s, sum / n as f64)).collect()
}

pub fn write_rows_csv(path: &std::path::Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_parse_and_reject_unknown() {
        for k in AblationKey::ALL {
            assert_eq!(k.as_str().parse::<AblationKey>().unwrap(), k);
        }
        assert!("wo_everything".parse::<AblationKey>().is_err());
    }

    #[test]
    fn grid_sizes() {
        let base = HsclConfig::default();
        let g = AblationGrid {
            settings: vec!["full".into(), "wo_na".into()],
            w_delta: vec![],
            k: vec![],
            seeds: vec![0],
        };
        assert_eq!(g.cells(&base).unwrap().len(), 2);
        let sweep = AblationGrid {
            settings: vec!["full".into()],
            w_delta: (2..=8).map(|i| i as f64 / 10.0).collect(),
            k: vec![],
            seeds: vec![0],
        };
        assert_eq!(sweep.cells(&base).unwrap().len(), 7);
        let bad = AblationGrid {
            settings: vec!["nope".into()],
            ..g
        };
        assert!(bad.cells(&base).is_err());
    }

    #[test]
    fn terms_switch_off_one_at_a_time() {
        assert_eq!(AblationKey::Full.terms(), LossTerms::default());
        assert!(!AblationKey::WoSs.terms().sample_to_sample);
        assert!(!AblationKey::WoSpNeg.terms().prototype_repulsion);
        assert!(AblationKey::WoSpNeg.terms().prototype_attraction);
    }

    #[test]
    fn means_group_by_setting() {
        let row = |s: &str, a: f64| AblationRow {
            setting: s.into(),
            w_delta: 0.4,
            k: 1,
            seed: 0,
            auroc: a,
        };
        let m = mean_by_setting(&[row("full", 1.0), row("wo_na", 0.5), row("full", 0.5)]);
        assert_eq!(m, vec![("full".to_string(), 0.75), ("wo_na".to_string(), 0.5)]);
    }
}
