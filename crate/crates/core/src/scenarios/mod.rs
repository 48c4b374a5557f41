//! The three experimental settings built from a labeled source dataset:
//!
//! * `S1_SEMI`: one class is normal; a fraction `gamma_l` of the normal pool and of
//!   the anomaly pool is labeled, the rest of the normal pool is unlabeled.
//! * `S2_CONTAMINATED`: as S1, with anomalies injected into the unlabeled set at
//!   pollution ratio `gamma_p`, drawn equally from every anomalous class.
//! * `S3_CROSS_DATASET`: the whole source dataset is normal and an external
//!   dataset supplies the labeled anomalies.

pub mod dataset;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    blob_means, load_png_dir, load_record_dir, make_synthetic_blobs, read_records, write_records, Dataset, DatasetSource,
    Record, RecordDtype,
};

use crate::error::{HsclError, Result};
use crate::types::{LabelStatus, LabeledSample, SampleId};

/// Upper bound on `gamma_l` and `gamma_p`; normal data must stay dominant.
pub const MAX_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    S1Semi,
    S2Contaminated,
    S3CrossDataset,
}

/// A class index for S1/S2, the normal dataset's name for S3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NormalClass {
    Class(i64),
    Dataset(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalySource {
    RemainingClasses,
    External(String),
}

/// Which anomalies go into the test set for S1/S2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    /// Normal class against a single anomalous class.
    Pairwise,
    /// Normal class against every other class.
    AllClasses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: ScenarioKind,
    pub normal_class: NormalClass,
    pub gamma_l: f64,
    #[serde(default)]
    pub gamma_p: f64,
    #[serde(default = "default_anomaly_source")]
    pub anomaly_source: AnomalySource,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to pairwise for S1 and all classes for S2.
    #[serde(default)]
    pub test_mode: Option<TestMode>,
    /// The anomalous test class in pairwise mode; defaults to the smallest
    /// class index other than the normal one.
    #[serde(default)]
    pub test_abnormal_class: Option<i64>,
}

fn default_anomaly_source() -> AnomalySource {
    AnomalySource::RemainingClasses
}

impl ScenarioSpec {
    pub fn new(scenario: ScenarioKind, normal_class: i64, gamma_l: f64, gamma_p: f64, seed: u64) -> Self {
        Self {
            scenario,
            normal_class: NormalClass::Class(normal_class),
            gamma_l,
            gamma_p,
            anomaly_source: AnomalySource::RemainingClasses,
            seed,
            test_mode: None,
            test_abnormal_class: None,
        }
    }

    pub fn effective_test_mode(&self) -> TestMode {
        self.test_mode.unwrap_or(match self.scenario {
            ScenarioKind::S1Semi => TestMode::Pairwise,
            _ => TestMode::AllClasses,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HsclError::InvalidConfig(m));
        for (name, g) in [("gamma_l", self.gamma_l), ("gamma_p", self.gamma_p)] {
            if !(0.0..=MAX_GAMMA).contains(&g) {
                return bad(format!("{name} must lie in [0, {MAX_GAMMA}], got {g}"));
            }
        }
        if self.scenario != ScenarioKind::S2Contaminated && self.gamma_p != 0.0 {
            return bad(format!("gamma_p applies to S2_CONTAMINATED only, got {}", self.gamma_p));
        }
        match (self.scenario, &self.normal_class, &self.anomaly_source) {
            (ScenarioKind::S3CrossDataset, NormalClass::Dataset(_), AnomalySource::External(_)) => Ok(()),
            (ScenarioKind::S3CrossDataset, _, _) => {
                bad("S3_CROSS_DATASET needs a dataset name as normal_class and an external anomaly_source".into())
            }
            (_, NormalClass::Class(_), AnomalySource::RemainingClasses) => {
                if self.test_abnormal_class.is_some() && self.test_abnormal_class == self.class_index() {
                    return bad("test_abnormal_class equals the normal class".into());
                }
                Ok(())
            }
            _ => bad("S1/S2 need a class index as normal_class and remaining_classes as anomaly_source".into()),
        }
    }

    fn class_index(&self) -> Option<i64> {
        match self.normal_class {
            NormalClass::Class(c) => Some(c),
            NormalClass::Dataset(_) => None,
        }
    }
}

/// Disjoint training sets plus a held-out test set. Training samples carry their
/// label status; test samples are `Unlabeled` and keep their true class.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSplit {
    pub spec: ScenarioSpec,
    pub dataset: String,
    pub external_dataset: Option<String>,
    /// Classes that count as normal at evaluation time.
    pub normal_classes: Vec<i64>,
    pub x_n: Vec<LabeledSample>,
    pub x_a: Vec<LabeledSample>,
    pub x_u: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl ScenarioSplit {
    pub fn is_abnormal(&self, sample: &LabeledSample) -> bool {
        sample.evaluation_label().is_some_and(|l| !self.normal_classes.contains(&l))
    }

    pub fn test_truth(&self) -> Vec<bool> {
        self.test.iter().map(|s| self.is_abnormal(s)).collect()
    }

    /// Number of truly abnormal samples hidden in `x_u`.
    pub fn contamination(&self) -> usize {
        self.x_u.iter().filter(|s| self.is_abnormal(s)).count()
    }

    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[LabeledSample]| v.iter().map(|s| s.id()).collect();
        SplitManifest {
            spec: self.spec.clone(),
            dataset: self.dataset.clone(),
            external_dataset: self.external_dataset.clone(),
            normal_classes: self.normal_classes.clone(),
            counts: SplitCounts {
                x_n: self.x_n.len(),
                x_a: self.x_a.len(),
                x_u: self.x_u.len(),
                x_u_contamination: self.contamination(),
                test: self.test.len(),
            },
            x_n: ids(&self.x_n),
            x_a: ids(&self.x_a),
            x_u: ids(&self.x_u),
            test: ids(&self.test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub x_n: usize,
    pub x_a: usize,
    pub x_u: usize,
    pub x_u_contamination: usize,
    pub test: usize,
}

/// Ids per split with the spec that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub spec: ScenarioSpec,
    pub dataset: String,
    pub external_dataset: Option<String>,
    pub normal_classes: Vec<i64>,
    pub counts: SplitCounts,
    pub x_n: Vec<SampleId>,
    pub x_a: Vec<SampleId>,
    pub x_u: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

fn sample(r: &Record, status: LabelStatus) -> LabeledSample {
    LabeledSample::new(r.id, r.datum.clone(), status, Some(r.label))
}

fn group_by_class<'a>(records: impl Iterator<Item = &'a Record>) -> BTreeMap<i64, Vec<&'a Record>> {
    let mut m: BTreeMap<i64, Vec<&Record>> = BTreeMap::new();
    for r in records {
        m.entry(r.label).or_default().push(r);
    }
    m
}

fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Splits `total` as evenly as possible over `n` classes; the remainder goes to
/// randomly chosen classes.
fn equal_shares(total: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut shares = vec![total / n; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &i in order.iter().take(total % n) {
        shares[i] += 1;
    }
    shares
}

/// Draws the labeled anomalies (and, for S2, the contamination) from shuffled
/// per-class pools. Returns `(x_a, contamination)`.
fn draw_anomalies<'a>(
    pools: &mut BTreeMap<i64, Vec<&'a Record>>,
    n_labeled: usize,
    n_contamination: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<&'a Record>, Vec<&'a Record>)> {
    for pool in pools.values_mut() {
        pool.shuffle(rng);
    }
    let labeled = equal_shares(n_labeled, pools.len(), rng);
    let contamination = equal_shares(n_contamination, pools.len(), rng);
    let mut x_a = Vec::new();
    let mut injected = Vec::new();
    for ((class, pool), (&l, &c)) in pools.iter().zip(labeled.iter().zip(&contamination)) {
        if l + c > pool.len() {
            return Err(HsclError::InfeasibleScenario(format!(
                "anomalous class {class} needs {l} labeled + {c} contaminating samples but has {}",
                pool.len()
            )));
        }
        x_a.extend_from_slice(&pool[..l]);
        injected.extend_from_slice(&pool[l..l + c]);
    }
    Ok((x_a, injected))
}

/// Builds a split. `external` is required for S3 and ignored otherwise.
/// The same spec, seed and data always give the same split.
pub fn build_scenario(spec: &ScenarioSpec, source: &Dataset, external: Option<&Dataset>) -> Result<ScenarioSplit> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let split = match spec.scenario {
        ScenarioKind::S1Semi | ScenarioKind::S2Contaminated => {
            let normal = spec.class_index().expect("validated");
            let mut normal_pool: Vec<&Record> = source.train.iter().filter(|r| r.label == normal).collect();
            if normal_pool.is_empty() {
                return Err(HsclError::InfeasibleScenario(format!("normal class {normal} has no training samples")));
            }
            let mut anomaly_pools = group_by_class(source.train.iter().filter(|r| r.label != normal));
            if anomaly_pools.is_empty() {
                return Err(HsclError::InfeasibleScenario("no anomalous classes in the source dataset".into()));
            }
            normal_pool.shuffle(&mut rng);
            let n_xn = round_count(spec.gamma_l, normal_pool.len());
            let (x_n, u_norm) = normal_pool.split_at(n_xn);
            let n_anom: usize = anomaly_pools.values().map(Vec::len).sum();
            let n_contam = if spec.scenario == ScenarioKind::S2Contaminated {
                round_count(spec.gamma_p / (1.0 - spec.gamma_p), u_norm.len())
            } else {
                0
            };
            let (x_a, injected) = draw_anomalies(&mut anomaly_pools, round_count(spec.gamma_l, n_anom), n_contam, &mut rng)?;
            let mut x_u: Vec<&Record> = u_norm.iter().copied().chain(injected).collect();
            x_u.shuffle(&mut rng);

            let abnormal_test: Box<dyn Fn(i64) -> bool> = match spec.effective_test_mode() {
                TestMode::AllClasses => Box::new(move |l| l != normal),
                TestMode::Pairwise => {
                    let target = match spec.test_abnormal_class {
                        Some(c) => c,
                        None => *anomaly_pools.keys().next().expect("nonempty"),
                    };
                    if !source.test.iter().any(|r| r.label == target) {
                        return Err(HsclError::InfeasibleScenario(format!("no test samples of class {target}")));
                    }
                    Box::new(move |l| l == target)
                }
            };
            let test = source
                .test
                .iter()
                .filter(|r| r.label == normal || abnormal_test(r.label))
                .map(|r| sample(r, LabelStatus::Unlabeled))
                .collect();
            ScenarioSplit {
                spec: spec.clone(),
                dataset: source.name.clone(),
                external_dataset: None,
                normal_classes: vec![normal],
                x_n: x_n.iter().map(|r| sample(r, LabelStatus::NormalLabeled)).collect(),
                x_a: x_a.into_iter().map(|r| sample(r, LabelStatus::AbnormalLabeled)).collect(),
                x_u: x_u.into_iter().map(|r| sample(r, LabelStatus::Unlabeled)).collect(),
                test,
            }
        }
        ScenarioKind::S3CrossDataset => {
            let (NormalClass::Dataset(normal_name), AnomalySource::External(ext_name)) =
                (&spec.normal_class, &spec.anomaly_source)
            else {
                unreachable!("validated")
            };
            if normal_name != &source.name {
                return Err(HsclError::InvalidConfig(format!(
                    "normal dataset {normal_name} does not match loaded dataset {}",
                    source.name
                )));
            }
            let ext = external.ok_or_else(|| HsclError::InvalidConfig("S3_CROSS_DATASET needs an external dataset".into()))?;
            if ext_name != &ext.name {
                return Err(HsclError::InvalidConfig(format!(
                    "external dataset {ext_name} does not match loaded dataset {}",
                    ext.name
                )));
            }
            if ext.sample_shape != source.sample_shape {
                return Err(HsclError::InvalidConfig(format!(
                    "external sample shape {:?} differs from {:?}",
                    ext.sample_shape, source.sample_shape
                )));
            }
            let ext = ext.clone().offset(source.max_id().map_or(0, |m| m + 1), source.n_classes() as i64);
            let mut normal_pool: Vec<&Record> = source.train.iter().collect();
            normal_pool.shuffle(&mut rng);
            let n_xn = round_count(spec.gamma_l, normal_pool.len());
            let mut pools = group_by_class(ext.train.iter());
            let n_ext: usize = pools.values().map(Vec::len).sum();
            let (x_a, _) = draw_anomalies(&mut pools, round_count(spec.gamma_l, n_ext), 0, &mut rng)?;
            let test = source
                .test
                .iter()
                .chain(&ext.test)
                .map(|r| sample(r, LabelStatus::Unlabeled))
                .collect();
            ScenarioSplit {
                spec: spec.clone(),
                dataset: source.name.clone(),
                external_dataset: Some(ext.name.clone()),
                normal_classes: source.classes(),
                x_n: normal_pool[..n_xn].iter().map(|r| sample(r, LabelStatus::NormalLabeled)).collect(),
                x_a: x_a.into_iter().map(|r| sample(r, LabelStatus::AbnormalLabeled)).collect(),
                x_u: normal_pool[n_xn..].iter().map(|r| sample(r, LabelStatus::Unlabeled)).collect(),
                test,
            }
        }
    };
    validate_split(&split)?;
    Ok(split)
}

/// Rebuilds a split from its manifest and the same source data.
pub fn split_from_manifest(manifest: &SplitManifest, source: &Dataset, external: Option<&Dataset>) -> Result<ScenarioSplit> {
    if manifest.dataset != source.name {
        return Err(HsclError::InvalidInput(format!(
            "manifest was built from {}, got {}",
            manifest.dataset, source.name
        )));
    }
    let mut by_id: BTreeMap<SampleId, &Record> = source.train.iter().chain(&source.test).map(|r| (r.id, r)).collect();
    let shifted;
    if let Some(name) = &manifest.external_dataset {
        let ext = external.ok_or_else(|| HsclError::InvalidInput(format!("manifest needs external dataset {name}")))?;
        shifted = ext.clone().offset(source.max_id().map_or(0, |m| m + 1), source.n_classes() as i64);
        by_id.extend(shifted.train.iter().chain(&shifted.test).map(|r| (r.id, r)));
    }
    let pick = |ids: &[SampleId], status| {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|r| sample(r, status))
                    .ok_or_else(|| HsclError::InvalidInput(format!("manifest id {id} not in the dataset")))
            })
            .collect::<Result<Vec<_>>>()
    };
    let split = ScenarioSplit {
        spec: manifest.spec.clone(),
        dataset: manifest.dataset.clone(),
        external_dataset: manifest.external_dataset.clone(),
        normal_classes: manifest.normal_classes.clone(),
        x_n: pick(&manifest.x_n, LabelStatus::NormalLabeled)?,
        x_a: pick(&manifest.x_a, LabelStatus::AbnormalLabeled)?,
        x_u: pick(&manifest.x_u, LabelStatus::Unlabeled)?,
        test: pick(&manifest.test, LabelStatus::Unlabeled)?,
    };
    validate_split(&split)?;
    Ok(split)
}

/// Checks disjointness, labeled-set purity, test isolation and, for S2, that the
/// pollution of `x_u` is within one sample of `gamma_p`.
pub fn validate_split(split: &ScenarioSplit) -> Result<()> {
    let fail = |m: String| Err(HsclError::InvalidInput(m));
    let mut seen = HashSet::new();
    for (name, set) in [("x_n", &split.x_n), ("x_a", &split.x_a), ("x_u", &split.x_u), ("test", &split.test)] {
        for s in set.iter() {
            if !seen.insert(s.id()) {
                return fail(format!("id {} of {name} appears in more than one set", s.id()));
            }
        }
    }
    if let Some(s) = split.x_n.iter().find(|s| split.is_abnormal(s)) {
        return fail(format!("labeled normal {} is abnormal", s.id()));
    }
    if let Some(s) = split.x_a.iter().find(|s| !split.is_abnormal(s)) {
        return fail(format!("labeled anomaly {} is normal", s.id()));
    }
    let contamination = split.contamination();
    let expected = split.spec.gamma_p * split.x_u.len() as f64;
    if (contamination as f64 - expected).abs() > 1.0 {
        return fail(format!(
            "x_u holds {contamination} anomalies out of {}, expected {expected:.1}",
            split.x_u.len()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per_class: usize) -> Dataset {
        make_synthetic_blobs(10, 4, 6.0, n_per_class, 3).unwrap()
    }

    #[test]
    fn labeled_counts_follow_gamma_l() {
        let ds = blobs(1000);
        let split = build_scenario(&ScenarioSpec::new(ScenarioKind::S1Semi, 0, 0.01, 0.0, 1), &ds, None).unwrap();
        assert_eq!(split.x_n.len(), 10);
        assert_eq!(split.x_a.len(), 90);
        let mut per_class = BTreeMap::new();
        for s in &split.x_a {
            *per_class.entry(s.evaluation_label().unwrap()).or_insert(0) += 1;
        }
        assert_eq!(per_class.len(), 9);
        assert!(per_class.values().all(|&n| n == 10));
        assert_eq!(split.x_u.len(), 990);
        assert_eq!(split.contamination(), 0);
    }

    #[test]
    fn contamination_matches_gamma_p() {
        let ds = blobs(1000);
        // 1000 normal, γ_l = 0.1 leaves 900 normal in x_u; 10% pollution adds 100.
        let split = build_scenario(&ScenarioSpec::new(ScenarioKind::S2Contaminated, 0, 0.1, 0.1, 1), &ds, None).unwrap();
        assert_eq!(split.x_u.len(), 1000);
        assert_eq!(split.contamination(), 100);
    }

    #[test]
    fn zero_gamma_l_gives_empty_labeled_sets() {
        let split = build_scenario(&ScenarioSpec::new(ScenarioKind::S1Semi, 0, 0.0, 0.0, 1), &blobs(50), None).unwrap();
        assert!(split.x_n.is_empty() && split.x_a.is_empty());
    }

    #[test]
    fn infeasible_pollution_reports_counts() {
        let mut ds = make_synthetic_blobs(2, 2, 6.0, 20, 1).unwrap();
        // keep only 5 anomalies; x_u needs 18 normal + 18 injected at γ_p = 0.5
        let mut kept = 0;
        ds.train.retain(|r| {
            kept += (r.label == 1) as usize;
            r.label == 0 || kept <= 5
        });
        let err = build_scenario(&ScenarioSpec::new(ScenarioKind::S2Contaminated, 0, 0.1, 0.5, 1), &ds, None).unwrap_err();
        assert!(matches!(err, HsclError::InfeasibleScenario(_)), "{err}");
        assert!(err.to_string().contains("needs 1 labeled + 18 contaminating samples but has 5"), "{err}");
    }

    #[test]
    fn spec_validation() {
        let mut s = ScenarioSpec::new(ScenarioKind::S1Semi, 0, 0.1, 0.1, 1);
        assert!(s.validate().is_err());
        s.gamma_p = 0.0;
        s.gamma_l = 0.6;
        assert!(s.validate().is_err());
        s.gamma_l = 0.1;
        s.normal_class = NormalClass::Dataset("x".into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn test_modes() {
        let ds = blobs(50);
        let s1 = build_scenario(&ScenarioSpec::new(ScenarioKind::S1Semi, 3, 0.1, 0.0, 1), &ds, None).unwrap();
        let labels: HashSet<_> = s1.test.iter().map(|s| s.evaluation_label().unwrap()).collect();
        assert_eq!(labels, HashSet::from([0, 3]));
        let s2 = build_scenario(&ScenarioSpec::new(ScenarioKind::S2Contaminated, 3, 0.1, 0.0, 1), &ds, None).unwrap();
        assert_eq!(s2.test.len(), ds.test.len());
        assert_eq!(s2.test_truth().iter().filter(|&&a| !a).count(), 10);
    }

    #[test]
    fn cross_dataset_uses_external_anomalies() {
        let mut normal = make_synthetic_blobs(2, 4, 6.0, 40, 1).unwrap();
        normal.name = "inlier".into();
        let mut ext = make_synthetic_blobs(3, 4, 6.0, 20, 2).unwrap();
        ext.name = "outlier".into();
        let spec = ScenarioSpec {
            scenario: ScenarioKind::S3CrossDataset,
            normal_class: NormalClass::Dataset("inlier".into()),
            gamma_l: 0.1,
            gamma_p: 0.0,
            anomaly_source: AnomalySource::External("outlier".into()),
            seed: 4,
            test_mode: None,
            test_abnormal_class: None,
        };
        let split = build_scenario(&spec, &normal, Some(&ext)).unwrap();
        assert_eq!(split.x_n.len(), 8);
        assert_eq!(split.x_u.len(), 72);
        assert_eq!(split.x_a.len(), 6);
        assert!(split.x_a.iter().all(|s| s.evaluation_label().unwrap() >= 2));
        assert_eq!(split.test_truth().iter().filter(|&&a| a).count(), ext.test.len());
        let again = split_from_manifest(&split.manifest(), &normal, Some(&ext)).unwrap();
        assert_eq!(again, split);
    }

    #[test]
    fn manifest_round_trip_and_determinism() {
        let ds = blobs(60);
        let spec = ScenarioSpec::new(ScenarioKind::S2Contaminated, 2, 0.05, 0.1, 9);
        let a = build_scenario(&spec, &ds, None).unwrap();
        let b = build_scenario(&spec, &ds, None).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a.manifest()).unwrap();
        let m: SplitManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(split_from_manifest(&m, &ds, None).unwrap(), a);
        let other = build_scenario(&ScenarioSpec { seed: 10, ..spec }, &ds, None).unwrap();
        assert_eq!(other.manifest().counts, a.manifest().counts);
        assert_ne!(other.manifest().x_u, a.manifest().x_u);
    }

    #[test]
    fn spec_json_shape() {
        let s: ScenarioSpec =
            serde_json::from_str(r#"{"scenario":"S2_CONTAMINATED","normal_class":1,"gamma_l":0.05,"gamma_p":0.1}"#).unwrap();
        assert_eq!(s.normal_class, NormalClass::Class(1));
        assert!(serde_json::from_str::<ScenarioSpec>(r#"{"scenario":"S1_SEMI","gamma_l":0.05}"#).is_err());
    }
}
