//! Run configuration file, flag overrides and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use hscl::ablation::AblationGrid;
use hscl::augmentation::AugmentationPolicy;
use hscl::model::{EncoderKind, EncoderSpec};
use hscl::scenarios::{Dataset, DatasetSource, ScenarioSpec};
use hscl::HsclConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const DATA_DIR_VAR: &str = "HSCL_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Anomaly source for cross-dataset scenarios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_dataset: Option<DatasetSource>,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub hscl: HsclConfig,
    pub encoder: EncoderSpec,
    /// Defaults to the image policy for ResNet encoders and the shift-free
    /// vector policy for MLPs.
    #[serde(default)]
    pub augmentation: Option<AugmentationPolicy>,
}

impl RunConfig {
    /// Fills defaults that depend on other keys and validates the whole config.
    pub fn resolve(mut self) -> CliResult<Self> {
        if self.augmentation.is_none() {
            self.augmentation = Some(match self.encoder.kind {
                EncoderKind::Resnet18 => AugmentationPolicy::default(),
                EncoderKind::Mlp => AugmentationPolicy::vector_default(),
            });
        }
        self.hscl.validate()?;
        self.scenario.validate()?;
        self.encoder.validate()?;
        self.policy().validate()?;
        if self.encoder.projection_dim != self.hscl.d {
            return Err(CliError::usage(format!(
                "encoder.projection_dim ({}) must equal hscl.d ({})",
                self.encoder.projection_dim, self.hscl.d
            )));
        }
        Ok(self)
    }

    pub fn policy(&self) -> &AugmentationPolicy {
        self.augmentation.as_ref().expect("resolved config")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.epochs {
            self.hscl.epochs = v;
        }
        if let Some(v) = o.w_delta {
            self.hscl.w_delta = v;
        }
        if let Some(v) = o.k {
            self.hscl.k = v;
        }
        if let Some(v) = o.lambda1 {
            self.hscl.lambda1 = v;
        }
        if let Some(v) = o.lambda2 {
            self.hscl.lambda2 = v;
        }
        if let Some(v) = o.lr {
            self.hscl.lr = v;
        }
        if let Some(v) = o.seed {
            self.hscl.seed = v;
            self.scenario.seed = v;
        }
    }

    pub fn load_datasets(&self) -> CliResult<(Dataset, Option<Dataset>)> {
        let root = std::env::var_os(DATA_DIR_VAR).map(PathBuf::from);
        let main = self
            .dataset
            .load(root.as_deref())
            .map_err(|e| CliError::from(e).context(format!("loading dataset {:?}", self.dataset.name())))?;
        let external = match &self.external_dataset {
            Some(src) => Some(
                src.load(root.as_deref())
                    .map_err(|e| CliError::from(e).context(format!("loading dataset {:?}", src.name())))?,
            ),
            None => None,
        };
        Ok((main, external))
    }
}

/// Flags that replace single config keys.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// hscl.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// hscl.w_delta
    #[arg(long)]
    pub w_delta: Option<f64>,
    /// hscl.k
    #[arg(long)]
    pub k: Option<usize>,
    /// hscl.lambda1
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// hscl.lambda2
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// hscl.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// hscl.seed and scenario.seed
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Everything needed to repeat a run: the resolved config, the code version and
/// the artifacts written so far (paths relative to the run directory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation_grid: Option<AblationGrid>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            version: version_string(),
            seed: config.hscl.seed,
            config: config.clone(),
            ablation_grid: None,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn read(run_dir: &Path) -> CliResult<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Manifest for `config` in `run_dir`, keeping artifacts recorded by earlier
    /// commands in the same directory.
    pub fn for_run(run_dir: &Path, config: &RunConfig) -> CliResult<Self> {
        let mut m = Self::new(config);
        if run_dir.join(MANIFEST_FILE).exists() {
            let old = Self::read(run_dir)?;
            m.artifacts = old.artifacts;
            m.ablation_grid = old.ablation_grid;
        }
        Ok(m)
    }

    pub fn write(&self, run_dir: &Path) -> CliResult<()> {
        write_json(&run_dir.join(MANIFEST_FILE), self)
    }
}

pub fn version_string() -> String {
    format!("hscl {}", env!("CARGO_PKG_VERSION"))
}

/// Reads a run config, or the config echoed in a run manifest.
pub fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let is_manifest = value.get("config").is_some() && value.get("version").is_some();
    let parsed = if is_manifest {
        serde_json::from_value::<RunManifest>(value).map(|m| m.config)
    } else {
        serde_json::from_value::<RunConfig>(value)
    };
    parsed.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
