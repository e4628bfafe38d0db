//! Run configuration schemas, one per subcommand, all loaded from a single
//! JSON document. Unknown keys are rejected; relative paths are resolved
//! against the directory containing the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use lamina::levelset::LaplaceConfig;
use lamina::metrics::PointMetric;
use lamina::registration::RegistrationConfig;
use lamina::synth::FixtureSpec;

/// Resolves a config-relative path.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Fails with the config key name when an input file is missing.
pub fn require_exists(path: &Path, key: &str) -> lamina::Result<()> {
    if !path.exists() {
        return Err(lamina::Error::Config(format!(
            "input file {} (config key \"{key}\") does not exist",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub fixture: FixtureSpec,
    #[serde(default)]
    #[allow(dead_code)] // consumed from the raw document before schema parsing
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterConfig {
    pub inner: PathBuf,
    pub outer: PathBuf,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    #[allow(dead_code)] // consumed from the raw document before schema parsing
    pub output_dir: Option<PathBuf>,
}

/// How the laminar pass obtains the area-change factor σ.
#[derive(Debug, Clone, Copy, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMethod {
    /// Ratio of one-ring vertex areas between deformed and initial mesh.
    #[default]
    OneRing,
    /// Integrate the surface-normal transport ODE along each trajectory.
    ZetaOde,
}

fn default_layers() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_substeps() -> usize {
    2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaminarRunConfig {
    /// Registration checkpoint (config + flow state) to build layers from.
    pub checkpoint: PathBuf,
    /// Equivolumetric depths ε at which to extract layer surfaces.
    #[serde(default = "default_layers")]
    pub layers: Vec<f64>,
    #[serde(default)]
    pub sigma: SigmaMethod,
    /// RK4 substeps per flow step for the σ transport ODE.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    #[allow(dead_code)] // consumed from the raw document before schema parsing
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelsetRunConfig {
    pub inner: PathBuf,
    pub outer: PathBuf,
    /// Grid spacing h.
    pub spacing: f64,
    #[serde(default)]
    pub laplace: LaplaceConfig,
    /// Cap on the number of traced seeds (deterministic stride subsample of
    /// the inner-surface vertices); all vertices when absent.
    #[serde(default)]
    pub max_seeds: Option<usize>,
    #[serde(default)]
    #[allow(dead_code)] // consumed from the raw document before schema parsing
    pub output_dir: Option<PathBuf>,
}

fn default_bins() -> usize {
    32
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRunConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub metric: PointMetric,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    #[allow(dead_code)] // consumed from the raw document before schema parsing
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRunConfig {
    /// Surface pair for the nearest-vertex distance.
    pub inner: PathBuf,
    pub outer: PathBuf,
    /// Registration checkpoint providing streamline thickness.
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub metric: PointMetric,
    #[serde(default)]
    #[allow(dead_code)] // consumed from the raw document before schema parsing
    pub output_dir: Option<PathBuf>,
}

/// The `output_dir` key common to every schema, extracted without fully
/// deserializing (so the summary can land in the right place even when the
/// rest of the config is invalid).
pub fn configured_output_dir(config: &serde_json::Value) -> Option<PathBuf> {
    config
        .get("output_dir")
        .and_then(|v| v.as_str())
        .map(PathBuf::from)
}
