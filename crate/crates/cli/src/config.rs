//! TOML run configuration. Every key has a command-line flag of the same
//! name; flags take precedence.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use spatial_lc::priors::PriorSettings;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    pub priors: Option<PriorSettings>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub deaths: Option<PathBuf>,
    pub exposures: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub gender: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub cut_year: Option<i32>,
    pub share_spatial_hyper: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub max_evaluations: Option<usize>,
    pub tolerance: Option<f64>,
    pub initial_step: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub selected_ages: Option<Vec<u32>>,
    pub geojson: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub ages: Option<usize>,
    pub years: Option<usize>,
    pub areas: Option<usize>,
    pub graph: Option<String>,
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub adjacency: Option<PathBuf>,
    pub first_age: Option<u32>,
    pub first_year: Option<i32>,
    pub sigma_z: Option<f64>,
    pub sigma_kappa: Option<f64>,
    pub sigma_omega: Option<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
    pub exposure: Option<f64>,
    pub trend: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub fixed_hyper: Option<bool>,
    pub hyper_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nvariant = \"static\"\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("nope = 3\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let c: RunConfig = toml::from_str(
            "threads = 2\n[model]\nvariant = \"period\"\ncut_year = 2010\n[priors.sigma_z]\nu = 0.5\nalpha = 0.05\n",
        )
        .unwrap();
        assert_eq!(c.threads, Some(2));
        assert_eq!(c.model.cut_year, Some(2010));
        assert_eq!(c.priors.unwrap().sigma_z.u, 0.5);
    }
}
