//! Experiment manifests.
//!
//! A manifest is a TOML file with the sections `lattice`, `params`,
//! `seeds`, `estimator`, `explore`, `equivalence` and `output`. Command-line
//! flags override manifest fields, and the manifest overrides the
//! `ANISOPERC_OUT` environment variable for the output directory.

use std::path::{Path, PathBuf};

use anisoperc::estimators::{BisectionConfig, Surrogate};
use anisoperc::lattice::{LatticeConfig, LatticeSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const OUT_ENV: &str = "ANISOPERC_OUT";
pub const DEFAULT_OUT: &str = "anisoperc-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub params: ParamGrid,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub explore: ExploreConfig,
    #[serde(default)]
    pub equivalence: EquivalenceConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    #[serde(default)]
    pub p: Vec<f64>,
    #[serde(default)]
    pub q: Vec<f64>,
    /// Falls back to [`default_pc`] for the lattice dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub master: u64,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            master: 0,
            replicas: default_replicas(),
        }
    }
}

fn default_replicas() -> u64 {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Bisection,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_surrogate")]
    pub surrogate: Surrogate,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_n_per_probe")]
    pub n_per_probe: u64,
    #[serde(default = "default_max_per_probe")]
    pub max_per_probe: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Samples for `chi` where a command needs it.
    #[serde(default = "default_chi_samples")]
    pub chi_samples: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            surrogate: default_surrogate(),
            method: Method::default(),
            n_per_probe: default_n_per_probe(),
            max_per_probe: default_max_per_probe(),
            tol: default_tol(),
            level: default_level(),
            chi_samples: default_chi_samples(),
        }
    }
}

impl EstimatorConfig {
    pub fn bisection(&self) -> BisectionConfig {
        BisectionConfig {
            n_per_probe: self.n_per_probe,
            max_per_probe: self.max_per_probe,
            tol: self.tol,
            level: self.level,
        }
    }
}

fn default_surrogate() -> Surrogate {
    Surrogate::Spanning { axis: 0 }
}
fn default_n_per_probe() -> u64 {
    BisectionConfig::default().n_per_probe
}
fn default_max_per_probe() -> u64 {
    BisectionConfig::default().max_per_probe
}
fn default_tol() -> f64 {
    BisectionConfig::default().tol
}
fn default_level() -> f64 {
    BisectionConfig::default().level
}
fn default_chi_samples() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreConfig {
    #[serde(default = "default_budget")]
    pub step_budget: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            step_budget: default_budget(),
        }
    }
}

fn default_budget() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceConfig {
    /// Largest accepted total-variation distance.
    #[serde(default = "default_tv")]
    pub tv_tolerance: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            tv_tolerance: default_tv(),
        }
    }
}

fn default_tv() -> f64 {
    0.01
}

/// Where results go. Not part of the manifest hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write per-step exploration traces.
    #[serde(default)]
    pub trace: bool,
}

/// Literature values of the bond percolation threshold of `Z^d`. Only
/// `d = 2` is exact; the rest are external numerical estimates.
pub fn default_pc(d: usize) -> Option<f64> {
    match d {
        2 => Some(0.5),
        3 => Some(0.248_812_6),
        4 => Some(0.160_131_4),
        5 => Some(0.118_171_8),
        6 => Some(0.094_201_9),
        7 => Some(0.078_675_2),
        8 => Some(0.067_708_39),
        _ => None,
    }
}

impl ExperimentManifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Manifest {
            field: String::new(),
            message: e.to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Manifest {
            field: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifests always serialize")
    }

    /// SHA-256 of the manifest with the `output` section cleared, so the
    /// hash names the experiment rather than where it was written.
    pub fn hash(&self) -> String {
        let mut bare = self.clone();
        bare.output = OutputConfig::default();
        hex::encode(Sha256::digest(bare.to_toml().as_bytes()))
    }

    pub fn spec(&self) -> Result<LatticeSpec, CliError> {
        self.lattice.clone().build().map_err(|e| CliError::from_core("lattice", e))
    }

    pub fn p_c(&self) -> Result<f64, CliError> {
        match self.params.p_c.or_else(|| default_pc(self.lattice.d)) {
            Some(pc) if pc > 0.0 && pc <= 1.0 => Ok(pc),
            Some(pc) => Err(CliError::Manifest {
                field: "params.p_c".into(),
                message: format!("{pc} is not in (0, 1]"),
            }),
            None => Err(CliError::Manifest {
                field: "params.p_c".into(),
                message: format!("no default for d = {}; set it explicitly", self.lattice.d),
            }),
        }
    }

    /// Every `(p, q)` in the grid, `p` outermost.
    pub fn grid(&self) -> Result<Vec<(f64, f64)>, CliError> {
        for (field, values) in [("params.p", &self.params.p), ("params.q", &self.params.q)] {
            if let Some(x) = values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(CliError::Manifest {
                    field: field.into(),
                    message: format!("{x} is not a probability"),
                });
            }
        }
        Ok(self
            .params
            .p
            .iter()
            .flat_map(|&p| self.params.q.iter().map(move |&q| (p, q)))
            .collect())
    }

    /// Output directory: flag, then manifest, then environment, then
    /// [`DEFAULT_OUT`].
    pub fn out_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}
