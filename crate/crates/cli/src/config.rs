use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use t2sim::phantom::PhantomSpec;
use t2sim::recon::ReconConfig;
use t2sim::sim::{DatasetConfig, SchemeConfig, SimConfig};

/// Synthetic motion-curve settings used when no recorded curves are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub n_samples: usize,
    pub dt_s: f64,
    /// Target mean sphere displacement in mm.
    pub mean_mm: f64,
    /// Number of synthetic curves made when fitting the augmentation model.
    pub n_training: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            n_samples: 236,
            dt_s: 1.0,
            mean_mm: 0.89,
            n_training: 10,
        }
    }
}

/// Everything a run depends on. Written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub scheme: SchemeConfig,
    pub sim: SimConfig,
    pub recon: ReconConfig,
    pub dataset: DatasetConfig,
    pub curve: CurveConfig,
    /// Number of phantoms generated by `dataset`.
    pub n_phantoms: usize,
    /// Root holding one `dmin_<t>` dataset per sweep threshold.
    pub dataset_root: Option<PathBuf>,
    pub sweep_thresholds_mm: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomSpec::default(),
            scheme: SchemeConfig::default(),
            sim: SimConfig::default(),
            recon: ReconConfig::default(),
            dataset: DatasetConfig::default(),
            curve: CurveConfig::default(),
            n_phantoms: 4,
            dataset_root: None,
            sweep_thresholds_mm: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Apply the seed to every consumer of randomness.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.sim.seed = self.seed;
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.sim.validate()?;
        self.recon.validate()?;
        if !(self.scheme.tr_s > 0.0) {
            bail!("scheme.tr_s must be positive");
        }
        if self.curve.n_samples < 2 || !(self.curve.dt_s > 0.0) || !(self.curve.mean_mm >= 0.0) {
            bail!("curve needs >= 2 samples, positive dt_s and non-negative mean_mm");
        }
        if self.dataset.curves_per_phantom == 0 {
            bail!("dataset.curves_per_phantom must be positive");
        }
        if self.sweep_thresholds_mm.iter().any(|t| !(*t > 0.0)) {
            bail!("sweep thresholds must be positive");
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// `dmin_<t>` with the shortest decimal form of `t`.
pub fn threshold_dir(root: &Path, d_min_mm: f64) -> PathBuf {
    root.join(format!("dmin_{d_min_mm}"))
}
