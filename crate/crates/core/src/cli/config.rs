use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::TvConfig;
use crate::error::{Error, Result};
use crate::flow::FlowArch;
use crate::solver::{PatchConfig, SolveConfig};
use crate::training::TrainConfig;
use crate::volume::PhantomConfig;

/// Phantom generation and the reconstruction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSection {
    pub dims: [usize; 3],
    pub spacing: f64,
    /// Number of phantoms written by `phantom`.
    pub count: usize,
    /// Phantom `i` uses seed `seed + i`.
    pub seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for VolumeSection {
    fn default() -> Self {
        Self { dims: [16, 16, 16], spacing: 1.0, count: 1, seed: 0, phantom: PhantomConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticsSection {
    pub n_azimuth: usize,
    pub n_polar: usize,
    /// Hemisphere radius; default 1.2x the volume half diagonal.
    pub radius: Option<f64>,
    pub n_dirs: usize,
    pub dt: Option<f64>,
    pub n_t: Option<usize>,
    /// Noise level relative to the peak of the clean data.
    pub sigma: f64,
    pub noise_seed: u64,
    /// Simulate on the 2x upsampled grid.
    pub upsample: bool,
}

impl Default for AcousticsSection {
    fn default() -> Self {
        Self {
            n_azimuth: 16,
            n_polar: 4,
            radius: None,
            n_dirs: 200,
            dt: None,
            n_t: None,
            sigma: 0.05,
            noise_seed: 0,
            upsample: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambda_grid: Vec<f64>,
    /// Inner iterations per grid point, each run from the initial guess.
    pub steps: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { lambda_grid: (-4..=1).map(|k| 10f64.powi(k)).collect(), steps: 200 }
    }
}

/// Files consumed by the commands. Relative paths resolve against the
/// directory holding the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub truth: Option<PathBuf>,
    pub measurements: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reconstruction: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub volume: VolumeSection,
    #[serde(default)]
    pub acoustics: AcousticsSection,
    #[serde(default)]
    pub flow: FlowArch,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub solver: SolveConfig,
    #[serde(default)]
    pub patch: PatchConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub baselines: TvConfig,
    #[serde(default)]
    pub paths: PathsSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| Error::Format { path: origin.to_path_buf(), msg: e.to_string() })?;
        let base = origin.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.paths.truth,
            &mut self.paths.measurements,
            &mut self.paths.checkpoint,
            &mut self.paths.reconstruction,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("run_id {:?} must be a plain non-empty name", self.run_id)));
        }
        if self.volume.dims.contains(&0) || !(self.volume.spacing > 0.0) {
            return Err(Error::Config("volume dims and spacing must be positive".into()));
        }
        self.volume.phantom.validate()?;
        self.flow.validate()?;
        self.training.validate()?;
        self.solver.validate()?;
        if self.patch.patches == 0 || self.sweep.steps == 0 {
            return Err(Error::Config("patch count and sweep steps must be positive".into()));
        }
        self.baselines.validate()?;
        if !(self.acoustics.sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Replaces every seed in the configuration.
    pub fn override_seed(&mut self, seed: u64) {
        self.volume.seed = seed;
        self.acoustics.noise_seed = seed;
        self.training.seed = seed;
        self.solver.seed = seed;
        self.patch.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config encoding: {e}")))
    }

    /// A path from the `paths` section that must name an existing file.
    pub fn input(&self, name: &str) -> Result<&Path> {
        let p = match name {
            "truth" => &self.paths.truth,
            "measurements" => &self.paths.measurements,
            "checkpoint" => &self.paths.checkpoint,
            "reconstruction" => &self.paths.reconstruction,
            _ => unreachable!("unknown input {name}"),
        };
        let p = p.as_deref().ok_or_else(|| Error::Config(format!("paths.{name} is required for this command")))?;
        if !p.is_file() {
            return Err(Error::Config(format!("paths.{name} = {} does not exist", p.display())));
        }
        Ok(p)
    }
}
