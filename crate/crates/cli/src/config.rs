//! Experiment configuration: a strict TOML schema mirroring the library
//! types. Unknown keys are hard errors so a typo cannot silently change an
//! experiment.

use norst_core::datagen::{ChangeModel, NoiseModel, OutlierModel, SceneConfig, SupportModel};
use norst_core::sddn::SddnConfig;
use norst_core::tracker::{NorstParams, XminMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}:\n{message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Norst,
    Nodet,
    Smoothing,
    Static,
    StMissing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub algo: Algo,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ChangeSection {
    Exp { gammas: Vec<f64> },
    Givens { thetas: Vec<f64> },
}

impl ChangeSection {
    pub fn to_model(&self) -> ChangeModel {
        match self {
            ChangeSection::Exp { gammas } => ChangeModel::ExpRotation { gammas: gammas.clone() },
            ChangeSection::Givens { thetas } => {
                ChangeModel::GivensRotation { thetas: thetas.clone() }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum SupportSection {
    Moving { s: usize, tau: usize, c0: f64 },
    Bernoulli { rho: f64 },
}

impl SupportSection {
    pub fn to_model(&self) -> SupportModel {
        match self {
            SupportSection::Moving { s, tau, c0 } => {
                SupportModel::MovingObject { s: *s, tau: *tau, c0: *c0 }
            }
            SupportSection::Bernoulli { rho } => SupportModel::Bernoulli { rho: *rho },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSection {
    pub xmin: f64,
    pub xmax: f64,
    #[serde(default)]
    pub signed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub lambda_v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub t_train: usize,
    pub f: f64,
    pub change_times: Vec<usize>,
    pub change: ChangeSection,
    pub support: SupportSection,
    pub train_support: SupportSection,
    pub outliers: OutlierSection,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
}

impl SceneSection {
    /// Scene parameters for one trial; the seed comes from the trial stream.
    pub fn to_config(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            n: self.n,
            r: self.r,
            d: self.d,
            t_train: self.t_train,
            f: self.f,
            change_times: self.change_times.clone(),
            change: self.change.to_model(),
            support: self.support.to_model(),
            train_support: self.train_support.to_model(),
            outliers: OutlierModel {
                xmin: self.outliers.xmin,
                xmax: self.outliers.xmax,
                signed: self.outliers.signed,
            },
            noise: self.noise.as_ref().map(|n| NoiseModel { lambda_v_plus: n.lambda_v }),
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub alpha: usize,
    pub k_updates: usize,
    pub xmin: f64,
    pub eps: f64,
    /// Perturbation applied to the true initial subspace (oracle init).
    pub init_err: f64,
    #[serde(default)]
    pub adaptive_xmin: bool,
}

impl ParamsSection {
    pub fn to_params(&self, r: usize, lambda_plus: f64) -> Result<NorstParams, String> {
        let mut params =
            NorstParams::from_model(r, self.alpha, self.k_updates, self.xmin, self.eps, lambda_plus)
                .map_err(|e| e.to_string())?;
        if self.adaptive_xmin {
            params.xmin_mode = XminMode::Adaptive;
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingSection {
    /// Fraction of entries missing per frame.
    pub rho: f64,
    /// Start from a random orthonormal basis instead of the oracle init.
    #[serde(default)]
    pub random_init: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SddnSection {
    pub n: usize,
    pub r: usize,
    pub alpha: usize,
    pub f: f64,
    pub q: f64,
    pub lambda_v: f64,
    pub support: SupportSection,
    /// Optional batch-length sweep for the error-versus-alpha curve.
    #[serde(default)]
    pub alphas: Vec<usize>,
    /// Optional occupancy sweep (target b values, support rebuilt per value).
    #[serde(default)]
    pub occupancies: Vec<f64>,
}

impl SddnSection {
    pub fn to_config(&self, seed: u64) -> SddnConfig {
        SddnConfig {
            n: self.n,
            r: self.r,
            alpha: self.alpha,
            f: self.f,
            q: self.q,
            support: self.support.to_model(),
            lambda_v: self.lambda_v,
            change: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub b0_grid: Vec<f64>,
    pub r_grid: Vec<usize>,
    /// Half-period of the moving-object support used at every grid point.
    pub tau: usize,
    /// A trial succeeds when its smoothed relative error stays below this.
    #[serde(default = "default_success_threshold")]
    pub success_threshold: f64,
}

fn default_success_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XminStudySection {
    /// Outlier magnitudes to sweep; each run sets xmax = xmin = value.
    pub values: Vec<f64>,
    /// Dense-noise variance paired with the smallest magnitude, so its run
    /// has an explicit noise floor to decay to.
    pub small_noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub scene: Option<SceneSection>,
    #[serde(default)]
    pub params: Option<ParamsSection>,
    #[serde(default)]
    pub missing: Option<MissingSection>,
    #[serde(default)]
    pub sddn: Option<SddnSection>,
    #[serde(default)]
    pub phase: Option<PhaseSection>,
    #[serde(default)]
    pub xmin_study: Option<XminStudySection>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate(path)?;
        Ok(config)
    }

    fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let fail = |message: String| ConfigError::Invalid { path: path.to_path_buf(), message };
        if self.experiment.trials == 0 {
            return Err(fail("experiment.trials must be at least 1".into()));
        }
        if let Some(scene) = &self.scene {
            let changes = match &scene.change {
                ChangeSection::Exp { gammas } => gammas.len(),
                ChangeSection::Givens { thetas } => thetas.len(),
            };
            if changes != scene.change_times.len() {
                return Err(fail(format!(
                    "scene.change lists {changes} rotations but scene.change_times has {}",
                    scene.change_times.len()
                )));
            }
        }
        if let Some(study) = &self.xmin_study {
            if study.values.is_empty() {
                return Err(fail("xmin_study.values must not be empty".into()));
            }
        }
        if let Some(phase) = &self.phase {
            if phase.b0_grid.is_empty() || phase.r_grid.is_empty() {
                return Err(fail("phase.b0_grid and phase.r_grid must not be empty".into()));
            }
        }
        Ok(())
    }

    /// The scene section, or a config error naming it.
    pub fn require_scene(&self, path: &Path) -> Result<&SceneSection, ConfigError> {
        self.scene.as_ref().ok_or_else(|| ConfigError::Invalid {
            path: path.to_path_buf(),
            message: "missing [scene] section".into(),
        })
    }

    pub fn require_params(&self, path: &Path) -> Result<&ParamsSection, ConfigError> {
        self.params.as_ref().ok_or_else(|| ConfigError::Invalid {
            path: path.to_path_buf(),
            message: "missing [params] section".into(),
        })
    }
}
