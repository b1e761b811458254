//! Run configurations. Each command reads one JSON file (or its defaults),
//! applies flag overrides, validates, and echoes the resolved record into
//! its outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use stoloc::fit::NoiseMode;
use stoloc::joint::Endpoint;
use stoloc::linalg::SymMatrix;
use stoloc::measures::{discretize_gaussian, DiscreteMeasure, GaussianMeasure};
use stoloc::presets;

use crate::CliError;

/// Seed, output, workers, dt and T overrides common to most configs.
macro_rules! apply_common {
    ($cfg:expr, $a:expr) => {{
        if let Some(v) = $a.seed {
            $cfg.seed = v;
        }
        if let Some(v) = &$a.out {
            $cfg.out = v.clone();
        }
        if let Some(v) = $a.workers {
            $cfg.workers = v;
        }
        if let Some(v) = $a.dt {
            $cfg.dt = v;
        }
        if let Some(v) = $a.horizon {
            $cfg.horizon = v;
        }
    }};
}

/// Flags shared by every subcommand; set values win over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Where a measure comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// CSV with columns `x_1..x_d,weight`.
    Csv { path: PathBuf },
    /// Built-in generator; see [`preset_names`].
    Preset {
        name: String,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    /// `n` i.i.d. draws from a Gaussian.
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    PointMass { x: Vec<f64> },
    Points {
        rows: Vec<Vec<f64>>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "uniform-square",
        "three-mixture",
        "rotated-mixture-source",
        "rotated-mixture-target",
        "annulus-source",
        "annulus-target",
        "manifold",
    ]
}

impl MeasureSpec {
    pub fn preset(name: &str, n: usize, seed: u64) -> Self {
        MeasureSpec::Preset {
            name: name.into(),
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            MeasureSpec::Preset { name, n, .. } => {
                if !preset_names().contains(&name.as_str()) {
                    return Err(CliError::Config(format!(
                        "unknown preset {name:?}; expected one of {}",
                        preset_names().join(", ")
                    )));
                }
                if *n == 0 {
                    return Err(CliError::Config("preset needs n >= 1".into()));
                }
            }
            MeasureSpec::Gaussian { n, .. } if *n == 0 => {
                return Err(CliError::Config("gaussian measure needs n >= 1".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn gaussian(&self) -> Option<Result<GaussianMeasure, CliError>> {
        match self {
            MeasureSpec::Gaussian { mean, cov, .. } => Some(
                SymMatrix::from_rows(cov)
                    .and_then(|c| GaussianMeasure::new(mean.clone(), c))
                    .map_err(CliError::from_config),
            ),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<DiscreteMeasure, CliError> {
        let m = match self {
            MeasureSpec::Csv { path } => DiscreteMeasure::load_csv(path),
            MeasureSpec::Preset { name, n, seed } => match name.as_str() {
                "uniform-square" => presets::uniform_square(*n),
                "three-mixture" => presets::three_component_mixture().sample(*n, *seed),
                "rotated-mixture-source" => presets::rotated_mixture_source().sample(*n, *seed),
                "rotated-mixture-target" => presets::rotated_mixture_target().sample(*n, *seed),
                "annulus-source" => presets::annulus_source(*n, *seed),
                "annulus-target" => presets::annulus_target(*n, *seed),
                "manifold" => presets::manifold_data(*n, *seed),
                other => return Err(CliError::Config(format!("unknown preset {other:?}"))),
            },
            MeasureSpec::Gaussian { n, seed, .. } => {
                let g = self.gaussian().expect("gaussian spec")?;
                discretize_gaussian(&g, *n, *seed)
            }
            MeasureSpec::PointMass { x } => DiscreteMeasure::point_mass(x),
            MeasureSpec::Points { rows, weights } => match weights {
                Some(w) => DiscreteMeasure::from_weighted_rows(rows, w),
                None => DiscreteMeasure::uniform(rows),
            },
        };
        m.map_err(CliError::from_config)
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn check_alpha(a: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(CliError::Config(format!("alpha must lie in [0, 1], got {a}")))
    }
}

fn check_m(m: usize, min: usize) -> Result<(), CliError> {
    if m >= min {
        Ok(())
    } else {
        Err(CliError::Config(format!("M must be at least {min}, got {m}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub measure: MeasureSpec,
    pub alphas: Vec<f64>,
    pub delta: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub loc_tol: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            measure: MeasureSpec::preset("uniform-square", 500, 0),
            alphas: vec![0.0, 0.3, 0.5, 0.8, 1.0],
            delta: 0.003,
            dt: 0.05,
            horizon: 10.0,
            loc_tol: None,
            m: 1000,
            seed: 0,
            workers: 0,
            out: default_out(),
        }
    }
}

impl LocalizeConfig {
    pub fn apply(&mut self, a: &CommonArgs) {
        apply_common!(self, a);
        if let Some(v) = a.delta {
            self.delta = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.measure.validate()?;
        if self.alphas.is_empty() {
            return Err(CliError::Config("alphas must not be empty".into()));
        }
        self.alphas.iter().try_for_each(|a| check_alpha(*a))?;
        check_positive("delta", self.delta)?;
        check_positive("dt", self.dt)?;
        check_positive("T", self.horizon)?;
        check_m(self.m, 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupleConfig {
    pub mu: MeasureSpec,
    pub nu: MeasureSpec,
    /// Joint Eldan α-schemes to run.
    pub alphas: Vec<f64>,
    pub extrapolation: bool,
    pub delta: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub loc_tol: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for CoupleConfig {
    fn default() -> Self {
        CoupleConfig {
            mu: MeasureSpec::preset("rotated-mixture-source", 50, 1),
            nu: MeasureSpec::preset("rotated-mixture-target", 50, 2),
            alphas: vec![0.0, 0.5, 1.0],
            extrapolation: true,
            delta: 1e-3,
            dt: 0.05,
            horizon: 30.0,
            loc_tol: None,
            m: 300,
            seed: 0,
            workers: 0,
            out: default_out(),
        }
    }
}

impl CoupleConfig {
    pub fn apply(&mut self, a: &CommonArgs) {
        apply_common!(self, a);
        if let Some(v) = a.delta {
            self.delta = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mu.validate()?;
        self.nu.validate()?;
        if self.alphas.is_empty() && !self.extrapolation {
            return Err(CliError::Config("no couplings requested".into()));
        }
        self.alphas.iter().try_for_each(|a| check_alpha(*a))?;
        check_positive("delta", self.delta)?;
        check_positive("dt", self.dt)?;
        check_positive("T", self.horizon)?;
        check_m(self.m, 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    JointAlpha,
    Extrapolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceConfig {
    pub mu: MeasureSpec,
    pub nu: MeasureSpec,
    pub scheme: Scheme,
    pub alpha: f64,
    pub delta: f64,
    pub endpoint: Endpoint,
    /// CSV with columns `t,mass`; switches to the weighted distance.
    pub weights_file: Option<PathBuf>,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub loc_tol: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            mu: MeasureSpec::Gaussian {
                mean: vec![0.0, 0.0],
                cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                n: 300,
                seed: 1,
            },
            nu: MeasureSpec::Gaussian {
                mean: vec![1.0, 0.0],
                cov: vec![vec![4.0, 0.0], vec![0.0, 4.0]],
                n: 300,
                seed: 2,
            },
            scheme: Scheme::Extrapolation,
            alpha: 0.5,
            delta: 1e-3,
            endpoint: Endpoint::Argmax,
            weights_file: None,
            dt: 0.05,
            horizon: 25.0,
            loc_tol: None,
            m: 500,
            seed: 0,
            workers: 0,
            out: default_out(),
        }
    }
}

impl DistanceConfig {
    pub fn apply(&mut self, a: &CommonArgs) {
        apply_common!(self, a);
        if let Some(v) = a.delta {
            self.delta = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mu.validate()?;
        self.nu.validate()?;
        check_alpha(self.alpha)?;
        check_positive("delta", self.delta)?;
        check_positive("dt", self.dt)?;
        check_positive("T", self.horizon)?;
        check_m(self.m, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlCheckConfig {
    pub gaussian: GaussianMeasure,
    #[serde(rename = "M")]
    pub m: usize,
    pub dt: f64,
    /// Truncation horizon of the time integral.
    #[serde(rename = "T")]
    pub t_max: f64,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for KlCheckConfig {
    fn default() -> Self {
        KlCheckConfig {
            gaussian: GaussianMeasure::isotropic(vec![1.0, 0.0], 1.0).expect("valid default"),
            m: 5000,
            dt: 0.01,
            t_max: 100.0,
            seed: 0,
            workers: 0,
            out: default_out(),
        }
    }
}

impl KlCheckConfig {
    pub fn apply(&mut self, a: &CommonArgs) -> Result<(), CliError> {
        if a.delta.is_some() {
            return Err(CliError::Config("klcheck has no delta parameter".into()));
        }
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(v) = &a.out {
            self.out = v.clone();
        }
        if let Some(v) = a.workers {
            self.workers = v;
        }
        if let Some(v) = a.dt {
            self.dt = v;
        }
        if let Some(v) = a.horizon {
            self.t_max = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        check_positive("dt", self.dt)?;
        if !(self.t_max >= 10.0) {
            return Err(CliError::Config(format!("T must be at least 10, got {}", self.t_max)));
        }
        check_m(self.m, 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitData {
    /// Image of uniform draws under the built-in surface map in R³.
    Manifold { n: usize, seed: u64 },
    /// `A z + c` evaluated on the model's own latent points.
    Affine { a: Vec<Vec<f64>>, c: Vec<f64> },
    Measure { measure: MeasureSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Informed,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitRunConfig {
    pub data: FitData,
    pub latent_n: usize,
    pub latent_dim: usize,
    pub latent_seed: u64,
    pub degree: usize,
    pub init: InitKind,
    /// Variance of the random initialization `θ ~ N(0, σ² I)`.
    pub init_variance: f64,
    pub alpha: f64,
    pub delta: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub max_iter: usize,
    pub lambda0: f64,
    pub noise: NoiseMode,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for FitRunConfig {
    fn default() -> Self {
        FitRunConfig {
            data: FitData::Manifold { n: 300, seed: 1 },
            latent_n: 256,
            latent_dim: 2,
            latent_seed: 2,
            degree: 2,
            init: InitKind::Informed,
            init_variance: 0.1,
            alpha: 0.5,
            delta: 1e-3,
            dt: 0.05,
            horizon: 10.0,
            m: 200,
            max_iter: 15,
            lambda0: 1e-3,
            noise: NoiseMode::PerIteration,
            seed: 0,
            workers: 0,
            out: default_out(),
        }
    }
}

impl FitRunConfig {
    pub fn apply(&mut self, a: &CommonArgs) {
        apply_common!(self, a);
        if let Some(v) = a.delta {
            self.delta = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let FitData::Measure { measure } = &self.data {
            measure.validate()?;
        }
        if let FitData::Affine { a, c } = &self.data {
            if a.len() != c.len() || a.iter().any(|r| r.len() != self.latent_dim) {
                return Err(CliError::Config("affine target must be d×k with offset of length d".into()));
            }
        }
        if self.latent_n == 0 || self.latent_dim == 0 {
            return Err(CliError::Config("latent_n and latent_dim must be positive".into()));
        }
        check_alpha(self.alpha)?;
        check_positive("delta", self.delta)?;
        check_positive("dt", self.dt)?;
        check_positive("T", self.horizon)?;
        check_positive("lambda0", self.lambda0)?;
        check_positive("init_variance", self.init_variance)?;
        if self.max_iter == 0 {
            return Err(CliError::Config("max_iter must be at least 1".into()));
        }
        check_m(self.m, 1)
    }
}
