//! Experiment configuration: one TOML file per run, overridden by flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use resnet_mg::train::{TrainConfig, TrainMode};
use resnet_mg::{Activation, InitSpec, NetworkSpec, SolveOptions};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Converge,
    OracleCheck,
    Train,
    Scale,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Converge => "converge",
            Self::OracleCheck => "oracle-check",
            Self::Train => "train",
            Self::Scale => "scale",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "converge" => Ok(Self::Converge),
            "oracle-check" => Ok(Self::OracleCheck),
            "train" => Ok(Self::Train),
            "scale" => Ok(Self::Scale),
            other => Err(CliError::Config(format!("unknown experiment kind '{other}'"))),
        }
    }
}

/// Residual network family used by every experiment.
///
/// The step size is `step_size` when given, otherwise `horizon / depth`.
/// A `spec` file, if present, supplies the architecture and only the depth
/// (and step size, when one of the two fields above is set) is replaced.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub width: usize,
    pub horizon: Option<f64>,
    pub step_size: Option<f64>,
    pub activation: Activation,
    pub init: InitSpec,
    pub spec: Option<PathBuf>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 16,
            horizon: None,
            step_size: None,
            activation: Activation::Tanh,
            init: InitSpec::default(),
            spec: None,
        }
    }
}

pub const DEFAULT_HORIZON: f64 = 2.0;

impl NetworkConfig {
    /// Architecture with `depth` blocks mapping `input` features to `classes`.
    pub fn build_spec(
        &self,
        depth: usize,
        width: usize,
        input: usize,
        classes: usize,
    ) -> Result<NetworkSpec, CliError> {
        if depth == 0 || width == 0 {
            return Err(CliError::Config("depth and width must be positive".into()));
        }
        let step = match (self.step_size, self.horizon) {
            (Some(h), _) => Some(h),
            (None, Some(t)) => Some(t / depth as f64),
            (None, None) => None,
        };
        let mut spec = match &self.spec {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                NetworkSpec::from_toml(&text).map_err(CliError::from)?
            }
            None => NetworkSpec::dense(input, width, classes, depth, 0.0, self.activation)
                .with_init(self.init),
        };
        spec.depth = depth;
        spec.step_size = step.unwrap_or(match self.spec {
            Some(_) => spec.step_size,
            None => DEFAULT_HORIZON / depth as f64,
        });
        if !(spec.step_size.is_finite() && spec.step_size >= 0.0) {
            return Err(CliError::Config(format!(
                "step size must be finite and non-negative, got {}",
                spec.step_size
            )));
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let dir = Path::new("data/mnist");
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
            train_samples: 2000,
            test_samples: 1000,
        }
    }
}

/// Everything one experiment run needs. Fields that only apply to some
/// kinds are ignored by the others.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Layer counts to run; defaults depend on the kind.
    pub depths: Option<Vec<usize>>,
    pub coarsening_factor: usize,
    /// Stop coarsening at this many layers; 0 means two levels.
    pub coarsest_layers: usize,
    pub tol: f64,
    pub max_cycles: usize,
    pub workers: Option<Vec<usize>>,
    /// oracle-check: number of consecutive seeds starting at `seed`.
    pub num_seeds: u64,
    /// oracle-check: layer widths to sweep.
    pub widths: Vec<usize>,
    pub oracle_tol: f64,
    /// scale: timed repetitions per worker count (the fastest is reported).
    pub repeats: usize,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            out: None,
            seed: 0,
            depths: None,
            coarsening_factor: 4,
            coarsest_layers: 0,
            tol: 1e-9,
            max_cycles: 50,
            workers: None,
            num_seeds: 20,
            widths: vec![2, 8],
            oracle_tol: 1e-8,
            repeats: 3,
            network: NetworkConfig::default(),
            data: DataConfig::default(),
            train: desk_training(),
        }
    }
}

/// SGD settings that give a stable one-epoch run on the 2,000-sample subset.
fn desk_training() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.2,
        batch_size: 10,
        ..TrainConfig::default()
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<Vec<usize>>,
    pub depths: Option<Vec<usize>>,
    pub cycles: Option<usize>,
    pub tol: Option<f64>,
    pub mode: Option<TrainMode>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies flag values, then checks the result for `kind`.
    pub fn resolve(mut self, kind: ExperimentKind, flags: &Overrides) -> Result<Self, CliError> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(CliError::Config(format!(
                    "config describes a '{k}' experiment, not '{kind}'"
                )));
            }
        }
        self.kind = Some(kind);
        if let Some(out) = &flags.out {
            self.out = Some(out.clone());
        }
        if let Some(seed) = flags.seed {
            self.seed = seed;
        }
        if let Some(w) = &flags.workers {
            self.workers = Some(w.clone());
        }
        if let Some(d) = &flags.depths {
            self.depths = Some(d.clone());
        }
        if let Some(tol) = flags.tol {
            self.tol = tol;
            self.train.tol = tol;
        }
        if let Some(n) = flags.cycles {
            match kind {
                ExperimentKind::Train => self.train.mg_cycles = n,
                _ => self.max_cycles = n,
            }
        }
        if let Some(mode) = flags.mode {
            self.train.mode = mode;
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let kind = self.kind();
        self.solve_options().validate()?;
        if self.coarsening_factor < 2 {
            return Err(CliError::Config("coarsening_factor must be at least 2".into()));
        }
        let depths = self.depths();
        if depths.is_empty() {
            return Err(CliError::Config("no depths given".into()));
        }
        if matches!(kind, ExperimentKind::Train | ExperimentKind::Scale) && depths.len() != 1 {
            return Err(CliError::Config(format!("{kind} takes exactly one depth")));
        }
        for &n in &depths {
            if n == 0 || n % self.coarsening_factor != 0 {
                return Err(CliError::Config(format!(
                    "depth {n} is not a positive multiple of the coarsening factor {}",
                    self.coarsening_factor
                )));
            }
        }
        let workers = self.workers();
        if workers.is_empty() || workers.contains(&0) {
            return Err(CliError::Config("worker counts must be positive".into()));
        }
        if kind == ExperimentKind::OracleCheck {
            if self.num_seeds == 0 || self.widths.is_empty() || self.widths.contains(&0) {
                return Err(CliError::Config("oracle-check needs seeds and positive widths".into()));
            }
            if !(self.oracle_tol.is_finite() && self.oracle_tol > 0.0) {
                return Err(CliError::Config("oracle_tol must be positive".into()));
            }
        }
        if kind == ExperimentKind::Scale && self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        if kind == ExperimentKind::Train {
            self.train.validate()?;
            if !depths[0].is_multiple_of(self.train.coarsening_factor) {
                return Err(CliError::Config(format!(
                    "depth {} is not a multiple of the training coarsening factor {}",
                    depths[0], self.train.coarsening_factor
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ExperimentKind {
        self.kind.unwrap_or(ExperimentKind::Converge)
    }

    pub fn depths(&self) -> Vec<usize> {
        self.depths.clone().unwrap_or_else(|| match self.kind() {
            ExperimentKind::Converge => vec![64, 256, 1024],
            ExperimentKind::OracleCheck => vec![16, 64, 256],
            ExperimentKind::Train => vec![32],
            ExperimentKind::Scale => vec![1024],
        })
    }

    pub fn workers(&self) -> Vec<usize> {
        self.workers.clone().unwrap_or_else(|| match self.kind() {
            ExperimentKind::Scale => vec![1, 2, 4, 8],
            _ => vec![1],
        })
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_cycles: self.max_cycles,
        }
    }
}
