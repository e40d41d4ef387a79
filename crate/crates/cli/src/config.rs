//! Run configuration read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subnet_core::baselines::Variant;
use subnet_core::data::{SimSystemConfig, SimVariant, NOISE_STD_20DB, TEST_SAMPLES, TRAIN_SAMPLES, VAL_SAMPLES};
use subnet_core::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation and training.
    pub seed: u64,
    /// Worker threads for batch gradients; 1 is bit-reproducible.
    pub threads: usize,
    /// Run directory.
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

/// Where the train/validation/test records come from, in order of
/// precedence: three CSV files, one CSV record cut into three blocks, or
/// the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_u: usize,
    pub n_y: usize,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub record: Option<PathBuf>,
    /// Train, validation and test lengths when slicing `record`.
    pub splits: Option<[usize; 3]>,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_u: 1,
            n_y: 1,
            train: None,
            val: None,
            test: None,
            record: None,
            splits: None,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub variant: SimVariant,
    pub sigma_k: f64,
    /// Output noise of the train and validation records; the test record
    /// is always noiseless.
    pub sigma_e: f64,
    pub input_range: (f64, f64),
    pub sizes: [usize; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            variant: SimVariant::Base,
            sigma_k: 0.0,
            sigma_e: NOISE_STD_20DB,
            input_range: (-2.0, 2.0),
            sizes: [TRAIN_SAMPLES, VAL_SAMPLES, TEST_SAMPLES],
        }
    }
}

impl GeneratorConfig {
    pub fn template(&self) -> SimSystemConfig {
        SimSystemConfig {
            variant: self.variant,
            sigma_k: self.sigma_k,
            sigma_e: self.sigma_e,
            input_range: self.input_range,
            ..SimSystemConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Defaults to `model.bin` in the run directory.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub k_max: usize,
    /// Also write every k-step prediction (large).
    pub write_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: Split::Test,
            k_max: 100,
            write_predictions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub variants: Vec<Variant>,
    /// Wall-clock budget per variant in seconds.
    pub budget_s: Option<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            budget_s: Some(1500.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// `G(1)` and `G(T)` are tabulated for `T = 1..=max_t` with `N = 10 T`.
    pub max_t: usize,
    /// `(T, N)` pairs for the Monte-Carlo study.
    pub overlap_cases: Vec<(usize, usize)>,
    pub trials: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            max_t: 64,
            overlap_cases: vec![(4, 256), (8, 512), (16, 1024)],
            trials: 2000,
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative data and checkpoint paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    /// Parses JSON, reporting the path of the offending field on error.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config(if path == "." {
                inner.to_string()
            } else {
                format!("{path}: {inner}")
            })
        })
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = dir.join(&*x);
                }
            }
        };
        let d = &mut self.data;
        for p in [&mut d.train, &mut d.val, &mut d.test, &mut d.record] {
            fix(p);
        }
        fix(&mut self.eval.checkpoint);
        fix(&mut self.out);
    }

    /// Copies the top-level seed and thread count into the training section.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            threads: self.threads,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        let files = [&d.train, &d.val, &d.test].iter().filter(|p| p.is_some()).count();
        if files != 0 && files != 3 {
            return Err(CliError::Config("data: give all of train, val and test files or none".into()));
        }
        if d.record.is_some() != d.splits.is_some() {
            return Err(CliError::Config("data: record and splits go together".into()));
        }
        if d.n_u == 0 || d.n_y == 0 {
            return Err(CliError::Config("data: n_u and n_y must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if self.compare.variants.is_empty() {
            return Err(CliError::Config("compare.variants is empty".into()));
        }
        if let Some(b) = self.compare.budget_s {
            if b.is_nan() || b < 0.0 {
                return Err(CliError::Config("compare.budget_s must be non-negative".into()));
            }
        }
        self.effective_train().validate()?;
        Ok(())
    }
}
