//! TOML run configuration and sweep specification.
//!
//! ```toml
//! config_version = 1
//! train_dir = "data/train"      # relative paths resolve against the config file
//! output_dir = "runs/k5"
//! depth = 5
//! channels = 16
//! kernel_size = 3
//! lambda = 0.1
//! tau_floor = 0.1
//! patch_size = 32
//! patch_count = 100
//! noise_sigma = 0.1
//! data_seed = 0
//! record_wall_clock = true
//! resume = false
//!
//! [train]
//! epochs = 50
//! batch_size = 10
//! algorithm = "lb-fb"           # or "sgd"
//! seed = 0
//! beta0 = 1e-3
//! gamma0 = 1.0
//! backtrack_up = 2.0
//! backtrack_down = 0.5
//! max_backtracks = 30
//! sgd_lr = 1e-4
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnn::{DEFAULT_TAU_FLOOR, TAU_FACTOR};
use crate::trainer::{Algorithm, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub train_dir: PathBuf,
    pub output_dir: PathBuf,
    pub depth: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub lambda: f64,
    pub tau_floor: f64,
    pub patch_size: usize,
    pub patch_count: usize,
    pub noise_sigma: f64,
    pub data_seed: u64,
    /// Off makes the `seconds` column empty so logs are byte-reproducible.
    pub record_wall_clock: bool,
    /// Continue from `checkpoint.bin` in the output directory if present.
    pub resume: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            train_dir: PathBuf::from("data/train"),
            output_dir: PathBuf::from("runs/default"),
            depth: 5,
            channels: 16,
            kernel_size: 3,
            lambda: 0.1,
            tau_floor: DEFAULT_TAU_FLOOR,
            patch_size: 32,
            patch_count: 100,
            noise_sigma: 0.1,
            data_seed: 0,
            record_wall_clock: true,
            resume: false,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and resolves relative data/output paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.train_dir = base.join(&cfg.train_dir);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.config_version != CONFIG_VERSION {
            return fail(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.tau_floor > 0.0 && self.tau_floor <= 2.0 - TAU_FACTOR + 1e-12) {
            return fail(format!("tau_floor must lie in (0, 0.2], got {}", self.tau_floor));
        }
        if self.patch_size < self.kernel_size {
            return fail(format!(
                "patch_size {} is smaller than kernel_size {}",
                self.patch_size, self.kernel_size
            ));
        }
        if self.patch_count == 0 {
            return fail("patch_count must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        self.train.validate()
    }
}

/// Variants are the cartesian product of the non-empty lists; an empty list
/// keeps the base configuration's value. Learning rates only multiply SGD
/// variants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub batch_sizes: Vec<usize>,
    pub depths: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub sgd_lrs: Vec<f64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read sweep spec {}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn variants(&self, base: &RunConfig) -> Result<Vec<Variant>> {
        let or_base = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
        let algorithms = if self.algorithms.is_empty() {
            vec![base.train.algorithm]
        } else {
            self.algorithms.clone()
        };
        let lrs = if self.sgd_lrs.is_empty() {
            vec![base.train.sgd_lr]
        } else {
            self.sgd_lrs.clone()
        };
        let mut out = Vec::new();
        for &algorithm in &algorithms {
            for depth in or_base(&self.depths, base.depth) {
                for batch_size in or_base(&self.batch_sizes, base.train.batch_size) {
                    let lr_list: &[f64] = if algorithm == Algorithm::Sgd { &lrs } else { &lrs[..1] };
                    for &lr in lr_list {
                        let mut cfg = base.clone();
                        cfg.depth = depth;
                        cfg.train.algorithm = algorithm;
                        cfg.train.batch_size = batch_size;
                        cfg.train.sgd_lr = lr;
                        if let Some(e) = self.epochs {
                            cfg.train.epochs = e;
                        }
                        let mut name = format!("{algorithm}_K{depth}_bs{batch_size}");
                        if algorithm == Algorithm::Sgd {
                            name.push_str(&format!("_lr{lr:e}"));
                        }
                        cfg.output_dir = base.output_dir.join(&name);
                        cfg.validate()?;
                        out.push(Variant { name, config: cfg });
                    }
                }
            }
        }
        Ok(out)
    }
}
