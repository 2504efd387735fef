//! File-based entry points behind the `lbpnn` binary.
//!
//! Errors are split into usage errors (bad configuration or unreadable
//! inputs, exit code 2) and runtime failures (exit code 1).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SweepSpec};
use crate::data::{add_noise, centre_crop, load_image, load_images, save_image, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricReport};
use crate::prox::LinfBall;
use crate::tensor::Image;
use crate::trainer::{init_params, train_from, EpochLog, TrainConfig, TrainState};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const MANIFEST_FILE: &str = "dataset.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_STATUS_FILE: &str = "sweep_status.csv";
pub const LOG_HEADER: [&str; 9] = [
    "epoch",
    "algorithm",
    "loss_l2",
    "loss_E",
    "beta",
    "gamma",
    "lr",
    "backtracks",
    "seconds",
];
/// Evaluation images are centre-cropped to multiples of this.
pub const EVAL_CROP: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(Error),
    #[error("{0}")]
    Runtime(Error),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 2,
            CommandError::Runtime(_) => 1,
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, CommandError>;

fn usage(e: Error) -> CommandError {
    CommandError::Usage(e)
}

fn runtime(e: Error) -> CommandError {
    CommandError::Runtime(e)
}

pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub state: TrainState,
    /// Rows written by this invocation.
    pub log: Vec<EpochLog>,
}

/// `train <config>`
pub fn cmd_train(config_path: &Path) -> CmdResult<TrainSummary> {
    let cfg = RunConfig::load(config_path).map_err(usage)?;
    let dataset = load_dataset(&cfg)?;
    train_with_config(&cfg, &dataset).map_err(runtime)
}

pub fn load_dataset(cfg: &RunConfig) -> CmdResult<Dataset> {
    if !cfg.train_dir.is_dir() {
        return Err(usage(Error::Data(format!(
            "training directory {} does not exist",
            cfg.train_dir.display()
        ))));
    }
    Dataset::from_dir(&cfg.train_dir, cfg.patch_size, cfg.patch_count, cfg.noise_sigma, cfg.data_seed).map_err(usage)
}

fn initial_state(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainState> {
    let ckpt_path = cfg.output_dir.join(CHECKPOINT_FILE);
    if cfg.resume && ckpt_path.exists() {
        let state = Checkpoint::load(&ckpt_path)?
            .into_state()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state to resume".into()))?;
        let p = &state.params;
        let expected = (cfg.depth, cfg.channels, (cfg.kernel_size, cfg.kernel_size), (cfg.patch_size, cfg.patch_size));
        if (p.depth(), p.channels(), p.kernel_size(), p.input_shape()) != expected {
            return Err(Error::Checkpoint(
                "checkpoint architecture does not match the configuration".into(),
            ));
        }
        log::info!("resuming after epoch {}", state.epoch);
        return Ok(state);
    }
    let ball = LinfBall::new(cfg.lambda)?;
    let shape = (cfg.patch_size, cfg.patch_size);
    let params = init_params(shape, cfg.depth, cfg.channels, cfg.kernel_size, ball, cfg.tau_floor, cfg.train.seed)?;
    TrainState::new(params, &cfg.train, &dataset.samples)
}

fn log_writer(path: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !append {
        w.write_record(LOG_HEADER)?;
        w.flush()?;
    }
    Ok(w)
}

/// Trains one configuration on an already-built dataset, writing the log,
/// checkpoint, config snapshot and dataset manifest into `cfg.output_dir`.
pub fn train_with_config(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(CONFIG_SNAPSHOT), cfg.to_toml())?;
    dataset.write_manifest(&cfg.output_dir.join(MANIFEST_FILE))?;

    let mut state = initial_state(cfg, dataset)?;
    let resumed = state.epoch > 0;
    let log_path = cfg.output_dir.join(LOG_FILE);
    let mut writer = log_writer(&log_path, resumed && log_path.exists())?;
    let remaining = cfg.train.epochs.saturating_sub(state.epoch);
    if remaining == 0 {
        return Ok(TrainSummary {
            output_dir: cfg.output_dir.clone(),
            state,
            log: Vec::new(),
        });
    }
    let run_cfg = TrainConfig {
        epochs: remaining,
        ..cfg.train.clone()
    };
    let ckpt_path = cfg.output_dir.join(CHECKPOINT_FILE);
    let mut log = train_from(&mut state, &run_cfg, &dataset.samples, |row, st| {
        let mut row = row.clone();
        if !cfg.record_wall_clock {
            row.seconds = None;
        }
        writer.serialize(&row)?;
        writer.flush()?;
        Checkpoint::from_state(st).save(&ckpt_path)
    })?;
    if !cfg.record_wall_clock {
        log.iter_mut().for_each(|r| r.seconds = None);
    }
    Ok(TrainSummary {
        output_dir: cfg.output_dir.clone(),
        state,
        log,
    })
}

/// `denoise <ckpt> <in> <out>`: the network output clamped to `[0, 1]`,
/// written as an 8-bit image.
pub fn cmd_denoise(checkpoint: &Path, input: &Path, output: &Path) -> CmdResult<Image> {
    let params = Checkpoint::load(checkpoint).map_err(usage)?.params;
    let z = load_image(input).map_err(usage)?;
    let (kh, kw) = params.kernel_size();
    if z.height() < kh || z.width() < kw {
        return Err(usage(Error::dim(
            format!("image at least {kh}x{kw} (the network is fully convolutional; any larger size works)"),
            format!("{}x{}", z.height(), z.width()),
        )));
    }
    let out = params
        .with_input_shape(z.shape())
        .denoise(&z)
        .map_err(runtime)?
        .map(|v| v.clamp(0.0, 1.0));
    save_image(output, &out).map_err(runtime)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub image: String,
    pub psnr_noisy: f64,
    pub ssim_noisy: f64,
    pub psnr_denoised: f64,
    pub ssim_denoised: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub noisy: MetricReport,
    pub denoised: MetricReport,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        let (a, b) = (&self.noisy, &self.denoised);
        w.serialize(EvalRow {
            image: "mean".into(),
            psnr_noisy: a.psnr_mean,
            ssim_noisy: a.ssim_mean,
            psnr_denoised: b.psnr_mean,
            ssim_denoised: b.ssim_mean,
        })?;
        w.serialize(EvalRow {
            image: "std".into(),
            psnr_noisy: a.psnr_std,
            ssim_noisy: a.ssim_std,
            psnr_denoised: b.psnr_std,
            ssim_denoised: b.ssim_std,
        })?;
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!(
                "{:<32} noisy {:>8.4} dB / {:.4}   denoised {:>8.4} dB / {:.4}\n",
                r.image, r.psnr_noisy, r.ssim_noisy, r.psnr_denoised, r.ssim_denoised
            ));
        }
        s.push_str(&format!(
            "noisy    PSNR {:.4} ± {:.4} dB  SSIM {:.4} ± {:.4}\n",
            self.noisy.psnr_mean, self.noisy.psnr_std, self.noisy.ssim_mean, self.noisy.ssim_std
        ));
        s.push_str(&format!(
            "denoised PSNR {:.4} ± {:.4} dB  SSIM {:.4} ± {:.4}\n",
            self.denoised.psnr_mean, self.denoised.psnr_std, self.denoised.ssim_mean, self.denoised.ssim_std
        ));
        s
    }
}

/// `eval <ckpt> <dir> --sigma --seed`: image `i` (lexicographic order) is
/// centre-cropped, corrupted with noise stream `i` and denoised.
pub fn cmd_eval(checkpoint: &Path, clean_dir: &Path, sigma: f64, seed: u64, csv_out: Option<&Path>) -> CmdResult<EvalReport> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(usage(Error::Config(format!("sigma must be non-negative, got {sigma}"))));
    }
    let params = Checkpoint::load(checkpoint).map_err(usage)?.params;
    let images = load_images(clean_dir).map_err(usage)?;
    let rows = images
        .par_iter()
        .enumerate()
        .map(|(i, loaded)| {
            let clean = centre_crop(&loaded.image, EVAL_CROP)?;
            let noisy = add_noise(&clean, sigma, seed, i as u64);
            let den = params.with_input_shape(clean.shape()).denoise(&noisy)?;
            let name = loaded
                .path
                .file_name()
                .map_or_else(|| loaded.path.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok(EvalRow {
                image: name,
                psnr_noisy: psnr(&clean, &noisy)?,
                ssim_noisy: ssim(&clean, &noisy)?,
                psnr_denoised: psnr(&clean, &den)?,
                ssim_denoised: ssim(&clean, &den)?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(usage)?;
    let noisy = MetricReport::from_values(
        rows.iter().map(|r| r.psnr_noisy).collect(),
        rows.iter().map(|r| r.ssim_noisy).collect(),
    )
    .map_err(runtime)?;
    let denoised = MetricReport::from_values(
        rows.iter().map(|r| r.psnr_denoised).collect(),
        rows.iter().map(|r| r.ssim_denoised).collect(),
    )
    .map_err(runtime)?;
    let report = EvalReport { rows, noisy, denoised };
    if let Some(path) = csv_out {
        report.write_csv(path).map_err(runtime)?;
    }
    Ok(report)
}

pub struct SweepOutcome {
    pub name: String,
    pub result: std::result::Result<Vec<EpochLog>, String>,
}

/// `sweep <config> <spec>`: every variant trains on the same dataset into
/// `output_dir/<variant>`; logs are merged into `output_dir/sweep.csv`. A
/// failing variant is recorded in `sweep_status.csv` and the sweep moves on.
pub fn cmd_sweep(config_path: &Path, spec_path: &Path) -> CmdResult<Vec<SweepOutcome>> {
    let base = RunConfig::load(config_path).map_err(usage)?;
    let spec = SweepSpec::load(spec_path).map_err(usage)?;
    let variants = spec.variants(&base).map_err(usage)?;
    let dataset = load_dataset(&base)?;
    fs::create_dir_all(&base.output_dir).map_err(|e| runtime(e.into()))?;

    let mut outcomes = Vec::with_capacity(variants.len());
    for v in &variants {
        log::info!("sweep variant {}", v.name);
        let result = train_with_config(&v.config, &dataset)
            .map(|s| s.log)
            .map_err(|e| e.to_string());
        if let Err(msg) = &result {
            log::error!("variant {} failed: {msg}", v.name);
        }
        outcomes.push(SweepOutcome {
            name: v.name.clone(),
            result,
        });
    }
    write_sweep_files(&base.output_dir, &outcomes).map_err(runtime)?;
    Ok(outcomes)
}

fn write_sweep_files(dir: &Path, outcomes: &[SweepOutcome]) -> Result<()> {
    let file = fs::File::create(dir.join(SWEEP_FILE))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let mut header = vec!["variant"];
    header.extend(LOG_HEADER);
    w.write_record(&header)?;
    for o in outcomes {
        if let Ok(rows) = &o.result {
            for row in rows {
                w.serialize((o.name.as_str(), row))?;
            }
        }
    }
    w.flush()?;

    let mut status = csv::Writer::from_path(dir.join(SWEEP_STATUS_FILE))?;
    status.write_record(["variant", "status", "message"])?;
    for o in outcomes {
        match &o.result {
            Ok(_) => status.write_record([o.name.as_str(), "ok", ""])?,
            Err(m) => status.write_record([o.name.as_str(), "failed", m.as_str()])?,
        }
    }
    status.flush()?;
    Ok(())
}

/// `synth <dir>`: writes seeded piecewise-smooth PNG images.
pub fn cmd_synth(dir: &Path, count: usize, size: (usize, usize), seed: u64) -> CmdResult<Vec<PathBuf>> {
    if count == 0 || size.0 == 0 || size.1 == 0 {
        return Err(usage(Error::Config("count and size must be positive".into())));
    }
    crate::synthetic::write_dataset(dir, count, size, seed).map_err(runtime)
}

/// Prints a message to stderr and returns the exit code for it.
pub fn report_error(e: &CommandError) -> i32 {
    let kind = match e {
        CommandError::Usage(_) => "error",
        CommandError::Runtime(_) => "runtime failure",
    };
    let _ = writeln!(std::io::stderr(), "lbpnn: {kind}: {e}");
    e.exit_code()
}
