//! Pipeline configuration: one flat, typed key-value document with
//! explicit units in the key names. Unknown keys are hard errors, so a
//! typo never silently falls back to a default.
//!
//! Defaults are the published hyperparameters where the source material
//! states them (power schedule p = 7.5, beta endpoints 1e-5 and 2.9e-2,
//! T = 1000, 8 EQ bands at rho = 0.4, 4 diffusion bands, 20 sampling
//! steps) and desk-scale choices everywhere else: 8 kHz audio, a small
//! denoiser, and a CPU-sized training loop. [`PipelineConfig::preset_24k`]
//! carries the same hyperparameters at 24 kHz for manual runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioner::FrameSpec;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::schedule::{cosine_schedule, linear_schedule, power_schedule, NoiseSchedule};

/// Which beta-sequence family the run trains and samples with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Power,
    Linear,
    Cosine,
}

/// Every tunable of the pipeline, flat so the on-disk form stays a plain
/// list of `key = value` lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub sample_rate_hz: u32,

    /// EQ processor: band count, rebalancing exponent, FIR length, and
    /// the Monte-Carlo budget for the noise-side statistics.
    pub eq_n_bands: usize,
    pub eq_rho: f64,
    pub eq_kernel_len: usize,
    pub eq_noise_samples: usize,

    /// Band split driving the per-band diffusion models; independent of
    /// the EQ bands.
    pub diffusion_n_bands: usize,
    pub diffusion_kernel_len: usize,

    pub schedule_variant: ScheduleKind,
    pub schedule_p: f64,
    pub schedule_beta0: f64,
    pub schedule_beta_t: f64,
    pub schedule_cosine_offset: f64,
    pub schedule_train_steps: usize,

    /// Reverse-chain step count used at decode time (subsampled plan).
    pub sampling_steps: usize,

    pub denoiser_depth: usize,
    pub denoiser_base_channels: usize,
    pub denoiser_growth: usize,
    pub denoiser_kernel: usize,
    pub denoiser_t_embed_dim: usize,

    /// Token conditioner: codebook size, residual book count, frame
    /// geometry in samples, and mel feature dimension.
    pub conditioner_k: usize,
    pub conditioner_n_books: usize,
    pub conditioner_frame_len: usize,
    pub conditioner_hop: usize,
    pub conditioner_n_mels: usize,
    pub conditioner_fit_iters: usize,

    pub training_batch: usize,
    pub training_iters: usize,
    /// Window, in samples, cropped from each signal per training example.
    pub training_crop_len: usize,
    pub training_lr: f64,

    /// Master seed; every worker derives a labeled child stream from it.
    pub seed: u64,

    pub corpus_dir: PathBuf,
    pub artifacts_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 8_000,
            eq_n_bands: 8,
            eq_rho: 0.4,
            eq_kernel_len: 255,
            eq_noise_samples: 200_000,
            diffusion_n_bands: 4,
            diffusion_kernel_len: 255,
            schedule_variant: ScheduleKind::Power,
            schedule_p: 7.5,
            schedule_beta0: 1e-5,
            schedule_beta_t: 2.9e-2,
            schedule_cosine_offset: 0.008,
            schedule_train_steps: 1_000,
            sampling_steps: 20,
            denoiser_depth: 2,
            denoiser_base_channels: 8,
            denoiser_growth: 4,
            denoiser_kernel: 5,
            denoiser_t_embed_dim: 16,
            conditioner_k: 64,
            conditioner_n_books: 2,
            conditioner_frame_len: 256,
            conditioner_hop: 128,
            conditioner_n_mels: 64,
            conditioner_fit_iters: 20,
            training_batch: 16,
            training_iters: 2_000,
            training_crop_len: 1_024,
            training_lr: 1e-3,
            seed: 1_234,
            corpus_dir: PathBuf::from("corpus"),
            artifacts_dir: PathBuf::from("artifacts"),
        }
    }
}

impl PipelineConfig {
    /// Same hyperparameters at 24 kHz with frame geometry and crop scaled
    /// to keep durations comparable; meant for manual listening runs, not
    /// CI.
    pub fn preset_24k() -> Self {
        Self {
            sample_rate_hz: 24_000,
            conditioner_frame_len: 768,
            conditioner_hop: 384,
            training_crop_len: 6_144,
            ..Self::default()
        }
    }

    /// Parse a flat TOML document; missing keys take defaults, unknown
    /// keys are errors. The result is validated before being returned.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml()).map_err(|e| Error::Io {
            path: path.as_ref().to_path_buf(),
            source: e,
        })
    }

    /// Denoiser shape with the tied fields filled in: stride is fixed at
    /// 4, the timestep table covers the training schedule, and the
    /// conditioning width equals the mel feature dimension.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            depth: self.denoiser_depth,
            base_channels: self.denoiser_base_channels,
            growth: self.denoiser_growth,
            kernel: self.denoiser_kernel,
            stride: 4,
            t_embed_dim: self.denoiser_t_embed_dim,
            t_max: self.schedule_train_steps,
            cond_dim: self.conditioner_n_mels,
        }
    }

    pub fn frame_spec(&self) -> FrameSpec {
        FrameSpec {
            frame_len: self.conditioner_frame_len,
            hop: self.conditioner_hop,
            sample_rate: self.sample_rate_hz,
            n_mels: self.conditioner_n_mels,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.schedule_variant {
            ScheduleKind::Power => power_schedule(
                self.schedule_p,
                self.schedule_beta0,
                self.schedule_beta_t,
                self.schedule_train_steps,
            ),
            ScheduleKind::Linear => linear_schedule(
                self.schedule_beta0,
                self.schedule_beta_t,
                self.schedule_train_steps,
            ),
            ScheduleKind::Cosine => {
                cosine_schedule(self.schedule_train_steps, self.schedule_cosine_offset)
            }
        }
    }

    pub fn eq_bank(&self) -> Result<FilterBank> {
        FilterBank::design(self.sample_rate_hz, self.eq_n_bands, self.eq_kernel_len)
    }

    pub fn diffusion_bank(&self) -> Result<FilterBank> {
        FilterBank::design(
            self.sample_rate_hz,
            self.diffusion_n_bands,
            self.diffusion_kernel_len,
        )
    }

    /// Cross-field checks plus delegation to every sub-config's own
    /// validation; called on load so a bad file never reaches the
    /// pipeline.
    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate()?;
        self.frame_spec().validate()?;
        self.schedule()?;
        self.eq_bank()?;
        self.diffusion_bank()?;
        if !(0.0..=1.0).contains(&self.eq_rho) {
            return Err(Error::Config(format!(
                "eq_rho must lie in [0, 1], got {}",
                self.eq_rho
            )));
        }
        if self.sampling_steps < 1 || self.sampling_steps > self.schedule_train_steps {
            return Err(Error::Config(format!(
                "sampling_steps must lie in 1..={}, got {}",
                self.schedule_train_steps, self.sampling_steps
            )));
        }
        if self.conditioner_k < 2 {
            return Err(Error::Config("conditioner_k must be >= 2".into()));
        }
        if self.conditioner_n_books < 1 || self.conditioner_fit_iters < 1 {
            return Err(Error::Config(
                "conditioner_n_books and conditioner_fit_iters must be >= 1".into(),
            ));
        }
        if self.training_batch < 1 || self.training_iters < 1 {
            return Err(Error::Config(
                "training_batch and training_iters must be >= 1".into(),
            ));
        }
        if self.training_crop_len < self.conditioner_frame_len {
            return Err(Error::Config(format!(
                "training_crop_len {} shorter than one conditioner frame {}",
                self.training_crop_len, self.conditioner_frame_len
            )));
        }
        if !(self.training_lr.is_finite() && self.training_lr > 0.0) {
            return Err(Error::Config(format!(
                "training_lr must be finite and positive, got {}",
                self.training_lr
            )));
        }
        if self.eq_noise_samples < crate::eq::MIN_NOISE_SAMPLES {
            return Err(Error::Config(format!(
                "eq_noise_samples must be >= {}, got {}",
                crate::eq::MIN_NOISE_SAMPLES,
                self.eq_noise_samples
            )));
        }
        if self.corpus_dir.as_os_str().is_empty() || self.artifacts_dir.as_os_str().is_empty() {
            return Err(Error::Config(
                "corpus_dir and artifacts_dir must be non-empty".into(),
            ));
        }
        Ok(())
    }
}
