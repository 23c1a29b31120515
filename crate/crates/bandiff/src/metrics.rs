//! Mel power spectrograms and the clamped mel-spectral SNR metric.
//!
//! The metric normalizes the reference to unit RMS, applies the SAME scale
//! to the reconstruction, computes mel power spectrograms z and ẑ of both,
//! and scores each (mel bin, frame) cell as
//! `clamp(10*log10(max(z, eps) / max((sqrt(z) - sqrt(zhat))^2, eps)), -25, +25)`.
//! Cells are averaged over time, then over each third of the mel axis
//! (low / mid / high), and the overall figure is the mean of the three
//! thirds. The symmetric clamp caps both how much a distortion can hurt and
//! how much a near-silent bin can help.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::{mel, mel_inv, reflect_index};
use crate::signal::AudioSignal;

/// Spectrogram and metric geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// Upper mel edge; `None` means Nyquist of the analyzed signal.
    pub fmax_hz: Option<f64>,
    /// The ε used for the RMS normalization, the distortion floor, and the
    /// log floor.
    pub eps_floor: f64,
    pub clamp_db: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 128,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: None,
            eps_floor: 1e-8,
            clamp_db: 25.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 {
            return Err(Error::InvalidParameter("n_fft must be >= 2".into()));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::InvalidParameter(format!(
                "hop {} must be in 1..=n_fft ({})",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels < 3 {
            return Err(Error::InvalidParameter("n_mels must be >= 3".into()));
        }
        if self.eps_floor <= 0.0 {
            return Err(Error::InvalidParameter("eps_floor must be > 0".into()));
        }
        if self.clamp_db <= 0.0 {
            return Err(Error::InvalidParameter("clamp_db must be > 0".into()));
        }
        Ok(())
    }
}

/// Mel power values, `n_mels` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<Vec<f64>>,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.len()
    }

    pub fn n_frames(&self) -> usize {
        self.values.first().map_or(0, |r| r.len())
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Per-third and overall clamped SNR figures, in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelSnrReport {
    pub snr_low: f64,
    pub snr_mid: f64,
    pub snr_high: f64,
    pub snr_avg: f64,
}

/// Triangular mel filter rows over the one-sided FFT bins, HTK mel scale,
/// area-normalized so each triangle integrates to the same band power.
pub fn mel_filter_matrix(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Result<Vec<Vec<f64>>> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin_hz >= 0.0 && fmin_hz < fmax_hz && fmax_hz <= nyquist) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= fmin < fmax <= Nyquist, got fmin={fmin_hz}, fmax={fmax_hz}, Nyquist={nyquist}"
        )));
    }
    let mel_lo = mel(fmin_hz)?;
    let mel_hi = mel(fmax_hz)?;
    let hz_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_inv(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect::<Result<_>>()?;
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut rows = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, mid, hi) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
        let norm = 2.0 / (hi - lo);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (mid - lo);
                let down = (hi - f) / (hi - mid);
                norm * up.min(down).max(0.0)
            })
            .collect();
        if row.iter().all(|&w| w == 0.0) {
            log::warn!(
                "mel band {m} covers no FFT bin at n_fft {n_fft}, sample rate {sample_rate}; \
                 its spectrogram row will be all zeros"
            );
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Center frequencies (triangle peaks) of the mel bands, in Hz.
pub fn mel_band_centers(n_mels: usize, fmin_hz: f64, fmax_hz: f64) -> Result<Vec<f64>> {
    let mel_lo = mel(fmin_hz)?;
    let mel_hi = mel(fmax_hz)?;
    (1..=n_mels)
        .map(|i| mel_inv(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Core spectrogram on a raw sample slice; frames are centered via reflect
/// padding of n_fft/2 on each side, so n_frames = floor(len/hop) + 1.
fn mel_power_core(samples: &[f64], sample_rate: u32, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if samples.len() < cfg.n_fft {
        return Err(Error::SignalTooShort {
            len: samples.len(),
            min: cfg.n_fft,
        });
    }
    let fmax = cfg.fmax_hz.unwrap_or(sample_rate as f64 / 2.0);
    let mel_rows = mel_filter_matrix(sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin_hz, fmax)?;
    let window = hann_periodic(cfg.n_fft);
    let half = cfg.n_fft / 2;
    let n = samples.len();
    let n_frames = n / cfg.hop + 1;
    let n_bins = cfg.n_fft / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];

    let mut power = vec![vec![0.0f64; n_frames]; n_bins];
    for frame in 0..n_frames {
        let start = frame as isize * cfg.hop as isize - half as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + i as isize, n);
            *slot = Complex::new(samples[idx] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, col) in power.iter_mut().enumerate() {
            col[frame] = buf[k].norm_sqr();
        }
    }

    let values = mel_rows
        .iter()
        .map(|row| {
            (0..n_frames)
                .map(|frame| {
                    row.iter()
                        .enumerate()
                        .map(|(k, &w)| w * power[k][frame])
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(values)
}

/// Mel power spectrogram of a signal under `cfg`.
pub fn mel_power_spectrogram(x: &AudioSignal, cfg: &MelConfig) -> Result<MelSpectrogram> {
    Ok(MelSpectrogram {
        values: mel_power_core(x.samples(), x.sample_rate(), cfg)?,
    })
}

/// Contiguous index ranges of the low / mid / high mel thirds; remainder
/// bins go to the lower thirds (80 splits as 27/27/26).
fn third_ranges(n_mels: usize) -> [std::ops::Range<usize>; 3] {
    let base = n_mels / 3;
    let rem = n_mels % 3;
    let s0 = base + usize::from(rem > 0);
    let s1 = base + usize::from(rem > 1);
    [0..s0, s0..s0 + s1, s0 + s1..n_mels]
}

/// Clamped mel-SNR of `rec` against `ref_sig`.
///
/// Unequal lengths are cropped to the shorter signal with a warning;
/// mismatched sample rates are an error.
pub fn mel_snr(ref_sig: &AudioSignal, rec: &AudioSignal, cfg: &MelConfig) -> Result<MelSnrReport> {
    cfg.validate()?;
    if ref_sig.sample_rate() != rec.sample_rate() {
        return Err(Error::SampleRateMismatch {
            left: ref_sig.sample_rate(),
            right: rec.sample_rate(),
        });
    }
    if ref_sig.len() != rec.len() {
        log::warn!(
            "mel_snr: cropping to the shorter signal ({} vs {} samples)",
            ref_sig.len(),
            rec.len()
        );
    }
    let len = ref_sig.len().min(rec.len());
    if len < cfg.n_fft {
        return Err(Error::SignalTooShort {
            len,
            min: cfg.n_fft,
        });
    }
    let ref_s = &ref_sig.samples()[..len];
    let rec_s = &rec.samples()[..len];
    // One scale for both signals: ε + RMS of the reference.
    let rms = (ref_s.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
    let scale = cfg.eps_floor + rms;
    let scaled_ref: Vec<f64> = ref_s.iter().map(|s| s / scale).collect();
    let scaled_rec: Vec<f64> = rec_s.iter().map(|s| s / scale).collect();
    let z = mel_power_core(&scaled_ref, ref_sig.sample_rate(), cfg)?;
    let zh = mel_power_core(&scaled_rec, rec.sample_rate(), cfg)?;

    let per_mel: Vec<f64> = z
        .iter()
        .zip(&zh)
        .map(|(zr, hr)| {
            let mut acc = 0.0;
            for (&a, &b) in zr.iter().zip(hr) {
                let delta = (a.sqrt() - b.sqrt()).powi(2).max(cfg.eps_floor);
                let s = 10.0 * (a.max(cfg.eps_floor) / delta).log10();
                acc += s.clamp(-cfg.clamp_db, cfg.clamp_db);
            }
            acc / zr.len() as f64
        })
        .collect();

    let [lo, mid, hi] = third_ranges(cfg.n_mels);
    let band_mean = |r: std::ops::Range<usize>| -> f64 {
        let n = r.len() as f64;
        per_mel[r].iter().sum::<f64>() / n
    };
    let snr_low = band_mean(lo);
    let snr_mid = band_mean(mid);
    let snr_high = band_mean(hi);
    Ok(MelSnrReport {
        snr_low,
        snr_mid,
        snr_high,
        snr_avg: (snr_low + snr_mid + snr_high) / 3.0,
    })
}

/// True when scaling both signals by `a` moves every report figure by less
/// than 1e-9 dB (the shared normalization factor cancels the scale).
pub fn scale_invariance_check(
    ref_sig: &AudioSignal,
    rec: &AudioSignal,
    a: f64,
    cfg: &MelConfig,
) -> Result<bool> {
    if a <= 0.0 {
        return Err(Error::InvalidParameter("scale must be > 0".into()));
    }
    let base = mel_snr(ref_sig, rec, cfg)?;
    let scaled = mel_snr(&ref_sig.scaled(a), &rec.scaled(a), cfg)?;
    let diff = (base.snr_low - scaled.snr_low)
        .abs()
        .max((base.snr_mid - scaled.snr_mid).abs())
        .max((base.snr_high - scaled.snr_high).abs())
        .max((base.snr_avg - scaled.snr_avg).abs());
    Ok(diff < 1e-9)
}
