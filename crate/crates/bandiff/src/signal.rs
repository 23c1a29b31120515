//! Audio container type and synthetic signal generators.
//!
//! [`AudioSignal`] is the universal carrier throughout the pipeline: clean
//! signals, noisy diffusion states, and filtered bands are all mono sample
//! sequences with a sample rate. Samples are kept in 64-bit floats for the
//! math path; file storage quantizes to 32-bit (see [`crate::wav`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Mono sample sequence plus sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    /// Build a signal, validating that every sample is finite and the rate
    /// is positive.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample_rate must be > 0".into()));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square amplitude; 0 for an empty signal.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|s| s * s).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    /// Copy scaled by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Copy normalized to unit RMS. Signals with RMS below `1e-12` are
    /// returned unchanged rather than blown up.
    pub fn normalized(&self) -> Self {
        let rms = self.rms();
        if rms < 1e-12 {
            self.clone()
        } else {
            self.scaled(1.0 / rms)
        }
    }
}

/// Signal-to-noise ratio of `rec` against `ref_sig`, in dB.
///
/// Returns +infinity for a bit-exact match and -infinity when the reference
/// is silent but the error is not.
pub fn snr_db(ref_sig: &AudioSignal, rec: &AudioSignal) -> Result<f64> {
    if ref_sig.len() != rec.len() {
        return Err(Error::LengthMismatch {
            left: ref_sig.len(),
            right: rec.len(),
        });
    }
    let sig: f64 = ref_sig.samples().iter().map(|s| s * s).sum();
    let err: f64 = ref_sig
        .samples()
        .iter()
        .zip(rec.samples())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (sig / err).log10())
}

/// Parameter set for one synthetic test signal.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthSpec {
    /// Sum of sinusoids: `sum_j amps[j] * sin(2*pi*freqs_hz[j]*t)`.
    SineMixture { freqs_hz: Vec<f64>, amps: Vec<f64> },
    /// Linear chirp sweeping `from_hz` to `to_hz` over the duration.
    Chirp { from_hz: f64, to_hz: f64, amp: f64 },
    /// Unit-variance white Gaussian noise scaled by `amp`.
    WhiteNoise { amp: f64 },
    /// Unit impulses every `period_s` seconds.
    PulseTrain { period_s: f64, amp: f64 },
}

impl SynthSpec {
    fn max_component_hz(&self) -> f64 {
        match self {
            SynthSpec::SineMixture { freqs_hz, .. } => {
                freqs_hz.iter().cloned().fold(0.0, f64::max)
            }
            SynthSpec::Chirp { from_hz, to_hz, .. } => from_hz.max(*to_hz),
            SynthSpec::WhiteNoise { .. } => 0.0,
            SynthSpec::PulseTrain { .. } => 0.0,
        }
    }
}

/// Render a [`SynthSpec`] to samples. Pure function of
/// `(spec, duration, sample_rate, rng seed)`.
pub fn synthesize(
    spec: &SynthSpec,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut RngStream,
) -> Result<AudioSignal> {
    if duration_s <= 0.0 {
        return Err(Error::InvalidParameter("duration must be > 0".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let max_hz = spec.max_component_hz();
    if max_hz >= nyquist {
        return Err(Error::Aliasing {
            freq_hz: max_hz,
            nyquist_hz: nyquist,
        });
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    let dt = 1.0 / sample_rate as f64;
    let samples = match spec {
        SynthSpec::SineMixture { freqs_hz, amps } => {
            if freqs_hz.len() != amps.len() {
                return Err(Error::LengthMismatch {
                    left: freqs_hz.len(),
                    right: amps.len(),
                });
            }
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    freqs_hz
                        .iter()
                        .zip(amps)
                        .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                        .sum()
                })
                .collect()
        }
        SynthSpec::Chirp {
            from_hz,
            to_hz,
            amp,
        } => {
            // Instantaneous frequency f0 + (f1-f0)*t/dur; phase is its integral.
            let rate = (to_hz - from_hz) / (2.0 * duration_s);
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    let phase = 2.0 * std::f64::consts::PI * (from_hz * t + rate * t * t);
                    amp * phase.sin()
                })
                .collect()
        }
        SynthSpec::WhiteNoise { amp } => (0..n).map(|_| amp * rng.normal()).collect(),
        SynthSpec::PulseTrain { period_s, amp } => {
            if *period_s <= 0.0 {
                return Err(Error::InvalidParameter("pulse period must be > 0".into()));
            }
            let period = (period_s * sample_rate as f64).round().max(1.0) as usize;
            (0..n)
                .map(|k| if k % period == 0 { *amp } else { 0.0 })
                .collect()
        }
    };
    AudioSignal::new(samples, sample_rate)
}
