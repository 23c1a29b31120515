//! Mel-spaced FIR filterbank: split a signal into complementary frequency
//! bands and merge them back by summation.
//!
//! Band kernels are built as differences of Hann-windowed-sinc low-pass
//! filters: band 0 is `LP(c_1)`, interior band i is `LP(c_{i+1}) - LP(c_i)`,
//! and the top band is `delta - LP(c_{B-1})`. The telescoping sum makes the
//! kernels add up to a discrete delta exactly, so `merge(split(x))`
//! reconstructs `x` up to floating-point error regardless of kernel length.
//!
//! Splitting applies each kernel as a zero-phase centered convolution with
//! reflect padding, so bands stay aligned with the input and no boundary
//! energy is lost.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioSignal;

/// HTK mel scale: `m = 2595 * log10(1 + f/700)`.
pub fn mel(f_hz: f64) -> Result<f64> {
    if f_hz < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "mel: negative frequency {f_hz}"
        )));
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

/// Inverse of [`mel`].
pub fn mel_inv(m: f64) -> Result<f64> {
    if m < 0.0 {
        return Err(Error::InvalidParameter(format!("mel_inv: negative mel {m}")));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// How band cutoffs are spaced between 0 and Nyquist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandSpacing {
    /// Equal spacing on the mel scale (the default everywhere).
    Mel,
    /// Equal spacing in Hz; used by tests with analytically known band
    /// energies.
    Linear,
}

/// Serializable filterbank description; kernels are rebuilt from it
/// deterministically, so saved and reloaded banks are bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FilterBankProfile {
    pub sample_rate: u32,
    pub n_bands: usize,
    pub kernel_len: usize,
    pub cutoffs_hz: Vec<f64>,
}

/// FIR analysis/synthesis bank over `n_bands` complementary bands.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    sample_rate: u32,
    kernel_len: usize,
    cutoffs_hz: Vec<f64>,
    kernels: Vec<Vec<f64>>,
}

/// Band-decomposed signal; produced by [`FilterBank::split`].
#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    bands: Vec<AudioSignal>,
}

impl BandSet {
    /// Assemble a band set directly, enforcing equal lengths and rates.
    pub fn new(bands: Vec<AudioSignal>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::InvalidParameter("BandSet needs >= 1 band".into()));
        }
        let len0 = bands[0].len();
        let sr0 = bands[0].sample_rate();
        for b in &bands[1..] {
            if b.len() != len0 {
                return Err(Error::LengthMismatch {
                    left: len0,
                    right: b.len(),
                });
            }
            if b.sample_rate() != sr0 {
                return Err(Error::SampleRateMismatch {
                    left: sr0,
                    right: b.sample_rate(),
                });
            }
        }
        Ok(Self { bands })
    }

    pub fn bands(&self) -> &[AudioSignal] {
        &self.bands
    }

    pub fn band(&self, i: usize) -> &AudioSignal {
        &self.bands[i]
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn into_bands(self) -> Vec<AudioSignal> {
        self.bands
    }
}

/// Hann-windowed sinc low-pass prototype, normalized to unit DC gain.
fn lowpass_kernel(cutoff_hz: f64, sample_rate: u32, kernel_len: usize) -> Vec<f64> {
    let mid = (kernel_len - 1) as f64 / 2.0;
    let fc = cutoff_hz / sample_rate as f64;
    let mut h: Vec<f64> = (0..kernel_len)
        .map(|n| {
            let t = n as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / (kernel_len - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

fn delta_kernel(kernel_len: usize) -> Vec<f64> {
    let mut d = vec![0.0; kernel_len];
    d[kernel_len / 2] = 1.0;
    d
}

/// Map any integer index onto [0, n) by reflecting at both ends without
/// repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centered symmetric-kernel convolution with reflect padding; output has
/// the input's length and zero phase.
fn convolve_zero_phase(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = kernel.len() / 2;
    let mut y = vec![0.0; n];
    for (k, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        if k >= half && k + half < n {
            let base = k - half;
            for (j, &h) in kernel.iter().enumerate() {
                acc += h * x[base + j];
            }
        } else {
            for (j, &h) in kernel.iter().enumerate() {
                let idx = k as isize + j as isize - half as isize;
                acc += h * x[reflect_index(idx, n)];
            }
        }
        *out = acc;
    }
    y
}

impl FilterBank {
    /// Design a bank with cutoffs equally spaced on the mel scale.
    pub fn design(sample_rate: u32, n_bands: usize, kernel_len: usize) -> Result<Self> {
        Self::design_with_spacing(sample_rate, n_bands, kernel_len, BandSpacing::Mel)
    }

    /// Design a bank with the given cutoff spacing rule.
    pub fn design_with_spacing(
        sample_rate: u32,
        n_bands: usize,
        kernel_len: usize,
        spacing: BandSpacing,
    ) -> Result<Self> {
        if n_bands < 1 {
            return Err(Error::InvalidParameter("n_bands must be >= 1".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample_rate must be > 0".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let cutoffs = match spacing {
            BandSpacing::Mel => {
                let top = mel(nyquist)?;
                (1..n_bands)
                    .map(|i| mel_inv(i as f64 * top / n_bands as f64))
                    .collect::<Result<Vec<f64>>>()?
            }
            BandSpacing::Linear => (1..n_bands)
                .map(|i| i as f64 * nyquist / n_bands as f64)
                .collect(),
        };
        Self::from_cutoffs(sample_rate, kernel_len, cutoffs)
    }

    /// Build a bank from explicit interior cutoffs (ascending, inside the
    /// open interval (0, Nyquist)).
    pub fn from_cutoffs(sample_rate: u32, kernel_len: usize, cutoffs_hz: Vec<f64>) -> Result<Self> {
        if kernel_len % 2 == 0 || kernel_len < 63 {
            return Err(Error::InvalidParameter(format!(
                "kernel_len must be odd and >= 63, got {kernel_len}"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        for pair in cutoffs_hz.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidParameter(format!(
                    "cutoffs not strictly ascending: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(&c) = cutoffs_hz.iter().find(|&&c| c <= 0.0 || c >= nyquist) {
            return Err(Error::InvalidParameter(format!(
                "cutoff {c} Hz outside (0, {nyquist})"
            )));
        }
        if let Some(&first) = cutoffs_hz.first() {
            let transition_limit = 4.0 / kernel_len as f64 * nyquist;
            if first < transition_limit {
                log::warn!(
                    "lowest band ends at {first:.1} Hz, below the ~{transition_limit:.1} Hz \
                     transition width a {kernel_len}-tap kernel can realize; expect leakage"
                );
            }
        }
        let n_bands = cutoffs_hz.len() + 1;
        let lowpasses: Vec<Vec<f64>> = cutoffs_hz
            .iter()
            .map(|&c| lowpass_kernel(c, sample_rate, kernel_len))
            .collect();
        let delta = delta_kernel(kernel_len);
        let mut kernels = Vec::with_capacity(n_bands);
        if n_bands == 1 {
            kernels.push(delta);
        } else {
            kernels.push(lowpasses[0].clone());
            for i in 1..n_bands - 1 {
                kernels.push(
                    lowpasses[i]
                        .iter()
                        .zip(&lowpasses[i - 1])
                        .map(|(hi, lo)| hi - lo)
                        .collect(),
                );
            }
            kernels.push(
                delta
                    .iter()
                    .zip(&lowpasses[n_bands - 2])
                    .map(|(d, lo)| d - lo)
                    .collect(),
            );
        }
        Ok(Self {
            sample_rate,
            kernel_len,
            cutoffs_hz,
            kernels,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_bands(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    pub fn cutoffs_hz(&self) -> &[f64] {
        &self.cutoffs_hz
    }

    pub fn kernels(&self) -> &[Vec<f64>] {
        &self.kernels
    }

    /// Filter `x` into one signal per band, each the same length as `x`.
    pub fn split(&self, x: &AudioSignal) -> Result<BandSet> {
        if x.sample_rate() != self.sample_rate {
            return Err(Error::SampleRateMismatch {
                left: self.sample_rate,
                right: x.sample_rate(),
            });
        }
        let bands = self
            .kernels
            .iter()
            .map(|k| AudioSignal::new(convolve_zero_phase(x.samples(), k), self.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        BandSet::new(bands)
    }

    /// Elementwise sum of the bands; inverse of [`FilterBank::split`] up to
    /// floating-point error.
    pub fn merge(&self, set: &BandSet) -> Result<AudioSignal> {
        if set.n_bands() != self.n_bands() {
            return Err(Error::GeometryMismatch(format!(
                "band set has {} bands, bank has {}",
                set.n_bands(),
                self.n_bands()
            )));
        }
        let len = set.band(0).len();
        let mut sum = vec![0.0; len];
        for band in set.bands() {
            if band.len() != len {
                return Err(Error::LengthMismatch {
                    left: len,
                    right: band.len(),
                });
            }
            for (acc, s) in sum.iter_mut().zip(band.samples()) {
                *acc += s;
            }
        }
        AudioSignal::new(sum, self.sample_rate)
    }

    pub fn profile(&self) -> FilterBankProfile {
        FilterBankProfile {
            sample_rate: self.sample_rate,
            n_bands: self.n_bands(),
            kernel_len: self.kernel_len,
            cutoffs_hz: self.cutoffs_hz.clone(),
        }
    }

    pub fn from_profile(p: &FilterBankProfile) -> Result<Self> {
        if p.n_bands != p.cutoffs_hz.len() + 1 {
            return Err(Error::InvalidParameter(format!(
                "profile claims {} bands but lists {} cutoffs",
                p.n_bands,
                p.cutoffs_hz.len()
            )));
        }
        Self::from_cutoffs(p.sample_rate, p.kernel_len, p.cutoffs_hz.clone())
    }

    pub fn save_profile(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.profile())?;
        std::fs::write(path.as_ref(), json).map_err(|e| Error::Io {
            path: path.as_ref().to_path_buf(),
            source: e,
        })
    }

    pub fn load_profile(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let profile: FilterBankProfile = serde_json::from_str(&text)?;
        Self::from_profile(&profile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::signal::{snr_db, synthesize, SynthSpec};
    use proptest::prelude::*;

    #[test]
    fn mel_scale_origin_is_zero() {
        assert_eq!(mel(0.0).unwrap(), 0.0);
    }

    #[test]
    fn mel_1000_matches_htk_formula() {
        // 2595*log10(1 + 1000/700) evaluated at high precision.
        let expect = 999.985_537_139_624_37;
        assert!((mel(1000.0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn mel_inverse_identity() {
        assert!((mel_inv(mel(4000.0).unwrap()).unwrap() - 4000.0).abs() < 1e-6);
        for f in [1.0, 50.0, 440.0, 3999.0, 11999.0] {
            let back = mel_inv(mel(f).unwrap()).unwrap();
            assert!((back - f).abs() / f < 1e-9, "{f} -> {back}");
        }
    }

    #[test]
    fn negative_frequency_rejected() {
        assert!(mel(-1.0).is_err());
        assert!(mel_inv(-1.0).is_err());
    }

    #[test]
    fn single_band_kernel_is_delta() {
        let bank = FilterBank::design(8000, 1, 255).unwrap();
        assert_eq!(bank.n_bands(), 1);
        let k = &bank.kernels()[0];
        for (i, &v) in k.iter().enumerate() {
            let expect = if i == 127 { 1.0 } else { 0.0 };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn four_band_24k_cutoffs_match_mel_spacing() {
        // mel_inv(k * mel(12000) / 4) for k = 1..3, evaluated at high
        // precision.
        let expect = [
            744.689_313_389_761_4,
            2281.610_303_175_115,
            5453.572_202_414_136,
        ];
        let bank = FilterBank::design(24_000, 4, 255).unwrap();
        assert_eq!(bank.cutoffs_hz().len(), 3);
        for (c, e) in bank.cutoffs_hz().iter().zip(expect) {
            assert!((c - e).abs() / e < 1e-9, "{c} vs {e}");
        }
    }

    #[test]
    fn eight_band_kernels_sum_to_delta() {
        let bank = FilterBank::design(24_000, 8, 255).unwrap();
        let len = bank.kernel_len();
        for tap in 0..len {
            let sum: f64 = bank.kernels().iter().map(|k| k[tap]).sum();
            let expect = if tap == len / 2 { 1.0 } else { 0.0 };
            assert!((sum - expect).abs() < 1e-6, "tap {tap}: {sum}");
        }
    }

    #[test]
    fn linear_spacing_override_spaces_in_hz() {
        let bank =
            FilterBank::design_with_spacing(8000, 4, 255, BandSpacing::Linear).unwrap();
        let expect = [1000.0, 2000.0, 3000.0];
        for (c, e) in bank.cutoffs_hz().iter().zip(expect) {
            assert!((c - e).abs() < 1e-9);
        }
    }

    fn tone(freq_hz: f64, sample_rate: u32) -> AudioSignal {
        let spec = SynthSpec::SineMixture {
            freqs_hz: vec![freq_hz],
            amps: vec![0.5],
        };
        synthesize(&spec, 1.0, sample_rate, &mut RngStream::new(0)).unwrap()
    }

    fn energy(sig: &AudioSignal) -> f64 {
        sig.samples().iter().map(|s| s * s).sum()
    }

    #[test]
    fn low_tone_lands_in_band_zero() {
        let bank = FilterBank::design(24_000, 4, 255).unwrap();
        let set = bank.split(&tone(100.0, 24_000)).unwrap();
        let energies: Vec<f64> = set.bands().iter().map(energy).collect();
        let total: f64 = energies.iter().sum();
        assert!(
            energies[0] / total >= 0.99,
            "band energies: {energies:?}"
        );
    }

    #[test]
    fn band_center_tone_leakage_below_one_percent() {
        let bank = FilterBank::design(24_000, 4, 255).unwrap();
        let c = bank.cutoffs_hz();
        let center = (c[0] + c[1]) / 2.0;
        let set = bank.split(&tone(center, 24_000)).unwrap();
        let energies: Vec<f64> = set.bands().iter().map(energy).collect();
        let total: f64 = energies.iter().sum();
        assert!(
            energies[1] / total >= 0.99,
            "band energies: {energies:?}"
        );
    }

    #[test]
    fn silence_splits_to_zeros() {
        let bank = FilterBank::design(8000, 4, 255).unwrap();
        let silence = AudioSignal::new(vec![0.0; 512], 8000).unwrap();
        let set = bank.split(&silence).unwrap();
        for band in set.bands() {
            assert!(band.samples().iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn split_merge_reconstructs_white_noise() {
        let noise = synthesize(
            &SynthSpec::WhiteNoise { amp: 0.5 },
            1.0,
            24_000,
            &mut RngStream::new(3),
        )
        .unwrap();
        let bank = FilterBank::design(24_000, 4, 255).unwrap();
        let rec = bank.merge(&bank.split(&noise).unwrap()).unwrap();
        let snr = snr_db(&noise, &rec).unwrap();
        assert!(snr >= 40.0, "reconstruction SNR {snr}");
    }

    #[test]
    fn merge_of_single_band_is_identity() {
        let bank = FilterBank::design(8000, 1, 255).unwrap();
        let x = tone(440.0, 8000);
        let merged = bank.merge(&bank.split(&x).unwrap()).unwrap();
        for (a, b) in x.samples().iter().zip(merged.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroing_one_band_subtracts_it() {
        let bank = FilterBank::design(8000, 4, 255).unwrap();
        let x = synthesize(
            &SynthSpec::WhiteNoise { amp: 0.3 },
            0.25,
            8000,
            &mut RngStream::new(9),
        )
        .unwrap();
        let set = bank.split(&x).unwrap();
        let dropped = set.band(2).clone();
        let mut bands = set.into_bands();
        bands[2] = AudioSignal::new(vec![0.0; dropped.len()], 8000).unwrap();
        let partial = bank.merge(&BandSet::new(bands).unwrap()).unwrap();
        let full = bank
            .merge(&bank.split(&x).unwrap())
            .unwrap();
        for ((p, f), d) in partial
            .samples()
            .iter()
            .zip(full.samples())
            .zip(dropped.samples())
        {
            assert!((p - (f - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_phase_cross_correlation_peaks_at_lag_zero() {
        let x = synthesize(
            &SynthSpec::WhiteNoise { amp: 0.5 },
            0.5,
            8000,
            &mut RngStream::new(7),
        )
        .unwrap();
        let bank = FilterBank::design(8000, 4, 255).unwrap();
        let rec = bank.merge(&bank.split(&x).unwrap()).unwrap();
        let corr = |lag: isize| -> f64 {
            let n = x.len() as isize;
            (0..n)
                .filter(|k| k + lag >= 0 && k + lag < n)
                .map(|k| x.samples()[k as usize] * rec.samples()[(k + lag) as usize])
                .sum()
        };
        let at_zero = corr(0);
        for lag in [-3isize, -2, -1, 1, 2, 3] {
            assert!(corr(lag) < at_zero, "lag {lag} beats lag 0");
        }
    }

    #[test]
    fn sample_rate_mismatch_rejected() {
        let bank = FilterBank::design(8000, 4, 255).unwrap();
        let x = tone(440.0, 16_000);
        assert!(matches!(
            bank.split(&x),
            Err(Error::SampleRateMismatch { .. })
        ));
    }

    #[test]
    fn profile_round_trip_rebuilds_identical_kernels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let bank = FilterBank::design(24_000, 8, 255).unwrap();
        bank.save_profile(&path).unwrap();
        let back = FilterBank::load_profile(&path).unwrap();
        assert_eq!(bank, back);
    }

    #[test]
    fn short_kernel_rejected() {
        assert!(FilterBank::design(8000, 4, 61).is_err());
        assert!(FilterBank::design(8000, 4, 64).is_err());
    }

    proptest! {
        #[test]
        fn split_is_linear(
            xs in proptest::collection::vec(-1.0f64..1.0, 64),
            ys in proptest::collection::vec(-1.0f64..1.0, 64),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let bank = FilterBank::design(8000, 4, 63).unwrap();
            let x = AudioSignal::new(xs.clone(), 8000).unwrap();
            let y = AudioSignal::new(ys.clone(), 8000).unwrap();
            let mix: Vec<f64> = xs.iter().zip(&ys).map(|(p, q)| a * p + b * q).collect();
            let mixed = AudioSignal::new(mix, 8000).unwrap();
            let split_mix = bank.split(&mixed).unwrap();
            let split_x = bank.split(&x).unwrap();
            let split_y = bank.split(&y).unwrap();
            for i in 0..bank.n_bands() {
                for ((m, p), q) in split_mix.band(i).samples().iter()
                    .zip(split_x.band(i).samples())
                    .zip(split_y.band(i).samples())
                {
                    let expect = a * p + b * q;
                    let tol = 1e-9 * expect.abs().max(1.0);
                    prop_assert!((m - expect).abs() <= tol);
                }
            }
        }
    }
}
