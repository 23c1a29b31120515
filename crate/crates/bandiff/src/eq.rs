//! Reversible per-band energy rebalancing applied to clean audio before
//! diffusion training and inverted after generation.
//!
//! Each band of the input is scaled by `(sigma_noise / sigma_data)^rho`,
//! pushing the band energy profile of the data toward that of unit white
//! noise. `rho = 0` leaves the signal untouched (up to filterbank
//! reconstruction error), `rho = 1` matches the noise profile exactly in
//! expectation. Deequalization applies the reciprocal gains, so the round
//! trip is exact in the band-coefficient domain.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filterbank::{BandSet, FilterBank, FilterBankProfile};
use crate::rng::RngStream;
use crate::signal::AudioSignal;

/// Lower bound on measured band deviations. Bands with no corpus energy
/// are clamped here instead of producing unbounded gains.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Minimum sample budget accepted by [`noise_band_stats`]; below this the
/// Monte-Carlo error would be comparable to the tolerances downstream
/// tests rely on.
pub const MIN_NOISE_SAMPLES: usize = 100_000;

/// Independent noise realizations used to estimate the standard error of
/// the band deviations.
const NOISE_SEGMENTS: usize = 8;

/// Band standard deviations of unit white noise, with a Monte-Carlo
/// error estimate per band.
#[derive(Debug, Clone)]
pub struct NoiseStats {
    /// Per-band standard deviation of filtered unit white noise.
    pub sigma: Vec<f64>,
    /// Relative standard error of each `sigma` entry, estimated from the
    /// spread across independent noise segments.
    pub rel_std_err: Vec<f64>,
}

/// Frozen EQ parameters: the filterbank plus both sigma vectors and the
/// rebalancing exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct EqProfile {
    bank: FilterBank,
    sigma_noise: Vec<f64>,
    sigma_data: Vec<f64>,
    rho: f64,
}

/// On-disk form of [`EqProfile`]; kernels are rebuilt from the embedded
/// filterbank profile so saved and reloaded instances are bit-identical.
#[derive(Debug, Serialize, Deserialize)]
struct ProfileFile {
    bank: FilterBankProfile,
    sigma_noise: Vec<f64>,
    sigma_data: Vec<f64>,
    rho: f64,
}

impl EqProfile {
    /// Assemble a profile from already-measured statistics.
    pub fn new(
        bank: FilterBank,
        sigma_noise: Vec<f64>,
        sigma_data: Vec<f64>,
        rho: f64,
    ) -> Result<Self> {
        let n = bank.n_bands();
        if sigma_noise.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: sigma_noise.len(),
            });
        }
        if sigma_data.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: sigma_data.len(),
            });
        }
        for s in sigma_noise.iter().chain(&sigma_data) {
            if !s.is_finite() || *s <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "band sigma must be finite and positive, got {s}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&rho) || rho.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in [0, 1], got {rho}"
            )));
        }
        Ok(Self {
            bank,
            sigma_noise,
            sigma_data,
            rho,
        })
    }

    /// Measure both sigma vectors and build the profile in one step.
    ///
    /// `n_noise_samples` is the Monte-Carlo budget for the noise side;
    /// the data side uses the whole corpus.
    pub fn from_corpus(
        corpus: &[AudioSignal],
        bank: FilterBank,
        rho: f64,
        n_noise_samples: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let noise = noise_band_stats(&bank, n_noise_samples, rng)?;
        let data = measure_band_stats(corpus, &bank)?;
        Self::new(bank, noise.sigma, data, rho)
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn sigma_noise(&self) -> &[f64] {
        &self.sigma_noise
    }

    pub fn sigma_data(&self) -> &[f64] {
        &self.sigma_data
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Same statistics under a different exponent.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(
            self.bank.clone(),
            self.sigma_noise.clone(),
            self.sigma_data.clone(),
            rho,
        )
    }

    /// Per-band equalization gains `(sigma_noise / sigma_data)^rho`.
    pub fn gains(&self) -> Vec<f64> {
        self.sigma_noise
            .iter()
            .zip(&self.sigma_data)
            .map(|(e, d)| (e / d).powf(self.rho))
            .collect()
    }

    /// Per-band deequalization gains `(sigma_data / sigma_noise)^rho`;
    /// reciprocal of [`Self::gains`] band by band.
    pub fn inverse_gains(&self) -> Vec<f64> {
        self.sigma_noise
            .iter()
            .zip(&self.sigma_data)
            .map(|(e, d)| (d / e).powf(self.rho))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ProfileFile {
            bank: self.bank.profile(),
            sigma_noise: self.sigma_noise.clone(),
            sigma_data: self.sigma_data.clone(),
            rho: self.rho,
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path.as_ref(), json).map_err(|e| Error::Io {
            path: path.as_ref().to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let file: ProfileFile = serde_json::from_str(&text)?;
        let bank = FilterBank::from_profile(&file.bank)?;
        // Re-run the structural checks on anything read from disk.
        Self::new(bank, file.sigma_noise, file.sigma_data, file.rho)
    }

    /// SHA-256 over the canonical JSON serialization; decode refuses to
    /// run against a profile whose hash differs from the one recorded at
    /// training time.
    pub fn hash(&self) -> [u8; 32] {
        let file = ProfileFile {
            bank: self.bank.profile(),
            sigma_noise: self.sigma_noise.clone(),
            sigma_data: self.sigma_data.clone(),
            rho: self.rho,
        };
        let json = serde_json::to_string(&file).expect("profile serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

/// Standard deviation about zero. Band signals carry (near-)zero mean, so
/// this matches the plain standard deviation while letting pooled
/// estimates merge as bare (count, sum-of-squares) pairs.
fn rms_of(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let ssq: f64 = samples.iter().map(|s| s * s).sum();
    (ssq / samples.len() as f64).sqrt()
}

/// Estimate per-band standard deviations of unit white noise through
/// `bank` by Monte Carlo.
///
/// The budget is spread over independent segments whose per-segment
/// estimates also yield the reported relative standard error.
pub fn noise_band_stats(
    bank: &FilterBank,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<NoiseStats> {
    if n_samples < MIN_NOISE_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "noise sample budget {n_samples} below minimum {MIN_NOISE_SAMPLES}"
        )));
    }
    let seg_len = n_samples.div_ceil(NOISE_SEGMENTS);
    let n_bands = bank.n_bands();
    // Per-band sigma estimate from each segment.
    let mut per_segment = vec![vec![0.0f64; NOISE_SEGMENTS]; n_bands];
    for seg in 0..NOISE_SEGMENTS {
        let noise = AudioSignal::new(rng.normal_vec(seg_len), bank.sample_rate())?;
        let bands = bank.split(&noise)?;
        for (i, sigmas) in per_segment.iter_mut().enumerate() {
            sigmas[seg] = rms_of(bands.band(i).samples());
        }
    }
    let mut sigma = Vec::with_capacity(n_bands);
    let mut rel_std_err = Vec::with_capacity(n_bands);
    for sigmas in &per_segment {
        // Pool variances across segments, then convert back to sigma.
        let var = sigmas.iter().map(|s| s * s).sum::<f64>() / NOISE_SEGMENTS as f64;
        let pooled = var.sqrt().max(SIGMA_FLOOR);
        let spread = {
            let mean = sigmas.iter().sum::<f64>() / NOISE_SEGMENTS as f64;
            let v = sigmas.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
                / (NOISE_SEGMENTS - 1) as f64;
            v.sqrt()
        };
        sigma.push(pooled);
        rel_std_err.push(spread / (NOISE_SEGMENTS as f64).sqrt() / pooled);
    }
    Ok(NoiseStats { sigma, rel_std_err })
}

/// Pooled per-band standard deviations of a corpus.
///
/// Each signal is normalized to unit deviation first, so the profile does
/// not depend on recording gain. Bands with no energy anywhere in the
/// corpus come back clamped at [`SIGMA_FLOOR`] with a warning.
pub fn measure_band_stats(corpus: &[AudioSignal], bank: &FilterBank) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_bands = bank.n_bands();
    let mut count = 0usize;
    let mut ssq = vec![0.0f64; n_bands];
    for signal in corpus {
        if signal.sample_rate() != bank.sample_rate() {
            return Err(Error::SampleRateMismatch {
                left: bank.sample_rate(),
                right: signal.sample_rate(),
            });
        }
        if signal.len() < bank.kernel_len() {
            return Err(Error::SignalTooShort {
                len: signal.len(),
                min: bank.kernel_len(),
            });
        }
        let bands = bank.split(&signal.normalized())?;
        for (i, acc) in ssq.iter_mut().enumerate() {
            let b = bands.band(i).samples();
            *acc += b.iter().map(|s| s * s).sum::<f64>();
        }
        count += signal.len();
    }
    let mut floored = 0usize;
    let sigma: Vec<f64> = ssq
        .iter()
        .map(|s| {
            let v = (s / count as f64).sqrt();
            if v < SIGMA_FLOOR {
                floored += 1;
                SIGMA_FLOOR
            } else {
                v
            }
        })
        .collect();
    if floored > 0 {
        log::warn!("{floored} of {n_bands} bands carry no corpus energy; clamped to {SIGMA_FLOOR}");
    }
    Ok(sigma)
}

/// Split, apply per-band gains, and resum.
fn apply_gains(x: &AudioSignal, bank: &FilterBank, gains: &[f64]) -> Result<AudioSignal> {
    if x.sample_rate() != bank.sample_rate() {
        return Err(Error::SampleRateMismatch {
            left: bank.sample_rate(),
            right: x.sample_rate(),
        });
    }
    let bands = bank.split(x)?;
    let scaled: Vec<AudioSignal> = bands
        .bands()
        .iter()
        .zip(gains)
        .map(|(b, g)| b.scaled(*g))
        .collect();
    bank.merge(&BandSet::new(scaled)?)
}

/// Rebalance each band of `x` toward the white-noise energy profile.
///
/// At `rho = 0` every gain is exactly 1, so the output equals
/// `merge(split(x))` bit for bit.
pub fn equalize(x: &AudioSignal, profile: &EqProfile) -> Result<AudioSignal> {
    apply_gains(x, &profile.bank, &profile.gains())
}

/// Invert [`equalize`]: apply the reciprocal per-band gains.
pub fn deequalize(y: &AudioSignal, profile: &EqProfile) -> Result<AudioSignal> {
    apply_gains(y, &profile.bank, &profile.inverse_gains())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::BandSpacing;
    use crate::signal::snr_db;
    use proptest::prelude::*;

    fn mel_bank(sample_rate: u32, n_bands: usize) -> FilterBank {
        FilterBank::design(sample_rate, n_bands, 255).unwrap()
    }

    /// White noise colored by a one-pole smoother; every band keeps real
    /// energy but the spectrum tilts toward the lows.
    fn tilted_noise(n: usize, sample_rate: u32, rng: &mut RngStream) -> AudioSignal {
        let white = rng.normal_vec(n);
        let mut y = vec![0.0f64; n];
        let mut state = 0.0;
        for (out, w) in y.iter_mut().zip(&white) {
            state = 0.6 * state + w;
            *out = state;
        }
        AudioSignal::new(y, sample_rate).unwrap()
    }

    fn tone(freq_hz: f64, amp: f64, n: usize, sample_rate: u32) -> AudioSignal {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate as f64;
        let samples = (0..n).map(|i| amp * (w * i as f64).sin()).collect();
        AudioSignal::new(samples, sample_rate).unwrap()
    }

    /// Magnitude response of one FIR kernel at a single frequency.
    fn kernel_gain_at(kernel: &[f64], freq_hz: f64, sample_rate: u32) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate as f64;
        let mut re = 0.0;
        let mut im = 0.0;
        for (n, h) in kernel.iter().enumerate() {
            re += h * (w * n as f64).cos();
            im -= h * (w * n as f64).sin();
        }
        re.hypot(im)
    }

    #[test]
    fn noise_stats_single_band_is_unit() {
        let bank = mel_bank(8_000, 1);
        let mut rng = RngStream::new(401);
        let stats = noise_band_stats(&bank, 100_000, &mut rng).unwrap();
        assert!(
            (stats.sigma[0] - 1.0).abs() < 0.01,
            "sigma {} outside 1%",
            stats.sigma[0]
        );
        assert!(stats.rel_std_err[0] < 0.01);
    }

    #[test]
    fn noise_stats_four_linear_bands_split_energy_evenly() {
        let bank = FilterBank::design_with_spacing(8_000, 4, 255, BandSpacing::Linear).unwrap();
        let mut rng = RngStream::new(402);
        let stats = noise_band_stats(&bank, 200_000, &mut rng).unwrap();
        for (i, s) in stats.sigma.iter().enumerate() {
            assert!(
                (s - 0.5).abs() < 0.01,
                "band {i} sigma {s} outside 2% of 0.5"
            );
        }
    }

    #[test]
    fn noise_stats_mel_bands_increase_with_index() {
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(403);
        let stats = noise_band_stats(&bank, 200_000, &mut rng).unwrap();
        for pair in stats.sigma.windows(2) {
            assert!(
                pair[1] > pair[0],
                "mel band sigmas must increase: {:?}",
                stats.sigma
            );
        }
    }

    #[test]
    fn noise_stats_rejects_small_budget() {
        let bank = mel_bank(8_000, 2);
        let mut rng = RngStream::new(404);
        assert!(noise_band_stats(&bank, 99_999, &mut rng).is_err());
    }

    #[test]
    fn white_noise_corpus_matches_noise_profile() {
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(405);
        let noise = noise_band_stats(&bank, 200_000, &mut rng).unwrap();
        let corpus: Vec<AudioSignal> = (0..4)
            .map(|_| AudioSignal::new(rng.normal_vec(50_000), 8_000).unwrap())
            .collect();
        let data = measure_band_stats(&corpus, &bank).unwrap();
        for (i, (d, e)) in data.iter().zip(&noise.sigma).enumerate() {
            assert!(
                (d / e - 1.0).abs() < 0.02,
                "band {i}: corpus {d} vs noise {e}"
            );
        }
    }

    #[test]
    fn tone_corpus_band_stats_match_frequency_response() {
        // Dual route: time-domain pooled stats against the kernels'
        // frequency response at the tone. A unit-deviation tone has
        // amplitude sqrt(2), so band i carries deviation |H_i(f)|.
        let bank = mel_bank(24_000, 8);
        let corpus = vec![tone(200.0, 0.3, 192_000, 24_000)];
        let data = measure_band_stats(&corpus, &bank).unwrap();
        for (i, d) in data.iter().enumerate() {
            let h = kernel_gain_at(&bank.kernels()[i], 200.0, 24_000);
            if h > 1e-2 {
                assert!((d / h - 1.0).abs() < 0.02, "band {i}: {d} vs |H| {h}");
            } else {
                // Stopband: nothing but leakage and edge effects.
                assert!(*d < 1e-2, "band {i}: stopband deviation {d}");
            }
        }
        // The tone sits inside band 0, so that band dominates.
        assert!(data[0] > 0.9, "band 0 carries the tone: {}", data[0]);
    }

    #[test]
    fn silent_corpus_floors_all_bands() {
        let bank = mel_bank(8_000, 4);
        let corpus = vec![AudioSignal::new(vec![0.0; 4_000], 8_000).unwrap()];
        let data = measure_band_stats(&corpus, &bank).unwrap();
        assert!(data.iter().all(|&s| s == SIGMA_FLOOR), "{data:?}");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let bank = mel_bank(8_000, 4);
        assert!(matches!(
            measure_band_stats(&[], &bank),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn short_signal_is_rejected() {
        let bank = mel_bank(8_000, 4);
        let corpus = vec![AudioSignal::new(vec![0.1; 100], 8_000).unwrap()];
        assert!(matches!(
            measure_band_stats(&corpus, &bank),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn equalize_with_rho_zero_is_filterbank_identity() {
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(406);
        let x = tilted_noise(8_000, 8_000, &mut rng);
        let noise = noise_band_stats(&bank, 100_000, &mut rng).unwrap();
        let data = measure_band_stats(&[x.clone()], &bank).unwrap();
        let profile = EqProfile::new(bank.clone(), noise.sigma, data, 0.0).unwrap();
        let out = equalize(&x, &profile).unwrap();
        let identity = bank.merge(&bank.split(&x).unwrap()).unwrap();
        assert_eq!(out.samples(), identity.samples());
    }

    #[test]
    fn equalize_with_rho_one_whitens_toward_noise_stats() {
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(407);
        let corpus: Vec<AudioSignal> = (0..6)
            .map(|_| tilted_noise(48_000, 8_000, &mut rng))
            .collect();
        let profile =
            EqProfile::from_corpus(&corpus, bank.clone(), 1.0, 200_000, &mut rng).unwrap();
        // Fresh draw from the same process, normalized like the corpus.
        let x = tilted_noise(48_000, 8_000, &mut rng).normalized();
        let out = equalize(&x, &profile).unwrap();
        let bands = bank.split(&out).unwrap();
        for i in 0..8 {
            let s = {
                let b = bands.band(i).samples();
                (b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64).sqrt()
            };
            let target = profile.sigma_noise()[i];
            assert!(
                (s / target - 1.0).abs() < 0.10,
                "band {i}: output sigma {s} vs noise {target}"
            );
        }
    }

    #[test]
    fn single_band_gain_powers_the_ratio() {
        let bank = mel_bank(8_000, 1);
        let profile = EqProfile::new(bank.clone(), vec![4.0], vec![1.0], 0.5).unwrap();
        assert_eq!(profile.gains(), vec![2.0]);
        let mut rng = RngStream::new(408);
        let x = AudioSignal::new(rng.normal_vec(4_000), 8_000).unwrap();
        let out = equalize(&x, &profile).unwrap();
        let doubled = bank.merge(&bank.split(&x).unwrap()).unwrap().scaled(2.0);
        assert_eq!(out.samples(), doubled.samples());
        // The whole chain stays close to a plain 2x scaling.
        assert!(snr_db(&x.scaled(2.0), &out).unwrap() >= 37.0);
    }

    #[test]
    fn round_trip_restores_chirp() {
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(409);
        let corpus: Vec<AudioSignal> = (0..4)
            .map(|_| tilted_noise(32_000, 8_000, &mut rng))
            .collect();
        let profile =
            EqProfile::from_corpus(&corpus, bank.clone(), 0.4, 100_000, &mut rng).unwrap();
        // Chirp sweeping 100 Hz .. 3.5 kHz over two seconds.
        let n = 16_000;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let u = i as f64 / n as f64;
                let f = 100.0 + (3_500.0 - 100.0) * u;
                (2.0 * std::f64::consts::PI * f * u * 2.0 / 2.0).sin() * 0.5
            })
            .collect();
        let x = AudioSignal::new(samples, 8_000).unwrap();
        let back = deequalize(&equalize(&x, &profile).unwrap(), &profile).unwrap();
        assert!(snr_db(&x, &back).unwrap() >= 37.0);
    }

    #[test]
    fn round_trip_restores_white_noise() {
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(410);
        let corpus: Vec<AudioSignal> = (0..4)
            .map(|_| tilted_noise(32_000, 8_000, &mut rng))
            .collect();
        let profile =
            EqProfile::from_corpus(&corpus, bank.clone(), 0.4, 100_000, &mut rng).unwrap();
        let x = AudioSignal::new(rng.normal_vec(16_000), 8_000).unwrap();
        let back = deequalize(&equalize(&x, &profile).unwrap(), &profile).unwrap();
        assert!(snr_db(&x, &back).unwrap() >= 37.0);
    }

    #[test]
    fn equalize_is_linear_in_the_input() {
        let bank = mel_bank(8_000, 4);
        let mut rng = RngStream::new(411);
        let noise = noise_band_stats(&bank, 100_000, &mut rng).unwrap();
        let x = tilted_noise(4_000, 8_000, &mut rng);
        let profile =
            EqProfile::new(bank, noise.sigma, vec![0.5, 0.8, 1.1, 1.4], 0.7).unwrap();
        let scaled_first = equalize(&x.scaled(3.0), &profile).unwrap();
        let scaled_after = equalize(&x, &profile).unwrap().scaled(3.0);
        for (a, b) in scaled_first.samples().iter().zip(scaled_after.samples()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gain_is_monotone_in_rho_when_noise_exceeds_data() {
        let bank = mel_bank(8_000, 2);
        let mut prev = 0.0;
        for k in 0..=10 {
            let rho = k as f64 / 10.0;
            let profile =
                EqProfile::new(bank.clone(), vec![2.0, 1.0], vec![0.5, 1.0], rho).unwrap();
            let g = profile.gains()[0];
            assert!(g >= prev, "gain fell from {prev} to {g} at rho {rho}");
            prev = g;
        }
    }

    #[test]
    fn default_rho_sits_between_original_and_noise() {
        // Tonal corpus with a broadband floor: low bands well above the
        // noise profile, high bands well below. At rho = 0.4 each
        // processed band deviation must land between the two.
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(412);
        let n = 48_000;
        let mk = |rng: &mut RngStream| {
            let t1 = tone(100.0, 0.7, n, 8_000);
            let t2 = tone(300.0, 0.7, n, 8_000);
            let floor = rng.normal_vec(n);
            let samples: Vec<f64> = (0..n)
                .map(|i| t1.samples()[i] + t2.samples()[i] + 0.1 * floor[i])
                .collect();
            AudioSignal::new(samples, 8_000).unwrap()
        };
        let corpus: Vec<AudioSignal> = (0..3).map(|_| mk(&mut rng)).collect();
        let profile =
            EqProfile::from_corpus(&corpus, bank.clone(), 0.4, 200_000, &mut rng).unwrap();
        let x = mk(&mut rng).normalized();
        let original = measure_band_stats(&[x.clone()], &bank).unwrap();
        let out = equalize(&x, &profile).unwrap();
        let bands = bank.split(&out).unwrap();
        for i in 0..8 {
            let s = {
                let b = bands.band(i).samples();
                (b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64).sqrt()
            };
            let lo = original[i].min(profile.sigma_noise()[i]) * 0.93;
            let hi = original[i].max(profile.sigma_noise()[i]) * 1.07;
            assert!(
                s >= lo && s <= hi,
                "band {i}: processed {s} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn profile_save_load_round_trip() {
        let bank = mel_bank(8_000, 8);
        let mut rng = RngStream::new(413);
        let corpus: Vec<AudioSignal> = (0..2)
            .map(|_| tilted_noise(16_000, 8_000, &mut rng))
            .collect();
        let profile =
            EqProfile::from_corpus(&corpus, bank, 0.4, 100_000, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eq.json");
        profile.save(&path).unwrap();
        let loaded = EqProfile::load(&path).unwrap();
        assert_eq!(profile, loaded);
        assert_eq!(profile.hash(), loaded.hash());
        let other = profile.with_rho(0.9).unwrap();
        assert_ne!(profile.hash(), other.hash());
    }

    #[test]
    fn mismatched_sample_rate_is_rejected() {
        let bank = mel_bank(8_000, 2);
        let profile =
            EqProfile::new(bank, vec![1.0, 1.0], vec![1.0, 1.0], 0.4).unwrap();
        let x = AudioSignal::new(vec![0.1; 1_000], 16_000).unwrap();
        assert!(matches!(
            equalize(&x, &profile),
            Err(Error::SampleRateMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_construction() {
        let bank = mel_bank(8_000, 2);
        assert!(EqProfile::new(bank.clone(), vec![1.0], vec![1.0, 1.0], 0.4).is_err());
        assert!(EqProfile::new(bank.clone(), vec![1.0, 0.0], vec![1.0, 1.0], 0.4).is_err());
        assert!(EqProfile::new(bank.clone(), vec![1.0, 1.0], vec![1.0, 1.0], 1.5).is_err());
        assert!(EqProfile::new(bank, vec![1.0, 1.0], vec![1.0, 1.0], -0.1).is_err());
    }

    proptest! {
        /// Forward and inverse gains cancel per band for any statistics.
        #[test]
        fn gains_multiply_to_one(
            e in proptest::collection::vec(1e-6f64..1e3, 1..8),
            rho in 0.0f64..=1.0,
            scale in 1e-6f64..1e3,
        ) {
            let d: Vec<f64> = e.iter().map(|v| v * scale).collect();
            let bank = FilterBank::design(8_000, e.len(), 255).unwrap();
            let profile = EqProfile::new(bank, e, d, rho).unwrap();
            for (g, gi) in profile.gains().iter().zip(profile.inverse_gains()) {
                prop_assert!((g * gi - 1.0).abs() <= 1e-12);
            }
        }
    }
}
