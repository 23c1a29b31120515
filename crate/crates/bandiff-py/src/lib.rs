//! Python bindings over the decoding pipeline: signals, schedules,
//! filterbanks, the EQ stage, the mel-SNR metric, and the four pipeline
//! commands. Values cross the boundary as plain lists and tuples; heavy
//! state stays in Rust behind small wrapper classes.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use bandiff::config::PipelineConfig;
use bandiff::eq::EqProfile;
use bandiff::filterbank::{BandSet, FilterBank};
use bandiff::metrics::{mel_snr as mel_snr_rs, MelConfig};
use bandiff::pipeline::{
    cmd_decode, cmd_eval, cmd_prepare, cmd_train, synth_corpus as synth_corpus_rs, DecodeInput,
    DecodeOptions,
};
use bandiff::rng::RngStream;
use bandiff::schedule::{cosine_schedule, linear_schedule, power_schedule, NoiseSchedule};
use bandiff::signal::AudioSignal;
use bandiff::wav::{load_wav, save_wav, WavEncoding};

fn err(e: bandiff::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A mono signal: samples plus sample rate.
#[pyclass(frozen)]
struct Signal {
    inner: AudioSignal,
}

#[pymethods]
impl Signal {
    #[new]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        Ok(Self {
            inner: AudioSignal::new(samples, sample_rate).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_wav(path).map_err(err)?,
        })
    }

    /// Write as WAV; `encoding` is "pcm16" or "float32".
    #[pyo3(signature = (path, encoding = "pcm16"))]
    fn save(&self, path: PathBuf, encoding: &str) -> PyResult<()> {
        let enc = match encoding {
            "pcm16" => WavEncoding::Pcm16,
            "float32" => WavEncoding::Float32,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown encoding {other:?}; use \"pcm16\" or \"float32\""
                )))
            }
        };
        save_wav(&self.inner, path, enc).map_err(err)?;
        Ok(())
    }

    fn samples(&self) -> Vec<f64> {
        self.inner.samples().to_vec()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate()
    }

    fn rms(&self) -> f64 {
        self.inner.rms()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Forward-chain noise schedule (beta, alpha-bar, and posterior variance
/// per step).
#[pyclass(frozen)]
struct Schedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl Schedule {
    #[staticmethod]
    fn power(p: f64, beta0: f64, beta_t: f64, t_max: usize) -> PyResult<Self> {
        Ok(Self {
            inner: power_schedule(p, beta0, beta_t, t_max).map_err(err)?,
        })
    }

    #[staticmethod]
    fn linear(beta0: f64, beta_t: f64, t_max: usize) -> PyResult<Self> {
        Ok(Self {
            inner: linear_schedule(beta0, beta_t, t_max).map_err(err)?,
        })
    }

    #[staticmethod]
    fn cosine(t_max: usize, offset: f64) -> PyResult<Self> {
        Ok(Self {
            inner: cosine_schedule(t_max, offset).map_err(err)?,
        })
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.beta(t).map_err(err)
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(err)
    }

    fn beta_tilde(&self, t: usize) -> PyResult<f64> {
        self.inner.beta_tilde(t).map_err(err)
    }

    fn csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __len__(&self) -> usize {
        self.inner.t_max()
    }
}

/// Complementary mel-spaced FIR filterbank.
#[pyclass(frozen)]
struct Bank {
    inner: FilterBank,
}

#[pymethods]
impl Bank {
    #[staticmethod]
    fn design(sample_rate: u32, n_bands: usize, kernel_len: usize) -> PyResult<Self> {
        Ok(Self {
            inner: FilterBank::design(sample_rate, n_bands, kernel_len).map_err(err)?,
        })
    }

    fn split(&self, x: &Signal) -> PyResult<Vec<Signal>> {
        let set = self.inner.split(&x.inner).map_err(err)?;
        Ok(set
            .into_bands()
            .into_iter()
            .map(|inner| Signal { inner })
            .collect())
    }

    fn merge(&self, bands: Vec<PyRef<Signal>>) -> PyResult<Signal> {
        let set = BandSet::new(bands.iter().map(|b| b.inner.clone()).collect()).map_err(err)?;
        Ok(Signal {
            inner: self.inner.merge(&set).map_err(err)?,
        })
    }

    fn cutoffs_hz(&self) -> Vec<f64> {
        self.inner.cutoffs_hz().to_vec()
    }

    #[getter]
    fn n_bands(&self) -> usize {
        self.inner.n_bands()
    }
}

/// Per-band gain stage fitted on a corpus.
#[pyclass(frozen)]
struct Eq {
    inner: EqProfile,
}

#[pymethods]
impl Eq {
    #[staticmethod]
    fn fit(
        corpus: Vec<PyRef<Signal>>,
        bank: &Bank,
        rho: f64,
        n_noise_samples: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let signals: Vec<AudioSignal> = corpus.iter().map(|s| s.inner.clone()).collect();
        let mut rng = RngStream::new(seed);
        Ok(Self {
            inner: EqProfile::from_corpus(
                &signals,
                bank.inner.clone(),
                rho,
                n_noise_samples,
                &mut rng,
            )
            .map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EqProfile::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn gains(&self) -> Vec<f64> {
        self.inner.gains()
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho()
    }

    fn equalize(&self, x: &Signal) -> PyResult<Signal> {
        Ok(Signal {
            inner: bandiff::eq::equalize(&x.inner, &self.inner).map_err(err)?,
        })
    }

    fn deequalize(&self, x: &Signal) -> PyResult<Signal> {
        Ok(Signal {
            inner: bandiff::eq::deequalize(&x.inner, &self.inner).map_err(err)?,
        })
    }
}

/// Pipeline configuration; a flat TOML document on disk.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Self {
            inner: PipelineConfig::default(),
        }
    }

    #[staticmethod]
    fn preset_24k() -> Self {
        Self {
            inner: PipelineConfig::preset_24k(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::from_toml(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn get_corpus_dir(&self) -> String {
        self.inner.corpus_dir.display().to_string()
    }

    #[setter]
    fn set_corpus_dir(&mut self, path: PathBuf) {
        self.inner.corpus_dir = path;
    }

    #[getter]
    fn get_artifacts_dir(&self) -> String {
        self.inner.artifacts_dir.display().to_string()
    }

    #[setter]
    fn set_artifacts_dir(&mut self, path: PathBuf) {
        self.inner.artifacts_dir = path;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn get_sampling_steps(&self) -> usize {
        self.inner.sampling_steps
    }

    #[setter]
    fn set_sampling_steps(&mut self, steps: usize) {
        self.inner.sampling_steps = steps;
    }
}

/// Clamped mel-spectral SNR of `rec` against `ref_sig`; returns
/// `(low, mid, high, avg)` in dB.
#[pyfunction]
fn mel_snr(ref_sig: &Signal, rec: &Signal) -> PyResult<(f64, f64, f64, f64)> {
    let r = mel_snr_rs(&ref_sig.inner, &rec.inner, &MelConfig::default()).map_err(err)?;
    Ok((r.snr_low, r.snr_mid, r.snr_high, r.snr_avg))
}

/// Write `n_items` synthetic sine-mixture WAVs into the config's corpus
/// directory; returns their paths.
#[pyfunction]
fn synth_corpus(cfg: &Config, n_items: usize, duration_s: f64) -> PyResult<Vec<String>> {
    let paths = synth_corpus_rs(&cfg.inner, n_items, duration_s).map_err(err)?;
    Ok(paths.iter().map(|p| p.display().to_string()).collect())
}

/// Fit the EQ profile, filterbank, codebook, and dataset index from the
/// corpus; returns the item count.
#[pyfunction]
fn prepare(cfg: &Config) -> PyResult<usize> {
    Ok(cmd_prepare(&cfg.inner).map_err(err)?.n_items)
}

/// Train the per-band denoisers; returns `(band, smoothed_start,
/// smoothed_end)` per band.
#[pyfunction]
#[pyo3(signature = (cfg, band = None, resume = false, parallel = true))]
fn train(
    cfg: &Config,
    band: Option<usize>,
    resume: bool,
    parallel: bool,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let report = cmd_train(&cfg.inner, band, resume, parallel).map_err(err)?;
    Ok(report
        .bands
        .iter()
        .map(|b| (b.band, b.smoothed_start, b.smoothed_end))
        .collect())
}

/// Decode a WAV (re-encoded through the codebook) or a token file to
/// `out_path`; returns the decoded sample count.
#[pyfunction]
#[pyo3(signature = (cfg, input_path, out_path, steps = None, zero_cond = false))]
fn decode(
    cfg: &Config,
    input_path: PathBuf,
    out_path: PathBuf,
    steps: Option<usize>,
    zero_cond: bool,
) -> PyResult<usize> {
    let input = if std::fs::read(&input_path)
        .map(|b| b.starts_with(b"BDTK"))
        .unwrap_or(false)
    {
        DecodeInput::Tokens(input_path)
    } else {
        DecodeInput::Wav(input_path)
    };
    let opts = DecodeOptions {
        steps: steps.unwrap_or(cfg.inner.sampling_steps),
        seed: cfg.inner.seed,
        zero_cond,
        parallel: true,
    };
    Ok(cmd_decode(&cfg.inner, &input, &out_path, &opts)
        .map_err(err)?
        .n_samples)
}

/// Score every same-named WAV pair under two directories; returns the
/// mean `(low, mid, high, avg)` and writes CSV reports into `out_dir`.
#[pyfunction]
fn evaluate(ref_dir: PathBuf, rec_dir: PathBuf, out_dir: PathBuf) -> PyResult<(f64, f64, f64, f64)> {
    let report = cmd_eval(&ref_dir, &rec_dir, &out_dir, &MelConfig::default()).map_err(err)?;
    Ok((
        report.mean.snr_low,
        report.mean.snr_mid,
        report.mean.snr_high,
        report.mean.snr_avg,
    ))
}

#[pymodule]
fn bandiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Signal>()?;
    m.add_class::<Schedule>()?;
    m.add_class::<Bank>()?;
    m.add_class::<Eq>()?;
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(mel_snr, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
