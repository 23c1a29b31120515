//! End-to-end orchestration: dataset preparation, per-band training,
//! token decoding, evaluation, and schedule inspection.
//!
//! Data flow at train time: raw signal -> equalize -> split into
//! diffusion bands (the per-band regression targets), while conditioning
//! tokens come from the raw full-band signal and are shared by every band
//! model. Decode runs the reverse path: per-band sampling from
//! independent priors, band sum, deequalize, WAV out.
//!
//! Band workers run in parallel threads with disjoint output paths and
//! labeled child RNG streams; every output byte is identical in
//! sequential mode.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioner::{
    embed, encode, extract_frames, fit_codebook, load_tokens, Codebook, ConditioningFrames,
    FrameSpec, TokenSequence,
};
use crate::config::PipelineConfig;
use crate::denoiser::checkpoint::{
    load_checkpoint, save_checkpoint, save_sidecar, Checkpoint, CheckpointSidecar,
};
use crate::denoiser::{init, loss_and_grad, train_step, BatchItem, ConvDenoiser, OptimizerState};
use crate::diffusion::{forward_sample, sample};
use crate::eq::{deequalize, equalize, measure_band_stats, noise_band_stats, EqProfile, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::filterbank::{BandSet, FilterBank};
use crate::manifest::{file_sha256, hex, ArtifactPaths, RunManifest};
use crate::metrics::{mel_snr, MelConfig, MelSnrReport};
use crate::rng::RngStream;
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::signal::AudioSignal;
use crate::wav::{load_wav, save_wav, WavEncoding};

/// One corpus entry as recorded at prepare time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub n_samples: usize,
    pub sha256: String,
}

/// Index of the prepared corpus; training refuses items whose bytes
/// changed since prepare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub sample_rate_hz: u32,
    pub items: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
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
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct PrepareReport {
    pub n_items: usize,
    pub eq_profile_sha256: String,
    pub codebook_sha256: String,
    pub dataset_index_sha256: String,
}

/// Loss trajectory summary for one trained band.
#[derive(Debug, Clone)]
pub struct BandTraining {
    pub band: usize,
    /// Mean loss over the first smoothing window of this run.
    pub smoothed_start: f64,
    /// Mean loss over the last smoothing window of this run.
    pub smoothed_end: f64,
    pub iters_run: u64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub bands: Vec<BandTraining>,
}

/// What to decode: a token file, or a WAV to re-encode through the
/// codebook first.
#[derive(Debug, Clone)]
pub enum DecodeInput {
    Tokens(PathBuf),
    Wav(PathBuf),
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    /// Reverse-chain step count; the full schedule when equal to T.
    pub steps: usize,
    pub seed: u64,
    /// Drop the conditioning at every step (ablation support).
    pub zero_cond: bool,
    /// Run band workers in threads; output bytes do not depend on this.
    pub parallel: bool,
}

#[derive(Debug, Clone)]
pub struct DecodeReport {
    pub out_path: PathBuf,
    pub n_samples: usize,
    pub clipped: usize,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Per-file reports in basename order.
    pub rows: Vec<(String, MelSnrReport)>,
    /// Field-wise mean over `rows`.
    pub mean: MelSnrReport,
    /// Files present in only one directory, listed and skipped.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct InspectReport {
    /// Fraction of train steps with alpha_bar above 0.99.
    pub frac_high_alpha: f64,
    pub csv: String,
}

/// Smoothing window for loss-trend reporting.
const LOSS_WINDOW: usize = 50;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Sorted list of `.wav` files directly inside `dir`.
fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::FileNotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Write a deterministic corpus of sine mixtures into the configured
/// corpus directory: per item 2..=4 components with random frequency,
/// amplitude, and phase, peak-normalized to 0.7.
pub fn synth_corpus(cfg: &PipelineConfig, n_items: usize, duration_s: f64) -> Result<Vec<PathBuf>> {
    if n_items == 0 || !(duration_s > 0.0) {
        return Err(Error::InvalidParameter(
            "need n_items >= 1 and a positive duration".into(),
        ));
    }
    std::fs::create_dir_all(&cfg.corpus_dir).map_err(io_err(&cfg.corpus_dir))?;
    let sr = cfg.sample_rate_hz;
    let n = (duration_s * sr as f64).round() as usize;
    let mut rng = RngStream::new(cfg.seed).child("synth");
    let mut paths = Vec::with_capacity(n_items);
    for item in 0..n_items {
        let n_components = 2 + rng.uniform_usize(3);
        let mut samples = vec![0.0f64; n];
        for _ in 0..n_components {
            let freq = rng.uniform(60.0, 0.42 * sr as f64);
            let amp = rng.uniform(0.3, 1.0);
            let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let w = 2.0 * std::f64::consts::PI * freq / sr as f64;
            for (i, s) in samples.iter_mut().enumerate() {
                *s += amp * (w * i as f64 + phase).sin();
            }
        }
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for s in &mut samples {
            *s *= 0.7 / peak;
        }
        let path = cfg.corpus_dir.join(format!("item_{item:03}.wav"));
        save_wav(&AudioSignal::new(samples, sr)?, &path, WavEncoding::Pcm16)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Load every indexed WAV, re-checking the recorded hash and sample rate.
fn load_corpus(cfg: &PipelineConfig, index: &DatasetIndex) -> Result<Vec<AudioSignal>> {
    let mut corpus = Vec::with_capacity(index.items.len());
    for entry in &index.items {
        let path = cfg.corpus_dir.join(&entry.file);
        let got = hex(&file_sha256(&path)?);
        if got != entry.sha256 {
            return Err(Error::Integrity(format!(
                "dataset item {} changed since prepare (hash {} vs indexed {})",
                entry.file, got, entry.sha256
            )));
        }
        let x = load_wav(&path)?;
        if x.sample_rate() != cfg.sample_rate_hz {
            return Err(Error::SampleRateMismatch {
                left: cfg.sample_rate_hz,
                right: x.sample_rate(),
            });
        }
        corpus.push(x);
    }
    Ok(corpus)
}

/// Fit the EQ profile and codebook over the corpus and write the dataset
/// index. Rerunning with the same inputs and seed reproduces every output
/// byte.
pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<PrepareReport> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.artifacts_dir);
    std::fs::create_dir_all(paths.root()).map_err(io_err(paths.root()))?;

    let files = list_wavs(&cfg.corpus_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut corpus = Vec::with_capacity(files.len());
    let mut entries = Vec::with_capacity(files.len());
    for path in &files {
        let x = load_wav(path)?;
        if x.sample_rate() != cfg.sample_rate_hz {
            return Err(Error::SampleRateMismatch {
                left: cfg.sample_rate_hz,
                right: x.sample_rate(),
            });
        }
        entries.push(DatasetEntry {
            file: path
                .file_name()
                .expect("listing produced a file name")
                .to_string_lossy()
                .into_owned(),
            n_samples: x.len(),
            sha256: hex(&file_sha256(path)?),
        });
        corpus.push(x);
    }

    // EQ profile: data-side stats first so a silent corpus aborts before
    // any Monte-Carlo work.
    let eq_bank = cfg.eq_bank()?;
    let sigma_data = measure_band_stats(&corpus, &eq_bank)?;
    if sigma_data.iter().all(|&s| s <= SIGMA_FLOOR) {
        return Err(Error::DegenerateStats(
            "corpus has no band energy anywhere; refusing to fit an EQ profile".into(),
        ));
    }
    let rng = RngStream::new(cfg.seed);
    let noise = noise_band_stats(&eq_bank, cfg.eq_noise_samples, &mut rng.child("eq.noise"))?;
    let profile = EqProfile::new(eq_bank, noise.sigma, sigma_data, cfg.eq_rho)?;
    profile.save(paths.eq_profile())?;

    // The diffusion band split is rebuilt from its saved profile at train
    // and decode time, so the three stages share bit-identical kernels.
    cfg.diffusion_bank()?.save_profile(paths.diffusion_bank())?;

    let spec = cfg.frame_spec();
    let mut frames = Vec::new();
    for x in &corpus {
        frames.extend(extract_frames(x, &spec)?);
    }
    let (codebook, fit) = fit_codebook(
        &frames,
        cfg.conditioner_k,
        cfg.conditioner_n_books,
        cfg.conditioner_fit_iters,
        &spec,
        &mut rng.child("codebook"),
    )?;
    log::info!(
        "codebook fit over {} frames, final mse {:.6}",
        frames.len(),
        fit.final_mse
    );
    codebook.save(paths.codebook())?;

    let index = DatasetIndex {
        sample_rate_hz: cfg.sample_rate_hz,
        items: entries,
    };
    index.save(paths.dataset_index())?;

    Ok(PrepareReport {
        n_items: index.items.len(),
        eq_profile_sha256: hex(&file_sha256(paths.eq_profile())?),
        codebook_sha256: hex(&file_sha256(paths.codebook())?),
        dataset_index_sha256: hex(&file_sha256(paths.dataset_index())?),
    })
}

/// Immutable per-item training data shared by all band workers.
struct TrainItem {
    /// Band-split samples of the equalized signal, indexed by band.
    bands: Vec<Vec<f64>>,
    /// Embedded conditioning rows for the raw full-band signal.
    cond_rows: Vec<Vec<f64>>,
}

struct TrainCtx {
    cfg: PipelineConfig,
    sched: NoiseSchedule,
    spec: FrameSpec,
    items: Vec<TrainItem>,
    eq_hash: String,
    bank_hash: String,
}

/// Conditioning rows covering the crop `[start, start + crop_len)`.
fn crop_frames(
    rows: &[Vec<f64>],
    spec: &FrameSpec,
    start: usize,
    crop_len: usize,
) -> Result<ConditioningFrames> {
    let want = spec.n_frames(crop_len).max(1);
    let j_lo = (start / spec.hop).min(rows.len() - want);
    ConditioningFrames::from_rows(rows[j_lo..j_lo + want].to_vec())
}

fn tag_band(band: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { context, step } => Error::NonFinite {
            context: format!("band {band} {context}"),
            step,
        },
        other => other,
    }
}

fn train_band(ctx: &TrainCtx, band: usize, paths: &ArtifactPaths, resume: bool) -> Result<BandTraining> {
    let cfg = &ctx.cfg;
    let dncfg = cfg.denoiser_config();
    let layout = crate::denoiser::Layout::new(&dncfg)?;
    let ckpt_path = paths.checkpoint(band);

    let (mut rng, mut params, mut opt, resumed) = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.config != dncfg {
            return Err(Error::Integrity(format!(
                "band {band} checkpoint was trained with a different denoiser config"
            )));
        }
        let rng = RngStream::restore(ckpt.rng_seed, ckpt.rng_word_pos);
        (rng, ckpt.params, ckpt.opt, true)
    } else {
        let mut rng = RngStream::new(cfg.seed).child(&format!("train.band{band}"));
        let params = init(&dncfg, &mut rng)?;
        let opt = OptimizerState::new(params.len(), cfg.training_lr);
        (rng, params, opt, false)
    };

    let start_step = opt.step;
    let crop = cfg.training_crop_len;
    let t_max = ctx.sched.t_max();
    let mut losses: Vec<f64> = Vec::new();
    let mut csv = String::new();
    if !resumed {
        csv.push_str("iter,loss\n");
    }

    for iter in start_step..cfg.training_iters as u64 {
        let mut batch = Vec::with_capacity(cfg.training_batch);
        for _ in 0..cfg.training_batch {
            let j = rng.uniform_usize(ctx.items.len());
            let item = &ctx.items[j];
            let sig = &item.bands[band];
            let (start, x0) = if sig.len() > crop {
                let s = rng.uniform_usize(sig.len() - crop + 1);
                (s, sig[s..s + crop].to_vec())
            } else {
                (0, sig.clone())
            };
            let cond = crop_frames(&item.cond_rows, &ctx.spec, start, x0.len())?;
            let t = 1 + rng.uniform_usize(t_max);
            let eps = rng.normal_vec(x0.len());
            let x_t = forward_sample(&x0, t, &eps, &ctx.sched)?;
            batch.push(BatchItem {
                x_t,
                t,
                eps,
                cond: Some(cond),
            });
        }
        let (loss, grads) =
            loss_and_grad(&dncfg, &layout, &params, &batch).map_err(tag_band(band))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("band {band} training loss"),
                step: iter + 1,
            });
        }
        train_step(&mut params, &mut opt, &grads).map_err(tag_band(band))?;
        losses.push(loss);
        csv.push_str(&format!("{},{}\n", iter + 1, loss));
    }

    // Loss file accumulates across resumes so the full curve stays in one
    // place.
    let loss_path = paths.loss_csv(band);
    if resumed {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&loss_path)
            .map_err(io_err(&loss_path))?;
        f.write_all(csv.as_bytes()).map_err(io_err(&loss_path))?;
    } else {
        std::fs::write(&loss_path, &csv).map_err(io_err(&loss_path))?;
    }

    save_checkpoint(
        &Checkpoint {
            config: dncfg.clone(),
            params,
            opt,
            rng_seed: rng.seed(),
            rng_word_pos: rng.word_pos(),
        },
        &ckpt_path,
    )?;
    save_sidecar(
        &CheckpointSidecar {
            config: dncfg,
            seed: rng.seed(),
            schedule: ctx.sched.variant(),
            eq_profile_sha256: ctx.eq_hash.clone(),
            filterbank_sha256: ctx.bank_hash.clone(),
        },
        paths.sidecar(band),
    )?;

    let w = LOSS_WINDOW.min(losses.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(BandTraining {
        band,
        smoothed_start: if losses.is_empty() { f64::NAN } else { mean(&losses[..w]) },
        smoothed_end: if losses.is_empty() { f64::NAN } else { mean(&losses[losses.len() - w..]) },
        iters_run: losses.len() as u64,
    })
}

/// Train one denoiser per diffusion band (or a single band when
/// `only_band` is given) and write checkpoints, loss curves, and the run
/// manifest.
pub fn cmd_train(
    cfg: &PipelineConfig,
    only_band: Option<usize>,
    resume: bool,
    parallel: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.artifacts_dir);
    let profile = EqProfile::load(paths.eq_profile())?;
    let bank = FilterBank::load_profile(paths.diffusion_bank())?;
    let codebook = Codebook::load(paths.codebook())?;
    let index = DatasetIndex::load(paths.dataset_index())?;
    let corpus = load_corpus(cfg, &index)?;

    if let Some(b) = only_band {
        if b >= bank.n_bands() {
            return Err(Error::InvalidParameter(format!(
                "band {b} out of range for a {}-band split",
                bank.n_bands()
            )));
        }
        // The manifest written afterwards covers every band, so the others
        // must already have checkpoints; catch that before the long loop.
        for other in (0..bank.n_bands()).filter(|&o| o != b) {
            if !paths.checkpoint(other).exists() {
                return Err(Error::InvalidParameter(format!(
                    "training only band {b} needs existing checkpoints for \
                     the other bands; band {other} has none (run a full \
                     train first)"
                )));
            }
        }
    }

    let spec = cfg.frame_spec();
    let mut items = Vec::with_capacity(corpus.len());
    for x in &corpus {
        let eq_x = equalize(x, &profile)?;
        let bands = bank
            .split(&eq_x)?
            .into_bands()
            .into_iter()
            .map(|b| b.samples().to_vec())
            .collect();
        let tokens = encode(x, &codebook)?;
        let cond = embed(&tokens, &codebook)?;
        let cond_rows = (0..cond.n_frames()).map(|j| cond.frame(j).to_vec()).collect();
        items.push(TrainItem { bands, cond_rows });
    }

    let ctx = TrainCtx {
        cfg: cfg.clone(),
        sched: cfg.schedule()?,
        spec,
        items,
        eq_hash: hex(&profile.hash()),
        bank_hash: hex(&file_sha256(paths.diffusion_bank())?),
    };

    let bands: Vec<usize> = match only_band {
        Some(b) => vec![b],
        None => (0..bank.n_bands()).collect(),
    };
    let mut results: Vec<BandTraining> = if parallel {
        let handles: Vec<_> = std::thread::scope(|scope| {
            bands
                .iter()
                .map(|&b| {
                    let ctx = &ctx;
                    let paths = &paths;
                    scope.spawn(move || train_band(ctx, b, paths, resume))
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().expect("band worker panicked"))
                .collect()
        });
        handles.into_iter().collect::<Result<_>>()?
    } else {
        bands
            .iter()
            .map(|&b| train_band(&ctx, b, &paths, resume))
            .collect::<Result<_>>()?
    };
    results.sort_by_key(|r| r.band);

    for r in &results {
        log::info!(
            "band {}: smoothed loss {:.6} -> {:.6} over {} iters",
            r.band,
            r.smoothed_start,
            r.smoothed_end,
            r.iters_run
        );
    }

    RunManifest::from_artifacts(cfg, &paths)?.save(paths.manifest())?;
    Ok(TrainReport { bands: results })
}

fn decode_band(
    mcfg: &PipelineConfig,
    ckpt_path: &Path,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    cond: Option<&ConditioningFrames>,
    n: usize,
    seed: u64,
    band: usize,
) -> Result<Vec<f64>> {
    let ckpt = load_checkpoint(ckpt_path)?;
    if ckpt.config != mcfg.denoiser_config() {
        return Err(Error::Integrity(format!(
            "band {band} checkpoint does not match the manifest's denoiser config"
        )));
    }
    let denoiser = ConvDenoiser::new(ckpt.config, ckpt.params)?;
    let mut rng = RngStream::new(seed).child(&format!("decode.band{band}"));
    let prior = rng.normal_vec(n);
    sample(&denoiser, cond, sched, plan, &prior, &mut rng).map_err(tag_band(band))
}

/// Decode tokens (or a WAV re-encoded through the codebook) back to a
/// waveform using the trained band models. Fully deterministic given the
/// seed; refuses to run when any artifact hash disagrees with the
/// training manifest.
pub fn cmd_decode(
    cfg: &PipelineConfig,
    input: &DecodeInput,
    out_wav: &Path,
    opts: &DecodeOptions,
) -> Result<DecodeReport> {
    let paths = ArtifactPaths::new(&cfg.artifacts_dir);
    let manifest = RunManifest::load(paths.manifest())?;
    manifest.verify_against_files(&paths)?;
    // The manifest's config snapshot is authoritative for everything
    // structural; the caller chooses only steps, seed, and paths.
    let mcfg = &manifest.config;

    let profile = EqProfile::load(paths.eq_profile())?;
    let bank = FilterBank::load_profile(paths.diffusion_bank())?;
    let codebook = Codebook::load(paths.codebook())?;

    let tokens: TokenSequence = match input {
        DecodeInput::Tokens(path) => {
            let (tokens, book_hash) = load_tokens(path)?;
            if book_hash != codebook.hash() {
                return Err(Error::Integrity(
                    "token file was written against a different codebook".into(),
                ));
            }
            tokens
        }
        DecodeInput::Wav(path) => {
            let x = load_wav(path)?;
            if x.sample_rate() != mcfg.sample_rate_hz {
                return Err(Error::SampleRateMismatch {
                    left: mcfg.sample_rate_hz,
                    right: x.sample_rate(),
                });
            }
            encode(&x, &codebook)?
        }
    };
    let spec = codebook.frame_spec();
    let n = (tokens.n_frames() - 1) * spec.hop + spec.frame_len;
    let cond = embed(&tokens, &codebook)?;
    let cond_ref = if opts.zero_cond { None } else { Some(&cond) };

    let sched = mcfg.schedule()?;
    let t_max = sched.t_max();
    if opts.steps < 1 {
        return Err(Error::InvalidParameter("steps must be >= 1".into()));
    }
    let plan = if opts.steps == t_max {
        StepPlan::full(t_max)
    } else {
        StepPlan::subsample(t_max, opts.steps)?
    };

    let n_bands = bank.n_bands();
    let band_outputs: Vec<Vec<f64>> = if opts.parallel {
        let collected: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
            (0..n_bands)
                .map(|b| {
                    let ckpt_path = paths.checkpoint(b);
                    let sched = &sched;
                    let plan = &plan;
                    scope.spawn(move || {
                        decode_band(mcfg, &ckpt_path, sched, plan, cond_ref, n, opts.seed, b)
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().expect("band worker panicked"))
                .collect()
        });
        collected.into_iter().collect::<Result<_>>()?
    } else {
        (0..n_bands)
            .map(|b| decode_band(mcfg, &paths.checkpoint(b), &sched, &plan, cond_ref, n, opts.seed, b))
            .collect::<Result<_>>()?
    };

    let band_signals = band_outputs
        .into_iter()
        .map(|v| AudioSignal::new(v, mcfg.sample_rate_hz))
        .collect::<Result<Vec<_>>>()?;
    let merged = bank.merge(&BandSet::new(band_signals)?)?;
    let out_sig = deequalize(&merged, &profile)?;
    let clipped = save_wav(&out_sig, out_wav, WavEncoding::Pcm16)?;

    Ok(DecodeReport {
        out_path: out_wav.to_path_buf(),
        n_samples: out_sig.len(),
        clipped,
        steps: opts.steps,
        seed: opts.seed,
    })
}

/// Compare paired WAVs (matched by basename) between two directories and
/// write per-file plus aggregate reports.
pub fn cmd_eval(
    ref_dir: &Path,
    rec_dir: &Path,
    out_dir: &Path,
    mel: &MelConfig,
) -> Result<EvalReport> {
    let name_map = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(list_wavs(dir)?
            .into_iter()
            .map(|p| {
                let name = p
                    .file_name()
                    .expect("listing produced a file name")
                    .to_string_lossy()
                    .into_owned();
                (name, p)
            })
            .collect())
    };
    let refs = name_map(ref_dir)?;
    let recs = name_map(rec_dir)?;

    let mut skipped = 0usize;
    for name in refs.keys().filter(|n| !recs.contains_key(*n)) {
        log::warn!("no reconstruction for {name}; skipped");
        skipped += 1;
    }
    for name in recs.keys().filter(|n| !refs.contains_key(*n)) {
        log::warn!("no reference for {name}; skipped");
        skipped += 1;
    }

    let paired: Vec<&String> = refs.keys().filter(|n| recs.contains_key(*n)).collect();
    if paired.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no paired WAV basenames between {} and {}",
            ref_dir.display(),
            rec_dir.display()
        )));
    }

    let mut rows = Vec::with_capacity(paired.len());
    for name in paired {
        let r = load_wav(&refs[name])?;
        let c = load_wav(&recs[name])?;
        // Decoded outputs may be a frame shorter than their reference;
        // compare the common prefix.
        let n = r.len().min(c.len());
        if r.len() != c.len() {
            log::warn!("{name}: lengths differ ({} vs {}); comparing first {n}", r.len(), c.len());
        }
        let r = AudioSignal::new(r.samples()[..n].to_vec(), r.sample_rate())?;
        let c = AudioSignal::new(c.samples()[..n].to_vec(), c.sample_rate())?;
        rows.push((name.clone(), mel_snr(&r, &c, mel)?));
    }

    let k = rows.len() as f64;
    let mean = MelSnrReport {
        snr_low: rows.iter().map(|(_, r)| r.snr_low).sum::<f64>() / k,
        snr_mid: rows.iter().map(|(_, r)| r.snr_mid).sum::<f64>() / k,
        snr_high: rows.iter().map(|(_, r)| r.snr_high).sum::<f64>() / k,
        snr_avg: rows.iter().map(|(_, r)| r.snr_avg).sum::<f64>() / k,
    };

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let out = ArtifactPaths::new(out_dir);
    let mut per_file = String::from("file,snr_low,snr_mid,snr_high,snr_avg\n");
    for (name, r) in &rows {
        per_file.push_str(&format!(
            "{},{},{},{},{}\n",
            name, r.snr_low, r.snr_mid, r.snr_high, r.snr_avg
        ));
    }
    std::fs::write(out.eval_per_file_csv(), per_file).map_err(io_err(&out.eval_per_file_csv()))?;
    let summary = format!(
        "n_files,skipped,snr_low,snr_mid,snr_high,snr_avg\n{},{},{},{},{},{}\n",
        rows.len(),
        skipped,
        mean.snr_low,
        mean.snr_mid,
        mean.snr_high,
        mean.snr_avg
    );
    std::fs::write(out.eval_summary_csv(), summary).map_err(io_err(&out.eval_summary_csv()))?;

    Ok(EvalReport { rows, mean, skipped })
}

/// Emit the full (t, beta, alpha_bar, beta_tilde) table and the fraction
/// of steps still holding alpha_bar above 0.99.
pub fn cmd_inspect_schedule(
    cfg: &PipelineConfig,
    out_csv: Option<&Path>,
) -> Result<InspectReport> {
    let sched = cfg.schedule()?;
    let csv = sched.to_csv();
    if let Some(path) = out_csv {
        std::fs::write(path, &csv).map_err(io_err(path))?;
    }
    let high = sched.alphas_bar().iter().filter(|&&a| a > 0.99).count();
    Ok(InspectReport {
        frac_high_alpha: high as f64 / sched.t_max() as f64,
        csv,
    })
}
