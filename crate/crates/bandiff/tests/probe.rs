// Temporary experiment driver; not part of the suite. Trains the 4-band
// pipeline with a wider decoder kernel and separates the conditioning
// bottlenecks: quantized tokens vs raw features vs none. Run with:
//   cargo test -p bandiff --test probe -- --nocapture --ignored

use std::path::PathBuf;
use std::time::Instant;

use bandiff::conditioner::{
    dequantize, encode, extract_frames, Codebook, ConditioningFrames,
};
use bandiff::config::PipelineConfig;
use bandiff::denoiser::checkpoint::load_checkpoint;
use bandiff::denoiser::ConvDenoiser;
use bandiff::diffusion::sample;
use bandiff::schedule::StepPlan;
use bandiff::eq::{deequalize, EqProfile};
use bandiff::filterbank::{BandSet, FilterBank};
use bandiff::manifest::ArtifactPaths;
use bandiff::metrics::{mel_snr, MelConfig};
use bandiff::pipeline::{cmd_prepare, cmd_train};
use bandiff::rng::RngStream;
use bandiff::signal::AudioSignal;
use bandiff::wav::{load_wav, save_wav, WavEncoding};

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn decode_with_cond(
    cfg: &PipelineConfig,
    paths: &ArtifactPaths,
    cond: Option<&ConditioningFrames>,
    n: usize,
    steps: usize,
) -> AudioSignal {
    let sched = cfg.schedule().unwrap();
    let plan = if steps == sched.t_max() {
        StepPlan::full(steps)
    } else {
        StepPlan::subsample(sched.t_max(), steps).unwrap()
    };
    let bank = FilterBank::load_profile(paths.diffusion_bank()).unwrap();
    let profile = EqProfile::load(paths.eq_profile()).unwrap();
    let mut outs = Vec::new();
    for b in 0..bank.n_bands() {
        let ckpt = load_checkpoint(paths.checkpoint(b)).unwrap();
        let den = ConvDenoiser::new(ckpt.config, ckpt.params).unwrap();
        let mut rng = RngStream::new(cfg.seed).child(&format!("decode.band{b}"));
        let prior = rng.normal_vec(n);
        outs.push(sample(&den, cond, &sched, &plan, &prior, &mut rng).unwrap());
    }
    let sigs: Vec<AudioSignal> = outs
        .into_iter()
        .map(|v| AudioSignal::new(v, cfg.sample_rate_hz).unwrap())
        .collect();
    let merged = bank.merge(&BandSet::new(sigs).unwrap()).unwrap();
    deequalize(&merged, &profile).unwrap()
}

#[test]
#[ignore]
fn experiment_wider_kernel() {
    let root = PathBuf::from("/tmp/.tmpQhFcNP");
    let mut cfg = PipelineConfig::default();
    cfg.corpus_dir = root.join("corpus");
    cfg.artifacts_dir = root.join("exp2");
    cfg.denoiser_kernel = 9;

    let t0 = Instant::now();
    cmd_prepare(&cfg).unwrap();
    println!("prepare {:.1} s", t0.elapsed().as_secs_f64());

    let paths = ArtifactPaths::new(&cfg.artifacts_dir);
    let book = Codebook::load(paths.codebook()).unwrap();
    let item = cfg.corpus_dir.join("item_000.wav");
    let x = load_wav(&item).unwrap();

    // How much signal detail survives the token bottleneck.
    let raw = extract_frames(&x, book.frame_spec()).unwrap();
    let toks = encode(&x, &book).unwrap();
    let deq = dequantize(&toks, &book).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, q) in raw.iter().zip(&deq) {
        num += r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        den += r.iter().map(|a| a * a).sum::<f64>();
    }
    println!("rvq relative feature error {:.4}", (num / den).sqrt());

    let t1 = Instant::now();
    let report = cmd_train(&cfg, None, false, true).unwrap();
    for b in &report.bands {
        println!(
            "band {}: loss {:.4} -> {:.4}",
            b.band, b.smoothed_start, b.smoothed_end
        );
    }
    println!("train {:.1} s", t1.elapsed().as_secs_f64());

    let spec = book.frame_spec().clone();
    let n = (toks.n_frames() - 1) * spec.hop + spec.frame_len;
    let quant_cond = bandiff::conditioner::embed(&toks, &book).unwrap();
    let raw_cond = ConditioningFrames::from_rows(raw.clone()).unwrap();

    let out = root.join("exp2_out");
    std::fs::create_dir_all(&out).unwrap();
    let mel = MelConfig::default();
    for (name, cond) in [
        ("quant", Some(&quant_cond)),
        ("raw", Some(&raw_cond)),
        ("zero", None),
    ] {
        let td = Instant::now();
        let rec = decode_with_cond(&cfg, &paths, cond, n, 20);
        let path = out.join(format!("d20_{name}.wav"));
        save_wav(&rec, &path, WavEncoding::Pcm16).unwrap();
        let rep = mel_snr(&x, &rec, &mel).unwrap();
        println!(
            "decode 20 steps cond={name}: rec rms {:.4} mel-snr A {:.2} ({:.1} s)",
            rms(rec.samples()),
            rep.snr_avg,
            td.elapsed().as_secs_f64()
        );
    }
}
