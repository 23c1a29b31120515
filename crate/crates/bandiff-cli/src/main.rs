//! Command-line surface over the bandiff pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 integrity (hash
//! mismatch) error. The artifacts root from the config can be overridden
//! with the `BANDIFF_ARTIFACTS` environment variable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bandiff::config::PipelineConfig;
use bandiff::manifest::ArtifactPaths;
use bandiff::metrics::MelConfig;
use bandiff::pipeline::{
    cmd_decode, cmd_eval, cmd_inspect_schedule, cmd_prepare, cmd_train, synth_corpus,
    DecodeInput, DecodeOptions,
};
use bandiff::Error;

const ARTIFACTS_ENV: &str = "BANDIFF_ARTIFACTS";

#[derive(Parser)]
#[command(
    name = "bandiff",
    version,
    about = "Multi-band diffusion audio decoding pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run band workers sequentially instead of in parallel threads.
    /// Output bytes are identical either way.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the EQ profile and codebook and write the dataset index.
    Prepare {
        /// Generate this many synthetic sine-mixture items into the
        /// corpus directory first.
        #[arg(long)]
        synth: Option<usize>,

        /// Duration in seconds of each synthesized item.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Train one denoiser per diffusion band.
    Train {
        /// Train only this band index, leaving the others untouched.
        #[arg(long)]
        band: Option<usize>,

        /// Continue from existing checkpoints instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a token file (or a WAV re-encoded through the codebook)
    /// back to a waveform.
    Decode {
        /// Token file or WAV; the format is detected from the content.
        input: PathBuf,

        /// Output WAV path.
        #[arg(long)]
        out: PathBuf,

        /// Reverse-chain steps; defaults to the config's sampling_steps.
        #[arg(long)]
        steps: Option<usize>,

        /// Drop the conditioning at every step (ablation support).
        #[arg(long)]
        zero_cond: bool,
    },
    /// Compare paired WAVs between two directories.
    Eval {
        /// Directory of reference WAVs.
        #[arg(long = "ref")]
        ref_dir: PathBuf,

        /// Directory of reconstructed WAVs.
        #[arg(long = "rec")]
        rec_dir: PathBuf,

        /// Report directory; defaults to the artifacts root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the full schedule table and write it as CSV.
    InspectSchedule {
        /// CSV output path; defaults to schedule.csv under the
        /// artifacts root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Ok(root) = std::env::var(ARTIFACTS_ENV) {
        if !root.is_empty() {
            cfg.artifacts_dir = PathBuf::from(root);
        }
    }
    Ok(cfg)
}

/// Token files start with their magic bytes; everything else is treated
/// as audio.
fn detect_input(path: &PathBuf) -> Result<DecodeInput, Error> {
    let mut head = [0u8; 4];
    let read = std::fs::File::open(path)
        .and_then(|mut f| {
            use std::io::Read;
            f.read(&mut head)
        })
        .map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    if read == 4 && &head == b"BDTK" {
        Ok(DecodeInput::Tokens(path.clone()))
    } else {
        Ok(DecodeInput::Wav(path.clone()))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.common)?;
    let parallel = !cli.common.deterministic;
    match cli.command {
        Command::Prepare { synth, duration } => {
            if let Some(n) = synth {
                let written = synth_corpus(&cfg, n, duration)?;
                println!("synthesized {} items into {}", written.len(), cfg.corpus_dir.display());
            }
            let report = cmd_prepare(&cfg)?;
            println!("prepared {} items", report.n_items);
            println!("eq profile sha256 {}", report.eq_profile_sha256);
            println!("codebook sha256 {}", report.codebook_sha256);
            println!("dataset index sha256 {}", report.dataset_index_sha256);
        }
        Command::Train { band, resume } => {
            let report = cmd_train(&cfg, band, resume, parallel)?;
            for b in &report.bands {
                println!(
                    "band {}: smoothed loss {:.6} -> {:.6} over {} iters",
                    b.band, b.smoothed_start, b.smoothed_end, b.iters_run
                );
            }
        }
        Command::Decode {
            input,
            out,
            steps,
            zero_cond,
        } => {
            let opts = DecodeOptions {
                steps: steps.unwrap_or(cfg.sampling_steps),
                seed: cfg.seed,
                zero_cond,
                parallel,
            };
            let report = cmd_decode(&cfg, &detect_input(&input)?, &out, &opts)?;
            println!(
                "decoded {} samples in {} steps to {} ({} clipped)",
                report.n_samples,
                report.steps,
                report.out_path.display(),
                report.clipped
            );
        }
        Command::Eval {
            ref_dir,
            rec_dir,
            out,
        } => {
            let out_dir = out.unwrap_or_else(|| cfg.artifacts_dir.clone());
            let report = cmd_eval(&ref_dir, &rec_dir, &out_dir, &MelConfig::default())?;
            println!(
                "evaluated {} pairs ({} skipped): mel-snr L {:.3} M {:.3} H {:.3} A {:.3}",
                report.rows.len(),
                report.skipped,
                report.mean.snr_low,
                report.mean.snr_mid,
                report.mean.snr_high,
                report.mean.snr_avg
            );
        }
        Command::InspectSchedule { out } => {
            let default_path = ArtifactPaths::new(&cfg.artifacts_dir).schedule_csv();
            let path = out.unwrap_or(default_path);
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                        path: parent.to_path_buf(),
                        source: e,
                    })?;
                }
            }
            let report = cmd_inspect_schedule(&cfg, Some(&path))?;
            println!("schedule table written to {}", path.display());
            println!(
                "fraction of steps with alpha_bar > 0.99: {:.4}",
                report.frac_high_alpha
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success
            // semantics; respect that.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Integrity(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
