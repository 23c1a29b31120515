//! WAV file reading and writing.
//!
//! Storage is mono RIFF/WAV, either 16-bit PCM or IEEE float32. Integer
//! samples are scaled into [-1, 1] on load; the math path stays in 64-bit
//! floats. Stereo files are downmixed by averaging; anything wider is
//! rejected. Parsing is header-driven, the file extension is ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioSignal;

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn map_open_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Error::FileNotFound(path.to_path_buf())
        }
        // hound signals truncation either as UnexpectedEof or as a custom
        // "failed to read enough bytes" error.
        hound::Error::IoError(e)
            if matches!(
                e.kind(),
                std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other
            ) =>
        {
            Error::MalformedWav {
                path: path.to_path_buf(),
                detail: format!("truncated file: {e}"),
            }
        }
        hound::Error::IoError(e) => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
        hound::Error::FormatError(detail) => Error::MalformedWav {
            path: path.to_path_buf(),
            detail: detail.into(),
        },
        hound::Error::Unsupported => Error::UnsupportedWav {
            path: path.to_path_buf(),
            detail: "encoding not supported by WAV parser".into(),
        },
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// Load a WAV file as a mono [`AudioSignal`].
///
/// Accepts 16-bit PCM and 32-bit float, mono or stereo (averaged to mono).
/// Missing files, malformed headers, and unsupported encodings each map to
/// a distinct error variant.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| map_open_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedWav {
            path: path.to_path_buf(),
            detail: format!("{channels} channels; only mono or stereo supported"),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            // -32768 scales to just below -1; clamp keeps ingestion in [-1, 1].
            .map(|s| s.map(|v| (v as f64 / 32767.0).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_open_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_open_error(path, e))?,
        (format, bits) => {
            return Err(Error::UnsupportedWav {
                path: path.to_path_buf(),
                detail: format!("{bits}-bit {format:?}; want 16-bit PCM or 32-bit float"),
            });
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|fr| (fr[0] + fr[1]) / 2.0)
            .collect()
    };
    AudioSignal::new(samples, spec.sample_rate)
}

/// Write a signal to a WAV file, returning how many samples were clipped.
///
/// `pcm16` rounds `clamp(x, -1, 1) * 32767` to the nearest integer and
/// counts samples that fell outside [-1, 1]; `float32` stores the 32-bit
/// cast of each sample verbatim (clip count always 0).
pub fn save_wav(
    signal: &AudioSignal,
    path: impl AsRef<Path>,
    encoding: WavEncoding,
) -> Result<usize> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_open_error(path, e))?;
    let mut clipped = 0usize;
    for &s in signal.samples() {
        match encoding {
            WavEncoding::Pcm16 => {
                if !(-1.0..=1.0).contains(&s) {
                    clipped += 1;
                }
                let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(q).map_err(|e| map_open_error(path, e))?;
            }
            WavEncoding::Float32 => {
                writer
                    .write_sample(s as f32)
                    .map_err(|e| map_open_error(path, e))?;
            }
        }
    }
    writer.finalize().map_err(|e| map_open_error(path, e))?;
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} samples to [-1, 1]", path.display());
    }
    Ok(clipped)
}
