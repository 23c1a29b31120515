//! Versioned binary checkpoints: config header, flat parameter array,
//! optimizer state, and the training RNG position, so an interrupted run
//! resumes on the identical random stream. A JSON sidecar carries the
//! provenance a checkpoint is only valid under (schedule variant, EQ
//! profile hash, filterbank hash).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ScheduleVariant;

use super::{DenoiserConfig, Layout, OptimizerState};

const MAGIC: &[u8; 4] = b"BDCK";
const VERSION: u32 = 1;

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
    pub opt: OptimizerState,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

/// Human-readable companion file recording what the checkpoint was
/// trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub config: DenoiserConfig,
    pub seed: u64,
    pub schedule: ScheduleVariant,
    pub eq_profile_sha256: String,
    pub filterbank_sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = &ckpt.config;
    let layout = Layout::new(cfg)?;
    if ckpt.params.len() != layout.total()
        || ckpt.opt.m.len() != layout.total()
        || ckpt.opt.v.len() != layout.total()
    {
        return Err(Error::Shape(format!(
            "checkpoint arrays must all have {} values",
            layout.total()
        )));
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.depth,
        cfg.base_channels,
        cfg.growth,
        cfg.kernel,
        cfg.stride,
        cfg.t_embed_dim,
        cfg.t_max,
        cfg.cond_dim,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&ckpt.opt.step.to_le_bytes());
    for v in [ckpt.opt.lr, ckpt.opt.beta1, ckpt.opt.beta2, ckpt.opt.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ckpt.rng_seed.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for arr in [&ckpt.params, &ckpt.opt.m, &ckpt.opt.v] {
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&out).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, detail: &str) -> Error {
        Error::Integrity(format!("{}: {detail}", self.path.display()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.fail(&format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(cur.fail("bad magic; not a checkpoint file"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(cur.fail(&format!("unsupported checkpoint version {version}")));
    }
    let mut cfg_words = [0u32; 8];
    for w in cfg_words.iter_mut() {
        *w = cur.u32()?;
    }
    let [depth, base_channels, growth, kernel, stride, t_embed_dim, t_max, cond_dim] = cfg_words;
    let config = DenoiserConfig {
        depth: depth as usize,
        base_channels: base_channels as usize,
        growth: growth as usize,
        kernel: kernel as usize,
        stride: stride as usize,
        t_embed_dim: t_embed_dim as usize,
        t_max: t_max as usize,
        cond_dim: cond_dim as usize,
    };
    let layout = match Layout::new(&config) {
        Ok(l) => l,
        Err(e) => return Err(cur.fail(&format!("config header: {e}"))),
    };
    let step = cur.u64()?;
    let mut hyper = [0f64; 4];
    for h in hyper.iter_mut() {
        *h = cur.f64()?;
    }
    let rng_seed = cur.u64()?;
    let rng_word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
    let count = cur.u64()? as usize;
    if count != layout.total() {
        return Err(cur.fail(&format!(
            "parameter count {count} does not match the config's {}",
            layout.total()
        )));
    }
    let mut arrays = Vec::with_capacity(3);
    for what in ["parameters", "first moments", "second moments"] {
        let raw = cur.take(count * 8)?;
        let mut arr = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            arr.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(cur.fail(&format!("{what} contain non-finite values")));
        }
        arrays.push(arr);
    }
    if cur.at != bytes.len() {
        return Err(cur.fail(&format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.at
        )));
    }
    let v = arrays.pop().unwrap();
    let m = arrays.pop().unwrap();
    let params = arrays.pop().unwrap();
    Ok(Checkpoint {
        config,
        params,
        opt: OptimizerState {
            m,
            v,
            step,
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
        },
        rng_seed,
        rng_word_pos,
    })
}

pub fn save_sidecar(sidecar: &CheckpointSidecar, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(path, json).map_err(io_err(path))
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<CheckpointSidecar> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
