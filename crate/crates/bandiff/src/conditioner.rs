//! Discrete-token conditioning: a residual k-means vector quantizer over
//! short-time mel log-power frames.
//!
//! This is the desk-scale stand-in for a neural codec. It is NOT one; the
//! module boundary is what matters: tokens index codebook entries, token
//! embeddings are the average of the per-book centroids, and embeddings are
//! linearly upsampled to whatever length the denoiser bottleneck needs.
//! Externally produced token matrices plus a centroid table can be dropped
//! in through the same file formats.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filterbank::mel_inv;
use crate::metrics::mel_filter_matrix;
use crate::rng::RngStream;
use crate::signal::AudioSignal;

/// Short-time analysis geometry shared by frame extraction and codebooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Feature dimension: number of mel bands per frame.
    pub n_mels: usize,
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 {
            return Err(Error::InvalidParameter("frame_len must be >= 2".into()));
        }
        if self.hop == 0 {
            return Err(Error::InvalidParameter("hop must be >= 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidParameter("sample_rate must be > 0".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::InvalidParameter("n_mels must be >= 1".into()));
        }
        Ok(())
    }

    /// Frames fully contained in a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

/// Residual vector quantizer: `n_books` codebooks of `k` centroids each,
/// book j fit on the residuals left by books 0..j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    k: usize,
    n_books: usize,
    frame_spec: FrameSpec,
    /// `n_books x k x dim` centroid tensor.
    centroids: Vec<Vec<Vec<f64>>>,
}

/// Per-book, per-iteration k-means inertia plus the final corpus
/// distortion; returned alongside a fitted [`Codebook`] for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub inertia: Vec<Vec<f64>>,
    pub final_mse: f64,
}

/// Token matrix (`n_books x n_frames`) plus the geometry it was extracted
/// under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<Vec<usize>>,
    k: usize,
    frame_spec: FrameSpec,
}

/// Dense conditioning input for the denoiser: `n_frames x dim` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningFrames {
    data: Vec<f64>,
    n_frames: usize,
    dim: usize,
}

impl ConditioningFrames {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("conditioning needs >= 1 frame".into()));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::Shape("conditioning frames need dim >= 1".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "frame {i} has dim {} but frame 0 has {dim}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("non-finite feature {bad} in frame {i}")));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            n_frames: rows.len(),
            dim,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-frame features: log10 of mel-band power (power averaged per sample,
/// floored at 1e-8). Frames are hop-spaced, unpadded; a partial tail is
/// dropped.
pub fn extract_frames(x: &AudioSignal, spec: &FrameSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if x.sample_rate() != spec.sample_rate {
        return Err(Error::SampleRateMismatch {
            left: spec.sample_rate,
            right: x.sample_rate(),
        });
    }
    if x.len() < spec.frame_len {
        return Err(Error::SignalTooShort {
            len: x.len(),
            min: spec.frame_len,
        });
    }
    let nyquist = spec.sample_rate as f64 / 2.0;
    let mel_rows = mel_filter_matrix(spec.sample_rate, spec.frame_len, spec.n_mels, 0.0, nyquist)?;
    let window: Vec<f64> = (0..spec.frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / spec.frame_len as f64).cos())
        .collect();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(spec.frame_len);
    let n_bins = spec.frame_len / 2 + 1;
    let n_frames = spec.n_frames(x.len());
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![rustfft::num_complex::Complex::new(0.0, 0.0); spec.frame_len];
    for j in 0..n_frames {
        let start = j * spec.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = rustfft::num_complex::Complex::new(x.samples()[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let feat: Vec<f64> = mel_rows
            .iter()
            .map(|row| {
                let p: f64 = row
                    .iter()
                    .take(n_bins)
                    .enumerate()
                    .map(|(k, &w)| w * buf[k].norm_sqr())
                    .sum();
                (p / spec.frame_len as f64 + 1e-8).log10()
            })
            .collect();
        frames.push(feat);
    }
    Ok(frames)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; ties break to the lowest index.
fn assign(frame: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist_sq(frame, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// One k-means fit with empty-cluster reseeding; returns centroids and the
/// per-iteration assignment inertia.
fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let dim = points[0].len();
    // Distinct points only for seeding, so initial centroids never collide.
    let mut seen = HashSet::new();
    let mut unique_idx = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            unique_idx.push(i);
        }
    }
    if unique_idx.len() < k {
        return Err(Error::DegenerateStats(format!(
            "k-means needs >= {k} distinct frames, corpus has {}",
            unique_idx.len()
        )));
    }
    // Partial Fisher-Yates draw of k distinct seed frames.
    let mut pool = unique_idx;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for drawn in 0..k {
        let pick = drawn + rng.uniform_usize(pool.len() - drawn);
        pool.swap(drawn, pick);
        centroids.push(points[pool[drawn]].clone());
    }

    let mut inertia_log = Vec::with_capacity(iters);
    let mut assignments = vec![0usize; points.len()];
    for _ in 0..iters {
        let mut inertia = 0.0;
        for (p, slot) in points.iter().zip(assignments.iter_mut()) {
            *slot = assign(p, &centroids);
            inertia += dist_sq(p, &centroids[*slot]);
        }
        inertia_log.push(inertia);

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed an empty cluster from the farthest point not yet
                // used for another reseed this iteration.
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .max_by(|(_, a), (_, b)| {
                        let da = dist_sq(a, &centroids[assign(a, &centroids)]);
                        let db = dist_sq(b, &centroids[assign(b, &centroids)]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                taken.insert(far);
                centroids[c] = points[far].clone();
            }
        }
    }
    Ok((centroids, inertia_log))
}

/// Fit a residual quantizer: book 0 on the frames, each further book on
/// what the previous books left unexplained.
pub fn fit_codebook(
    frames: &[Vec<f64>],
    k: usize,
    n_books: usize,
    iters: usize,
    spec: &FrameSpec,
    rng: &mut RngStream,
) -> Result<(Codebook, FitReport)> {
    spec.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if k == 0 || n_books == 0 || iters == 0 {
        return Err(Error::InvalidParameter(
            "k, n_books, and iters must all be >= 1".into(),
        ));
    }
    let dim = spec.n_mels;
    if frames.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape(format!(
            "frames must have dim {dim} to match the frame spec"
        )));
    }
    let mut residuals: Vec<Vec<f64>> = frames.to_vec();
    let mut books = Vec::with_capacity(n_books);
    let mut inertia = Vec::with_capacity(n_books);
    for _ in 0..n_books {
        let (centroids, log) = kmeans(&residuals, k, iters, rng)?;
        for r in residuals.iter_mut() {
            let a = assign(r, &centroids);
            for (v, c) in r.iter_mut().zip(&centroids[a]) {
                *v -= c;
            }
        }
        books.push(centroids);
        inertia.push(log);
    }
    let final_mse =
        residuals.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / frames.len() as f64;
    let book = Codebook::from_parts(books, *spec)?;
    Ok((book, FitReport { inertia, final_mse }))
}

impl Codebook {
    /// Assemble a codebook from explicit centroids (the import path for
    /// externally produced tables). Validates shape, finiteness, and that
    /// no book contains duplicate centroids.
    pub fn from_parts(centroids: Vec<Vec<Vec<f64>>>, frame_spec: FrameSpec) -> Result<Self> {
        frame_spec.validate()?;
        if centroids.is_empty() || centroids[0].is_empty() {
            return Err(Error::InvalidParameter(
                "codebook needs >= 1 book of >= 1 centroid".into(),
            ));
        }
        let k = centroids[0].len();
        let dim = frame_spec.n_mels;
        for (b, book) in centroids.iter().enumerate() {
            if book.len() != k {
                return Err(Error::Shape(format!(
                    "book {b} has {} entries, book 0 has {k}",
                    book.len()
                )));
            }
            for (i, c) in book.iter().enumerate() {
                if c.len() != dim {
                    return Err(Error::Shape(format!(
                        "book {b} centroid {i} has dim {}, frame spec says {dim}",
                        c.len()
                    )));
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Shape(format!(
                        "book {b} centroid {i} contains non-finite values"
                    )));
                }
            }
            for i in 0..k {
                for j in i + 1..k {
                    if dist_sq(&book[i], &book[j]) == 0.0 {
                        return Err(Error::DegenerateStats(format!(
                            "book {b} centroids {i} and {j} are identical"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            k,
            n_books: centroids.len(),
            frame_spec,
            centroids,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_books(&self) -> usize {
        self.n_books
    }

    pub fn dim(&self) -> usize {
        self.frame_spec.n_mels
    }

    pub fn frame_spec(&self) -> &FrameSpec {
        &self.frame_spec
    }

    pub fn centroids(&self) -> &[Vec<Vec<f64>>] {
        &self.centroids
    }

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
        let book: Codebook = serde_json::from_str(&text)?;
        // Re-run the structural checks on anything read from disk.
        Codebook::from_parts(book.centroids, book.frame_spec)
    }

    /// SHA-256 over the canonical JSON serialization; recorded in token
    /// files and manifests so mismatched codebooks are caught.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("codebook serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

/// Tokenize pre-extracted frames through the residual books.
pub fn encode_frames(frames: &[Vec<f64>], book: &Codebook) -> Result<TokenSequence> {
    if frames.is_empty() {
        return Err(Error::Shape("cannot encode zero frames".into()));
    }
    let dim = book.dim();
    if frames.iter().any(|f| f.len() != dim) {
        return Err(Error::GeometryMismatch(format!(
            "frame dim does not match codebook dim {dim}"
        )));
    }
    let mut tokens = vec![Vec::with_capacity(frames.len()); book.n_books];
    for frame in frames {
        let mut r = frame.clone();
        for (b, centroids) in book.centroids.iter().enumerate() {
            let a = assign(&r, centroids);
            tokens[b].push(a);
            for (v, c) in r.iter_mut().zip(&centroids[a]) {
                *v -= c;
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        k: book.k,
        frame_spec: book.frame_spec,
    })
}

/// Extract frames from a signal and tokenize them.
pub fn encode(x: &AudioSignal, book: &Codebook) -> Result<TokenSequence> {
    if x.sample_rate() != book.frame_spec.sample_rate {
        return Err(Error::GeometryMismatch(format!(
            "signal at {} Hz, codebook fit at {} Hz",
            x.sample_rate(),
            book.frame_spec.sample_rate
        )));
    }
    let frames = extract_frames(x, &book.frame_spec)?;
    encode_frames(&frames, book)
}

impl TokenSequence {
    pub fn from_parts(tokens: Vec<Vec<usize>>, k: usize, frame_spec: FrameSpec) -> Result<Self> {
        frame_spec.validate()?;
        if tokens.is_empty() || tokens[0].is_empty() {
            return Err(Error::Shape("token matrix must be non-empty".into()));
        }
        let n_frames = tokens[0].len();
        for row in &tokens {
            if row.len() != n_frames {
                return Err(Error::Shape("token rows must have equal length".into()));
            }
            if let Some(&bad) = row.iter().find(|&&t| t >= k) {
                return Err(Error::TokenOutOfRange {
                    token: bad as u32,
                    entries: k,
                });
            }
        }
        Ok(Self {
            tokens,
            k,
            frame_spec,
        })
    }

    pub fn tokens(&self) -> &[Vec<usize>] {
        &self.tokens
    }

    pub fn n_books(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_frames(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn frame_spec(&self) -> &FrameSpec {
        &self.frame_spec
    }

    /// Token bitrate in bits per second over the span the frames cover.
    pub fn bitrate_bps(&self) -> f64 {
        let spec = &self.frame_spec;
        let span_samples = (self.n_frames() - 1) * spec.hop + spec.frame_len;
        let secs = span_samples as f64 / spec.sample_rate as f64;
        self.n_books() as f64 * self.n_frames() as f64 * (self.k as f64).log2() / secs
    }
}

/// Residual reconstruction: sum of the selected centroid from every book.
pub fn dequantize(tokens: &TokenSequence, book: &Codebook) -> Result<Vec<Vec<f64>>> {
    check_book_compat(tokens, book)?;
    let mut out = Vec::with_capacity(tokens.n_frames());
    for j in 0..tokens.n_frames() {
        let mut frame = vec![0.0f64; book.dim()];
        for (b, row) in tokens.tokens.iter().enumerate() {
            for (v, c) in frame.iter_mut().zip(&book.centroids[b][row[j]]) {
                *v += c;
            }
        }
        out.push(frame);
    }
    Ok(out)
}

/// Conditioning embedding: the AVERAGE of the selected centroids across
/// books (not their sum).
pub fn embed(tokens: &TokenSequence, book: &Codebook) -> Result<ConditioningFrames> {
    check_book_compat(tokens, book)?;
    let scale = 1.0 / book.n_books as f64;
    let rows = dequantize(tokens, book)?
        .into_iter()
        .map(|frame| frame.into_iter().map(|v| v * scale).collect())
        .collect();
    ConditioningFrames::from_rows(rows)
}

fn check_book_compat(tokens: &TokenSequence, book: &Codebook) -> Result<()> {
    if tokens.n_books() != book.n_books || tokens.k != book.k {
        return Err(Error::GeometryMismatch(format!(
            "tokens are {} books of {} entries, codebook is {} books of {}",
            tokens.n_books(),
            tokens.k,
            book.n_books,
            book.k
        )));
    }
    for row in &tokens.tokens {
        if let Some(&bad) = row.iter().find(|&&t| t >= book.k) {
            return Err(Error::TokenOutOfRange {
                token: bad as u32,
                entries: book.k,
            });
        }
    }
    Ok(())
}

/// Endpoint-preserving piecewise-linear interpolation along time.
pub fn upsample_linear(frames: &ConditioningFrames, target_len: usize) -> Result<ConditioningFrames> {
    if target_len < 1 {
        return Err(Error::InvalidParameter("target_len must be >= 1".into()));
    }
    let n = frames.n_frames();
    let dim = frames.dim();
    let mut data = Vec::with_capacity(target_len * dim);
    for j in 0..target_len {
        let u = if target_len == 1 || n == 1 {
            0.0
        } else {
            j as f64 * (n - 1) as f64 / (target_len - 1) as f64
        };
        let i0 = (u.floor() as usize).min(n - 1);
        let frac = u - i0 as f64;
        let a = frames.frame(i0);
        if frac == 0.0 {
            data.extend_from_slice(a);
        } else {
            let b = frames.frame((i0 + 1).min(n - 1));
            data.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
        }
    }
    Ok(ConditioningFrames {
        data,
        n_frames: target_len,
        dim,
    })
}

const TOKEN_MAGIC: &[u8; 4] = b"BDTK";
const TOKEN_VERSION: u32 = 1;

/// Write a token file: magic, version, geometry header, the producing
/// codebook's hash, then the row-major u32 token matrix. Little-endian
/// throughout.
pub fn save_tokens(
    tokens: &TokenSequence,
    codebook_hash: &[u8; 32],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(TOKEN_MAGIC);
    for v in [
        TOKEN_VERSION,
        tokens.k as u32,
        tokens.n_books() as u32,
        tokens.n_frames() as u32,
        tokens.frame_spec.frame_len as u32,
        tokens.frame_spec.hop as u32,
        tokens.frame_spec.sample_rate,
        tokens.frame_spec.n_mels as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(codebook_hash);
    for row in &tokens.tokens {
        for &t in row {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(&out).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read a token file back; returns the sequence and the codebook hash it
/// claims to pair with.
pub fn load_tokens(path: impl AsRef<Path>) -> Result<(TokenSequence, [u8; 32])> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let fail = |detail: &str| Error::Integrity(format!("{}: {detail}", path.display()));
    if bytes.len() < 4 + 8 * 4 + 32 {
        return Err(fail("token file shorter than its header"));
    }
    if &bytes[..4] != TOKEN_MAGIC {
        return Err(fail("bad magic; not a token file"));
    }
    let mut words = [0u32; 8];
    for (i, w) in words.iter_mut().enumerate() {
        let at = 4 + i * 4;
        *w = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    }
    let [version, k, n_books, n_frames, frame_len, hop, sample_rate, n_mels] = words;
    if version != TOKEN_VERSION {
        return Err(fail(&format!("unsupported token file version {version}")));
    }
    let hash_at = 4 + 8 * 4;
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&bytes[hash_at..hash_at + 32]);
    let body = &bytes[hash_at + 32..];
    let expect = n_books as usize * n_frames as usize * 4;
    if body.len() != expect {
        return Err(fail(&format!(
            "token matrix is {} bytes, header implies {expect}",
            body.len()
        )));
    }
    let mut tokens = Vec::with_capacity(n_books as usize);
    for b in 0..n_books as usize {
        let mut row = Vec::with_capacity(n_frames as usize);
        for j in 0..n_frames as usize {
            let at = (b * n_frames as usize + j) * 4;
            row.push(u32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as usize);
        }
        tokens.push(row);
    }
    let spec = FrameSpec {
        frame_len: frame_len as usize,
        hop: hop as usize,
        sample_rate,
        n_mels: n_mels as usize,
    };
    let seq = TokenSequence::from_parts(tokens, k as usize, spec)
        .map_err(|e| fail(&e.to_string()))?;
    Ok((seq, hash))
}

/// Convenience: the mel upper edge used by frame features, for reporting.
pub fn feature_fmax_hz(spec: &FrameSpec) -> Result<f64> {
    mel_inv(crate::filterbank::mel(spec.sample_rate as f64 / 2.0)?)
}
