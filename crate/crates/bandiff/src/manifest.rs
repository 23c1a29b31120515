//! Run manifest: a JSON snapshot of the configuration, seeds, and SHA-256
//! hashes of every artifact a trained run depends on. Decode recomputes
//! the hashes and refuses to run on any mismatch, so a swapped EQ profile
//! or stale checkpoint is a hard error instead of silent garbage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

/// Lowercase hex of a byte string.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's raw bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<[u8; 32]> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let digest = Sha256::digest(&bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    Ok(out)
}

/// Canonical file layout under one artifacts root. Every pipeline stage
/// addresses files through this so train- and decode-time paths can never
/// drift apart.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn eq_profile(&self) -> PathBuf {
        self.root.join("eq_profile.json")
    }

    pub fn diffusion_bank(&self) -> PathBuf {
        self.root.join("diffusion_bank.json")
    }

    pub fn codebook(&self) -> PathBuf {
        self.root.join("codebook.json")
    }

    pub fn dataset_index(&self) -> PathBuf {
        self.root.join("dataset_index.json")
    }

    pub fn checkpoint(&self, band: usize) -> PathBuf {
        self.root.join(format!("band_{band}.ckpt"))
    }

    pub fn sidecar(&self, band: usize) -> PathBuf {
        self.root.join(format!("band_{band}.sidecar.json"))
    }

    pub fn loss_csv(&self, band: usize) -> PathBuf {
        self.root.join(format!("loss_band_{band}.csv"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn schedule_csv(&self) -> PathBuf {
        self.root.join("schedule.csv")
    }

    pub fn eval_per_file_csv(&self) -> PathBuf {
        self.root.join("eval_per_file.csv")
    }

    pub fn eval_summary_csv(&self) -> PathBuf {
        self.root.join("eval_summary.csv")
    }
}

/// What a training run produced and everything it depended on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub rng_algorithm: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub eq_profile_sha256: String,
    pub diffusion_bank_sha256: String,
    pub codebook_sha256: String,
    /// One entry per diffusion band, in band order.
    pub checkpoint_sha256: Vec<String>,
}

impl RunManifest {
    /// Snapshot the current on-disk artifacts.
    pub fn from_artifacts(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<Self> {
        let checkpoint_sha256 = (0..cfg.diffusion_n_bands)
            .map(|i| Ok(hex(&file_sha256(paths.checkpoint(i))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: crate::rng::RNG_ALGORITHM.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            eq_profile_sha256: hex(&file_sha256(paths.eq_profile())?),
            diffusion_bank_sha256: hex(&file_sha256(paths.diffusion_bank())?),
            codebook_sha256: hex(&file_sha256(paths.codebook())?),
            checkpoint_sha256,
        })
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
        Ok(serde_json::from_str(&text)?)
    }

    /// Recompute every recorded hash from disk and compare. The first
    /// mismatch is reported by component name.
    pub fn verify_against_files(&self, paths: &ArtifactPaths) -> Result<()> {
        let check = |name: &str, path: PathBuf, want: &str| -> Result<()> {
            let got = hex(&file_sha256(&path)?);
            if got != *want {
                return Err(Error::Integrity(format!(
                    "{name} hash mismatch: manifest {want}, file {got} ({})",
                    path.display()
                )));
            }
            Ok(())
        };
        check("EQ profile", paths.eq_profile(), &self.eq_profile_sha256)?;
        check(
            "diffusion filterbank",
            paths.diffusion_bank(),
            &self.diffusion_bank_sha256,
        )?;
        check("codebook", paths.codebook(), &self.codebook_sha256)?;
        for (i, want) in self.checkpoint_sha256.iter().enumerate() {
            check(
                &format!("band {i} checkpoint"),
                paths.checkpoint(i),
                want,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_matches_known_sha256_vector() {
        let digest = Sha256::digest(b"abc");
        assert_eq!(
            hex(&digest),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    fn fake_artifacts(cfg: &PipelineConfig, dir: &Path) -> ArtifactPaths {
        let paths = ArtifactPaths::new(dir);
        std::fs::write(paths.eq_profile(), b"eq").unwrap();
        std::fs::write(paths.diffusion_bank(), b"bank").unwrap();
        std::fs::write(paths.codebook(), b"book").unwrap();
        for i in 0..cfg.diffusion_n_bands {
            std::fs::write(paths.checkpoint(i), format!("ckpt{i}")).unwrap();
        }
        paths
    }

    #[test]
    fn manifest_round_trip_and_verify() {
        let cfg = PipelineConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let paths = fake_artifacts(&cfg, dir.path());
        let manifest = RunManifest::from_artifacts(&cfg, &paths).unwrap();
        manifest.save(paths.manifest()).unwrap();
        let loaded = RunManifest::load(paths.manifest()).unwrap();
        assert_eq!(manifest, loaded);
        loaded.verify_against_files(&paths).unwrap();
    }

    #[test]
    fn corrupted_component_is_named_in_the_error() {
        let cfg = PipelineConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let paths = fake_artifacts(&cfg, dir.path());
        let manifest = RunManifest::from_artifacts(&cfg, &paths).unwrap();
        std::fs::write(paths.checkpoint(2), b"tampered").unwrap();
        let err = manifest.verify_against_files(&paths).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(err.to_string().contains("band 2 checkpoint"), "{err}");
    }

    #[test]
    fn missing_component_is_a_file_error() {
        let cfg = PipelineConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let paths = fake_artifacts(&cfg, dir.path());
        let manifest = RunManifest::from_artifacts(&cfg, &paths).unwrap();
        std::fs::remove_file(paths.codebook()).unwrap();
        assert!(matches!(
            manifest.verify_against_files(&paths),
            Err(Error::FileNotFound(_))
        ));
    }
}
