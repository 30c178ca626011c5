//! Run configuration, run manifests and exit-code mapping for the
//! `vemfuse` binary.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vemfuse_core::losses::FusionConfig;
use vemfuse_core::structure::StructConfig;
use vemfuse_core::text::TextConfig;
use vemfuse_core::trainer::TrainConfig;

/// Stable process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    /// Bad input data, configuration or arguments.
    pub const VALIDATION: i32 = 2;
    pub const MISSING_CHECKPOINT: i32 = 3;
    pub const NON_FINITE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("invalid configuration {path}: {msg}")]
    BadConfig { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("diagnostic check failed: {0}")]
    CheckFailed(String),
}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use vemfuse_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::MissingCheckpoint(_) => exit::MISSING_CHECKPOINT,
                CliError::BadConfig { .. } | CliError::Invalid(_) => exit::VALIDATION,
                CliError::CheckFailed(_) => exit::FAILURE,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite { .. } => exit::NON_FINITE,
                E::Parse { .. }
                | E::Leakage(..)
                | E::InvalidFraction(_)
                | E::Config(_)
                | E::OutOfRange { .. }
                | E::EmptyLabelSet
                | E::Json(_) => exit::VALIDATION,
                _ => exit::FAILURE,
            };
        }
    }
    exit::FAILURE
}

/// Everything a run is configured by. Every section is optional in the
/// JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub structure: StructConfig,
    pub text: TextConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::BadConfig {
            path: path.to_path_buf(),
            msg,
        };
        let s = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_str(&s).map_err(|e| bad(e.to_string()))?;
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> vemfuse_core::Result<()> {
        self.train.validate()?;
        self.fusion.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Written into the run directory before any training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_dir: Option<PathBuf>,
    pub dataset_files: Vec<FileDigest>,
    /// Checkpoints the run starts from.
    pub inputs: Vec<FileDigest>,
    /// Files the run will write, relative to the run directory.
    pub artifacts: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    /// Writes the manifest; refuses to replace one that already exists.
    pub fn write_new(&self, run_dir: &Path) -> Result<PathBuf, CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        if path.exists() {
            return Err(CliError::Invalid(format!(
                "{} already holds a run; pick another --name or run directory",
                run_dir.display()
            )));
        }
        fs::create_dir_all(run_dir).map_err(|e| CliError::Invalid(e.to_string()))?;
        let s = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, s).map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(path)
    }
}

/// Digests of the dataset files present in `dir`.
pub fn dataset_digests(dir: &Path) -> std::io::Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for name in [
        "train.tsv",
        "valid.tsv",
        "test.tsv",
        "entity_text.tsv",
        "relation_text.tsv",
    ] {
        let p = dir.join(name);
        if p.exists() {
            out.push(FileDigest::of(&p)?);
        }
    }
    Ok(out)
}

/// Run directory: explicit path, else `$VEMFUSE_RUN_DIR/<name>`, else
/// `runs/<name>`.
pub fn run_dir(explicit: Option<&Path>, root: Option<&Path>, name: &str) -> PathBuf {
    match (explicit, root) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => r.join(name),
        (None, None) => PathBuf::from("runs").join(name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn config_sections_are_optional() {
        let c: RunConfig = serde_json::from_str(r#"{"fusion": {"beta_t": 4.0}}"#).unwrap();
        assert_eq!(c.fusion.beta_t, 4.0);
        assert_eq!(c.train, TrainConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"fusoin": {}}"#).is_err());
    }

    #[test]
    fn core_errors_map_to_codes() {
        let e = anyhow::Error::new(vemfuse_core::Error::InvalidFraction(2.0));
        assert_eq!(exit_code(&e), exit::VALIDATION);
        let e = anyhow::Error::new(vemfuse_core::Error::NonFinite {
            what: "loss".into(),
            context: "x".into(),
        });
        assert_eq!(exit_code(&e.context("training")), exit::NON_FINITE);
        let e = anyhow::Error::new(CliError::MissingCheckpoint("a".into()));
        assert_eq!(exit_code(&e), exit::MISSING_CHECKPOINT);
    }
}
