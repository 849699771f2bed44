use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Loaded;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to regenerate a command's outputs. No timestamps or
/// host details, so reruns write identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub wallclock: bool,
    /// Resolved config after overrides.
    pub config: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn digest_file(root: &Path, rel: &str) -> Result<FileDigest, CliError> {
    let bytes =
        fs::read(root.join(rel)).map_err(|e| CliError::MissingInput(format!("{rel}: {e}")))?;
    Ok(FileDigest {
        path: rel.to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Files written by a command, collected for the manifest.
pub struct Outputs {
    root: PathBuf,
    inputs: Vec<String>,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            inputs: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Declares an upstream artifact; errors if it has not been produced.
    pub fn require(&mut self, rel: &str, producer: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if !p.exists() {
            return Err(CliError::MissingInput(format!(
                "{} not found; run `{producer}` first",
                p.display()
            )));
        }
        self.inputs.push(rel.to_string());
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.record(rel);
        Ok(())
    }

    /// Registers a file written by someone else.
    pub fn record(&mut self, rel: &str) {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
    }

    fn digests(&self, names: &[String]) -> Result<Vec<FileDigest>, CliError> {
        let mut out = Vec::new();
        for rel in names {
            let p = self.root.join(rel);
            if p.is_dir() {
                let mut entries: Vec<String> = fs::read_dir(&p)?
                    .map(|e| e.map(|e| format!("{rel}/{}", e.file_name().to_string_lossy())))
                    .collect::<Result<_, _>>()?;
                entries.sort();
                for e in entries {
                    out.push(digest_file(&self.root, &e)?);
                }
            } else {
                out.push(digest_file(&self.root, rel)?);
            }
        }
        Ok(out)
    }

    pub fn finish(
        self,
        loaded: &Loaded,
        command: &str,
        wallclock: bool,
    ) -> Result<Vec<String>, CliError> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: loaded.config.seed,
            config_sha256: loaded.config_hash(),
            overrides: loaded.overrides.clone(),
            wallclock,
            config: loaded.canonical_toml(),
            inputs: self.digests(&self.inputs)?,
            outputs: self.digests(&self.files)?,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            + "\n";
        let rel = format!("manifests/{command}.json");
        let p = self.root.join(&rel);
        fs::create_dir_all(p.parent().expect("has parent"))?;
        fs::write(&p, text)?;
        let mut files = self.files;
        files.push(rel);
        Ok(files)
    }
}
