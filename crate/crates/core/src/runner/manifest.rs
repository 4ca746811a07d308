use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ULAB_OUT";

/// Output root: `explicit`, else `$ULAB_OUT`, else `./runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Epoch count a sweep used for one method and ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub method: String,
    pub ratio: f64,
    pub epochs: usize,
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, TOML.
    pub config: String,
    pub seeds: Vec<u64>,
    /// Input name → file path.
    pub input_paths: BTreeMap<String, PathBuf>,
    /// Input name → SHA-256 of the file contents.
    pub input_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_unix: u64,
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
}

impl RunManifest {
    pub fn new(command: &str, config: String, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seeds,
            input_paths: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            schedule: Vec::new(),
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.input_hashes.insert(name.to_string(), sha256_file(path)?);
        self.input_paths.insert(name.to_string(), path.to_path_buf());
        Ok(())
    }

    /// Re-hashes every recorded input and fails on the first mismatch.
    pub fn verify_inputs(&self) -> Result<()> {
        for (name, path) in &self.input_paths {
            let want = self
                .input_hashes
                .get(name)
                .ok_or_else(|| Error::Data(format!("manifest has no hash for input `{name}`")))?;
            let got = sha256_file(path)?;
            if &got != want {
                return Err(Error::Data(format!(
                    "input `{name}` ({}) changed since the manifest was written: {got} != {want}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        super::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trip_and_input_check() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("data.bin");
        std::fs::write(&input, b"abc").unwrap();
        let mut m = RunManifest::new("sweep", "[sweep]\ntrials = 1\n".into(), vec![0, 1]);
        m.add_input("data", &input).unwrap();
        assert_eq!(m.input_hashes["data"], sha256_bytes(b"abc"));
        let path = m.write(dir.path()).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        back.verify_inputs().unwrap();
        std::fs::write(&input, b"abd").unwrap();
        assert!(matches!(back.verify_inputs(), Err(Error::Data(_))));
    }

    #[test]
    fn explicit_root_wins() {
        assert_eq!(output_root(Some(Path::new("/x"))), PathBuf::from("/x"));
    }
}
