//! Checksummed model registry. A manifest names each model with a URL and
//! its sha256; fetched files are verified before they appear in the cache,
//! and a bad download is moved to a quarantine directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assets;

/// Environment variable overriding the cache root.
pub const CACHE_ENV: &str = "NEUROPIPE_CACHE";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model {0:?} is not in the registry manifest")]
    NotInManifest(String),
    #[error("model {name:?}: sha256 {actual} does not match manifest {expected}; download kept at {quarantined}")]
    ChecksumMismatch {
        name: String,
        expected: String,
        actual: String,
        quarantined: PathBuf,
    },
    #[error("network error fetching {url}: {message}")]
    Network { url: String, message: String },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("cache I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub version: String,
    pub url: String,
    pub sha256: String,
    pub bytes: u64,
    /// Copy of the model's architecture, for listing without downloading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RegistryManifest {
    pub fn from_json(s: &str) -> Result<Self, RegistryError> {
        let m: Self =
            serde_json::from_str(s).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if seen.insert(e.name.as_str(), ()).is_some() {
                return Err(RegistryError::Manifest(format!(
                    "duplicate entry {:?}",
                    e.name
                )));
            }
            let hex_ok = e.sha256.len() == 64
                && e.sha256
                    .bytes()
                    .all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
            if !hex_ok {
                return Err(RegistryError::Manifest(format!(
                    "entry {:?}: sha256 must be 64 lowercase hex digits",
                    e.name
                )));
            }
            if e.name.is_empty() || e.name.contains(['/', '\\']) || e.name.starts_with('.') {
                return Err(RegistryError::Manifest(format!(
                    "entry name {:?} is not a plain file name",
                    e.name
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fetches the bytes behind a URL.
pub trait Transport: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, RegistryError>;
}

/// `bundled://` (models compiled into the binary), `file://` and
/// `http(s)://`.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultTransport;

impl Transport for DefaultTransport {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, RegistryError> {
        let net = |message: String| RegistryError::Network {
            url: url.into(),
            message,
        };
        if let Some(name) = url.strip_prefix("bundled://") {
            return assets::bundled_model(name)
                .map(<[u8]>::to_vec)
                .ok_or_else(|| net("no such bundled model".into()));
        }
        if let Some(path) = url.strip_prefix("file://") {
            return fs::read(path).map_err(|e| net(e.to_string()));
        }
        if url.starts_with("http://") || url.starts_with("https://") {
            let resp = ureq::get(url).call().map_err(|e| net(e.to_string()))?;
            let mut buf = Vec::new();
            resp.into_reader()
                .read_to_end(&mut buf)
                .map_err(|e| net(e.to_string()))?;
            return Ok(buf);
        }
        Err(net("unsupported URL scheme".into()))
    }
}

/// Where a manifest entry stands locally.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryStatus {
    pub entry: ManifestEntry,
    pub cached: Option<PathBuf>,
}

pub struct Registry {
    manifest: RegistryManifest,
    root: PathBuf,
    transport: Arc<dyn Transport>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

/// `$NEUROPIPE_CACHE`, else `$HOME/.cache/neuropipe`, else a directory
/// under the system temp dir.
pub fn default_cache_root() -> PathBuf {
    if let Some(p) = std::env::var_os(CACHE_ENV).filter(|p| !p.is_empty()) {
        return PathBuf::from(p);
    }
    match std::env::var_os("HOME").filter(|p| !p.is_empty()) {
        Some(home) => PathBuf::from(home).join(".cache").join("neuropipe"),
        None => std::env::temp_dir().join("neuropipe-cache"),
    }
}

impl Registry {
    pub fn new(
        manifest: RegistryManifest,
        root: impl Into<PathBuf>,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, RegistryError> {
        manifest.validate()?;
        Ok(Self {
            manifest,
            root: root.into(),
            transport,
            locks: Mutex::new(HashMap::new()),
        })
    }

    /// The manifest shipped with the binary, cached under
    /// [`default_cache_root`].
    pub fn bundled() -> Result<Self, RegistryError> {
        Self::new(
            RegistryManifest::from_json(assets::REGISTRY_MANIFEST)?,
            default_cache_root(),
            Arc::new(DefaultTransport),
        )
    }

    pub fn manifest(&self) -> &RegistryManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry(&self, name: &str) -> Result<&ManifestEntry, RegistryError> {
        self.manifest
            .get(name)
            .ok_or_else(|| RegistryError::NotInManifest(name.into()))
    }

    fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        self.root.join("quarantine")
    }

    fn path_for(&self, e: &ManifestEntry) -> PathBuf {
        self.models_dir()
            .join(format!("{}-{}.dnmd", e.name, e.version))
    }

    fn lock_for(&self, name: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table poisoned")
            .entry(name.into())
            .or_default()
            .clone()
    }

    fn quarantine(
        &self,
        e: &ManifestEntry,
        bytes: &[u8],
        actual: &str,
    ) -> Result<PathBuf, RegistryError> {
        let dir = self.quarantine_dir();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("{}-{}-{}.dnmd", e.name, e.version, &actual[..12]));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Local path of the verified model, downloading it when absent. Calls
    /// for the same name are serialized, so concurrent callers trigger one
    /// download and share its result.
    pub fn fetch(&self, name: &str) -> Result<PathBuf, RegistryError> {
        let e = self.entry(name)?.clone();
        let lock = self.lock_for(name);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path_for(&e);
        if let Ok(existing) = fs::read(&path) {
            let actual = sha256_hex(&existing);
            if actual == e.sha256 {
                return Ok(path);
            }
            // The cache never holds a file that fails its checksum.
            let q = self.quarantine(&e, &existing, &actual)?;
            log::warn!(
                "cached {name:?} failed verification and was moved to {}",
                q.display()
            );
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
        let bytes = self.transport.fetch(&e.url)?;
        let actual = sha256_hex(&bytes);
        if actual != e.sha256 || bytes.len() as u64 != e.bytes {
            let quarantined = self.quarantine(&e, &bytes, &actual)?;
            return Err(RegistryError::ChecksumMismatch {
                name: name.into(),
                expected: e.sha256.clone(),
                actual,
                quarantined,
            });
        }
        let dir = self.models_dir();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let partial = dir.join(format!(
            ".{}-{}.partial-{}",
            e.name,
            e.version,
            std::process::id()
        ));
        fs::write(&partial, &bytes).map_err(io_err(&partial))?;
        fs::rename(&partial, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Removes the cached copy; missing entries are not an error.
    pub fn delete(&self, name: &str) -> Result<(), RegistryError> {
        let Some(e) = self.manifest.get(name).cloned() else {
            return Ok(());
        };
        let lock = self.lock_for(name);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path_for(&e);
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(err) => Err(io_err(&path)(err)),
        }
    }

    pub fn cached_path(&self, name: &str) -> Option<PathBuf> {
        let e = self.manifest.get(name)?;
        let p = self.path_for(e);
        p.is_file().then_some(p)
    }

    pub fn list(&self) -> Vec<EntryStatus> {
        self.manifest
            .entries
            .iter()
            .map(|e| EntryStatus {
                entry: e.clone(),
                cached: self.cached_path(&e.name),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, sha: &str) -> ManifestEntry {
        ManifestEntry {
            name: name.into(),
            version: "1".into(),
            url: format!("file:///{name}"),
            sha256: sha.into(),
            bytes: 0,
            config: None,
        }
    }

    #[test]
    fn manifest_validation() {
        let good = sha256_hex(b"");
        assert_eq!(
            good,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let m = RegistryManifest {
            entries: vec![entry("a", &good)],
        };
        assert!(RegistryManifest::from_json(&m.to_json()).is_ok());
        let dup = RegistryManifest {
            entries: vec![entry("a", &good), entry("a", &good)],
        };
        assert!(dup.validate().is_err());
        let upper = RegistryManifest {
            entries: vec![entry("a", &good.to_uppercase())],
        };
        assert!(upper.validate().is_err());
        let short = RegistryManifest {
            entries: vec![entry("a", &good[..63])],
        };
        assert!(short.validate().is_err());
        let path = RegistryManifest {
            entries: vec![entry("../x", &good)],
        };
        assert!(path.validate().is_err());
    }
}
