//! Configuration files: server file, device file and worker config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Default maximum request body size in MiB.
pub const DEFAULT_MAX_BODY_MIB: u64 = 64;

/// Default number of concurrently running tasks.
pub const DEFAULT_CAPACITY: usize = 4;

/// Server configuration file.
///
/// ```json
/// {
///     "server": "https://dart-server:7777",
///     "client_key": "000"
/// }
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerFileConfig {
    /// Server URL, e.g. `https://dart-server:7777`.
    pub server: String,
    /// Shared key sent by every caller in the auth header.
    pub client_key: String,
    /// Max concurrently running tasks.
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Request body limit in MiB.
    #[serde(default = "default_max_body_mib")]
    pub max_body_mib: u64,
    /// Optional append-only journal for crash recovery.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journal: Option<PathBuf>,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

fn default_max_body_mib() -> u64 {
    DEFAULT_MAX_BODY_MIB
}

impl ServerFileConfig {
    /// Loads the file. The `FEDDART_KEY` environment variable, when set,
    /// overrides the configured key.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        if cfg.server.is_empty() {
            return Err(Error::BadConfig("server URL must be non-empty".into()));
        }
        if cfg.capacity == 0 {
            return Err(Error::BadConfig("capacity must be positive".into()));
        }
        if let Ok(key) = std::env::var("FEDDART_KEY") {
            if !key.is_empty() {
                cfg.client_key = key;
            }
        }
        Ok(cfg)
    }

    /// Port of the server URL, defaulting to 7777.
    pub fn port(&self) -> u16 {
        let rest = self
            .server
            .trim_start_matches("https://")
            .trim_start_matches("http://");
        rest.rsplit_once(':')
            .and_then(|(_, p)| p.trim_end_matches('/').parse().ok())
            .unwrap_or(7777)
    }
}

/// One entry of the device configuration file.
///
/// The `ipAdress` spelling is part of the on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceFileEntry {
    #[serde(rename = "ipAdress")]
    pub ip_address: String,
    pub port: u16,
    pub hardware_config: Option<BTreeMap<String, Value>>,
}

/// Device configuration file: client name to entry.
///
/// In production mode the file is the expected roster the workflow waits for
/// at startup; in test mode it defines the simulated devices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceFile(pub BTreeMap<String, DeviceFileEntry>);

impl DeviceFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        let file: Self = serde_json::from_str(&text)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        for name in file.0.keys() {
            if name == crate::core::BROADCAST_KEY {
                return Err(Error::BadConfig(format!(
                    "device name {name:?} is reserved"
                )));
            }
        }
        Ok(file)
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }
}
