use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use lesionscreen_core::engine::DEFAULT_THRESHOLD;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const CONFIG_FORMAT: &str = "svc/1";
pub const ENV_PREFIX: &str = "LESIONSCREEN_";
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

/// Service settings. File values are overridden by `LESIONSCREEN_*` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub format: String,
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_max_upload")]
    pub max_upload_bytes: usize,
    #[serde(default = "default_storage")]
    pub storage_dir: PathBuf,
    /// Static browser bundle served at `/` when present.
    #[serde(default)]
    pub webui_dir: Option<PathBuf>,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_max_upload() -> usize {
    DEFAULT_MAX_UPLOAD_BYTES
}

fn default_storage() -> PathBuf {
    PathBuf::from("storage")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT.to_string(),
            model_path: None,
            bind: default_bind(),
            threshold: default_threshold(),
            max_upload_bytes: default_max_upload(),
            storage_dir: default_storage(),
            webui_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let cfg: ServiceConfig =
            toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        if cfg.format != CONFIG_FORMAT {
            return Err(ServiceError::Config(format!(
                "format {:?}, expected {CONFIG_FORMAT:?}",
                cfg.format
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `LESIONSCREEN_{MODEL_PATH,BIND,THRESHOLD,MAX_UPLOAD_BYTES,STORAGE_DIR,WEBUI_DIR}`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ServiceError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let v = v.as_ref();
            let bad = |what: &str| {
                ServiceError::Config(format!("{ENV_PREFIX}{key}: invalid {what} {v:?}"))
            };
            match key {
                "MODEL_PATH" => self.model_path = Some(PathBuf::from(v)),
                "BIND" => self.bind = v.parse().map_err(|_| bad("socket address"))?,
                "THRESHOLD" => self.threshold = v.parse().map_err(|_| bad("number"))?,
                "MAX_UPLOAD_BYTES" => {
                    self.max_upload_bytes = v.parse().map_err(|_| bad("byte count"))?
                }
                "STORAGE_DIR" => self.storage_dir = PathBuf::from(v),
                "WEBUI_DIR" => self.webui_dir = Some(PathBuf::from(v)),
                _ => {}
            }
        }
        self.validate()
    }

    /// Config file (or defaults) with the process environment applied on top.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ServiceError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.max_upload_bytes == 0 {
            return Err(ServiceError::Config(
                "max_upload_bytes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
