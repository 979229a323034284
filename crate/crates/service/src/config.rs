use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::ServiceError;

/// Upper bound on how long a suspended passport may keep authorizing.
pub const MAX_CACHE_TTL_SECONDS: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Base for the absolute URLs in the discovery document. Defaults to
    /// `http://<listen>`.
    pub public_url: Option<String>,
    /// Directory holding `ring.json` and the PEM keys. `None` keeps an
    /// ephemeral in-memory key.
    pub keyring: Option<PathBuf>,
    /// Pack directory with a `manifest.json`. `None` serves the bundled packs.
    pub packs: Option<PathBuf>,
    /// Audit segment directory. `None` keeps the chain in memory.
    pub audit: Option<PathBuf>,
    /// Passport registry directory. `None` keeps passports in memory.
    pub registry: Option<PathBuf>,
    pub fail_open: bool,
    pub cache_ttl_seconds: u64,
    /// Bearer token for issuance, status changes and reload. Without one the
    /// admin endpoints answer 403.
    pub admin_token: Option<String>,
    /// Write audit entries before answering instead of on a background worker.
    pub sync_audit: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8700".into(),
            public_url: None,
            keyring: None,
            packs: None,
            audit: None,
            registry: None,
            fail_open: false,
            cache_ttl_seconds: 10,
            admin_token: None,
            sync_audit: false,
        }
    }
}

impl ServiceConfig {
    /// Parses a TOML config. Relative paths are resolved against the
    /// directory of the file.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            for dir in [&mut config.keyring, &mut config.packs, &mut config.audit, &mut config.registry]
                .into_iter()
                .flatten()
            {
                if dir.is_relative() {
                    *dir = base.join(&*dir);
                }
            }
        }
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let config: ServiceConfig = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.cache_ttl_seconds > MAX_CACHE_TTL_SECONDS {
            return Err(ServiceError::Config(format!(
                "cache_ttl_seconds = {} exceeds the {MAX_CACHE_TTL_SECONDS} s suspension window",
                self.cache_ttl_seconds
            )));
        }
        if self.admin_token.as_deref().is_some_and(str::is_empty) {
            return Err(ServiceError::Config("admin_token must not be empty".into()));
        }
        Ok(())
    }

    pub fn base_url(&self) -> String {
        self.public_url
            .clone()
            .unwrap_or_else(|| format!("http://{}", self.listen))
            .trim_end_matches('/')
            .to_owned()
    }
}
