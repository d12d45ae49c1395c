use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const ENV_PORT: &str = "PYRAMIDFILL_PORT";
pub const ENV_REGISTRY: &str = "PYRAMIDFILL_REGISTRY";
pub const ENV_PAYLOAD_LIMIT: &str = "PYRAMIDFILL_PAYLOAD_LIMIT";
pub const ENV_MAX_CONCURRENCY: &str = "PYRAMIDFILL_MAX_CONCURRENCY";

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    pub registry_path: Option<PathBuf>,
    /// Largest accepted request body in bytes.
    pub payload_limit: usize,
    /// Inference requests allowed to run at the same time.
    pub max_concurrency: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: 8080,
            registry_path: None,
            payload_limit: 32 * 1024 * 1024,
            max_concurrency: 2,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by the `PYRAMIDFILL_*` environment variables.
    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let mut c = ServiceConfig::default();
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.trim().parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        if let Some(v) = get(ENV_PORT) {
            c.port = parse(ENV_PORT, &v)?;
        }
        if let Some(v) = get(ENV_REGISTRY) {
            c.registry_path = Some(PathBuf::from(v));
        }
        if let Some(v) = get(ENV_PAYLOAD_LIMIT) {
            c.payload_limit = parse(ENV_PAYLOAD_LIMIT, &v)?;
        }
        if let Some(v) = get(ENV_MAX_CONCURRENCY) {
            c.max_concurrency = parse::<usize>(ENV_MAX_CONCURRENCY, &v)?.max(1);
        }
        Ok(c)
    }
}

/// One model of the registry file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    /// Directory holding `level_0 .. level_{L-1}`.
    pub checkpoints: PathBuf,
}

/// `[[models]]` tables of the registry TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    #[serde(default)]
    pub models: Vec<ModelSpec>,
}

impl RegistryFile {
    /// Relative checkpoint paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read registry {}: {e}", path.display()))?;
        let mut reg: RegistryFile =
            toml::from_str(&text).map_err(|e| format!("invalid registry {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut reg.models {
            if m.checkpoints.is_relative() {
                m.checkpoints = base.join(&m.checkpoints);
            }
        }
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for m in &self.models {
            if m.id.is_empty() {
                return Err("model ids must not be empty".into());
            }
            if !seen.insert(&m.id) {
                return Err(format!("duplicate model id {:?}", m.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides() {
        let c = ServiceConfig::from_lookup(|k| match k {
            ENV_PORT => Some("9000".into()),
            ENV_PAYLOAD_LIMIT => Some("1024".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.payload_limit, 1024);
        assert!(c.registry_path.is_none());
        assert!(ServiceConfig::from_lookup(|k| (k == ENV_PORT).then(|| "x".into())).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let reg = RegistryFile {
            models: vec![
                ModelSpec {
                    id: "a".into(),
                    checkpoints: "x".into(),
                },
                ModelSpec {
                    id: "a".into(),
                    checkpoints: "y".into(),
                },
            ],
        };
        assert!(reg.validate().is_err());
    }
}
