//! Run configuration: config file plus flag overrides (flags win).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::NaiveWeights;
use crate::error::{Error, Result};
use crate::stack::SiteStrategy;

/// Which patch generator to use. Options are mutually exclusive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendChoice {
    AwareMock,
    NaiveMock {
        #[serde(default)]
        weights: NaiveWeights,
        #[serde(default)]
        seed: u64,
    },
    Remote {
        #[serde(default)]
        url: Option<String>,
        model: String,
        /// Path to a canned-response fixture; when set, no network is used.
        #[serde(default)]
        replay: Option<PathBuf>,
    },
}

impl Default for BackendChoice {
    fn default() -> Self {
        BackendChoice::AwareMock
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Policy document path; bundled fixtures provide one when omitted.
    pub policy: Option<PathBuf>,
    /// Scenario path or bundled fixture name.
    pub scenario: Option<String>,
    /// Optional external source index (derived from the scenario otherwise).
    pub source_index: Option<PathBuf>,
    pub backend: BackendChoice,
    pub seed: u64,
    pub budget: u64,
    pub probe_budget: u64,
    pub extra_probes: u64,
    pub max_iter: u32,
    pub site_strategy: SiteStrategy,
    pub out: PathBuf,
    #[serde(skip)]
    pub json: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            policy: None,
            scenario: None,
            source_index: None,
            backend: BackendChoice::default(),
            seed: 0,
            budget: 256,
            probe_budget: 32,
            extra_probes: 0,
            max_iter: 5,
            site_strategy: SiteStrategy::Late,
            out: PathBuf::from("civrepair-out"),
            json: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    /// Paths named in the config must exist before any stage runs.
    pub fn check_paths(&self) -> Result<()> {
        let mut missing = Vec::new();
        for path in [&self.policy, &self.source_index].into_iter().flatten() {
            if !path.exists() {
                missing.push(path.display().to_string());
            }
        }
        if let Some(scenario) = &self.scenario {
            let as_path = Path::new(scenario);
            if !as_path.exists() && crate::fixtures::bundled(scenario).is_none() {
                missing.push(scenario.clone());
            }
        }
        if let BackendChoice::Remote {
            replay: Some(replay),
            ..
        } = &self.backend
        {
            if !replay.exists() {
                missing.push(replay.display().to_string());
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "missing input file(s): {}",
                missing.join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_file_overlay() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.max_iter, 5);
        assert_eq!(cfg.probe_budget, 32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"scenario": "apache_markdown", "seed": 7,
                "backend": {"kind": "naive-mock", "weights":
                  {"null_check": 1.0, "sandbox": 0.0, "correct": 0.0}, "seed": 3}}"#,
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.scenario.as_deref(), Some("apache_markdown"));
        assert!(matches!(cfg.backend, BackendChoice::NaiveMock { seed: 3, .. }));
        // Unspecified keys keep defaults.
        assert_eq!(cfg.max_iter, 5);
        cfg.check_paths().unwrap();
    }

    #[test]
    fn missing_paths_are_reported() {
        let cfg = RunConfig {
            policy: Some(PathBuf::from("/does/not/exist.json")),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.check_paths(), Err(Error::Config(_))));
    }
}
