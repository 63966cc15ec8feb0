//! Per-symbol source availability and compartment attribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CompartmentPolicy;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub available: bool,
    /// Rendered body (one op per line) when the source is available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    pub compartment: String,
    /// True when the owning compartment is the untrusted one.
    #[serde(default)]
    pub untrusted: bool,
    /// True when no policy glob matched and attribution fell back to the
    /// trusted application compartment.
    #[serde(default)]
    pub defaulted: bool,
}

/// Map from function symbol to its source entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceIndex {
    pub entries: BTreeMap<String, SourceEntry>,
}

impl SourceIndex {
    pub fn get(&self, symbol: &str) -> Option<&SourceEntry> {
        self.entries.get(symbol)
    }

    pub fn has_source(&self, symbol: &str) -> bool {
        self.get(symbol).map(|e| e.available).unwrap_or(false)
    }

    pub fn body(&self, symbol: &str) -> Option<&str> {
        self.get(symbol).and_then(|e| e.body.as_deref())
    }

    /// Symbols whose attribution fell back to the default trusted compartment.
    pub fn defaulted_symbols(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.defaulted)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Derive the index for a scenario: bodies come from the rendered op
    /// lists, compartments from the policy's code-unit globs.
    pub fn from_scenario(scenario: &Scenario, policy: &CompartmentPolicy) -> Result<SourceIndex> {
        let mut entries = BTreeMap::new();
        for (symbol, body) in &scenario.functions {
            let attribution = policy.attribute(symbol)?;
            entries.insert(
                symbol.clone(),
                SourceEntry {
                    available: body.has_source,
                    body: body.has_source.then(|| body.render()),
                    file: None,
                    line: None,
                    compartment: attribution.compartment,
                    untrusted: attribution.trust == crate::policy::Trust::Untrusted,
                    defaulted: attribution.defaulted,
                },
            );
        }
        Ok(SourceIndex { entries })
    }

    pub fn parse(text: &str) -> Result<SourceIndex> {
        serde_json::from_str(text).map_err(|e| Error::parse("source index", format!("{e}")))
    }
}
