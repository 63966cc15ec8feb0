//! Compartmentalization policy and interface description.
//!
//! A policy document declares the compartments (with their trust level and
//! owned code units), the trust model enforced between them, the security
//! goals the compartmentalization protects, and the interface: the list of
//! functions making up the boundary between the compartments, with typed
//! parameters. Return-direction data is modeled as a parameter named
//! `return`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::{Path, Seg, Value};

/// Which compartments are trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrustModel {
    Sandbox,
    Safebox,
    MutualDistrust,
}

impl fmt::Display for TrustModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrustModel::Sandbox => "sandbox",
            TrustModel::Safebox => "safebox",
            TrustModel::MutualDistrust => "mutual-distrust",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trust {
    Trusted,
    Untrusted,
}

/// Security property the compartmentalization aims to preserve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecurityGoal {
    Confidentiality,
    Integrity,
    Availability,
}

impl fmt::Display for SecurityGoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecurityGoal::Confidentiality => "confidentiality",
            SecurityGoal::Integrity => "integrity",
            SecurityGoal::Availability => "availability",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Compartment {
    pub name: String,
    pub trust: Trust,
    /// Globs over function symbols (or source files) owned by the compartment.
    pub code_units: Vec<String>,
}

/// Closed set or inclusive range of legal scalar values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarDomain {
    Range { min: i64, max: i64 },
    Set { set: BTreeSet<i64> },
}

impl ScalarDomain {
    pub fn contains(&self, v: i64) -> bool {
        match self {
            ScalarDomain::Range { min, max } => v >= *min && v <= *max,
            ScalarDomain::Set { set } => set.contains(&v),
        }
    }

    /// A value guaranteed outside the domain, if one exists.
    pub fn out_of_domain_value(&self) -> Option<i64> {
        match self {
            ScalarDomain::Range { min, max } => max
                .checked_add(1)
                .or_else(|| min.checked_sub(1)),
            ScalarDomain::Set { set } => {
                let max = set.iter().next_back().copied()?;
                max.checked_add(1)
                    .or_else(|| set.iter().next().and_then(|min| min.checked_sub(1)))
            }
        }
    }
}

impl fmt::Display for ScalarDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarDomain::Range { min, max } => write!(f, "[{min}, {max}]"),
            ScalarDomain::Set { set } => {
                write!(f, "{{")?;
                for (i, v) in set.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "}}")
            }
        }
    }
}

/// Type of a value crossing the interface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IfaceType {
    Pointer {
        target_kind: String,
        /// Size in bytes of the pointed-to object, used to scope mapping checks.
        target_size: u64,
    },
    Scalar {
        domain: ScalarDomain,
    },
    Structured {
        fields: BTreeMap<String, IfaceType>,
    },
    OpaqueHandle {
        kind: String,
    },
}

impl IfaceType {
    pub fn leaf_name(&self) -> &'static str {
        match self {
            IfaceType::Pointer { .. } => "pointer",
            IfaceType::Scalar { .. } => "scalar",
            IfaceType::Structured { .. } => "structured",
            IfaceType::OpaqueHandle { .. } => "opaque_handle",
        }
    }

    /// Does a concrete value fit this type?
    pub fn admits(&self, value: &Value) -> bool {
        match (self, value) {
            (IfaceType::Pointer { .. }, Value::Ptr(_)) => true,
            (IfaceType::Scalar { .. }, Value::Int(_)) => true,
            (IfaceType::OpaqueHandle { .. }, Value::Handle { .. }) => true,
            (IfaceType::Structured { fields }, Value::Struct(vals)) => {
                fields.len() == vals.len()
                    && fields.iter().all(|(name, ty)| {
                        vals.get(name).map(|v| ty.admits(v)).unwrap_or(false)
                    })
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IfaceParam {
    pub name: String,
    pub iface_type: IfaceType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IfaceFunction {
    pub name: String,
    pub owner_compartment: String,
    pub params: Vec<IfaceParam>,
}

/// The list of functions making up the boundary between compartments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceSpec {
    pub functions: Vec<IfaceFunction>,
}

impl InterfaceSpec {
    pub fn function(&self, name: &str) -> Option<&IfaceFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Resolve an access path against a function's parameters, yielding the
    /// leaf type at that position.
    pub fn resolve_path<'a>(&'a self, function: &str, path: &Path) -> Result<&'a IfaceType> {
        let func = self.function(function).ok_or_else(|| Error::PathUnresolvable {
            path: path.to_string(),
            detail: format!("unknown interface function `{function}`"),
        })?;
        let param = func
            .params
            .iter()
            .find(|p| p.name == path.root)
            .ok_or_else(|| Error::PathUnresolvable {
                path: path.to_string(),
                detail: format!("`{function}` has no parameter `{}`", path.root),
            })?;
        let mut cur = &param.iface_type;
        for seg in &path.segs {
            match (cur, seg) {
                (IfaceType::Structured { fields }, Seg::Field(name)) => {
                    cur = fields.get(name).ok_or_else(|| Error::PathUnresolvable {
                        path: path.to_string(),
                        detail: format!("no field `{name}`"),
                    })?;
                }
                (other, seg) => {
                    return Err(Error::PathUnresolvable {
                        path: path.to_string(),
                        detail: format!("cannot take {seg:?} of {}", other.leaf_name()),
                    });
                }
            }
        }
        Ok(cur)
    }

    /// Enumerate every mutable leaf of a function's parameters, in canonical
    /// (parameter order, then lexicographic field) order.
    pub fn leaf_paths(&self, function: &str) -> Result<Vec<(Path, IfaceType)>> {
        let func = self.function(function).ok_or_else(|| {
            Error::invalid("interface", format!("unknown function `{function}`"))
        })?;
        let mut out = Vec::new();
        for param in &func.params {
            collect_leaves(&Path::root(&param.name), &param.iface_type, &mut out);
        }
        Ok(out)
    }
}

fn collect_leaves(prefix: &Path, ty: &IfaceType, out: &mut Vec<(Path, IfaceType)>) {
    match ty {
        IfaceType::Structured { fields } => {
            for (name, inner) in fields {
                collect_leaves(&prefix.clone().field(name), inner, out);
            }
        }
        leaf => out.push((prefix.clone(), leaf.clone())),
    }
}

/// The compartmentalization characteristics: compartments, trust model,
/// security goals, and the interface under test.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompartmentPolicy {
    pub compartments: Vec<Compartment>,
    pub trust_model: TrustModel,
    pub security_goals: BTreeSet<SecurityGoal>,
    pub interface: InterfaceSpec,
}

/// Where a symbol was attributed and whether any glob actually matched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribution {
    pub compartment: String,
    pub trust: Trust,
    /// True when no code_unit glob matched and the symbol fell back to the
    /// trusted application compartment.
    pub defaulted: bool,
}

impl CompartmentPolicy {
    pub fn compartment(&self, name: &str) -> Option<&Compartment> {
        self.compartments.iter().find(|c| c.name == name)
    }

    pub fn untrusted_compartment(&self) -> &Compartment {
        // Guaranteed by the parse-time invariant.
        self.compartments
            .iter()
            .find(|c| c.trust == Trust::Untrusted)
            .expect("policy invariant: exactly one untrusted compartment")
    }

    fn default_trusted(&self) -> &Compartment {
        self.compartments
            .iter()
            .find(|c| c.trust == Trust::Trusted)
            .expect("policy invariant: at least one trusted compartment")
    }

    /// Attribute a function symbol to a compartment via the code_unit globs.
    ///
    /// A symbol matching no glob defaults to the first trusted compartment
    /// and is flagged; a symbol matching globs of two compartments violates
    /// the partition invariant.
    pub fn attribute(&self, symbol: &str) -> Result<Attribution> {
        let mut hit: Option<&Compartment> = None;
        for comp in &self.compartments {
            if comp.code_units.iter().any(|g| glob_match(g, symbol)) {
                if let Some(prev) = hit {
                    return Err(Error::invalid(
                        "policy",
                        format!(
                            "symbol `{symbol}` matches code units of both `{}` and `{}`",
                            prev.name, comp.name
                        ),
                    ));
                }
                hit = Some(comp);
            }
        }
        Ok(match hit {
            Some(comp) => Attribution {
                compartment: comp.name.clone(),
                trust: comp.trust,
                defaulted: false,
            },
            None => {
                let comp = self.default_trusted();
                Attribution {
                    compartment: comp.name.clone(),
                    trust: Trust::Trusted,
                    defaulted: true,
                }
            }
        })
    }

    pub fn is_untrusted(&self, symbol: &str) -> Result<bool> {
        Ok(self.attribute(symbol)?.trust == Trust::Untrusted)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.compartments.is_empty() {
            return Err(Error::invalid("policy", "no compartments declared"));
        }
        let untrusted = self
            .compartments
            .iter()
            .filter(|c| c.trust == Trust::Untrusted)
            .count();
        if untrusted == 0 {
            return Err(Error::invalid(
                "policy",
                "no attack surface: no compartment is untrusted",
            ));
        }
        if untrusted > 1 {
            return Err(Error::invalid(
                "policy",
                format!("{untrusted} untrusted compartments; exactly one is supported"),
            ));
        }
        if self.compartments.iter().all(|c| c.trust == Trust::Untrusted) {
            return Err(Error::invalid("policy", "no trusted compartment"));
        }
        let mut names = BTreeSet::new();
        for comp in &self.compartments {
            if !names.insert(comp.name.as_str()) {
                return Err(Error::invalid(
                    "policy",
                    format!("duplicate compartment `{}`", comp.name),
                ));
            }
        }
        for func in &self.interface.functions {
            if self.compartment(&func.owner_compartment).is_none() {
                return Err(Error::invalid(
                    "policy",
                    format!(
                        "interface function `{}` owned by unknown compartment `{}`",
                        func.name, func.owner_compartment
                    ),
                ));
            }
            let mut params = BTreeSet::new();
            for p in &func.params {
                if !params.insert(p.name.as_str()) {
                    return Err(Error::invalid(
                        "policy",
                        format!("duplicate parameter `{}` on `{}`", p.name, func.name),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Parse and validate a policy document (JSON tree).
pub fn parse_policy(text: &str) -> Result<CompartmentPolicy> {
    let policy: CompartmentPolicy = serde_json::from_str(text)
        .map_err(|e| Error::parse("policy", format!("{e}")))?;
    policy.check_invariants()?;
    Ok(policy)
}

/// Minimal glob matcher over symbols: `*` matches any run (including empty),
/// `?` matches one character, everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    fn rec(pat: &[u8], txt: &[u8]) -> bool {
        match pat.first() {
            None => txt.is_empty(),
            Some(b'*') => {
                (0..=txt.len()).any(|skip| rec(&pat[1..], &txt[skip..]))
            }
            Some(b'?') => !txt.is_empty() && rec(&pat[1..], &txt[1..]),
            Some(c) => txt.first() == Some(c) && rec(&pat[1..], &txt[1..]),
        }
    }
    rec(pattern.as_bytes(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sandbox_policy(untrusted: usize) -> String {
        let trusts = ["trusted", "untrusted"];
        let a = trusts[usize::from(untrusted == 0)];
        let b = trusts[usize::from(untrusted == 1)];
        format!(
            r#"{{
              "compartments": [
                {{"name": "ffmpeg", "trust": "{a}", "code_units": ["print_*", "main"]}},
                {{"name": "libavcodec", "trust": "{b}", "code_units": ["libavcodec_*"]}}
              ],
              "trust_model": "sandbox",
              "security_goals": ["availability"],
              "interface": {{"functions": [
                {{"name": "libavcodec_configuration", "owner_compartment": "libavcodec",
                  "params": [{{"name": "return",
                               "iface_type": {{"pointer": {{"target_kind": "char", "target_size": 1}}}}}}]}}
              ]}}
            }}"#
        )
    }

    #[test]
    fn parses_sandbox_policy() {
        let policy = parse_policy(&sandbox_policy(1)).unwrap();
        assert_eq!(policy.trust_model, TrustModel::Sandbox);
        assert_eq!(policy.untrusted_compartment().name, "libavcodec");
        assert_eq!(
            policy.attribute("libavcodec_configuration").unwrap().trust,
            Trust::Untrusted
        );
    }

    #[test]
    fn rejects_zero_untrusted() {
        let text = sandbox_policy(1)
            .replace("\"untrusted\"", "\"trusted\"");
        let err = parse_policy(&text).unwrap_err();
        assert!(err.to_string().contains("no attack surface"), "{err}");
    }

    #[test]
    fn rejects_unknown_trust_model() {
        let text = sandbox_policy(1).replace("sandbox", "enclave");
        assert!(parse_policy(&text).is_err());
    }

    #[test]
    fn unmatched_symbol_defaults_to_trusted_and_flags() {
        let policy = parse_policy(&sandbox_policy(1)).unwrap();
        let att = policy.attribute("strcmp").unwrap();
        assert_eq!(att.trust, Trust::Trusted);
        assert!(att.defaulted);
        let att = policy.attribute("print_all_libs_info").unwrap();
        assert!(!att.defaulted);
    }

    #[test]
    fn glob_basics() {
        assert!(glob_match("ap_*", "ap_invoke_handler"));
        assert!(glob_match("*", "anything"));
        assert!(glob_match("log_?eader", "log_header"));
        assert!(!glob_match("ap_*", "log_header"));
        assert!(glob_match("main", "main"));
        assert!(!glob_match("main", "main2"));
    }

    #[test]
    fn leaf_path_enumeration_is_canonical() {
        let text = r#"{
          "compartments": [
            {"name": "app", "trust": "trusted", "code_units": ["app_*"]},
            {"name": "ext", "trust": "untrusted", "code_units": ["ext_*"]}
          ],
          "trust_model": "sandbox",
          "security_goals": [],
          "interface": {"functions": [
            {"name": "ext_entry", "owner_compartment": "ext", "params": [
              {"name": "r", "iface_type": {"structured": {"fields": {
                 "hdr": {"pointer": {"target_kind": "t", "target_size": 8}},
                 "len": {"scalar": {"domain": {"min": 0, "max": 10}}}}}}},
              {"name": "h", "iface_type": {"opaque_handle": {"kind": "sess"}}}
            ]}
          ]}
        }"#;
        let policy = parse_policy(text).unwrap();
        let leaves = policy.interface.leaf_paths("ext_entry").unwrap();
        let names: Vec<String> = leaves.iter().map(|(p, _)| p.to_string()).collect();
        assert_eq!(names, vec!["r.hdr", "r.len", "h"]);
    }

    #[test]
    fn scalar_domain_membership() {
        let range = ScalarDomain::Range { min: 0, max: 15 };
        assert!(range.contains(0) && range.contains(15));
        assert!(!range.contains(-1) && !range.contains(16));
        assert_eq!(range.out_of_domain_value(), Some(16));
        let set = ScalarDomain::Set {
            set: BTreeSet::from([1, 3, 5]),
        };
        assert!(set.contains(3) && !set.contains(2));
    }
}
