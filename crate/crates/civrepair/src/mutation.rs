//! Fuzzer mutation logs and the mutation strategy taxonomy.
//!
//! A mutation log records how a payload was corrupted: which interface
//! function the payload crossed, the access path that was rewritten, the
//! original and mutated values, the strategy applied, and the (seed, index)
//! replay key. The wire form is a single line of `key=value` records:
//!
//! ```text
//! entry=markdown_output path=r.headers_in old=ptr:0x7f0a00001000 new=ptr:0x414100003000 strategy=ptr-unmapped seed=7 index=42
//! ```
//!
//! Values may contain spaces; a whitespace-separated token without `=`
//! continues the previous value. Symbolic descriptions such as
//! `<mapped ptr>` are accepted for hand-written logs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{IfaceType, InterfaceSpec};
use crate::value::{Path, Value};

/// Built-in payload mutation strategies, grouped by the leaf type they apply
/// to. Structured parameters are handled by recursing into their fields, so
/// every strategy here targets a leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationStrategy {
    PtrNull,
    PtrUnmapped,
    PtrMisaligned,
    PtrTruncated,
    ScalarNegative,
    ScalarZero,
    ScalarMax,
    ScalarOutOfDomain,
    HandleFormatCorrupt,
    HandleStaleId,
    HandleWrongKind,
}

impl MutationStrategy {
    pub const ALL: &'static [MutationStrategy] = &[
        MutationStrategy::PtrNull,
        MutationStrategy::PtrUnmapped,
        MutationStrategy::PtrMisaligned,
        MutationStrategy::PtrTruncated,
        MutationStrategy::ScalarNegative,
        MutationStrategy::ScalarZero,
        MutationStrategy::ScalarMax,
        MutationStrategy::ScalarOutOfDomain,
        MutationStrategy::HandleFormatCorrupt,
        MutationStrategy::HandleStaleId,
        MutationStrategy::HandleWrongKind,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            MutationStrategy::PtrNull => "ptr-null",
            MutationStrategy::PtrUnmapped => "ptr-unmapped",
            MutationStrategy::PtrMisaligned => "ptr-misaligned",
            MutationStrategy::PtrTruncated => "ptr-truncated",
            MutationStrategy::ScalarNegative => "scalar-negative",
            MutationStrategy::ScalarZero => "scalar-zero",
            MutationStrategy::ScalarMax => "scalar-max",
            MutationStrategy::ScalarOutOfDomain => "scalar-out-of-domain",
            MutationStrategy::HandleFormatCorrupt => "handle-format-corrupt",
            MutationStrategy::HandleStaleId => "handle-stale-id",
            MutationStrategy::HandleWrongKind => "handle-wrong-kind",
        }
    }

    pub fn parse(text: &str) -> Result<MutationStrategy> {
        Self::ALL
            .iter()
            .copied()
            .find(|s| s.id() == text)
            .ok_or_else(|| Error::parse("mutation strategy", format!("unknown `{text}`")))
    }

    /// Strategies applicable to a leaf type, in canonical order.
    pub fn for_leaf(leaf: &IfaceType) -> &'static [MutationStrategy] {
        match leaf {
            IfaceType::Pointer { .. } => &[
                MutationStrategy::PtrNull,
                MutationStrategy::PtrUnmapped,
                MutationStrategy::PtrMisaligned,
                MutationStrategy::PtrTruncated,
            ],
            IfaceType::Scalar { .. } => &[
                MutationStrategy::ScalarNegative,
                MutationStrategy::ScalarZero,
                MutationStrategy::ScalarMax,
                MutationStrategy::ScalarOutOfDomain,
            ],
            IfaceType::OpaqueHandle { .. } => &[
                MutationStrategy::HandleFormatCorrupt,
                MutationStrategy::HandleStaleId,
                MutationStrategy::HandleWrongKind,
            ],
            IfaceType::Structured { .. } => &[],
        }
    }

    pub fn applies_to(&self, leaf: &IfaceType) -> bool {
        Self::for_leaf(leaf).contains(self)
    }
}

impl fmt::Display for MutationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// A logged value: either a concrete typed value or a symbolic description
/// from a hand-written log (`<mapped ptr>`). Symbolic values fit any type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoggedValue {
    Concrete(Value),
    Symbolic(String),
}

impl LoggedValue {
    fn parse(text: &str) -> LoggedValue {
        let text = text.trim();
        if text.starts_with('<') && text.ends_with('>') {
            return LoggedValue::Symbolic(text.to_string());
        }
        match Value::parse_literal(text) {
            Ok(v) => LoggedValue::Concrete(v),
            Err(_) => LoggedValue::Symbolic(text.to_string()),
        }
    }

    fn fits(&self, ty: &IfaceType) -> bool {
        match self {
            LoggedValue::Symbolic(_) => true,
            LoggedValue::Concrete(v) => ty.admits(v),
        }
    }
}

impl fmt::Display for LoggedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoggedValue::Concrete(v) => write!(f, "{v}"),
            LoggedValue::Symbolic(s) => write!(f, "{s}"),
        }
    }
}

/// How a payload was corrupted, with its replay key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationLog {
    /// The interface function whose payload was mutated.
    pub entry_function: String,
    pub mutated_path: Path,
    pub original_value: LoggedValue,
    pub mutated_value: LoggedValue,
    pub strategy: MutationStrategy,
    pub seed: u64,
    pub index: u64,
}

impl MutationLog {
    /// Render the single-line `key=value` wire form.
    pub fn to_line(&self) -> String {
        format!(
            "entry={} path={} old={} new={} strategy={} seed={} index={}",
            self.entry_function,
            self.mutated_path,
            self.original_value,
            self.mutated_value,
            self.strategy,
            self.seed,
            self.index
        )
    }
}

/// Parse a mutation log line and type-check it against the interface.
pub fn parse_mutation_log(text: &str, iface: &InterfaceSpec) -> Result<MutationLog> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::parse("mutation log", "no record line found"))?;

    let mut pairs: Vec<(String, String)> = Vec::new();
    for token in line.split_whitespace() {
        match token.split_once('=') {
            Some((k, v)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                pairs.push((k.to_string(), v.to_string()));
            }
            _ => match pairs.last_mut() {
                // Continuation of the previous value (e.g. `old=<mapped ptr>`).
                Some((_, v)) => {
                    v.push(' ');
                    v.push_str(token);
                }
                None => {
                    return Err(Error::parse(
                        "mutation log",
                        format!("stray token `{token}` before any key"),
                    ))
                }
            },
        }
    }

    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::parse("mutation log", format!("missing key `{key}`")))
    };

    let entry_function = get("entry")?.to_string();
    let mutated_path = Path::parse(get("path")?)?;
    let original_value = LoggedValue::parse(get("old")?);
    let mutated_value = LoggedValue::parse(get("new")?);
    let strategy = MutationStrategy::parse(get("strategy")?)?;
    let seed = get("seed").unwrap_or("0").parse::<u64>().map_err(|e| {
        Error::parse("mutation log", format!("bad seed: {e}"))
    })?;
    let index = get("index").unwrap_or("0").parse::<u64>().map_err(|e| {
        Error::parse("mutation log", format!("bad index: {e}"))
    })?;

    let leaf = iface.resolve_path(&entry_function, &mutated_path)?;
    if !mutated_value.fits(leaf) {
        return Err(Error::Invalid {
            what: "mutation log",
            detail: format!(
                "mutated value {mutated_value} does not fit declared type {} at `{mutated_path}`",
                leaf.leaf_name()
            ),
        });
    }

    Ok(MutationLog {
        entry_function,
        mutated_path,
        original_value,
        mutated_value,
        strategy,
        seed,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse_policy;

    fn apache_iface() -> InterfaceSpec {
        let policy = parse_policy(
            r#"{
              "compartments": [
                {"name": "httpd", "trust": "trusted", "code_units": ["ap_*", "log_*"]},
                {"name": "mod_markdown", "trust": "untrusted", "code_units": ["markdown_*"]}
              ],
              "trust_model": "sandbox",
              "security_goals": ["integrity", "availability"],
              "interface": {"functions": [
                {"name": "markdown_output", "owner_compartment": "mod_markdown", "params": [
                  {"name": "r", "iface_type": {"structured": {"fields": {
                    "headers_in": {"pointer": {"target_kind": "apr_table_t", "target_size": 24}}
                  }}}}
                ]}
              ]}
            }"#,
        )
        .unwrap();
        policy.interface
    }

    #[test]
    fn parses_apache_style_log() {
        let iface = apache_iface();
        let log = parse_mutation_log(
            "entry=markdown_output path=r.headers_in old=<mapped ptr> new=0x414141410000 strategy=ptr-unmapped",
            &iface,
        )
        .unwrap();
        assert_eq!(log.entry_function, "markdown_output");
        assert_eq!(log.mutated_path.to_string(), "r.headers_in");
        assert_eq!(
            log.mutated_value,
            LoggedValue::Concrete(Value::Ptr(0x414141410000))
        );
        assert_eq!(log.strategy, MutationStrategy::PtrUnmapped);
        assert_eq!(
            log.original_value,
            LoggedValue::Symbolic("<mapped ptr>".into())
        );
    }

    #[test]
    fn identity_mutation_is_valid() {
        let iface = apache_iface();
        let log = parse_mutation_log(
            "entry=markdown_output path=r.headers_in old=0x1000 new=0x1000 strategy=ptr-null seed=1 index=2",
            &iface,
        )
        .unwrap();
        assert_eq!(log.original_value, log.mutated_value);
        assert_eq!((log.seed, log.index), (1, 2));
    }

    #[test]
    fn rejects_unresolvable_path() {
        let iface = apache_iface();
        let err = parse_mutation_log(
            "entry=markdown_output path=r.nope old=null new=null strategy=ptr-null",
            &iface,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PathUnresolvable { .. }));
    }

    #[test]
    fn rejects_type_mismatch() {
        let iface = apache_iface();
        let err = parse_mutation_log(
            "entry=markdown_output path=r.headers_in old=null new=int:7 strategy=ptr-null",
            &iface,
        )
        .unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
    }

    #[test]
    fn line_roundtrip() {
        let iface = apache_iface();
        let log = parse_mutation_log(
            "entry=markdown_output path=r.headers_in old=ptr:0x1000 new=null strategy=ptr-null seed=9 index=3",
            &iface,
        )
        .unwrap();
        let back = parse_mutation_log(&log.to_line(), &iface).unwrap();
        assert_eq!(log, back);
    }
}
