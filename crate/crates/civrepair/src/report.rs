//! Normalized sanitizer crash reports.
//!
//! Two input forms are accepted: the normalized JSON document (the format
//! this toolkit emits), and the sanitizer frame-list style where each frame
//! looks like
//!
//! ```text
//!     #0 0x7fffe1cc6375 in apr_table_get (/usr/lib/x86_64-linux-gnu/libapr-1.so.0+0x1a375)
//!     #1 0x5555556b1776 in log_table_entry
//! ```
//!
//! Frames whose module is a shared-object path are marked as lacking source.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fault classification, mirroring sanitizer verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrashKind {
    SegvRead,
    SegvWrite,
    OverflowRead,
    OverflowWrite,
    Abort,
}

impl fmt::Display for CrashKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrashKind::SegvRead => "segv-read",
            CrashKind::SegvWrite => "segv-write",
            CrashKind::OverflowRead => "overflow-read",
            CrashKind::OverflowWrite => "overflow-write",
            CrashKind::Abort => "abort",
        })
    }
}

/// One stack frame, index 0 at the crash site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub index: usize,
    pub symbol: String,
    pub module: String,
    pub has_source: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub kind: CrashKind,
    pub fault_address: u64,
    pub access_size: u64,
    pub frames: Vec<Frame>,
}

// Wire form keeps the fault address as a hex string.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrashReportWire {
    kind: CrashKind,
    fault_address: String,
    access_size: u64,
    frames: Vec<Frame>,
}

impl Serialize for CrashReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CrashReportWire {
            kind: self.kind,
            fault_address: format!("{:#x}", self.fault_address),
            access_size: self.access_size,
            frames: self.frames.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CrashReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = CrashReportWire::deserialize(d)?;
        let addr = parse_hex(&wire.fault_address).ok_or_else(|| {
            serde::de::Error::custom(format!("bad fault_address `{}`", wire.fault_address))
        })?;
        Ok(CrashReport {
            kind: wire.kind,
            fault_address: addr,
            access_size: wire.access_size,
            frames: wire.frames,
        })
    }
}

fn parse_hex(text: &str) -> Option<u64> {
    let t = text.trim();
    if let Some(h) = t.strip_prefix("0x") {
        u64::from_str_radix(h, 16).ok()
    } else {
        t.parse::<u64>().ok()
    }
}

impl CrashReport {
    pub fn crash_site(&self) -> &Frame {
        &self.frames[0]
    }

    pub fn stack_symbols(&self) -> Vec<String> {
        self.frames.iter().map(|f| f.symbol.clone()).collect()
    }

    fn check_invariants(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("crash report", "empty stack"));
        }
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.index != i {
                return Err(Error::invalid(
                    "crash report",
                    format!("frame indices not contiguous: expected {i}, got {}", frame.index),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("crash report serializes")
    }
}

/// Parse either the normalized JSON report or sanitizer frame-list text.
pub fn parse_sanitizer_report(text: &str) -> Result<CrashReport> {
    let trimmed = text.trim_start();
    let report = if trimmed.starts_with('{') {
        serde_json::from_str::<CrashReport>(text)
            .map_err(|e| Error::parse("crash report", format!("{e}")))?
    } else {
        parse_frame_list(text)?
    };
    report.check_invariants()?;
    Ok(report)
}

/// Is the module string an external shared object (no source available)?
fn is_shared_object(module: &str) -> bool {
    module.ends_with(".so") || module.contains(".so.") || module.contains(".so+")
}

fn parse_frame_list(text: &str) -> Result<CrashReport> {
    let mut kind: Option<CrashKind> = None;
    let mut fault_address = 0u64;
    let mut access_size = 1u64;
    let mut frames = Vec::new();

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line == "..." {
            continue;
        }
        if let Some(frame) = parse_frame_line(line, frames.len())? {
            frames.push(frame);
            continue;
        }
        // Header lines: "SEGV on unknown address 0x..." or
        // "READ of size N at 0x..." plus access-mode refinements.
        let lower = line.to_ascii_lowercase();
        if let Some(pos) = lower.find("segv on unknown address ") {
            let rest = &line[pos + "segv on unknown address ".len()..];
            if let Some(addr) = rest.split_whitespace().next().and_then(parse_hex) {
                fault_address = addr;
            }
            kind.get_or_insert(CrashKind::SegvRead);
        } else if lower.contains("heap-buffer-overflow") || lower.contains("stack-buffer-overflow")
        {
            kind = Some(CrashKind::OverflowRead);
        } else if let Some(pos) = lower.find(" of size ") {
            let mode_read = lower[..pos].ends_with("read");
            let rest = &lower[pos + " of size ".len()..];
            if let Some(sz) = rest.split_whitespace().next().and_then(|t| t.parse().ok()) {
                access_size = sz;
            }
            if let Some(at) = rest.find(" at ") {
                if let Some(addr) = rest[at + 4..].split_whitespace().next().and_then(parse_hex) {
                    fault_address = addr;
                }
            }
            kind = Some(match (kind, mode_read) {
                (Some(CrashKind::OverflowRead), true) => CrashKind::OverflowRead,
                (Some(CrashKind::OverflowRead), false) => CrashKind::OverflowWrite,
                (_, true) => CrashKind::SegvRead,
                (_, false) => CrashKind::SegvWrite,
            });
        } else if lower.contains("caused by a write memory access") {
            kind = Some(match kind {
                Some(CrashKind::OverflowRead) => CrashKind::OverflowWrite,
                _ => CrashKind::SegvWrite,
            });
        } else if lower.contains("caused by a read memory access") {
            kind.get_or_insert(CrashKind::SegvRead);
        }
        // Anything else outside a frame is tolerated sanitizer chatter.
    }

    if frames.is_empty() {
        return Err(Error::parse("crash report", "no stack frames found"));
    }
    Ok(CrashReport {
        kind: kind.unwrap_or(CrashKind::SegvRead),
        fault_address,
        access_size,
        frames,
    })
}

/// Parse `#N 0xADDR in SYMBOL [module-or-location]`. Returns Ok(None) for
/// lines that are not frames at all; Err for malformed frame lines.
fn parse_frame_line(line: &str, expected_index: usize) -> Result<Option<Frame>> {
    let Some(rest) = line.strip_prefix('#') else {
        return Ok(None);
    };
    let mut tokens = rest.split_whitespace();
    let Some(index_tok) = tokens.next() else {
        return Ok(None);
    };
    let Ok(index) = index_tok.parse::<usize>() else {
        return Ok(None);
    };
    let addr_tok = tokens.next().unwrap_or_default();
    if !addr_tok.starts_with("0x") {
        return Err(Error::parse(
            "crash report",
            format!("frame #{index}: expected address, got `{addr_tok}`"),
        ));
    }
    if tokens.next() != Some("in") {
        return Err(Error::parse(
            "crash report",
            format!("frame #{index}: expected `in <symbol>`"),
        ));
    }
    let Some(symbol) = tokens.next() else {
        return Err(Error::parse(
            "crash report",
            format!("frame #{index}: missing symbol"),
        ));
    };
    if index != expected_index {
        return Err(Error::parse(
            "crash report",
            format!("frame #{index} out of order (expected #{expected_index})"),
        ));
    }

    let mut module = String::new();
    let mut file = None;
    let mut line_no = None;
    if let Some(tail) = tokens.next() {
        if let Some(inner) = tail.strip_prefix('(') {
            // "(/usr/lib/libapr-1.so.0+0x1a375)"
            let inner = inner.strip_suffix(')').unwrap_or(inner);
            module = inner.split('+').next().unwrap_or(inner).to_string();
        } else if tail.contains(':') {
            // "file.c:123" or "file.c:123:4"
            let mut parts = tail.split(':');
            file = parts.next().map(|s| s.to_string());
            line_no = parts.next().and_then(|s| s.parse().ok());
        } else {
            module = tail.to_string();
        }
    }
    let has_source = !is_shared_object(&module);
    Ok(Some(Frame {
        index,
        symbol: symbol.to_string(),
        module,
        has_source,
        file,
        line: line_no,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const APACHE_STACK: &str = r#"  ...
    #0 0x7fffe1cc6375 in apr_table_get (/usr/lib/x86_64-linux-gnu/libapr-1.so.0+0x1a375)
    #1 0x5555556b1776 in log_table_entry
    #2 0x5555556b18c5 in log_header
    #3 0x5555556b2c9e in do_errorlog_default
    #4 0x5555556b4ea1 in log_error_core
    #5 0x5555556b5706 in ap_log_rerror_
    #6 0x5555556a1d7b in ap_invoke_handler
    #7 0x5555556f5835 in ap_process_async_request
  ..."#;

    #[test]
    fn parses_sanitizer_frame_list() {
        let report = parse_sanitizer_report(APACHE_STACK).unwrap();
        assert_eq!(report.frames.len(), 8);
        assert_eq!(report.frames[0].symbol, "apr_table_get");
        assert!(!report.frames[0].has_source);
        assert_eq!(report.frames[0].module, "/usr/lib/x86_64-linux-gnu/libapr-1.so.0");
        assert_eq!(report.frames[1].symbol, "log_table_entry");
        assert!(report.frames[1].has_source);
        assert_eq!(report.frames[7].symbol, "ap_process_async_request");
    }

    #[test]
    fn parses_header_metadata() {
        let text = "==123==ERROR: AddressSanitizer: SEGV on unknown address 0x414141410000\n\
                    The signal is caused by a READ memory access.\n\
                    #0 0x1000 in victim (/lib/libfoo.so.1+0x10)\n";
        let report = parse_sanitizer_report(text).unwrap();
        assert_eq!(report.kind, CrashKind::SegvRead);
        assert_eq!(report.fault_address, 0x414141410000);
    }

    #[test]
    fn single_frame_minimal_report() {
        let text = r#"{"kind": "segv-read", "fault_address": "0x0", "access_size": 1,
                       "frames": [{"index": 0, "symbol": "f", "module": "app", "has_source": true}]}"#;
        let report = parse_sanitizer_report(text).unwrap();
        assert_eq!(report.frames.len(), 1);
        assert_eq!(report.fault_address, 0);
    }

    #[test]
    fn rejects_empty_stack() {
        let text = r#"{"kind": "segv-read", "fault_address": "0x0", "access_size": 1, "frames": []}"#;
        assert!(parse_sanitizer_report(text).is_err());
        assert!(parse_sanitizer_report("no frames here").is_err());
    }

    #[test]
    fn rejects_malformed_frame_line() {
        assert!(parse_sanitizer_report("#0 garbage in\n").is_err());
        assert!(parse_sanitizer_report("#0 0x10 out f\n").is_err());
    }

    #[test]
    fn json_roundtrip_preserves_structure() {
        let report = parse_sanitizer_report(APACHE_STACK).unwrap();
        let text = report.to_json();
        let back = parse_sanitizer_report(&text).unwrap();
        assert_eq!(report, back);
    }
}
