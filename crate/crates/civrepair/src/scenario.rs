//! Desk-scale scenario model of a compartmentalized target.
//!
//! A scenario bundles a flat 64-bit memory map (declared regions are the
//! only mapped memory), a payload template describing the data crossing the
//! interface, and a set of function bodies written in a small operation
//! language. The executor in [`crate::exec`] walks these bodies and either
//! completes or crashes with a captured stack, standing in for a
//! sanitizer-instrumented run of the real application.
//!
//! Function bodies are stored one op per line, e.g.:
//!
//! ```text
//! call apr_table_get(r.headers_in)
//! guard is_pointer_mapped(r.headers_in, 24) on_fail return
//! deref table 8
//! index @framebuf idx 16
//! read_cstr cfg 64
//! return cfg
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::{Path, Value};

/// Executor recursion bound; static call chains deeper than this are
/// rejected at load time.
pub const DEPTH_LIMIT: usize = 64;

// ---------------------------------------------------------------------------
// Memory
// ---------------------------------------------------------------------------

/// A contiguous memory region. Everything outside declared, mapped regions
/// is unmapped address space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub base: u64,
    pub size: u64,
    pub mapped: bool,
    pub bytes: Vec<u8>,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base.saturating_add(self.size)
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryMap {
    regions: BTreeMap<String, Region>,
}

impl MemoryMap {
    pub fn insert(&mut self, id: impl Into<String>, region: Region) {
        self.regions.insert(id.into(), region);
    }

    pub fn get(&self, id: &str) -> Option<&Region> {
        self.regions.get(id)
    }

    pub fn regions(&self) -> impl Iterator<Item = (&String, &Region)> {
        self.regions.iter()
    }

    pub fn region_containing(&self, addr: u64) -> Option<&Region> {
        self.regions
            .values()
            .find(|r| r.mapped && r.contains(addr))
    }

    /// Is the whole range `[addr, addr + size)` inside mapped regions?
    /// A zero-size range is mapped iff its start address is.
    pub fn is_mapped_range(&self, addr: u64, size: u64) -> bool {
        if size == 0 {
            return self.region_containing(addr).is_some();
        }
        // Regions in the corpus never abut, so a single containing region
        // must cover the range.
        match self.region_containing(addr) {
            Some(r) => addr.checked_add(size).is_some_and(|end| end <= r.end()),
            None => false,
        }
    }

    /// First unmapped address in `[addr, addr + size)`, if any.
    pub fn first_unmapped(&self, addr: u64, size: u64) -> Option<u64> {
        match self.region_containing(addr) {
            None => Some(addr),
            Some(r) => {
                let end = addr.checked_add(size)?;
                (end > r.end()).then_some(r.end())
            }
        }
    }

    pub fn read_byte(&self, addr: u64) -> Option<u8> {
        let r = self.region_containing(addr)?;
        r.bytes.get((addr - r.base) as usize).copied()
    }

    /// A deterministic address guaranteed to be outside every region.
    pub fn unmapped_probe_address(&self) -> u64 {
        let top = self
            .regions
            .values()
            .map(Region::end)
            .max()
            .unwrap_or(0x1000);
        (top | 0x4141_0000).saturating_add(0x10_0000) & !0xf
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// An op operand: an access path into the frame's scope, or a direct
/// reference to a declared region's base address (`@framebuf`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Path(Path),
    Region(String),
}

impl Operand {
    pub fn parse(text: &str) -> Result<Operand> {
        let text = text.trim();
        match text.strip_prefix('@') {
            Some(region) if !region.is_empty() => Ok(Operand::Region(region.to_string())),
            Some(_) => Err(Error::parse("operand", "empty region reference")),
            None => Ok(Operand::Path(Path::parse(text)?)),
        }
    }

    pub fn as_path(&self) -> Option<&Path> {
        match self {
            Operand::Path(p) => Some(p),
            Operand::Region(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Path(p) => write!(f, "{p}"),
            Operand::Region(r) => write!(f, "@{r}"),
        }
    }
}

impl Serialize for Operand {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Operand {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Operand::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Guard predicate. The three oracle forms (`is_pointer_mapped`,
/// `in_domain` with both bounds, `verify_format`) are the strongest checks
/// for their types; `non_null` and open-ended `in_domain` exist to express
/// the weaker checks found in partial fixes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    PointerMapped { target: Operand, size: u64 },
    NonNull { target: Operand },
    InDomain {
        target: Operand,
        min: Option<i64>,
        max: Option<i64>,
    },
    InSet { target: Operand, set: BTreeSet<i64> },
    VerifyFormat { target: Operand, kind: String },
    True,
}

impl Predicate {
    pub fn parse(text: &str) -> Result<Predicate> {
        let text = text.trim();
        let err = |d: String| Error::parse("guard predicate", d);
        if text == "true" {
            return Ok(Predicate::True);
        }
        let open = text
            .find('(')
            .ok_or_else(|| err(format!("expected `name(args)`, got `{text}`")))?;
        let name = &text[..open];
        let args_text = text[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| err(format!("unclosed `(` in `{text}`")))?;
        let args: Vec<&str> = split_top_level_commas(args_text);
        match name {
            "is_pointer_mapped" => {
                if args.len() != 2 {
                    return Err(err("is_pointer_mapped takes (target, size)".into()));
                }
                Ok(Predicate::PointerMapped {
                    target: Operand::parse(args[0])?,
                    size: parse_u64_lit(args[1])
                        .ok_or_else(|| err(format!("bad size `{}`", args[1])))?,
                })
            }
            "non_null" => {
                if args.len() != 1 {
                    return Err(err("non_null takes (target)".into()));
                }
                Ok(Predicate::NonNull {
                    target: Operand::parse(args[0])?,
                })
            }
            "in_domain" => {
                if args.len() != 2 {
                    return Err(err("in_domain takes (target, range-or-set)".into()));
                }
                let target = Operand::parse(args[0])?;
                let spec = args[1].trim();
                if let Some(inner) = spec.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                    let mut set = BTreeSet::new();
                    for item in inner.split(',') {
                        let v = item.trim().parse::<i64>().map_err(|e| {
                            err(format!("bad set element `{item}`: {e}"))
                        })?;
                        set.insert(v);
                    }
                    return Ok(Predicate::InSet { target, set });
                }
                let (lo, hi) = parse_range(spec).ok_or_else(|| {
                    err(format!("bad range `{spec}` (expected forms like 0..=15, 0.., ..=15)"))
                })?;
                if lo.is_none() && hi.is_none() {
                    return Err(err("in_domain range needs at least one bound".into()));
                }
                Ok(Predicate::InDomain {
                    target,
                    min: lo,
                    max: hi,
                })
            }
            "verify_format" => {
                if args.len() != 2 {
                    return Err(err("verify_format takes (target, kind)".into()));
                }
                Ok(Predicate::VerifyFormat {
                    target: Operand::parse(args[0])?,
                    kind: args[1].trim().to_string(),
                })
            }
            other => Err(err(format!("unknown predicate `{other}`"))),
        }
    }

    pub fn operand(&self) -> Option<&Operand> {
        match self {
            Predicate::PointerMapped { target, .. }
            | Predicate::NonNull { target }
            | Predicate::InDomain { target, .. }
            | Predicate::InSet { target, .. }
            | Predicate::VerifyFormat { target, .. } => Some(target),
            Predicate::True => None,
        }
    }
}

fn parse_range(spec: &str) -> Option<(Option<i64>, Option<i64>)> {
    if let Some((lo, hi)) = spec.split_once("..=") {
        let lo = if lo.is_empty() {
            None
        } else {
            Some(lo.parse::<i64>().ok()?)
        };
        let hi = Some(hi.parse::<i64>().ok()?);
        Some((lo, hi))
    } else if let Some((lo, hi)) = spec.split_once("..") {
        if !hi.is_empty() {
            return None; // exclusive upper bounds are not used; require ..=
        }
        let lo = if lo.is_empty() {
            None
        } else {
            Some(lo.parse::<i64>().ok()?)
        };
        Some((lo, None))
    } else {
        None
    }
}

fn split_top_level_commas(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in text.char_indices() {
        match c {
            '{' | '[' | '(' => depth += 1,
            '}' | ']' | ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !text[start..].trim().is_empty() || !parts.is_empty() {
        parts.push(&text[start..]);
    }
    parts
}

fn parse_u64_lit(text: &str) -> Option<u64> {
    let t = text.trim();
    if let Some(h) = t.strip_prefix("0x") {
        u64::from_str_radix(h, 16).ok()
    } else {
        t.parse::<u64>().ok()
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::PointerMapped { target, size } => {
                write!(f, "is_pointer_mapped({target}, {size})")
            }
            Predicate::NonNull { target } => write!(f, "non_null({target})"),
            Predicate::InDomain { target, min, max } => match (min, max) {
                (Some(lo), Some(hi)) => write!(f, "in_domain({target}, {lo}..={hi})"),
                (Some(lo), None) => write!(f, "in_domain({target}, {lo}..)"),
                (None, Some(hi)) => write!(f, "in_domain({target}, ..={hi})"),
                (None, None) => write!(f, "in_domain({target}, ..)"),
            },
            Predicate::InSet { target, set } => {
                write!(f, "in_domain({target}, {{")?;
                for (i, v) in set.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "}})")
            }
            Predicate::VerifyFormat { target, kind } => {
                write!(f, "verify_format({target}, {kind})")
            }
            Predicate::True => write!(f, "true"),
        }
    }
}

impl Serialize for Predicate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Predicate::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// What a failing guard does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnFail {
    Return,
    Skip,
}

impl fmt::Display for OnFail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OnFail::Return => "return",
            OnFail::Skip => "skip",
        })
    }
}

/// One operation in a function body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    /// Read `size` bytes through a pointer (write=true models a store).
    Deref {
        target: Operand,
        size: u64,
        write: bool,
    },
    /// Bounds-sensitive element access: crashes when the index leaves
    /// `[0, len)`, then touches one byte at base + index.
    Index {
        base: Operand,
        index: Operand,
        len: u64,
    },
    /// Scan for a NUL terminator, at most `max` bytes, without leaving the
    /// mapped region.
    ReadCStr { target: Operand, max: u64 },
    Call {
        callee: String,
        args: Vec<Operand>,
        out: Option<String>,
    },
    Guard { pred: Predicate, on_fail: OnFail },
    /// Interpret a value without touching memory.
    Use { target: Operand },
    /// Forward a value without interpreting it.
    Pass { target: Operand },
    /// Install a value into trusted state (untrusted-side marker).
    Commit { target: Operand },
    Return { value: Option<Operand> },
}

impl Op {
    pub fn parse(text: &str) -> Result<Op> {
        let text = text.trim();
        let err = |d: String| Error::parse("op", d);
        let (kind, rest) = match text.split_once(char::is_whitespace) {
            Some((k, r)) => (k, r.trim()),
            None => (text, ""),
        };
        match kind {
            "deref" => {
                let mut toks = rest.split_whitespace();
                let target = Operand::parse(
                    toks.next().ok_or_else(|| err("deref needs a target".into()))?,
                )?;
                let size = toks
                    .next()
                    .and_then(parse_u64_lit)
                    .ok_or_else(|| err(format!("deref needs a size in `{text}`")))?;
                let write = match toks.next() {
                    None => false,
                    Some("write") => true,
                    Some(other) => return Err(err(format!("unexpected token `{other}`"))),
                };
                Ok(Op::Deref {
                    target,
                    size,
                    write,
                })
            }
            "index" => {
                let mut toks = rest.split_whitespace();
                let base = Operand::parse(
                    toks.next().ok_or_else(|| err("index needs a base".into()))?,
                )?;
                let index = Operand::parse(
                    toks.next()
                        .ok_or_else(|| err("index needs an index var".into()))?,
                )?;
                let len = toks
                    .next()
                    .and_then(parse_u64_lit)
                    .ok_or_else(|| err(format!("index needs a declared length in `{text}`")))?;
                if toks.next().is_some() {
                    return Err(err(format!("trailing tokens in `{text}`")));
                }
                Ok(Op::Index { base, index, len })
            }
            "read_cstr" => {
                let mut toks = rest.split_whitespace();
                let target = Operand::parse(
                    toks.next()
                        .ok_or_else(|| err("read_cstr needs a target".into()))?,
                )?;
                let max = toks
                    .next()
                    .and_then(parse_u64_lit)
                    .ok_or_else(|| err(format!("read_cstr needs a max in `{text}`")))?;
                if toks.next().is_some() {
                    return Err(err(format!("trailing tokens in `{text}`")));
                }
                Ok(Op::ReadCStr { target, max })
            }
            "call" => {
                let (head, out) = match rest.split_once("->") {
                    Some((h, o)) => {
                        let o = o.trim();
                        if o.is_empty() || !o.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                        {
                            return Err(err(format!("bad call output `{o}`")));
                        }
                        (h.trim(), Some(o.to_string()))
                    }
                    None => (rest, None),
                };
                let open = head
                    .find('(')
                    .ok_or_else(|| err(format!("call needs `callee(args)` in `{text}`")))?;
                let callee = head[..open].trim().to_string();
                if callee.is_empty() {
                    return Err(err("empty callee".into()));
                }
                let args_text = head[open + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| err(format!("unclosed `(` in `{text}`")))?;
                let mut args = Vec::new();
                if !args_text.trim().is_empty() {
                    for a in args_text.split(',') {
                        args.push(Operand::parse(a)?);
                    }
                }
                Ok(Op::Call { callee, args, out })
            }
            "guard" => {
                let (pred_text, on_fail) = match rest.rsplit_once("on_fail") {
                    Some((p, o)) => {
                        let on_fail = match o.trim() {
                            "return" => OnFail::Return,
                            "skip" => OnFail::Skip,
                            other => return Err(err(format!("bad on_fail `{other}`"))),
                        };
                        (p.trim(), on_fail)
                    }
                    None => return Err(err(format!("guard needs `on_fail` in `{text}`"))),
                };
                Ok(Op::Guard {
                    pred: Predicate::parse(pred_text)?,
                    on_fail,
                })
            }
            "use" => Ok(Op::Use {
                target: Operand::parse(rest)?,
            }),
            "pass" => Ok(Op::Pass {
                target: Operand::parse(rest)?,
            }),
            "commit" => Ok(Op::Commit {
                target: Operand::parse(rest)?,
            }),
            "return" => Ok(Op::Return {
                value: if rest.is_empty() {
                    None
                } else {
                    Some(Operand::parse(rest)?)
                },
            }),
            other => Err(err(format!("unknown op kind `{other}`"))),
        }
    }

    /// Operands read by this op (call outputs excluded).
    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Op::Deref { target, .. }
            | Op::ReadCStr { target, .. }
            | Op::Use { target }
            | Op::Pass { target }
            | Op::Commit { target } => vec![target],
            Op::Index { base, index, .. } => vec![base, index],
            Op::Call { args, .. } => args.iter().collect(),
            Op::Guard { pred, .. } => pred.operand().into_iter().collect(),
            Op::Return { value } => value.iter().collect(),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Deref {
                target,
                size,
                write,
            } => {
                write!(f, "deref {target} {size}")?;
                if *write {
                    write!(f, " write")?;
                }
                Ok(())
            }
            Op::Index { base, index, len } => write!(f, "index {base} {index} {len}"),
            Op::ReadCStr { target, max } => write!(f, "read_cstr {target} {max}"),
            Op::Call { callee, args, out } => {
                write!(f, "call {callee}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")?;
                if let Some(out) = out {
                    write!(f, " -> {out}")?;
                }
                Ok(())
            }
            Op::Guard { pred, on_fail } => write!(f, "guard {pred} on_fail {on_fail}"),
            Op::Use { target } => write!(f, "use {target}"),
            Op::Pass { target } => write!(f, "pass {target}"),
            Op::Commit { target } => write!(f, "commit {target}"),
            Op::Return { value } => match value {
                Some(v) => write!(f, "return {v}"),
                None => write!(f, "return"),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Functions and scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionBody {
    pub owner_compartment: String,
    /// Module string used when synthesizing crash reports.
    pub module: String,
    pub has_source: bool,
    pub params: Vec<String>,
    pub ops: Vec<Op>,
}

impl FunctionBody {
    /// Body rendered one op per line; this is the "source" of a scenario
    /// function for excerpts, token analysis, and diff application.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for op in &self.ops {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }
}

/// Payload provenance: the original template or a seeded mutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Mutated { seed: u64, index: u64 },
}

/// A typed value tree bound to the interface entry's parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub values: BTreeMap<String, Value>,
    pub provenance: Provenance,
}

impl Payload {
    pub fn get(&self, path: &Path) -> Result<&Value> {
        let root = self.values.get(&path.root).ok_or_else(|| Error::PathUnresolvable {
            path: path.to_string(),
            detail: format!("no payload entry `{}`", path.root),
        })?;
        let sub = Path {
            root: path.root.clone(),
            segs: path.segs.clone(),
        };
        root.get_path(&sub)
    }

    /// A copy with the value at `path` replaced.
    pub fn with_value(&self, path: &Path, new: Value, provenance: Provenance) -> Result<Payload> {
        let root = self.values.get(&path.root).ok_or_else(|| Error::PathUnresolvable {
            path: path.to_string(),
            detail: format!("no payload entry `{}`", path.root),
        })?;
        let replaced = root.with_path(path, new)?;
        let mut values = self.values.clone();
        values.insert(path.root.clone(), replaced);
        Ok(Payload { values, provenance })
    }

    pub fn same_shape(&self, other: &Payload) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.same_shape(vb))
    }
}

/// An immutable simulated target: memory, payload template, and function
/// bodies, rooted at a driver function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    /// The outermost trusted function the executor starts from.
    pub root: String,
    /// The sandbox-facing function whose parameters the payload binds to.
    pub interface_entry: String,
    pub memory: MemoryMap,
    pub payload_template: Payload,
    pub functions: BTreeMap<String, FunctionBody>,
    /// Human-readable descriptions of guards inserted after load.
    pub applied_patches: Vec<String>,
}

impl Scenario {
    pub fn function(&self, symbol: &str) -> Option<&FunctionBody> {
        self.functions.get(symbol)
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    name: String,
    #[serde(default)]
    root: Option<String>,
    interface_entry: String,
    memory: BTreeMap<String, RegionDoc>,
    payload: BTreeMap<String, serde_json::Value>,
    functions: BTreeMap<String, FunctionDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionDoc {
    base: String,
    size: u64,
    #[serde(default = "default_true")]
    mapped: bool,
    #[serde(default)]
    ascii: Option<String>,
    #[serde(default)]
    bytes: Option<Vec<u8>>,
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FunctionDoc {
    compartment: String,
    #[serde(default)]
    module: Option<String>,
    #[serde(default = "default_true")]
    has_source: bool,
    #[serde(default)]
    params: Vec<String>,
    ops: Vec<String>,
}

/// Parse and validate a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let doc: ScenarioDoc =
        serde_json::from_str(text).map_err(|e| Error::parse("scenario", format!("{e}")))?;

    let mut memory = MemoryMap::default();
    for (id, r) in doc.memory {
        let base = parse_u64_lit(&r.base).ok_or_else(|| {
            Error::parse("scenario", format!("region `{id}`: bad base `{}`", r.base))
        })?;
        let mut bytes = match (r.ascii, r.bytes) {
            (Some(_), Some(_)) => {
                return Err(Error::parse(
                    "scenario",
                    format!("region `{id}` declares both ascii and bytes"),
                ))
            }
            (Some(s), None) => s.into_bytes(),
            (None, Some(b)) => b,
            (None, None) => Vec::new(),
        };
        if bytes.len() as u64 > r.size {
            return Err(Error::parse(
                "scenario",
                format!("region `{id}`: contents exceed declared size"),
            ));
        }
        bytes.resize(r.size as usize, 0);
        memory.insert(
            id,
            Region {
                base,
                size: r.size,
                mapped: r.mapped,
                bytes,
            },
        );
    }

    let mut functions = BTreeMap::new();
    for (symbol, f) in doc.functions {
        let mut ops = Vec::new();
        for (i, line) in f.ops.iter().enumerate() {
            let op = Op::parse(line).map_err(|e| {
                Error::parse("scenario", format!("`{symbol}` op {i}: {e}"))
            })?;
            ops.push(op);
        }
        functions.insert(
            symbol,
            FunctionBody {
                owner_compartment: f.compartment,
                module: f.module.unwrap_or_else(|| doc.name.clone()),
                has_source: f.has_source,
                params: f.params,
                ops,
            },
        );
    }

    let mut payload_values = BTreeMap::new();
    for (name, json) in doc.payload {
        payload_values.insert(name, value_from_json(&json, &memory)?);
    }

    let scenario = Scenario {
        name: doc.name,
        root: doc.root.unwrap_or_else(|| doc.interface_entry.clone()),
        interface_entry: doc.interface_entry,
        memory,
        payload_template: Payload {
            values: payload_values,
            provenance: Provenance::Original,
        },
        functions,
        applied_patches: Vec::new(),
    };
    check_scenario(&scenario)?;
    Ok(scenario)
}

/// Payload values in scenario files are ordinary value JSON, except that
/// pointers may reference a declared region: `{"ptr": "@tbl"}` or
/// `{"ptr": "@tbl+8"}`. References resolve to concrete addresses at load.
fn value_from_json(json: &serde_json::Value, memory: &MemoryMap) -> Result<Value> {
    let obj = json
        .as_object()
        .filter(|m| m.len() == 1)
        .ok_or_else(|| Error::parse("scenario", format!("bad payload value: {json}")))?;
    let (key, inner) = obj.iter().next().expect("len checked");
    match key.as_str() {
        "ptr" => {
            let s = inner
                .as_str()
                .ok_or_else(|| Error::parse("scenario", "ptr value must be a string"))?;
            if let Some(referenced) = s.strip_prefix('@') {
                let (region, off) = match referenced.split_once('+') {
                    Some((r, o)) => (
                        r,
                        parse_u64_lit(o).ok_or_else(|| {
                            Error::parse("scenario", format!("bad region offset in `{s}`"))
                        })?,
                    ),
                    None => (referenced, 0),
                };
                let r = memory.get(region).ok_or_else(|| {
                    Error::parse("scenario", format!("pointer references unknown region `{region}`"))
                })?;
                Ok(Value::Ptr(r.base + off))
            } else {
                let addr = parse_u64_lit(s).ok_or_else(|| {
                    Error::parse("scenario", format!("bad pointer literal `{s}`"))
                })?;
                Ok(Value::Ptr(addr))
            }
        }
        "struct" => {
            let fields = inner
                .as_object()
                .ok_or_else(|| Error::parse("scenario", "struct value must be an object"))?;
            let mut out = BTreeMap::new();
            for (name, v) in fields {
                out.insert(name.clone(), value_from_json(v, memory)?);
            }
            Ok(Value::Struct(out))
        }
        // int / str / handle have no region syntax; reuse the plain decoder.
        _ => serde_json::from_value::<Value>(json.clone())
            .map_err(|e| Error::parse("scenario", format!("bad payload value: {e}"))),
    }
}

fn check_scenario(s: &Scenario) -> Result<()> {
    let invalid = |d: String| Error::invalid("scenario", d);
    if !s.functions.contains_key(&s.interface_entry) {
        return Err(invalid(format!(
            "interface_entry `{}` is not a declared function",
            s.interface_entry
        )));
    }
    if !s.functions.contains_key(&s.root) {
        return Err(invalid(format!("root `{}` is not a declared function", s.root)));
    }

    // Entry parameters and payload template keys must agree.
    let entry = &s.functions[&s.interface_entry];
    let entry_params: BTreeSet<&str> = entry.params.iter().map(String::as_str).collect();
    let payload_keys: BTreeSet<&str> =
        s.payload_template.values.keys().map(String::as_str).collect();
    if entry_params != payload_keys {
        return Err(invalid(format!(
            "payload keys {payload_keys:?} do not match entry params {entry_params:?}"
        )));
    }

    // Per-function: callees exist, vars are defined before use, regions exist.
    for (symbol, body) in &s.functions {
        let mut defined: BTreeSet<&str> = body.params.iter().map(String::as_str).collect();
        for (i, op) in body.ops.iter().enumerate() {
            for operand in op.operands() {
                match operand {
                    Operand::Region(r) => {
                        if s.memory.get(r).is_none() {
                            return Err(invalid(format!(
                                "`{symbol}` op {i}: unknown region `@{r}`"
                            )));
                        }
                    }
                    Operand::Path(p) => {
                        if !defined.contains(p.root.as_str()) {
                            return Err(invalid(format!(
                                "`{symbol}` op {i}: undeclared variable `{}`",
                                p.root
                            )));
                        }
                    }
                }
            }
            if let Op::Call { callee, out, .. } = op {
                if !s.functions.contains_key(callee) {
                    return Err(invalid(format!(
                        "`{symbol}` op {i}: call to undeclared function `{callee}`"
                    )));
                }
                if let Some(out) = out {
                    defined.insert(out);
                }
            }
        }
    }

    // Bounded, acyclic static call chains from the root.
    fn walk<'a>(
        s: &'a Scenario,
        symbol: &'a str,
        stack: &mut Vec<&'a str>,
    ) -> Result<()> {
        if stack.contains(&symbol) || stack.len() >= DEPTH_LIMIT {
            return Err(Error::DepthLimit {
                symbol: symbol.to_string(),
                limit: DEPTH_LIMIT,
            });
        }
        stack.push(symbol);
        if let Some(body) = s.functions.get(symbol) {
            for op in &body.ops {
                if let Op::Call { callee, .. } = op {
                    walk(s, callee, stack)?;
                }
            }
        }
        stack.pop();
        Ok(())
    }
    walk(s, &s.root, &mut Vec::new())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Guard patching
// ---------------------------------------------------------------------------

/// A guard insertion against a scenario function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardPatch {
    pub target_function: String,
    pub insert_before_op_index: usize,
    pub predicate: Predicate,
    pub on_fail: OnFail,
}

impl GuardPatch {
    pub fn guard_line(&self) -> String {
        format!("guard {} on_fail {}", self.predicate, self.on_fail)
    }
}

/// Insert a guard into a function that has source, yielding a new scenario.
/// The original is untouched.
pub fn apply_guard_patch(s: &Scenario, patch: &GuardPatch) -> Result<Scenario> {
    let body = s
        .functions
        .get(&patch.target_function)
        .ok_or_else(|| Error::invalid("patch", format!("unknown target `{}`", patch.target_function)))?;
    if !body.has_source {
        return Err(Error::NoSource(patch.target_function.clone()));
    }
    if patch.insert_before_op_index > body.ops.len() {
        return Err(Error::OpIndexOutOfRange {
            symbol: patch.target_function.clone(),
            index: patch.insert_before_op_index,
            len: body.ops.len(),
        });
    }
    // Guard operands must be resolvable at the insertion point.
    if let Some(Operand::Path(p)) = patch.predicate.operand() {
        let mut defined: BTreeSet<&str> = body.params.iter().map(String::as_str).collect();
        for op in &body.ops[..patch.insert_before_op_index] {
            if let Op::Call { out: Some(out), .. } = op {
                defined.insert(out);
            }
        }
        if !defined.contains(p.root.as_str()) {
            return Err(Error::invalid(
                "patch",
                format!(
                    "guard references `{}` which is not in scope at op {} of `{}`",
                    p.root, patch.insert_before_op_index, patch.target_function
                ),
            ));
        }
    }

    let mut patched = s.clone();
    let body = patched
        .functions
        .get_mut(&patch.target_function)
        .expect("checked above");
    body.ops.insert(
        patch.insert_before_op_index,
        Op::Guard {
            pred: patch.predicate.clone(),
            on_fail: patch.on_fail,
        },
    );
    patched.applied_patches.push(format!(
        "{} @ {}[{}]",
        patch.guard_line(),
        patch.target_function,
        patch.insert_before_op_index
    ));
    Ok(patched)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_grammar_roundtrip() {
        let lines = [
            "deref table 8",
            "deref buf 4 write",
            "index @framebuf idx 16",
            "read_cstr cfg 64",
            "call apr_table_get(r.headers_in)",
            "call libavcodec_configuration() -> cfg",
            "call f(a, b.c, @reg)",
            "guard is_pointer_mapped(r.headers_in, 24) on_fail return",
            "guard non_null(cfg) on_fail return",
            "guard in_domain(idx, 0..=15) on_fail return",
            "guard in_domain(idx, 0..) on_fail skip",
            "guard in_domain(idx, {1, 3, 5}) on_fail return",
            "guard verify_format(h, session) on_fail return",
            "guard true on_fail skip",
            "use x",
            "pass r.headers_in",
            "commit r",
            "return",
            "return cfg",
        ];
        for line in lines {
            let op = Op::parse(line).unwrap_or_else(|e| panic!("`{line}`: {e}"));
            assert_eq!(op.to_string(), line, "display mismatch for `{line}`");
        }
    }

    #[test]
    fn op_grammar_rejects_garbage() {
        for line in [
            "",
            "frobnicate x",
            "deref",
            "deref x",
            "index @b i",
            "call f(",
            "guard non_null(x)",
            "guard nope(x) on_fail return",
            "guard in_domain(x, ..) on_fail return",
        ] {
            assert!(Op::parse(line).is_err(), "accepted `{line}`");
        }
    }

    fn tiny_scenario(extra_fn: &str) -> String {
        format!(
            r#"{{
              "name": "tiny",
              "root": "drive",
              "interface_entry": "ext_entry",
              "memory": {{"buf": {{"base": "0x1000", "size": 16}}}},
              "payload": {{"p": {{"ptr": "@buf"}}}},
              "functions": {{
                "drive": {{"compartment": "app", "params": ["p"],
                           "ops": ["call ext_entry(p)", "call touch(p)", "return"]}},
                "ext_entry": {{"compartment": "ext", "params": ["p"], "ops": ["commit p", "return"]}},
                "touch": {{"compartment": "app", "params": ["p"], "ops": ["deref p 8", "return"]}}
                {extra_fn}
              }}
            }}"#
        )
    }

    #[test]
    fn loads_and_resolves_regions() {
        let s = load_scenario(&tiny_scenario("")).unwrap();
        assert_eq!(s.payload_template.values["p"], Value::Ptr(0x1000));
        assert_eq!(s.root, "drive");
        assert!(s.memory.is_mapped_range(0x1000, 16));
        assert!(!s.memory.is_mapped_range(0x1000, 17));
        assert!(!s.memory.is_mapped_range(0, 1));
    }

    #[test]
    fn rejects_dangling_callee() {
        let text = tiny_scenario("").replace("call touch(p)", "call missing(p)");
        let err = load_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("undeclared function"), "{err}");
    }

    #[test]
    fn rejects_undeclared_variable() {
        let text = tiny_scenario("").replace("deref p 8", "deref q 8");
        let err = load_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("undeclared variable"), "{err}");
    }

    #[test]
    fn rejects_cycles() {
        let text = tiny_scenario(
            r#", "looper": {"compartment": "app", "params": [], "ops": ["call looper()", "return"]}"#,
        )
        .replace("call touch(p)", "call looper()");
        let err = load_scenario(&text).unwrap_err();
        assert!(matches!(err, Error::DepthLimit { .. }), "{err}");
    }

    #[test]
    fn rejects_payload_param_mismatch() {
        let text = tiny_scenario("").replace(r#""payload": {"p": {"ptr": "@buf"}}"#,
                                             r#""payload": {"q": {"ptr": "@buf"}}"#);
        assert!(load_scenario(&text).is_err());
    }

    #[test]
    fn guard_patch_inserts_without_mutating_original() {
        let s = load_scenario(&tiny_scenario("")).unwrap();
        let patch = GuardPatch {
            target_function: "touch".into(),
            insert_before_op_index: 0,
            predicate: Predicate::parse("is_pointer_mapped(p, 8)").unwrap(),
            on_fail: OnFail::Return,
        };
        let patched = apply_guard_patch(&s, &patch).unwrap();
        assert_eq!(patched.functions["touch"].ops.len(), 3);
        assert_eq!(s.functions["touch"].ops.len(), 2);
        assert_eq!(patched.applied_patches.len(), 1);
    }

    #[test]
    fn guard_patch_requires_source() {
        let text = tiny_scenario("").replace(
            r#""touch": {"compartment": "app", "params": ["p"],"#,
            r#""touch": {"compartment": "app", "has_source": false, "params": ["p"],"#,
        );
        let s = load_scenario(&text).unwrap();
        let patch = GuardPatch {
            target_function: "touch".into(),
            insert_before_op_index: 0,
            predicate: Predicate::True,
            on_fail: OnFail::Return,
        };
        assert!(matches!(
            apply_guard_patch(&s, &patch),
            Err(Error::NoSource(_))
        ));
    }

    #[test]
    fn guard_patch_checks_op_index() {
        let s = load_scenario(&tiny_scenario("")).unwrap();
        let patch = GuardPatch {
            target_function: "touch".into(),
            insert_before_op_index: 9,
            predicate: Predicate::True,
            on_fail: OnFail::Return,
        };
        assert!(matches!(
            apply_guard_patch(&s, &patch),
            Err(Error::OpIndexOutOfRange { .. })
        ));
    }
}
