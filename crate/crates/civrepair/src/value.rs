//! Typed payload values and access paths.
//!
//! Interface payloads are immutable value trees. Pointers carry raw 64-bit
//! addresses (region binding happens at scenario load), scalars are signed
//! integers, handles pair a kind tag with a numeric id, and structures nest
//! named fields. Access paths (`r.headers_in`, `frames[3].id`) address
//! positions inside those trees.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A typed value crossing the compartment interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Ptr(u64),
    Int(i64),
    Str(String),
    Handle { kind: String, id: u64 },
    Struct(BTreeMap<String, Value>),
}

impl Value {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Ptr(_) => "ptr",
            Value::Int(_) => "int",
            Value::Str(_) => "str",
            Value::Handle { .. } => "handle",
            Value::Struct(_) => "struct",
        }
    }

    /// Look up a nested value. Fails on missing fields or non-struct traversal.
    pub fn get_path(&self, path: &Path) -> Result<&Value> {
        let mut cur = self;
        for seg in &path.segs {
            match (cur, seg) {
                (Value::Struct(fields), Seg::Field(name)) => {
                    cur = fields.get(name).ok_or_else(|| Error::PathUnresolvable {
                        path: path.to_string(),
                        detail: format!("no field `{name}`"),
                    })?;
                }
                (other, Seg::Field(name)) => {
                    return Err(Error::PathUnresolvable {
                        path: path.to_string(),
                        detail: format!("field `{name}` on {}", other.kind_name()),
                    });
                }
                (other, Seg::Index(i)) => {
                    return Err(Error::PathUnresolvable {
                        path: path.to_string(),
                        detail: format!("index [{i}] on {}", other.kind_name()),
                    });
                }
            }
        }
        Ok(cur)
    }

    /// Replace the value at `path`, returning a new tree.
    pub fn with_path(&self, path: &Path, new: Value) -> Result<Value> {
        fn rec(cur: &Value, segs: &[Seg], full: &Path, new: Value) -> Result<Value> {
            match segs.first() {
                None => Ok(new),
                Some(Seg::Field(name)) => match cur {
                    Value::Struct(fields) => {
                        let inner = fields.get(name).ok_or_else(|| Error::PathUnresolvable {
                            path: full.to_string(),
                            detail: format!("no field `{name}`"),
                        })?;
                        let replaced = rec(inner, &segs[1..], full, new)?;
                        let mut out = fields.clone();
                        out.insert(name.clone(), replaced);
                        Ok(Value::Struct(out))
                    }
                    other => Err(Error::PathUnresolvable {
                        path: full.to_string(),
                        detail: format!("field `{name}` on {}", other.kind_name()),
                    }),
                },
                Some(Seg::Index(i)) => Err(Error::PathUnresolvable {
                    path: full.to_string(),
                    detail: format!("index [{i}] on {}", cur.kind_name()),
                }),
            }
        }
        rec(self, &path.segs, path, new)
    }

    /// Does `needle` occur anywhere inside this tree (including at the root)?
    pub fn contains_value(&self, needle: &Value) -> bool {
        if self == needle {
            return true;
        }
        match self {
            Value::Struct(fields) => fields.values().any(|v| v.contains_value(needle)),
            _ => false,
        }
    }

    /// Find an access path (rooted at `root`) leading to `needle`, if any.
    pub fn find_path_to(&self, root: &str, needle: &Value) -> Option<Path> {
        fn rec(cur: &Value, needle: &Value, segs: &mut Vec<Seg>, out: &mut Option<Vec<Seg>>) {
            if out.is_some() {
                return;
            }
            if cur == needle {
                *out = Some(segs.clone());
                return;
            }
            if let Value::Struct(fields) = cur {
                for (name, v) in fields {
                    segs.push(Seg::Field(name.clone()));
                    rec(v, needle, segs, out);
                    segs.pop();
                }
            }
        }
        let mut segs = Vec::new();
        let mut found = None;
        rec(self, needle, &mut segs, &mut found);
        found.map(|segs| Path {
            root: root.to_string(),
            segs,
        })
    }

    /// Same struct topology and leaf kinds; leaf values may differ.
    pub fn same_shape(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Struct(a), Value::Struct(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b.iter()).all(|((ka, va), (kb, vb))| {
                        ka == kb && va.same_shape(vb)
                    })
            }
            (a, b) => a.kind_name() == b.kind_name(),
        }
    }

    /// Parse a value literal: `ptr:0x1000`, `int:-3`, `str:"x"`,
    /// `handle:session#42`, bare hex (pointer), bare decimal (int), `null`.
    pub fn parse_literal(text: &str) -> Result<Value> {
        let text = text.trim();
        let err = |detail: String| Error::parse("value literal", detail);
        if text == "null" {
            return Ok(Value::Ptr(0));
        }
        if let Some(rest) = text.strip_prefix("ptr:") {
            let addr = parse_u64(rest)
                .ok_or_else(|| err(format!("bad pointer literal `{rest}`")))?;
            return Ok(Value::Ptr(addr));
        }
        if let Some(rest) = text.strip_prefix("int:") {
            let n = rest
                .parse::<i64>()
                .map_err(|e| err(format!("bad int literal `{rest}`: {e}")))?;
            return Ok(Value::Int(n));
        }
        if let Some(rest) = text.strip_prefix("str:") {
            let inner = rest
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .ok_or_else(|| err(format!("string literal `{rest}` must be quoted")))?;
            return Ok(Value::Str(inner.to_string()));
        }
        if let Some(rest) = text.strip_prefix("handle:") {
            let (kind, id) = rest
                .split_once('#')
                .ok_or_else(|| err(format!("handle literal `{rest}` needs kind#id")))?;
            let id = parse_u64(id).ok_or_else(|| err(format!("bad handle id `{id}`")))?;
            return Ok(Value::Handle {
                kind: kind.to_string(),
                id,
            });
        }
        if let Some(addr) = text.strip_prefix("0x").and_then(|h| u64::from_str_radix(h, 16).ok())
        {
            return Ok(Value::Ptr(addr));
        }
        if let Ok(n) = text.parse::<i64>() {
            return Ok(Value::Int(n));
        }
        Err(err(format!("unrecognized literal `{text}`")))
    }
}

fn parse_u64(text: &str) -> Option<u64> {
    let text = text.trim();
    if let Some(hex) = text.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()
    } else {
        text.parse::<u64>().ok()
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Ptr(a) => write!(f, "ptr:{a:#x}"),
            Value::Int(n) => write!(f, "int:{n}"),
            Value::Str(s) => write!(f, "str:\"{s}\""),
            Value::Handle { kind, id } => write!(f, "handle:{kind}#{id}"),
            Value::Struct(fields) => {
                write!(f, "{{")?;
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                write!(f, "}}")
            }
        }
    }
}

// JSON form mirrors the display literals: {"ptr": "0x1000"}, {"int": -3},
// {"str": "x"}, {"handle": {"kind": "session", "id": 42}},
// {"struct": {"field": ...}}. Pointers are hex strings to keep fixtures
// readable and diffable.
impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        match self {
            Value::Ptr(a) => map.serialize_entry("ptr", &format!("{a:#x}"))?,
            Value::Int(n) => map.serialize_entry("int", n)?,
            Value::Str(s) => map.serialize_entry("str", s)?,
            Value::Handle { kind, id } => {
                #[derive(Serialize)]
                struct H<'a> {
                    kind: &'a str,
                    id: u64,
                }
                map.serialize_entry("handle", &H { kind, id: *id })?;
            }
            Value::Struct(fields) => map.serialize_entry("struct", fields)?,
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Value;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a single-key map tagging the value kind")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Value, A::Error> {
                let key: String = map
                    .next_key()?
                    .ok_or_else(|| de::Error::custom("empty value object"))?;
                let value = match key.as_str() {
                    "ptr" => {
                        let s: String = map.next_value()?;
                        let addr = parse_u64(&s)
                            .ok_or_else(|| de::Error::custom(format!("bad pointer `{s}`")))?;
                        Value::Ptr(addr)
                    }
                    "int" => Value::Int(map.next_value()?),
                    "str" => Value::Str(map.next_value()?),
                    "handle" => {
                        #[derive(Deserialize)]
                        struct H {
                            kind: String,
                            id: u64,
                        }
                        let h: H = map.next_value()?;
                        Value::Handle {
                            kind: h.kind,
                            id: h.id,
                        }
                    }
                    "struct" => Value::Struct(map.next_value()?),
                    other => {
                        return Err(de::Error::custom(format!("unknown value kind `{other}`")))
                    }
                };
                if map.next_key::<String>()?.is_some() {
                    return Err(de::Error::custom("value object must have exactly one key"));
                }
                Ok(value)
            }
        }
        deserializer.deserialize_map(V)
    }
}

/// One access-path segment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Seg {
    Field(String),
    Index(usize),
}

/// A dot-separated access path with bracketed indices: `r.headers_in`,
/// `frames[3].id`. The root names a parameter (or `return` for values
/// flowing back across the interface).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path {
    pub root: String,
    pub segs: Vec<Seg>,
}

impl Path {
    pub fn root(name: impl Into<String>) -> Self {
        Path {
            root: name.into(),
            segs: Vec::new(),
        }
    }

    pub fn field(mut self, name: impl Into<String>) -> Self {
        self.segs.push(Seg::Field(name.into()));
        self
    }

    pub fn is_root_only(&self) -> bool {
        self.segs.is_empty()
    }

    /// Name of the innermost segment (the root for top-level paths).
    pub fn leaf_name(&self) -> &str {
        match self.segs.last() {
            Some(Seg::Field(name)) => name,
            _ => &self.root,
        }
    }

    pub fn parse(text: &str) -> Result<Path> {
        let text = text.trim();
        let err = |detail: String| Error::parse("access path", detail);
        if text.is_empty() {
            return Err(err("empty path".into()));
        }
        let mut segs = Vec::new();
        let mut parts = text.split('.');
        let first = parts.next().unwrap_or_default();
        let (root, idxs) = split_indices(first).map_err(err)?;
        if root.is_empty() || !is_ident(root) {
            return Err(err(format!("bad root `{first}`")));
        }
        segs.extend(idxs.into_iter().map(Seg::Index));
        for part in parts {
            let (name, idxs) = split_indices(part).map_err(err)?;
            if name.is_empty() || !is_ident(name) {
                return Err(err(format!("bad segment `{part}`")));
            }
            segs.push(Seg::Field(name.to_string()));
            segs.extend(idxs.into_iter().map(Seg::Index));
        }
        Ok(Path {
            root: root.to_string(),
            segs,
        })
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Split `name[3][4]` into the name and its index suffixes.
fn split_indices(part: &str) -> std::result::Result<(&str, Vec<usize>), String> {
    match part.find('[') {
        None => Ok((part, Vec::new())),
        Some(pos) => {
            let name = &part[..pos];
            let mut idxs = Vec::new();
            let mut rest = &part[pos..];
            while !rest.is_empty() {
                let inner = rest
                    .strip_prefix('[')
                    .ok_or_else(|| format!("expected `[` in `{part}`"))?;
                let close = inner
                    .find(']')
                    .ok_or_else(|| format!("unclosed `[` in `{part}`"))?;
                let idx = inner[..close]
                    .parse::<usize>()
                    .map_err(|e| format!("bad index in `{part}`: {e}"))?;
                idxs.push(idx);
                rest = &inner[close + 1..];
            }
            Ok((name, idxs))
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)?;
        for seg in &self.segs {
            match seg {
                Seg::Field(name) => write!(f, ".{name}")?,
                Seg::Index(i) => write!(f, "[{i}]")?,
            }
        }
        Ok(())
    }
}

impl Serialize for Path {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Path::parse(&s).map_err(de::Error::custom)
    }
}
