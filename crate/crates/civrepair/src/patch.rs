//! Candidate patches and the unified-diff <-> guard-insertion mapping.
//!
//! Backends emit either a unified diff against a function's rendered body
//! or a direct guard insertion. Diffs against scenario functions follow a
//! documented mapping: the function body is its op list, one op per line
//! (1-based), and the patch adds a `guard <predicate> on_fail <return|skip>`
//! line at the insertion point. Both forms lower to a [`GuardPatch`], so
//! validation has a single application path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{GuardPatch, OnFail, Op, Predicate, Scenario};

/// Sentinels that must fence a generated diff in a backend response.
pub const PATCH_BEGIN: &str = "===PATCH-BEGIN===";
pub const PATCH_END: &str = "===PATCH-END===";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchForm {
    /// A unified diff against the target function's rendered source.
    UnifiedDiff { diff: String },
    /// A guard insertion expressed directly.
    GuardInsertion { guard: GuardPatch },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePatch {
    pub target_function: String,
    pub form: PatchForm,
    pub backend_id: String,
    pub attempt: u32,
}

impl CandidatePatch {
    /// Lower to a guard insertion against the given scenario.
    pub fn to_guard_patch(&self, scenario: &Scenario) -> Result<GuardPatch> {
        match &self.form {
            PatchForm::GuardInsertion { guard } => {
                if guard.target_function != self.target_function {
                    return Err(Error::invalid(
                        "patch",
                        format!(
                            "stated target `{}` disagrees with guard target `{}`",
                            self.target_function, guard.target_function
                        ),
                    ));
                }
                Ok(guard.clone())
            }
            PatchForm::UnifiedDiff { diff } => diff_to_guard_patch(diff, scenario),
        }
    }

    /// The patch body as stored in artifacts.
    pub fn body_text(&self) -> String {
        match &self.form {
            PatchForm::UnifiedDiff { diff } => diff.clone(),
            PatchForm::GuardInsertion { guard } => format!(
                "target={} insert_before={}\n{}\n",
                guard.target_function,
                guard.insert_before_op_index,
                guard.guard_line()
            ),
        }
    }
}

/// Pull the fenced diff out of a backend response.
pub fn extract_fenced_diff(text: &str) -> Result<String> {
    let begin = text.find(PATCH_BEGIN).ok_or_else(|| {
        Error::parse("backend response", format!("missing {PATCH_BEGIN} sentinel"))
    })?;
    let after = &text[begin + PATCH_BEGIN.len()..];
    let end = after.find(PATCH_END).ok_or_else(|| {
        Error::parse("backend response", format!("missing {PATCH_END} sentinel"))
    })?;
    let diff = after[..end].trim_matches('\n');
    if diff.trim().is_empty() {
        return Err(Error::parse("backend response", "empty fenced diff"));
    }
    Ok(format!("{diff}\n"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum DiffLine {
    Context(String),
    Added(String),
    Removed(String),
}

#[derive(Debug, Clone)]
struct Hunk {
    old_start: usize,
    lines: Vec<DiffLine>,
}

#[derive(Debug, Clone)]
pub struct ParsedDiff {
    pub target: String,
    hunks: Vec<Hunk>,
}

/// Parse the minimal unified-diff subset used for scenario patches:
/// `---`/`+++` headers naming the function and one or more `@@` hunks.
pub fn parse_unified_diff(text: &str) -> Result<ParsedDiff> {
    let err = |d: String| Error::parse("unified diff", d);
    let mut target = None;
    let mut hunks: Vec<Hunk> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("+++ ") {
            let name = rest.trim();
            let name = name.strip_prefix("b/").unwrap_or(name);
            target = Some(name.to_string());
        } else if line.starts_with("--- ") || line.starts_with("diff ") || line.starts_with("index ")
        {
            continue;
        } else if let Some(rest) = line.strip_prefix("@@") {
            let header = rest.trim_end_matches(|c| c != '@').trim_end_matches('@').trim();
            // "-<old_start>[,len] +<new_start>[,len]"
            let old = header
                .split_whitespace()
                .find(|t| t.starts_with('-'))
                .ok_or_else(|| err(format!("bad hunk header `{line}`")))?;
            let old_start: usize = old[1..]
                .split(',')
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| err(format!("bad hunk start in `{line}`: {e}")))?;
            hunks.push(Hunk {
                old_start,
                lines: Vec::new(),
            });
        } else if let Some(hunk) = hunks.last_mut() {
            if let Some(rest) = line.strip_prefix('+') {
                hunk.lines.push(DiffLine::Added(rest.to_string()));
            } else if let Some(rest) = line.strip_prefix('-') {
                hunk.lines.push(DiffLine::Removed(rest.to_string()));
            } else if let Some(rest) = line.strip_prefix(' ') {
                hunk.lines.push(DiffLine::Context(rest.to_string()));
            } else if line.is_empty() {
                hunk.lines.push(DiffLine::Context(String::new()));
            } else {
                return Err(err(format!("unexpected line in hunk: `{line}`")));
            }
        } else if !line.trim().is_empty() {
            return Err(err(format!("content before any hunk: `{line}`")));
        }
    }
    let target = target.ok_or_else(|| err("missing +++ target header".into()))?;
    if hunks.is_empty() {
        return Err(err("no hunks".into()));
    }
    Ok(ParsedDiff { target, hunks })
}

/// Lower a unified diff to a guard insertion, validating context against
/// the target function's rendered body. Exactly one added guard line is
/// supported; removals are not.
pub fn diff_to_guard_patch(diff: &str, scenario: &Scenario) -> Result<GuardPatch> {
    let parsed = parse_unified_diff(diff)?;
    let body = scenario.function(&parsed.target).ok_or_else(|| {
        Error::invalid("patch", format!("unknown target `{}`", parsed.target))
    })?;
    let rendered: Vec<String> = body.ops.iter().map(|op| op.to_string()).collect();

    let mut guard: Option<(usize, Predicate, OnFail)> = None;
    for hunk in &parsed.hunks {
        if hunk.old_start == 0 || hunk.old_start > rendered.len() + 1 {
            return Err(Error::invalid(
                "patch",
                format!("hunk start {} outside body", hunk.old_start),
            ));
        }
        let mut old_line = hunk.old_start - 1;
        for line in &hunk.lines {
            match line {
                DiffLine::Context(text) => {
                    let expected = rendered.get(old_line).map(String::as_str).unwrap_or("");
                    if expected != text.trim_end() {
                        return Err(Error::invalid(
                            "patch",
                            format!(
                                "context mismatch at `{}` line {}: expected `{expected}`, diff has `{text}`",
                                parsed.target,
                                old_line + 1
                            ),
                        ));
                    }
                    old_line += 1;
                }
                DiffLine::Removed(_) => {
                    return Err(Error::invalid(
                        "patch",
                        "only guard insertions are supported; diff removes a line",
                    ));
                }
                DiffLine::Added(text) => {
                    let op = Op::parse(text).map_err(|e| {
                        Error::invalid("patch", format!("added line is not a valid op: {e}"))
                    })?;
                    let Op::Guard { pred, on_fail } = op else {
                        return Err(Error::invalid(
                            "patch",
                            format!("added line must be a guard, got `{text}`"),
                        ));
                    };
                    if guard.is_some() {
                        return Err(Error::invalid("patch", "more than one guard added"));
                    }
                    guard = Some((old_line, pred, on_fail));
                }
            }
        }
    }
    let (insert_before, predicate, on_fail) = guard.ok_or_else(|| {
        Error::invalid("patch", "diff adds no guard line")
    })?;
    Ok(GuardPatch {
        target_function: parsed.target,
        insert_before_op_index: insert_before,
        predicate,
        on_fail,
    })
}

/// Render a guard insertion as a unified diff with the whole body as
/// context. This is the inverse of [`diff_to_guard_patch`].
pub fn render_guard_diff(scenario: &Scenario, guard: &GuardPatch) -> Result<String> {
    let body = scenario
        .function(&guard.target_function)
        .ok_or_else(|| Error::invalid("patch", format!("unknown target `{}`", guard.target_function)))?;
    let rendered: Vec<String> = body.ops.iter().map(|op| op.to_string()).collect();
    if guard.insert_before_op_index > rendered.len() {
        return Err(Error::OpIndexOutOfRange {
            symbol: guard.target_function.clone(),
            index: guard.insert_before_op_index,
            len: rendered.len(),
        });
    }
    let mut out = String::new();
    out.push_str(&format!("--- a/{}\n", guard.target_function));
    out.push_str(&format!("+++ b/{}\n", guard.target_function));
    out.push_str(&format!(
        "@@ -1,{} +1,{} @@\n",
        rendered.len(),
        rendered.len() + 1
    ));
    for (i, line) in rendered.iter().enumerate() {
        if i == guard.insert_before_op_index {
            out.push_str(&format!("+{}\n", guard.guard_line()));
        }
        out.push_str(&format!(" {line}\n"));
    }
    if guard.insert_before_op_index == rendered.len() {
        out.push_str(&format!("+{}\n", guard.guard_line()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::scenario::apply_guard_patch;

    fn apache() -> Scenario {
        fixtures::load("apache_markdown").unwrap().0
    }

    fn listing_style_guard() -> GuardPatch {
        GuardPatch {
            target_function: "log_table_entry".into(),
            insert_before_op_index: 0,
            predicate: Predicate::parse("is_pointer_mapped(r.headers_in, 24)").unwrap(),
            on_fail: OnFail::Return,
        }
    }

    #[test]
    fn guard_diff_roundtrip() {
        let scenario = apache();
        let guard = listing_style_guard();
        let diff = render_guard_diff(&scenario, &guard).unwrap();
        assert!(diff.contains("+++ b/log_table_entry"));
        assert!(diff.contains("+guard is_pointer_mapped(r.headers_in, 24) on_fail return"));
        let back = diff_to_guard_patch(&diff, &scenario).unwrap();
        assert_eq!(back, guard);
        // And the lowered patch applies.
        apply_guard_patch(&scenario, &back).unwrap();
    }

    #[test]
    fn mid_body_insertion_roundtrip() {
        let scenario = fixtures::load("ffmpeg_libavcodec").unwrap().0;
        let guard = GuardPatch {
            target_function: "print_all_libs_info".into(),
            insert_before_op_index: 1,
            predicate: Predicate::parse("is_pointer_mapped(cfg, 1)").unwrap(),
            on_fail: OnFail::Return,
        };
        let diff = render_guard_diff(&scenario, &guard).unwrap();
        assert_eq!(diff_to_guard_patch(&diff, &scenario).unwrap(), guard);
    }

    #[test]
    fn context_mismatch_is_rejected() {
        let scenario = apache();
        let diff = "--- a/log_table_entry\n+++ b/log_table_entry\n@@ -1,2 +1,3 @@\n\
                    +guard non_null(r.headers_in) on_fail return\n call something_else(r)\n return\n";
        let err = diff_to_guard_patch(diff, &scenario).unwrap_err();
        assert!(err.to_string().contains("context mismatch"), "{err}");
    }

    #[test]
    fn removals_are_rejected() {
        let scenario = apache();
        let diff = "--- a/log_table_entry\n+++ b/log_table_entry\n@@ -1,2 +1,2 @@\n\
                    -call apr_table_get(r.headers_in)\n+guard true on_fail return\n return\n";
        let err = diff_to_guard_patch(diff, &scenario).unwrap_err();
        assert!(err.to_string().contains("removes a line"), "{err}");
    }

    #[test]
    fn non_guard_additions_are_rejected() {
        let scenario = apache();
        let diff = "--- a/log_table_entry\n+++ b/log_table_entry\n@@ -1,1 +1,2 @@\n\
                    +deref r.headers_in 8\n call apr_table_get(r.headers_in)\n";
        let err = diff_to_guard_patch(diff, &scenario).unwrap_err();
        assert!(err.to_string().contains("must be a guard"), "{err}");
    }

    #[test]
    fn fenced_extraction() {
        let text = format!(
            "Here is the fix:\n{PATCH_BEGIN}\n--- a/f\n+++ b/f\n@@ -1,1 +1,2 @@\n+guard true on_fail return\n return\n{PATCH_END}\nDone."
        );
        let diff = extract_fenced_diff(&text).unwrap();
        assert!(diff.starts_with("--- a/f"));
        assert!(extract_fenced_diff("no sentinels").is_err());
        assert!(extract_fenced_diff(&format!("{PATCH_BEGIN}\n\n{PATCH_END}")).is_err());
    }

    #[test]
    fn candidate_patch_forms_lower_identically() {
        let scenario = apache();
        let guard = listing_style_guard();
        let from_guard = CandidatePatch {
            target_function: "log_table_entry".into(),
            form: PatchForm::GuardInsertion {
                guard: guard.clone(),
            },
            backend_id: "test".into(),
            attempt: 1,
        };
        let from_diff = CandidatePatch {
            target_function: "log_table_entry".into(),
            form: PatchForm::UnifiedDiff {
                diff: render_guard_diff(&scenario, &guard).unwrap(),
            },
            backend_id: "test".into(),
            attempt: 1,
        };
        assert_eq!(
            from_guard.to_guard_patch(&scenario).unwrap(),
            from_diff.to_guard_patch(&scenario).unwrap()
        );
    }
}
