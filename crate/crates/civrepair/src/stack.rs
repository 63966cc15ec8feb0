//! Crash-stack role analysis and patch-site selection.
//!
//! Starting from a finding's crash stack, the analyzer determines the
//! boundary candidates: trusted frames that carry the crash variable in
//! scope and ran after the sandbox-facing function returned (frames between
//! the crash site and the frame that invoked the interface entry). Each
//! candidate is then ranked by its semantic interaction with the crash
//! variable:
//!
//! - `CONSUME`: the first candidate (in call order) that interprets the
//!   unit (dereference, index, read, compare);
//! - `FORWARD`: passes the unit itself onward without interpreting it;
//! - `PRESENCE`: has the unit in scope but never touches it;
//! - `COMMIT`: the untrusted entry that installed the unit into trusted
//!   execution — never a patch candidate.
//!
//! The patch site is the `CONSUME` function when it has modifiable source.
//! When it is a library without source, selection falls back to the last
//! function that forwards the unit (and has source); failing that, a
//! `PRESENCE` frame with source, flagged low-confidence. Evidence comes
//! from executor traces when a scenario is available (authoritative) or
//! from token-level scanning of indexed source bodies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::{CivClass, PatchingUnit};
use crate::error::{Error, Result};
use crate::exec::{OpKind, TraceStep};
use crate::fuzzer::CivFinding;
use crate::policy::{CompartmentPolicy, IfaceType, InterfaceSpec, Trust};
use crate::report::CrashReport;
use crate::source_index::SourceIndex;
use crate::value::{Path, Value};

/// The concrete tainted instance that reaches the crash site, and the unit
/// granularity a fix should guard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashVariable {
    pub entry_function: String,
    /// Interface access path of the mutated value.
    pub path: Path,
    pub leaf: IfaceType,
    /// The tainted value as recorded in the finding's payload.
    pub value: Value,
    pub unit: PatchingUnit,
}

impl CrashVariable {
    pub fn from_finding(
        finding: &CivFinding,
        spec: &InterfaceSpec,
        class: &CivClass,
    ) -> Result<CrashVariable> {
        let path = finding.mutation.mutated_path.clone();
        let leaf = spec
            .resolve_path(&finding.mutation.entry_function, &path)?
            .clone();
        let value = finding.payload.get(&path)?.clone();
        Ok(CrashVariable {
            entry_function: finding.mutation.entry_function.clone(),
            path,
            leaf,
            value,
            unit: class.patching_unit,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Consume,
    Forward,
    Presence,
    Commit,
    CrashSite,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Consume => "CONSUME",
            Role::Forward => "FORWARD",
            Role::Presence => "PRESENCE",
            Role::Commit => "COMMIT",
            Role::CrashSite => "CRASH_SITE",
        })
    }
}

/// A trusted frame eligible for patch placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFrame {
    pub index: usize,
    pub symbol: String,
    pub has_source: bool,
}

/// Where a frame first touches the unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSite {
    pub op_index: usize,
    /// The unit's access path in that frame's own scope.
    pub local_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRole {
    pub symbol: String,
    /// Crash-stack index; the committing entry is not on the stack.
    pub frame_index: Option<usize>,
    pub role: Role,
    pub has_source: bool,
    pub trusted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_interaction: Option<InteractionSite>,
    /// Path under which the unit is reachable in this frame, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_scope_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    /// Crash-site frame first, then candidates outward, then the committer.
    pub frames: Vec<FrameRole>,
    pub candidates: Vec<String>,
    /// The designated boundary function: the consumer of the unit.
    pub boundary: Option<String>,
    pub warnings: Vec<String>,
}

impl RoleAssignment {
    pub fn role_of(&self, symbol: &str) -> Option<Role> {
        self.frames
            .iter()
            .find(|f| f.symbol == symbol)
            .map(|f| f.role)
    }

    pub fn frame(&self, symbol: &str) -> Option<&FrameRole> {
        self.frames.iter().find(|f| f.symbol == symbol)
    }

    /// Plain-text role table for reports and prompts.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .frames
            .iter()
            .map(|f| f.symbol.len())
            .max()
            .unwrap_or(8)
            .max(8);
        for frame in &self.frames {
            let idx = match frame.frame_index {
                Some(i) => format!("#{i}"),
                None => "--".to_string(),
            };
            let mut line = format!(
                "{idx:>4}  {symbol:width$}  {role:10}  source={src}",
                symbol = frame.symbol,
                role = frame.role.to_string(),
                src = if frame.has_source { "yes" } else { "no" },
            );
            if let Some(site) = &frame.first_interaction {
                line.push_str(&format!("  unit@op{} ({})", site.op_index, site.local_path));
            }
            if let Some(note) = &frame.note {
                line.push_str(&format!("  [{note}]"));
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Evidence source for role assignment: executor traces when the scenario
/// is available, token-level source scanning otherwise.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    Trace(&'a [TraceStep]),
    Tokens(&'a SourceIndex),
}

/// Compute the ordered boundary-candidate list for a crash stack.
///
/// Candidates are the trusted frames between the crash site (exclusive)
/// and the frame that invoked the interface entry (inclusive), ordered from
/// the crash site outward. These are exactly the frames whose remaining
/// code ran after the sandbox function returned and that carry the crash
/// variable along the crash path. Untrusted frames are excluded.
pub fn boundary_candidates(
    report: &CrashReport,
    policy: &CompartmentPolicy,
    idx: &SourceIndex,
    crash_var: &CrashVariable,
) -> Result<Vec<CandidateFrame>> {
    // The frame whose body invokes the entry bounds the set: anything above
    // it resumed only after the crash path unwound, so the unit never
    // reached its scope.
    let cut = report
        .frames
        .iter()
        .skip(1)
        .find(|f| body_calls(idx, &f.symbol, &crash_var.entry_function))
        .map(|f| f.index);

    let mut candidates = Vec::new();
    for frame in report.frames.iter().skip(1) {
        match cut {
            Some(cut) if frame.index > cut => break,
            // Without a visible entry caller, fall back to a per-frame
            // scope check: a frame with available source must show the unit
            // (or its container) in its body; frames without source cannot
            // be disproved and stay in.
            None if idx.body(&frame.symbol).is_some()
                && !token_in_scope(idx, &frame.symbol, crash_var) =>
            {
                continue;
            }
            _ => {}
        }
        let attribution = policy.attribute(&frame.symbol)?;
        if attribution.trust == Trust::Untrusted {
            continue;
        }
        let has_source = idx
            .get(&frame.symbol)
            .map(|e| e.available)
            .unwrap_or(frame.has_source);
        candidates.push(CandidateFrame {
            index: frame.index,
            symbol: frame.symbol.clone(),
            has_source,
        });
    }
    if candidates.is_empty() {
        return Err(Error::NoTrustedCandidate(
            "crash is confined to untrusted code; no trusted-side patch exists".into(),
        ));
    }
    Ok(candidates)
}

/// Token-level scope check: the body references the unit (by leaf name or
/// entry-call alias) or the payload root that contains it.
fn token_in_scope(idx: &SourceIndex, symbol: &str, crash_var: &CrashVariable) -> bool {
    let ev = token_evidence(idx, symbol, crash_var);
    if ev.scope_path.is_some() {
        return true;
    }
    let Some(body) = idx.body(symbol) else {
        return false;
    };
    let root = &crash_var.path.root;
    body.lines()
        .filter_map(|l| crate::scenario::Op::parse(l).ok())
        .any(|op| {
            op.operands().iter().any(|operand| match operand {
                crate::scenario::Operand::Path(p) => &p.root == root,
                crate::scenario::Operand::Region(_) => false,
            }) || matches!(&op, crate::scenario::Op::Call { callee, .. }
                           if callee == &crash_var.entry_function)
        })
}

fn body_calls(idx: &SourceIndex, symbol: &str, callee: &str) -> bool {
    let Some(body) = idx.body(symbol) else {
        return false;
    };
    body.lines()
        .filter_map(|line| crate::scenario::Op::parse(line).ok())
        .any(|op| matches!(op, crate::scenario::Op::Call { callee: c, .. } if c == callee))
}

/// Per-frame unit interaction extracted from the evidence.
#[derive(Debug, Default, Clone)]
struct FrameEvidence {
    interprets: Option<InteractionSite>,
    forwards: Option<InteractionSite>,
    scope_path: Option<String>,
}

impl FrameEvidence {
    fn first_interaction(&self) -> Option<InteractionSite> {
        match (&self.interprets, &self.forwards) {
            (Some(a), Some(b)) => Some(if a.op_index <= b.op_index {
                a.clone()
            } else {
                b.clone()
            }),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
        }
    }
}

/// Assign roles to the candidate frames (plus the crash site and the
/// committing entry) with respect to the crash variable.
pub fn assign_roles(
    report: &CrashReport,
    candidates: &[CandidateFrame],
    crash_var: &CrashVariable,
    idx: &SourceIndex,
    evidence: Evidence<'_>,
) -> Result<RoleAssignment> {
    let mut warnings = Vec::new();
    let mut per_frame: Vec<(CandidateFrame, FrameEvidence)> = candidates
        .iter()
        .map(|c| {
            let ev = match evidence {
                Evidence::Trace(trace) => trace_evidence(trace, &c.symbol, crash_var),
                Evidence::Tokens(index) => token_evidence(index, &c.symbol, crash_var),
            };
            (c.clone(), ev)
        })
        .collect();

    // CONSUME is unique: the earliest interpreter in dynamic call order.
    // Callers run their pre-call ops before their callees run at all, so
    // scanning candidates outermost-first finds the first interpreter.
    let consume_symbol: Option<String> = per_frame
        .iter()
        .rev()
        .find(|(_, ev)| ev.interprets.is_some())
        .map(|(c, _)| c.symbol.clone());

    if let Some(symbol) = &consume_symbol {
        if let Some((_, ev)) = per_frame.iter().find(|(c, _)| &c.symbol == symbol) {
            if ev.forwards.is_some() {
                warnings.push(format!(
                    "`{symbol}` both interprets and forwards the unit; interpretation dominates (CONSUME)"
                ));
            }
        }
    }

    let mut frames = Vec::new();

    // Crash-site frame. With no interpreting candidate, the first consumer
    // is the crash site itself (typically a library); it is ranked as
    // CONSUME even though it sits outside the candidate set.
    let site = &report.frames[0];
    let site_source = idx
        .get(&site.symbol)
        .map(|e| e.available)
        .unwrap_or(site.has_source);
    let site_trusted = !site_untrusted(idx, &site.symbol);
    let site_ev = match evidence {
        Evidence::Trace(trace) => trace_evidence(trace, &site.symbol, crash_var),
        Evidence::Tokens(index) => token_evidence(index, &site.symbol, crash_var),
    };
    let site_role = if consume_symbol.is_none() {
        Role::Consume
    } else {
        Role::CrashSite
    };
    frames.push(FrameRole {
        symbol: site.symbol.clone(),
        frame_index: Some(0),
        role: site_role,
        has_source: site_source,
        trusted: site_trusted,
        first_interaction: site_ev.first_interaction(),
        unit_scope_path: site_ev.scope_path.clone(),
        note: Some(if site_source {
            "crash site".to_string()
        } else {
            "crash site, library without source".to_string()
        }),
    });

    per_frame.sort_by_key(|(c, _)| c.index);
    for (candidate, ev) in &per_frame {
        let role = if consume_symbol.as_deref() == Some(candidate.symbol.as_str()) {
            Role::Consume
        } else if ev.forwards.is_some() {
            Role::Forward
        } else {
            Role::Presence
        };
        frames.push(FrameRole {
            symbol: candidate.symbol.clone(),
            frame_index: Some(candidate.index),
            role,
            has_source: candidate.has_source,
            trusted: true,
            first_interaction: ev.first_interaction(),
            unit_scope_path: ev.scope_path.clone(),
            note: None,
        });
    }

    // The committing entry: untrusted by definition, never a candidate.
    frames.push(FrameRole {
        symbol: crash_var.entry_function.clone(),
        frame_index: None,
        role: Role::Commit,
        has_source: idx
            .get(&crash_var.entry_function)
            .map(|e| e.available)
            .unwrap_or(false),
        trusted: false,
        first_interaction: None,
        unit_scope_path: None,
        note: Some("interface entry installing the unit".to_string()),
    });

    let boundary = frames
        .iter()
        .find(|f| f.role == Role::Consume)
        .map(|f| f.symbol.clone());

    Ok(RoleAssignment {
        frames,
        candidates: per_frame.iter().map(|(c, _)| c.symbol.clone()).collect(),
        boundary,
        warnings,
    })
}

fn site_untrusted(idx: &SourceIndex, symbol: &str) -> bool {
    idx.get(symbol).map(|e| e.untrusted).unwrap_or(false)
}

fn trace_evidence(trace: &[TraceStep], symbol: &str, crash_var: &CrashVariable) -> FrameEvidence {
    let mut ev = FrameEvidence::default();
    for step in trace.iter().filter(|s| s.function == symbol) {
        for (rendered, value) in &step.operands {
            let hits_unit = value == &crash_var.value;
            if hits_unit {
                let site = InteractionSite {
                    op_index: step.op_index,
                    local_path: rendered.clone(),
                };
                if step.kind.interprets() && ev.interprets.is_none() {
                    ev.interprets = Some(site.clone());
                }
                if step.kind.forwards() && ev.forwards.is_none() {
                    ev.forwards = Some(site);
                }
                if ev.scope_path.is_none() {
                    ev.scope_path = Some(rendered.clone());
                }
            } else if ev.scope_path.is_none() && value.contains_value(&crash_var.value) {
                // The unit is reachable inside a containing value.
                if let crate::scenario::Operand::Path(base) =
                    crate::scenario::Operand::parse(rendered).unwrap_or_else(|_| {
                        crate::scenario::Operand::Region(rendered.clone())
                    })
                {
                    if let Some(path) = value.find_path_to(&base.to_string(), &crash_var.value) {
                        ev.scope_path = Some(path.to_string());
                    }
                }
            }
        }
    }
    ev
}

/// Token-level approximation for plain source corpora: the unit is matched
/// by its access-path leaf name, or by the local produced from a
/// `call <entry>() -> out` when the unit is a return-direction value.
fn token_evidence(idx: &SourceIndex, symbol: &str, crash_var: &CrashVariable) -> FrameEvidence {
    let mut ev = FrameEvidence::default();
    let Some(body) = idx.body(symbol) else {
        return ev;
    };
    let ops: Vec<crate::scenario::Op> = body
        .lines()
        .filter_map(|l| crate::scenario::Op::parse(l).ok())
        .collect();

    let leaf = crash_var.path.leaf_name().to_string();
    let mut aliases: Vec<String> = Vec::new();
    for op in &ops {
        if let crate::scenario::Op::Call { callee, out: Some(out), .. } = op {
            if callee == &crash_var.entry_function {
                aliases.push(out.clone());
            }
        }
    }

    let matches_unit = |rendered: &str| -> bool {
        rendered == leaf
            || rendered.ends_with(&format!(".{leaf}"))
            || aliases.iter().any(|a| rendered == a)
    };

    for (op_index, op) in ops.iter().enumerate() {
        let kind = OpKind::of(op);
        for operand in op.operands() {
            let rendered = operand.to_string();
            if matches_unit(&rendered) {
                let site = InteractionSite {
                    op_index,
                    local_path: rendered.clone(),
                };
                if kind.interprets() && ev.interprets.is_none() {
                    ev.interprets = Some(site.clone());
                }
                if kind.forwards() && ev.forwards.is_none() {
                    ev.forwards = Some(site);
                }
                if ev.scope_path.is_none() {
                    ev.scope_path = Some(rendered);
                }
            }
        }
    }
    ev
}

/// Tie-break strategy when several frames share the selected role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteStrategy {
    /// Patch as late as possible: the frame nearest the consumer.
    Late,
    /// Patch as early as possible on the trusted side.
    Early,
}

impl Default for SiteStrategy {
    fn default() -> Self {
        SiteStrategy::Late
    }
}

/// The selected patch location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSite {
    pub function: String,
    pub role: Role,
    /// Insert the guard before this op (the first op interacting with the
    /// unit, or 0 when the frame never touches it).
    pub insert_before_op: usize,
    /// The unit's access path in the target function's scope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_local_path: Option<String>,
    pub justification: String,
    pub low_confidence: bool,
}

/// Pick the patch site from a role assignment.
///
/// Priority: CONSUME (when it has source and is trusted), then the last
/// forwarder with source, then a PRESENCE frame with source (flagged
/// low-confidence). `strategy` breaks ties among forwarders; PRESENCE
/// fallback always takes the outermost frame, where the unit first entered
/// trusted scope.
pub fn select_patch_site(roles: &RoleAssignment, strategy: SiteStrategy) -> Result<PatchSite> {
    let consume = roles.frames.iter().find(|f| f.role == Role::Consume);
    if let Some(frame) = consume {
        if frame.has_source && frame.trusted {
            return Ok(PatchSite {
                function: frame.symbol.clone(),
                role: Role::Consume,
                insert_before_op: frame
                    .first_interaction
                    .as_ref()
                    .map(|s| s.op_index)
                    .unwrap_or(0),
                unit_local_path: frame
                    .first_interaction
                    .as_ref()
                    .map(|s| s.local_path.clone())
                    .or_else(|| frame.unit_scope_path.clone()),
                justification: "consumer of the unit has modifiable source".to_string(),
                low_confidence: false,
            });
        }
    }

    let forwarders: Vec<&FrameRole> = roles
        .frames
        .iter()
        .filter(|f| f.role == Role::Forward && f.has_source && f.trusted)
        .collect();
    if !forwarders.is_empty() {
        let chosen = match strategy {
            // Frame indices grow outward, so the minimum is nearest the
            // consumer.
            SiteStrategy::Late => forwarders
                .iter()
                .min_by_key(|f| f.frame_index.unwrap_or(usize::MAX))
                .expect("nonempty"),
            SiteStrategy::Early => forwarders
                .iter()
                .max_by_key(|f| f.frame_index.unwrap_or(0))
                .expect("nonempty"),
        };
        let consume_desc = consume
            .map(|c| format!("`{}` (no modifiable source)", c.symbol))
            .unwrap_or_else(|| "a library function".to_string());
        return Ok(PatchSite {
            function: chosen.symbol.clone(),
            role: Role::Forward,
            insert_before_op: chosen
                .first_interaction
                .as_ref()
                .map(|s| s.op_index)
                .unwrap_or(0),
            unit_local_path: chosen
                .first_interaction
                .as_ref()
                .map(|s| s.local_path.clone())
                .or_else(|| chosen.unit_scope_path.clone()),
            justification: format!(
                "consumer is {consume_desc}; fallback to the last forwarder with source"
            ),
            low_confidence: false,
        });
    }

    let presence: Option<&FrameRole> = roles
        .frames
        .iter()
        .filter(|f| f.role == Role::Presence && f.has_source && f.trusted)
        .max_by_key(|f| f.frame_index.unwrap_or(0));
    if let Some(frame) = presence {
        return Ok(PatchSite {
            function: frame.symbol.clone(),
            role: Role::Presence,
            insert_before_op: 0,
            unit_local_path: frame.unit_scope_path.clone(),
            justification: "no candidate interacts with the unit; guarding where it first \
                            enters trusted scope"
                .to_string(),
            low_confidence: true,
        });
    }

    Err(Error::HumanReviewRequired(
        "no trusted candidate with modifiable source".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::classify;
    use crate::fixtures;
    use crate::fuzzer::{fuzz_interface, reproduce};
    use crate::mutation::MutationStrategy;

    struct Analysis {
        roles: RoleAssignment,
        site: PatchSite,
    }

    fn analyze(fixture: &str, strategy: MutationStrategy) -> Analysis {
        let (scenario, policy) = fixtures::load(fixture).unwrap();
        let findings = fuzz_interface(&scenario, &policy.interface, 500, 7).unwrap();
        let finding = findings
            .into_iter()
            .find(|f| f.mutation.strategy == strategy)
            .expect("finding");
        let class = classify(&finding, &policy.interface).unwrap();
        let crash_var = CrashVariable::from_finding(&finding, &policy.interface, &class).unwrap();
        let idx = SourceIndex::from_scenario(&scenario, &policy).unwrap();
        let candidates =
            boundary_candidates(&finding.report, &policy, &idx, &crash_var).unwrap();
        let trace = reproduce(&scenario, &finding).unwrap().trace;
        let roles = assign_roles(
            &finding.report,
            &candidates,
            &crash_var,
            &idx,
            Evidence::Trace(&trace),
        )
        .unwrap();
        let site = select_patch_site(&roles, SiteStrategy::Late).unwrap();
        Analysis { roles, site }
    }

    #[test]
    fn apache_candidates_are_frames_one_through_six() {
        let (scenario, policy) = fixtures::load("apache_markdown").unwrap();
        let findings = fuzz_interface(&scenario, &policy.interface, 500, 7).unwrap();
        let finding = findings
            .iter()
            .find(|f| f.mutation.strategy == MutationStrategy::PtrUnmapped)
            .unwrap();
        let class = classify(finding, &policy.interface).unwrap();
        let crash_var = CrashVariable::from_finding(finding, &policy.interface, &class).unwrap();
        let idx = SourceIndex::from_scenario(&scenario, &policy).unwrap();
        let candidates = boundary_candidates(&finding.report, &policy, &idx, &crash_var).unwrap();
        let symbols: Vec<&str> = candidates.iter().map(|c| c.symbol.as_str()).collect();
        assert_eq!(
            symbols,
            vec![
                "log_table_entry",
                "log_header",
                "do_errorlog_default",
                "log_error_core",
                "ap_log_rerror_",
                "ap_invoke_handler",
            ]
        );
        assert_eq!(candidates[0].index, 1);
        assert_eq!(candidates[5].index, 6);
    }

    #[test]
    fn apache_roles_match_case_study() {
        let analysis = analyze("apache_markdown", MutationStrategy::PtrUnmapped);
        let roles = &analysis.roles;
        assert_eq!(roles.role_of("apr_table_get"), Some(Role::Consume));
        assert!(!roles.frame("apr_table_get").unwrap().has_source);
        assert_eq!(roles.role_of("log_table_entry"), Some(Role::Forward));
        for presence in [
            "log_header",
            "do_errorlog_default",
            "log_error_core",
            "ap_log_rerror_",
            "ap_invoke_handler",
        ] {
            assert_eq!(roles.role_of(presence), Some(Role::Presence), "{presence}");
        }
        assert_eq!(roles.role_of("markdown_output"), Some(Role::Commit));
        assert_eq!(roles.boundary.as_deref(), Some("apr_table_get"));
    }

    #[test]
    fn apache_site_falls_back_to_last_forwarder() {
        let analysis = analyze("apache_markdown", MutationStrategy::PtrUnmapped);
        assert_eq!(analysis.site.function, "log_table_entry");
        assert_eq!(analysis.site.role, Role::Forward);
        assert_eq!(analysis.site.insert_before_op, 0);
        assert_eq!(analysis.site.unit_local_path.as_deref(), Some("r.headers_in"));
        assert!(analysis.site.justification.contains("fallback"));
    }

    #[test]
    fn ffmpeg_site_is_the_forwarding_caller() {
        let analysis = analyze("ffmpeg_libavcodec", MutationStrategy::PtrNull);
        assert_eq!(analysis.roles.role_of("strcmp"), Some(Role::Consume));
        assert_eq!(
            analysis.roles.role_of("print_all_libs_info"),
            Some(Role::Forward)
        );
        assert_eq!(analysis.site.function, "print_all_libs_info");
        assert_eq!(analysis.site.insert_before_op, 1);
        assert_eq!(analysis.site.unit_local_path.as_deref(), Some("cfg"));
    }

    #[test]
    fn decoder_consume_with_source_is_chosen_directly() {
        let analysis = analyze("decoder_index", MutationStrategy::ScalarNegative);
        assert_eq!(analysis.roles.role_of("draw_frame"), Some(Role::Consume));
        assert_eq!(analysis.site.function, "draw_frame");
        assert_eq!(analysis.site.role, Role::Consume);
        assert_eq!(analysis.site.insert_before_op, 0);
        assert_eq!(analysis.site.unit_local_path.as_deref(), Some("i"));
    }

    #[test]
    fn token_evidence_matches_trace_on_fixtures() {
        for (fixture, strategy) in [
            ("apache_markdown", MutationStrategy::PtrUnmapped),
            ("ffmpeg_libavcodec", MutationStrategy::PtrNull),
            ("decoder_index", MutationStrategy::ScalarNegative),
        ] {
            let (scenario, policy) = fixtures::load(fixture).unwrap();
            let findings = fuzz_interface(&scenario, &policy.interface, 500, 7).unwrap();
            let finding = findings
                .iter()
                .find(|f| f.mutation.strategy == strategy)
                .unwrap();
            let class = classify(finding, &policy.interface).unwrap();
            let crash_var =
                CrashVariable::from_finding(finding, &policy.interface, &class).unwrap();
            let idx = SourceIndex::from_scenario(&scenario, &policy).unwrap();
            let candidates =
                boundary_candidates(&finding.report, &policy, &idx, &crash_var).unwrap();
            let trace = reproduce(&scenario, finding).unwrap().trace;
            let from_trace = assign_roles(
                &finding.report,
                &candidates,
                &crash_var,
                &idx,
                Evidence::Trace(&trace),
            )
            .unwrap();
            let from_tokens = assign_roles(
                &finding.report,
                &candidates,
                &crash_var,
                &idx,
                Evidence::Tokens(&idx),
            )
            .unwrap();
            for frame in &from_trace.frames {
                assert_eq!(
                    from_tokens.role_of(&frame.symbol),
                    Some(frame.role),
                    "{fixture}: token evidence diverges on {}",
                    frame.symbol
                );
            }
        }
    }

    #[test]
    fn all_untrusted_stack_has_no_candidates() {
        let (scenario, policy) = fixtures::load("apache_markdown").unwrap();
        let findings = fuzz_interface(&scenario, &policy.interface, 100, 7).unwrap();
        let finding = &findings[0];
        let class = classify(finding, &policy.interface).unwrap();
        let crash_var = CrashVariable::from_finding(finding, &policy.interface, &class).unwrap();
        let idx = SourceIndex::from_scenario(&scenario, &policy).unwrap();
        // Rewrite the stack so every frame attributes to the sandbox.
        let mut report = finding.report.clone();
        for (i, frame) in report.frames.iter_mut().enumerate() {
            frame.symbol = format!("markdown_helper_{i}");
        }
        let err = boundary_candidates(&report, &policy, &idx, &crash_var).unwrap_err();
        assert!(matches!(err, Error::NoTrustedCandidate(_)));
    }

    #[test]
    fn early_strategy_picks_outermost_forwarder() {
        // Two forwarders: log_table_entry extracts the unit; give
        // log_header a forward of the unit too by rewriting its body.
        let (scenario, policy) = fixtures::load("apache_markdown").unwrap();
        let mut scenario = scenario;
        let body = scenario.functions.get_mut("log_header").unwrap();
        body.ops = vec![
            crate::scenario::Op::parse("pass r.headers_in").unwrap(),
            crate::scenario::Op::parse("call log_table_entry(r)").unwrap(),
            crate::scenario::Op::parse("return").unwrap(),
        ];
        let findings = fuzz_interface(&scenario, &policy.interface, 500, 7).unwrap();
        let finding = findings
            .iter()
            .find(|f| f.mutation.strategy == MutationStrategy::PtrUnmapped)
            .unwrap();
        let class = classify(finding, &policy.interface).unwrap();
        let crash_var = CrashVariable::from_finding(finding, &policy.interface, &class).unwrap();
        let idx = SourceIndex::from_scenario(&scenario, &policy).unwrap();
        let candidates = boundary_candidates(&finding.report, &policy, &idx, &crash_var).unwrap();
        let trace = reproduce(&scenario, finding).unwrap().trace;
        let roles = assign_roles(
            &finding.report,
            &candidates,
            &crash_var,
            &idx,
            Evidence::Trace(&trace),
        )
        .unwrap();
        assert_eq!(roles.role_of("log_header"), Some(Role::Forward));
        let late = select_patch_site(&roles, SiteStrategy::Late).unwrap();
        let early = select_patch_site(&roles, SiteStrategy::Early).unwrap();
        assert_eq!(late.function, "log_table_entry");
        assert_eq!(early.function, "log_header");
    }

    #[test]
    fn presence_only_fallback_is_outermost_and_low_confidence() {
        // Strip the forwarder of its source so only PRESENCE frames remain
        // selectable.
        let (scenario, policy) = fixtures::load("apache_markdown").unwrap();
        let mut scenario = scenario;
        scenario.functions.get_mut("log_table_entry").unwrap().has_source = false;
        let findings = fuzz_interface(&scenario, &policy.interface, 500, 7).unwrap();
        let finding = findings
            .iter()
            .find(|f| f.mutation.strategy == MutationStrategy::PtrUnmapped)
            .unwrap();
        let class = classify(finding, &policy.interface).unwrap();
        let crash_var = CrashVariable::from_finding(finding, &policy.interface, &class).unwrap();
        let idx = SourceIndex::from_scenario(&scenario, &policy).unwrap();
        let candidates = boundary_candidates(&finding.report, &policy, &idx, &crash_var).unwrap();
        let trace = reproduce(&scenario, finding).unwrap().trace;
        let roles = assign_roles(
            &finding.report,
            &candidates,
            &crash_var,
            &idx,
            Evidence::Trace(&trace),
        )
        .unwrap();
        // Confirm via the roles that no selectable frame interacts with
        // the unit.
        assert!(roles
            .frames
            .iter()
            .filter(|f| f.has_source && f.trusted)
            .all(|f| f.role == Role::Presence || f.role == Role::Commit));
        let site = select_patch_site(&roles, SiteStrategy::Late).unwrap();
        assert_eq!(site.function, "ap_invoke_handler");
        assert_eq!(site.role, Role::Presence);
        assert!(site.low_confidence);
        assert_eq!(site.unit_local_path.as_deref(), Some("r.headers_in"));
    }

    #[test]
    fn no_source_anywhere_requires_human_review() {
        let (scenario, policy) = fixtures::load("ffmpeg_libavcodec").unwrap();
        let mut scenario = scenario;
        scenario
            .functions
            .get_mut("print_all_libs_info")
            .unwrap()
            .has_source = false;
        let findings = fuzz_interface(&scenario, &policy.interface, 100, 1).unwrap();
        let finding = &findings[0];
        let class = classify(finding, &policy.interface).unwrap();
        let crash_var = CrashVariable::from_finding(finding, &policy.interface, &class).unwrap();
        let idx = SourceIndex::from_scenario(&scenario, &policy).unwrap();
        let candidates = boundary_candidates(&finding.report, &policy, &idx, &crash_var).unwrap();
        let trace = reproduce(&scenario, finding).unwrap().trace;
        let roles = assign_roles(
            &finding.report,
            &candidates,
            &crash_var,
            &idx,
            Evidence::Trace(&trace),
        )
        .unwrap();
        assert!(matches!(
            select_patch_site(&roles, SiteStrategy::Late),
            Err(Error::HumanReviewRequired(_))
        ));
    }
}
