//! Repair-prompt construction.
//!
//! The prompt carries everything a patch generator needs to reason about a
//! compartmentalized repair: the trust model and compartment map, the
//! interface description, the CIV classification with its patching unit and
//! oracle guard, the ranked patch sites with crash-stack roles, the crash
//! report and mutation log, source excerpts of candidate functions, and
//! feedback about previously failed patches. Rendering is deterministic:
//! identical contexts produce byte-identical prompts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{impact_summary, CivClass, OracleGuard};
use crate::fuzzer::CivFinding;
use crate::patch::{PATCH_BEGIN, PATCH_END};
use crate::policy::{CompartmentPolicy, IfaceType, ScalarDomain, Trust};
use crate::stack::{FrameRole, PatchSite, RoleAssignment};
use crate::validator::AttemptRecord;

/// Everything the generation stage knows about one repair task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairContext {
    pub policy: CompartmentPolicy,
    pub finding: CivFinding,
    pub class: CivClass,
    pub roles: RoleAssignment,
    /// Preferred patch location; `None` when no trusted-side site exists.
    pub site: Option<PatchSite>,
    /// (symbol, rendered body) for candidate functions with source,
    /// ordered from the crash site outward.
    pub source_excerpts: Vec<(String, String)>,
    /// Prior failed attempts, oldest first.
    pub history: Vec<AttemptRecord>,
}

/// Structured echo of the prompt for deterministic mock backends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptMeta {
    pub entry_function: String,
    pub unit_interface_path: String,
    pub category: String,
    pub preferred_site: Option<PatchSite>,
    /// The class oracle rendered as a guard predicate at the site's local
    /// unit path, when both are known.
    pub oracle_guard: Option<String>,
    pub frames: Vec<FrameRole>,
    pub excerpts: BTreeMap<String, String>,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairPrompt {
    pub sections: Vec<(String, String)>,
    pub meta: PromptMeta,
}

impl RepairPrompt {
    /// The prompt text sent to a backend.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, body) in &self.sections {
            out.push_str(&format!("=== {title} ===\n"));
            out.push_str(body.trim_end_matches('\n'));
            out.push_str("\n\n");
        }
        out
    }
}

/// Render the class oracle as a concrete guard predicate over a local path.
pub fn oracle_predicate(oracle: &OracleGuard, local_path: &str) -> String {
    match oracle {
        OracleGuard::IsPointerMapped { size } => {
            format!("is_pointer_mapped({local_path}, {size})")
        }
        OracleGuard::IsInDomain { domain } => match domain {
            ScalarDomain::Range { min, max } => format!("in_domain({local_path}, {min}..={max})"),
            ScalarDomain::Set { set } => {
                let items: Vec<String> = set.iter().map(|v| v.to_string()).collect();
                format!("in_domain({local_path}, {{{}}})", items.join(", "))
            }
        },
        OracleGuard::VerifyFormat { kind } => format!("verify_format({local_path}, {kind})"),
    }
}

fn describe_iface_type(ty: &IfaceType) -> String {
    match ty {
        IfaceType::Pointer {
            target_kind,
            target_size,
        } => format!("pointer to {target_kind} ({target_size} bytes)"),
        IfaceType::Scalar { domain } => format!("scalar in {domain}"),
        IfaceType::Structured { fields } => {
            let inner: Vec<String> = fields
                .iter()
                .map(|(name, ty)| format!("{name}: {}", describe_iface_type(ty)))
                .collect();
            format!("struct {{ {} }}", inner.join(", "))
        }
        IfaceType::OpaqueHandle { kind } => format!("opaque {kind} handle"),
    }
}

/// Build the repair prompt for a context. Byte-identical output for
/// identical contexts.
pub fn build_prompt(ctx: &RepairContext) -> RepairPrompt {
    let policy = &ctx.policy;
    let finding = &ctx.finding;
    let unit_path = finding.mutation.mutated_path.to_string();

    let mut sections: Vec<(String, String)> = Vec::new();

    // Trust-model preamble.
    let untrusted = policy.untrusted_compartment();
    let goals: Vec<String> = policy.security_goals.iter().map(|g| g.to_string()).collect();
    sections.push((
        "TRUST MODEL".into(),
        format!(
            "Model: {model}. Compartment `{bad}` is untrusted and assumed attacker-controlled; \
             every other compartment is trusted and must be protected from data flowing in \
             from `{bad}`. Fixes must be placed in trusted code: the untrusted compartment \
             cannot be relied on to sanitize its own outputs.\n\
             Security goals of this policy: {goals}.\n\
             Impact assessment: {impact}",
            model = policy.trust_model,
            bad = untrusted.name,
            goals = if goals.is_empty() {
                "(none declared)".to_string()
            } else {
                goals.join(", ")
            },
            impact = impact_summary(&ctx.class, policy),
        ),
    ));

    // Compartment map.
    let mut map = String::new();
    for comp in &policy.compartments {
        map.push_str(&format!(
            "- {} [{}]: code units {}\n",
            comp.name,
            match comp.trust {
                Trust::Trusted => "trusted",
                Trust::Untrusted => "untrusted",
            },
            comp.code_units.join(", ")
        ));
    }
    sections.push(("COMPARTMENT MAP".into(), map));

    // Interface description.
    let mut iface = String::new();
    for func in &policy.interface.functions {
        iface.push_str(&format!(
            "- {}(owner: {})\n",
            func.name, func.owner_compartment
        ));
        for param in &func.params {
            iface.push_str(&format!(
                "    {}: {}\n",
                param.name,
                describe_iface_type(&param.iface_type)
            ));
        }
    }
    sections.push(("INTERFACE".into(), iface));

    // Classification and patching unit.
    let oracle_guard = ctx.site.as_ref().and_then(|site| {
        site.unit_local_path
            .as_ref()
            .map(|p| oracle_predicate(&ctx.class.oracle, p))
    });
    sections.push((
        "CIV CLASSIFICATION".into(),
        format!(
            "Category: {cat}\nBoundary focus: {focus}\nSecurity impact: {impact}\n\
             Patching unit: {unit}\nDetectability (advisory): {detect:?}\n\
             Mutated interface path: {path}\nClass oracle: {oracle}{guard}",
            cat = ctx.class.category,
            focus = ctx.class.boundary_focus.label(),
            impact = ctx.class.impact,
            unit = ctx.class.patching_unit.label(),
            detect = ctx.class.detectability,
            path = unit_path,
            oracle = ctx.class.oracle,
            guard = oracle_guard
                .as_ref()
                .map(|g| format!("\nGuard to insert: {g}"))
                .unwrap_or_default(),
        ),
    ));

    // Ranked patch sites.
    let site_text = match &ctx.site {
        Some(site) => format!(
            "{table}\nPreferred site: `{func}` (role {role}), insert before op {op}{path}.\n\
             Rationale: {why}{low}",
            table = ctx.roles.render_table(),
            func = site.function,
            role = site.role,
            op = site.insert_before_op,
            path = site
                .unit_local_path
                .as_ref()
                .map(|p| format!(", unit reachable as `{p}`"))
                .unwrap_or_default(),
            why = site.justification,
            low = if site.low_confidence {
                " (low confidence)"
            } else {
                ""
            },
        ),
        None => format!(
            "{}\nNo trusted-side patch site is available; human review required.",
            ctx.roles.render_table()
        ),
    };
    sections.push(("PATCH SITES (RANKED)".into(), site_text));

    // Crash report and mutation log.
    sections.push(("CRASH REPORT".into(), finding.report.to_json()));
    sections.push(("MUTATION LOG".into(), finding.mutation.to_line()));

    // Source excerpts.
    let mut excerpts_text = String::new();
    let mut excerpts = BTreeMap::new();
    for (symbol, body) in &ctx.source_excerpts {
        excerpts_text.push_str(&format!("{symbol}:\n"));
        for line in body.lines() {
            excerpts_text.push_str(&format!("    {line}\n"));
        }
        excerpts.insert(symbol.clone(), body.clone());
    }
    sections.push(("SOURCE EXCERPTS".into(), excerpts_text));

    // Prior-failure feedback.
    if !ctx.history.is_empty() {
        let mut feedback = String::new();
        for record in &ctx.history {
            feedback.push_str(&record.feedback_paragraph());
            feedback.push('\n');
        }
        sections.push(("PRIOR ATTEMPTS".into(), feedback));
    }

    // Output contract.
    sections.push((
        "OUTPUT CONTRACT".into(),
        format!(
            "Respond with exactly one unified diff against the preferred patch target, fenced \
             between {PATCH_BEGIN} and {PATCH_END}. Function bodies are listed one operation \
             per line (1-based). The fix must add a single line of the form \
             `guard <predicate> on_fail return` at the insertion point, where <predicate> is \
             one of: is_pointer_mapped(<value>, <size>), in_domain(<value>, <lo>..=<hi>), \
             verify_format(<value>, <kind>), non_null(<value>). Do not remove or rewrite \
             existing lines."
        ),
    ));

    let meta = PromptMeta {
        entry_function: finding.mutation.entry_function.clone(),
        unit_interface_path: unit_path,
        category: ctx.class.category.label().to_string(),
        preferred_site: ctx.site.clone(),
        oracle_guard,
        frames: ctx.roles.frames.clone(),
        excerpts,
        attempt_count: ctx.history.len() as u32,
    };
    RepairPrompt { sections, meta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validator::build_context;

    fn apache_ctx() -> RepairContext {
        let (scenario, policy) = crate::fixtures::load("apache_markdown").unwrap();
        let findings =
            crate::fuzzer::fuzz_interface(&scenario, &policy.interface, 500, 7).unwrap();
        let finding = findings
            .into_iter()
            .find(|f| f.mutation.strategy == crate::mutation::MutationStrategy::PtrUnmapped)
            .unwrap();
        build_context(&scenario, &policy, finding, crate::stack::SiteStrategy::Late).unwrap()
    }

    #[test]
    fn apache_prompt_names_class_unit_and_site() {
        let ctx = apache_ctx();
        let prompt = build_prompt(&ctx);
        let text = prompt.render();
        assert!(text.contains("Category: Structured Payload"), "{text}");
        assert!(text.contains("apr_table_t"), "{text}");
        assert!(text.contains("Preferred site: `log_table_entry`"), "{text}");
        assert!(text.contains("is_pointer_mapped(r.headers_in, 24)"), "{text}");
        assert!(text.contains("=== OUTPUT CONTRACT ==="));
        // No history section on a fresh context.
        assert!(!text.contains("=== PRIOR ATTEMPTS ==="));
    }

    #[test]
    fn identical_contexts_render_identical_bytes() {
        let ctx = apache_ctx();
        let a = build_prompt(&ctx).render();
        let b = build_prompt(&ctx).render();
        assert_eq!(a, b);
    }

    #[test]
    fn section_order_is_stable() {
        let ctx = apache_ctx();
        let prompt = build_prompt(&ctx);
        let titles: Vec<&str> = prompt.sections.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(
            titles,
            vec![
                "TRUST MODEL",
                "COMPARTMENT MAP",
                "INTERFACE",
                "CIV CLASSIFICATION",
                "PATCH SITES (RANKED)",
                "CRASH REPORT",
                "MUTATION LOG",
                "SOURCE EXCERPTS",
                "OUTPUT CONTRACT",
            ]
        );
    }
}
