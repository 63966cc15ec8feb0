//! Patch validation and the generate/validate feedback loop.
//!
//! A candidate patch is screened for placement first: a patch landing
//! inside the untrusted compartment breaks the trust model and is rejected
//! without execution. Surviving patches are applied to a copy of the
//! scenario, the recorded payload is replayed, and the unit is probed with
//! the fixed, class-directed mutation family to detect partial fixes: a
//! patch that stops the recorded payload but not its siblings (a NULL check
//! that still admits an unmapped non-NULL pointer, a lower bound that still
//! admits an oversized index) comes back `partial` with full counterexample
//! payloads. The repair loop feeds failures back into the prompt and stops
//! at `fixed` or after a bounded number of iterations, emitting a report
//! for a human developer when automation falls short.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::PatchBackend;
use crate::classifier::{classify, CivClass};
use crate::error::{Error, Result};
use crate::fuzzer::{reproduce, CivFinding};
use crate::mutation::MutationStrategy;
use crate::patch::CandidatePatch;
use crate::policy::{CompartmentPolicy, ScalarDomain, Trust};
use crate::prompt::{build_prompt, RepairContext};
use crate::report::CrashKind;
use crate::scenario::{apply_guard_patch, MemoryMap, Payload, Provenance, Scenario};
use crate::source_index::SourceIndex;
use crate::stack::{
    assign_roles, boundary_candidates, select_patch_site, CrashVariable, Evidence, SiteStrategy,
};
use crate::value::Value;

/// Whether a patch landed where the policy wants it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementVerdict {
    /// Target equals the policy-preferred patch site.
    pub placement_ok: bool,
    /// Target sits inside the untrusted compartment; such a patch is
    /// rejected before any execution.
    pub trust_broken: bool,
}

/// Check a candidate patch's placement against the selected site and the
/// policy's compartment attribution.
pub fn check_placement(
    patch: &CandidatePatch,
    site: Option<&crate::stack::PatchSite>,
    policy: &CompartmentPolicy,
) -> Result<PlacementVerdict> {
    let attribution = policy.attribute(&patch.target_function)?;
    Ok(PlacementVerdict {
        placement_ok: site.map(|s| s.function == patch.target_function).unwrap_or(false),
        trust_broken: attribution.trust == Trust::Untrusted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictStatus {
    Fixed,
    Partial,
    NotFixed,
    RejectedPlacement,
}

impl VerdictStatus {
    /// Process exit code contract: 0 fixed, 2 partial/not fixed,
    /// 3 rejected placement.
    pub fn exit_code(&self) -> i32 {
        match self {
            VerdictStatus::Fixed => 0,
            VerdictStatus::Partial | VerdictStatus::NotFixed => 2,
            VerdictStatus::RejectedPlacement => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            VerdictStatus::Fixed => "fixed",
            VerdictStatus::Partial => "partial",
            VerdictStatus::NotFixed => "not-fixed",
            VerdictStatus::RejectedPlacement => "rejected-placement",
        }
    }
}

impl std::fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A payload that still crashes the patched scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    /// Probe label, e.g. `probe-ptr-unmapped`, or `recorded-payload`.
    pub label: String,
    /// The value injected at the unit path.
    pub value: Value,
    pub kind: CrashKind,
    pub stack: Vec<String>,
    /// Full payload for replay.
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub status: VerdictStatus,
    pub counterexamples: Vec<Counterexample>,
    pub probes_run: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl ValidationVerdict {
    fn not_fixed(diagnostic: impl Into<String>) -> Self {
        ValidationVerdict {
            status: VerdictStatus::NotFixed,
            counterexamples: Vec::new(),
            probes_run: 0,
            diagnostic: Some(diagnostic.into()),
        }
    }
}

/// The fixed probe family for a classified unit. The class oracle already
/// carries the hybrid resolution (structured payloads resolve to their
/// mutated subfield's check), so dispatch follows it. Probes are
/// deterministic so partial-fix detection is reproducible and explainable;
/// labels name the variant being tried.
pub fn probe_family(
    oracle: &crate::classifier::OracleGuard,
    original: &Value,
    memory: &MemoryMap,
) -> Vec<(String, Value)> {
    use crate::classifier::OracleGuard;
    let mut probes: Vec<(String, Value)> = Vec::new();
    match oracle {
        OracleGuard::IsPointerMapped { .. } => {
            probes.push(("probe-ptr-null".into(), Value::Ptr(0)));
            probes.push((
                "probe-ptr-unmapped".into(),
                Value::Ptr(memory.unmapped_probe_address()),
            ));
            let misaligned = match original {
                Value::Ptr(0) | Value::Ptr(1) => 1,
                Value::Ptr(a) => a | 1,
                _ => 1,
            };
            probes.push(("probe-ptr-misaligned".into(), Value::Ptr(misaligned)));
            let truncated = match original {
                Value::Ptr(a) => memory
                    .region_containing(*a)
                    .map(|r| r.end().saturating_sub(1))
                    .unwrap_or_else(|| memory.unmapped_probe_address()),
                _ => memory.unmapped_probe_address(),
            };
            probes.push(("probe-ptr-truncated".into(), Value::Ptr(truncated)));
        }
        OracleGuard::IsInDomain { domain } => {
            probes.push(("probe-scalar-negative".into(), Value::Int(-1)));
            let (min, max) = match domain {
                ScalarDomain::Range { min, max } => (*min, *max),
                ScalarDomain::Set { set } => (
                    set.iter().next().copied().unwrap_or(0),
                    set.iter().next_back().copied().unwrap_or(0),
                ),
            };
            if let Some(below) = min.checked_sub(1) {
                probes.push(("probe-scalar-below-lower".into(), Value::Int(below)));
            }
            if let Some(above) = max.checked_add(1) {
                probes.push(("probe-scalar-above-upper".into(), Value::Int(above)));
            }
            probes.push(("probe-scalar-extreme-min".into(), Value::Int(i64::MIN)));
            probes.push(("probe-scalar-extreme-max".into(), Value::Int(i64::MAX)));
        }
        OracleGuard::VerifyFormat { kind } => {
            let (orig_kind, orig_id) = match original {
                Value::Handle { kind, id } => (kind.clone(), *id),
                _ => (kind.clone(), 1),
            };
            probes.push((
                "probe-handle-format-corrupt".into(),
                Value::Handle {
                    kind: orig_kind.clone(),
                    id: orig_id | 0xDEAD_0000_0000_0000,
                },
            ));
            probes.push((
                "probe-handle-stale".into(),
                Value::Handle {
                    kind: orig_kind.clone(),
                    id: ((orig_id + 7919) & 0xFFFF_FFFF).max(1),
                },
            ));
            probes.push((
                "probe-handle-wrong-kind".into(),
                Value::Handle {
                    kind: "unknown-kind".into(),
                    id: orig_id,
                },
            ));
        }
    }
    // Identical values under different labels add nothing.
    let mut seen: Vec<Value> = Vec::new();
    probes.retain(|(_, v)| {
        if seen.contains(v) {
            false
        } else {
            seen.push(v.clone());
            true
        }
    });
    probes
}

/// Apply a candidate patch and probe it.
///
/// `probe_budget` caps the number of probe executions; `extra_probes` adds
/// that many seeded random strategy applications on top of the fixed
/// family.
pub fn validate(
    scenario: &Scenario,
    patch: &CandidatePatch,
    finding: &CivFinding,
    class: &CivClass,
    spec: &crate::policy::InterfaceSpec,
    probe_budget: u64,
    extra_probes: u64,
) -> Result<ValidationVerdict> {
    // Lower and apply; failures are a verdict, not an error.
    let guard = match patch.to_guard_patch(scenario) {
        Ok(g) => g,
        Err(e) => return Ok(ValidationVerdict::not_fixed(format!("patch does not apply: {e}"))),
    };
    let patched = match apply_guard_patch(scenario, &guard) {
        Ok(s) => s,
        Err(e) => return Ok(ValidationVerdict::not_fixed(format!("patch does not apply: {e}"))),
    };

    let unit_path = &finding.mutation.mutated_path;
    let leaf = spec.resolve_path(&finding.mutation.entry_function, unit_path)?;

    // Replay the recorded payload first.
    let replay = reproduce(&patched, finding)?;
    if let Some(info) = replay.crash() {
        return Ok(ValidationVerdict {
            status: VerdictStatus::NotFixed,
            counterexamples: vec![Counterexample {
                label: "recorded-payload".into(),
                value: finding.payload.get(unit_path)?.clone(),
                kind: info.kind,
                stack: info.stack.clone(),
                payload: finding.payload.clone(),
            }],
            probes_run: 0,
            diagnostic: None,
        });
    }

    // Class-directed probes on the unit.
    let original = scenario.payload_template.get(unit_path)?.clone();
    let mut probes = probe_family(&class.oracle, &original, &scenario.memory);
    for i in 0..extra_probes {
        let strategies = MutationStrategy::for_leaf(leaf);
        if strategies.is_empty() {
            break;
        }
        let strategy = strategies[(i % strategies.len() as u64) as usize];
        let mut rng = extra_probe_rng(finding.seed, finding.index, i);
        if let Ok(p) = crate::fuzzer::mutate(
            &finding.payload,
            strategy,
            unit_path,
            leaf,
            &scenario.memory,
            &mut rng,
            Provenance::Mutated {
                seed: finding.seed,
                index: finding.index,
            },
        ) {
            probes.push((format!("probe-extra-{i}-{strategy}"), p.get(unit_path)?.clone()));
        }
    }

    let mut counterexamples = Vec::new();
    let mut probes_run = 0u64;
    for (label, value) in probes.into_iter().take(probe_budget as usize) {
        let payload = finding.payload.with_value(
            unit_path,
            value.clone(),
            Provenance::Mutated {
                seed: finding.seed,
                index: finding.index,
            },
        )?;
        let outcome = crate::exec::execute_default(&patched, &payload)?;
        probes_run += 1;
        if let Some(info) = outcome.crash() {
            counterexamples.push(Counterexample {
                label,
                value,
                kind: info.kind,
                stack: info.stack.clone(),
                payload,
            });
        }
    }

    Ok(ValidationVerdict {
        status: if counterexamples.is_empty() {
            VerdictStatus::Fixed
        } else {
            VerdictStatus::Partial
        },
        counterexamples,
        probes_run,
        diagnostic: None,
    })
}

fn extra_probe_rng(seed: u64, index: u64, probe: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&probe.to_le_bytes());
    key[24] = 0x9e;
    ChaCha8Rng::from_seed(key)
}

/// One iteration of the repair loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    /// `None` when the backend produced nothing usable.
    pub patch: Option<CandidatePatch>,
    pub placement: Option<PlacementVerdict>,
    pub verdict: ValidationVerdict,
}

impl AttemptRecord {
    /// Feedback paragraph for the next prompt iteration.
    pub fn feedback_paragraph(&self) -> String {
        let Some(patch) = &self.patch else {
            return format!(
                "Attempt {} produced no usable patch: {}.",
                self.attempt,
                self.verdict
                    .diagnostic
                    .as_deref()
                    .unwrap_or("generation failure")
            );
        };
        match self.verdict.status {
            VerdictStatus::RejectedPlacement => format!(
                "Attempt {} placed the patch at `{}`, inside the untrusted compartment; it was \
                 rejected without execution. The fix must live in trusted code.",
                self.attempt, patch.target_function
            ),
            VerdictStatus::Partial => {
                let ce = self
                    .verdict
                    .counterexamples
                    .iter()
                    .map(|c| format!("{} = {} (crashes at `{}`)", c.label, c.value, c.stack[0]))
                    .collect::<Vec<_>>()
                    .join("; ");
                format!(
                    "Previous patch (attempt {} at `{}`) was partial: it stops the recorded \
                     payload but not every variant. Counterexample: {ce}. Strengthen the check \
                     to cover these values.",
                    self.attempt, patch.target_function
                )
            }
            VerdictStatus::NotFixed => format!(
                "Previous patch (attempt {} at `{}`) did not stop the recorded payload{}",
                self.attempt,
                patch.target_function,
                self.verdict
                    .diagnostic
                    .as_ref()
                    .map(|d| format!(" ({d})"))
                    .unwrap_or_else(|| ".".into())
            ),
            VerdictStatus::Fixed => format!(
                "Attempt {} at `{}` fixed the CIV.",
                self.attempt, patch.target_function
            ),
        }
    }
}

/// Final result of a repair run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub status: VerdictStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_patch: Option<CandidatePatch>,
    pub iterations: Vec<AttemptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_report: Option<String>,
}

/// Assemble a repair context for a finding: classify, derive the crash
/// variable, compute candidates and roles from a reproduction trace, and
/// select the patch site.
pub fn build_context(
    scenario: &Scenario,
    policy: &CompartmentPolicy,
    finding: CivFinding,
    strategy: SiteStrategy,
) -> Result<RepairContext> {
    let class = classify(&finding, &policy.interface)?;
    let crash_var = CrashVariable::from_finding(&finding, &policy.interface, &class)?;
    let idx = SourceIndex::from_scenario(scenario, policy)?;

    let (roles, site) = match boundary_candidates(&finding.report, policy, &idx, &crash_var) {
        Ok(candidates) => {
            let trace = reproduce(scenario, &finding)?.trace;
            let roles = assign_roles(
                &finding.report,
                &candidates,
                &crash_var,
                &idx,
                Evidence::Trace(&trace),
            )?;
            let site = match select_patch_site(&roles, strategy) {
                Ok(site) => Some(site),
                Err(Error::HumanReviewRequired(_)) => None,
                Err(e) => return Err(e),
            };
            (roles, site)
        }
        Err(Error::NoTrustedCandidate(_)) => (
            crate::stack::RoleAssignment {
                frames: Vec::new(),
                candidates: Vec::new(),
                boundary: None,
                warnings: vec!["no trusted frame carries the crash variable".into()],
            },
            None,
        ),
        Err(e) => return Err(e),
    };

    // Excerpts: crash site first when it has source, then candidates.
    let mut source_excerpts = Vec::new();
    for frame in &roles.frames {
        if frame.role == crate::stack::Role::Commit {
            continue;
        }
        if let Some(body) = idx.body(&frame.symbol) {
            source_excerpts.push((frame.symbol.clone(), body.to_string()));
        }
    }

    Ok(RepairContext {
        policy: policy.clone(),
        finding,
        class,
        roles,
        site,
        source_excerpts,
        history: Vec::new(),
    })
}

/// Generate -> check placement -> validate, feeding failures back into the
/// prompt, until the CIV is fixed or `max_iter` is exhausted.
pub fn repair_loop(
    mut ctx: RepairContext,
    scenario: &Scenario,
    backend: &mut dyn PatchBackend,
    max_iter: u32,
    probe_budget: u64,
    extra_probes: u64,
) -> Result<RepairOutcome> {
    if max_iter == 0 {
        return Err(Error::Precondition("max_iter must be >= 1".into()));
    }
    if ctx.site.is_none() {
        let mut outcome = RepairOutcome {
            status: VerdictStatus::NotFixed,
            accepted_patch: None,
            iterations: Vec::new(),
            human_report: None,
        };
        outcome.human_report = Some(emit_human_report(&ctx, &outcome)?);
        return Ok(outcome);
    }

    let mut iterations: Vec<AttemptRecord> = Vec::new();
    for attempt in 1..=max_iter {
        let prompt = build_prompt(&ctx);
        let record = match backend.generate(&prompt) {
            Err(e) => AttemptRecord {
                attempt,
                patch: None,
                placement: None,
                verdict: ValidationVerdict::not_fixed(e.to_string()),
            },
            Ok(patch) => {
                let placement = check_placement(&patch, ctx.site.as_ref(), &ctx.policy)?;
                if placement.trust_broken {
                    AttemptRecord {
                        attempt,
                        patch: Some(patch),
                        placement: Some(placement),
                        verdict: ValidationVerdict {
                            status: VerdictStatus::RejectedPlacement,
                            counterexamples: Vec::new(),
                            probes_run: 0,
                            diagnostic: Some(
                                "patch target is inside the untrusted compartment".into(),
                            ),
                        },
                    }
                } else {
                    let verdict = validate(
                        scenario,
                        &patch,
                        &ctx.finding,
                        &ctx.class,
                        &ctx.policy.interface,
                        probe_budget,
                        extra_probes,
                    )?;
                    AttemptRecord {
                        attempt,
                        patch: Some(patch),
                        placement: Some(placement),
                        verdict,
                    }
                }
            }
        };

        let fixed = record.verdict.status == VerdictStatus::Fixed;
        iterations.push(record.clone());
        ctx.history.push(record);

        if fixed {
            let accepted = iterations.last().and_then(|r| r.patch.clone());
            return Ok(RepairOutcome {
                status: VerdictStatus::Fixed,
                accepted_patch: accepted,
                iterations,
                human_report: None,
            });
        }
    }

    let status = iterations
        .last()
        .map(|r| r.verdict.status)
        .unwrap_or(VerdictStatus::NotFixed);
    let mut outcome = RepairOutcome {
        status,
        accepted_patch: None,
        iterations,
        human_report: None,
    };
    outcome.human_report = Some(emit_human_report(&ctx, &outcome)?);
    Ok(outcome)
}

/// Render the report that guides a human developer when automation could
/// not fully fix the CIV.
pub fn emit_human_report(ctx: &RepairContext, outcome: &RepairOutcome) -> Result<String> {
    if outcome.status == VerdictStatus::Fixed {
        return Err(Error::Precondition(
            "human report requested for a fixed outcome".into(),
        ));
    }
    let finding = &ctx.finding;
    let mut out = String::new();
    out.push_str("CIV REPAIR REPORT: human review required\n");
    out.push_str("========================================\n\n");
    out.push_str(&format!(
        "Finding: scenario `{}`, seed {}, index {} (strategy {} at `{}`)\n",
        finding.scenario_name,
        finding.seed,
        finding.index,
        finding.mutation.strategy,
        finding.mutation.mutated_path
    ));
    out.push_str(&format!(
        "Classification: {} CIV; patching unit: {} (`{}`)\n",
        ctx.class.category,
        ctx.class.patching_unit.label(),
        finding.mutation.mutated_path
    ));
    out.push_str(&format!("Impact: {}\n", ctx.class.impact));
    out.push_str(&format!("Class oracle: {}\n\n", ctx.class.oracle));

    out.push_str("Crash-stack roles:\n");
    if ctx.roles.frames.is_empty() {
        out.push_str("  (no trusted frame carries the crash variable)\n");
    } else {
        out.push_str(&ctx.roles.render_table());
    }
    out.push('\n');

    match &ctx.site {
        Some(site) => out.push_str(&format!(
            "Preferred patch site: `{}` ({})\n\n",
            site.function, site.justification
        )),
        None => out.push_str(
            "No trusted-side patch site: every candidate lacks modifiable source or no \
             trusted frame carries the unit.\n\n",
        ),
    }

    if outcome.iterations.is_empty() {
        out.push_str("Attempts: none — no patch generated.\n");
    } else {
        out.push_str("Attempts:\n");
        for record in &outcome.iterations {
            match &record.patch {
                None => out.push_str(&format!(
                    "  {}. no usable patch ({})\n",
                    record.attempt,
                    record
                        .verdict
                        .diagnostic
                        .as_deref()
                        .unwrap_or("generation failure")
                )),
                Some(patch) => {
                    out.push_str(&format!(
                        "  {}. [{}] patch at `{}` -> {}\n",
                        record.attempt,
                        patch.backend_id,
                        patch.target_function,
                        record.verdict.status
                    ));
                    for line in patch.body_text().lines() {
                        out.push_str(&format!("       | {line}\n"));
                    }
                    for ce in &record.verdict.counterexamples {
                        out.push_str(&format!(
                            "       counterexample {}: {} -> {} at `{}`\n",
                            ce.label, ce.value, ce.kind, ce.stack[0]
                        ));
                    }
                }
            }
        }
    }

    // Probe families the last executed patch still fails on.
    let remaining: Vec<&str> = outcome
        .iterations
        .iter()
        .rev()
        .find(|r| !r.verdict.counterexamples.is_empty())
        .map(|r| {
            r.verdict
                .counterexamples
                .iter()
                .map(|c| c.label.as_str())
                .collect()
        })
        .unwrap_or_default();
    if !remaining.is_empty() {
        out.push_str(&format!(
            "\nUnguarded probe families still crashing: {}\n",
            remaining.join(", ")
        ));
    }

    out.push_str(
        "\nNote: the guards tried here check reference legality, domain membership, or \
         handle format only. A pointer that is mapped but refers to a corrupted structure \
         passes every such check; validating the integrity of the referenced object itself \
         is beyond these guard families and needs human judgment.\n",
    );
    Ok(out)
}
