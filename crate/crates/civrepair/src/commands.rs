//! Library-side implementations of the `civrepair` subcommands.
//!
//! Each command returns structured data; the thin binary renders it as
//! text or JSON and maps statuses to exit codes. All artifacts land under
//! the configured output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{
    AwareMockBackend, ChatTransport, HttpTransport, NaiveMockBackend, PatchBackend,
    RemoteBackend, ReplayTransport, API_KEY_ENV, API_URL_ENV,
};
use crate::classifier::{classify, CivClass};
use crate::config::{BackendChoice, RunConfig};
use crate::error::{Error, Result};
use crate::fuzzer::{fuzz_interface, read_finding, write_findings, CivFinding};
use crate::patch::{CandidatePatch, PatchForm};
use crate::policy::{parse_policy, CompartmentPolicy};
use crate::prompt::build_prompt;
use crate::scenario::{load_scenario, Scenario};
use crate::stack::{PatchSite, RoleAssignment};
use crate::validator::{
    build_context, check_placement, repair_loop, validate, RepairOutcome, ValidationVerdict,
    VerdictStatus,
};

/// Resolved scenario + policy pair.
pub struct Inputs {
    pub scenario: Scenario,
    pub policy: CompartmentPolicy,
}

/// Resolve the configured scenario (path or bundled name) and policy.
pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let Some(scenario_ref) = &cfg.scenario else {
        return Err(Error::Config(
            "no scenario configured (use --scenario <path-or-fixture>)".into(),
        ));
    };
    let as_path = Path::new(scenario_ref);
    let (scenario, bundled_policy) = if as_path.exists() {
        let text = std::fs::read_to_string(as_path)?;
        (load_scenario(&text)?, None)
    } else if let Some(fixture) = crate::fixtures::bundled(scenario_ref) {
        (load_scenario(fixture.scenario_json)?, Some(fixture.policy_json))
    } else {
        return Err(Error::Config(format!(
            "scenario `{scenario_ref}` is neither a file nor a bundled fixture ({})",
            crate::fixtures::names().join(", ")
        )));
    };

    let policy = match &cfg.policy {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            parse_policy(&text)?
        }
        None => match bundled_policy {
            Some(text) => parse_policy(text)?,
            None => {
                return Err(Error::Config(
                    "no policy configured and the scenario is not a bundled fixture".into(),
                ))
            }
        },
    };
    Ok(Inputs { scenario, policy })
}

/// Resolve the policy for a finding when no scenario was configured: the
/// finding's scenario name locates the bundled fixture.
fn inputs_for_finding(cfg: &RunConfig, finding: &CivFinding) -> Result<Inputs> {
    if cfg.scenario.is_some() {
        return load_inputs(cfg);
    }
    let mut with_fixture = cfg.clone();
    with_fixture.scenario = Some(finding.scenario_name.clone());
    load_inputs(&with_fixture)
}

enum AnyTransport {
    Http(HttpTransport),
    Replay(ReplayTransport),
}

impl ChatTransport for AnyTransport {
    fn post(&mut self, url: &str, body: &serde_json::Value) -> Result<String> {
        match self {
            AnyTransport::Http(t) => t.post(url, body),
            AnyTransport::Replay(t) => t.post(url, body),
        }
    }
}

/// Instantiate the configured backend.
pub fn make_backend(choice: &BackendChoice) -> Result<Box<dyn PatchBackend>> {
    match choice {
        BackendChoice::AwareMock => Ok(Box::new(AwareMockBackend::new())),
        BackendChoice::NaiveMock { weights, seed } => {
            Ok(Box::new(NaiveMockBackend::new(*weights, *seed)))
        }
        BackendChoice::Remote { url, model, replay } => {
            let url = url
                .clone()
                .or_else(|| std::env::var(API_URL_ENV).ok())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "remote backend needs an endpoint (config `backend.url` or {API_URL_ENV})"
                    ))
                })?;
            let transport = match replay {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    AnyTransport::Replay(ReplayTransport::from_json(&text)?)
                }
                None => {
                    let key = std::env::var(API_KEY_ENV).ok();
                    if key.is_none() {
                        return Err(Error::Config(format!(
                            "remote backend needs a credential in {API_KEY_ENV}"
                        )));
                    }
                    AnyTransport::Http(HttpTransport::new(key))
                }
            };
            Ok(Box::new(RemoteBackend::new(url, model.clone(), transport)))
        }
    }
}

// ---------------------------------------------------------------------------
// fuzz
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct FuzzSummary {
    pub scenario: String,
    pub findings: usize,
    pub dir: PathBuf,
    pub files: Vec<String>,
}

pub fn cmd_fuzz(cfg: &RunConfig) -> Result<FuzzSummary> {
    if cfg.budget == 0 {
        return Err(Error::Config("fuzz budget must be >= 1".into()));
    }
    let inputs = load_inputs(cfg)?;
    let findings = fuzz_interface(&inputs.scenario, &inputs.policy.interface, cfg.budget, cfg.seed)?;
    let dir = cfg.out.join("findings").join(&inputs.scenario.name);
    let paths = write_findings(&dir, &findings)?;
    Ok(FuzzSummary {
        scenario: inputs.scenario.name.clone(),
        findings: findings.len(),
        dir,
        files: paths
            .iter()
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct ClassifySummary {
    pub finding: PathBuf,
    pub class: CivClass,
    pub impact_summary: String,
}

pub fn cmd_classify(cfg: &RunConfig, finding_path: &Path) -> Result<ClassifySummary> {
    let finding = read_finding(finding_path)?;
    let inputs = inputs_for_finding(cfg, &finding)?;
    let class = classify(&finding, &inputs.policy.interface)?;
    let impact_summary = crate::classifier::impact_summary(&class, &inputs.policy);
    Ok(ClassifySummary {
        finding: finding_path.to_path_buf(),
        class,
        impact_summary,
    })
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct AnalyzeSummary {
    pub finding: PathBuf,
    pub roles: RoleAssignment,
    pub site: Option<PatchSite>,
}

pub fn cmd_analyze(cfg: &RunConfig, finding_path: &Path) -> Result<AnalyzeSummary> {
    let finding = read_finding(finding_path)?;
    let inputs = inputs_for_finding(cfg, &finding)?;
    let ctx = build_context(&inputs.scenario, &inputs.policy, finding, cfg.site_strategy)?;
    Ok(AnalyzeSummary {
        finding: finding_path.to_path_buf(),
        roles: ctx.roles,
        site: ctx.site,
    })
}

// ---------------------------------------------------------------------------
// repair
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct RepairSummary {
    pub finding: PathBuf,
    pub outcome: RepairOutcome,
    pub artifacts: PathBuf,
}

pub fn cmd_repair(cfg: &RunConfig, finding_path: &Path) -> Result<RepairSummary> {
    let finding = read_finding(finding_path)?;
    let inputs = inputs_for_finding(cfg, &finding)?;
    let ctx = build_context(
        &inputs.scenario,
        &inputs.policy,
        finding,
        cfg.site_strategy,
    )?;
    let mut backend = make_backend(&cfg.backend)?;
    let outcome = repair_loop(
        ctx,
        &inputs.scenario,
        backend.as_mut(),
        cfg.max_iter,
        cfg.probe_budget,
        cfg.extra_probes,
    )?;

    let stem = finding_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("finding");
    let artifacts = cfg.out.join("repair").join(stem);
    std::fs::create_dir_all(&artifacts)?;
    let mut verdict_json =
        serde_json::to_string_pretty(&outcome).expect("outcome serializes");
    verdict_json.push('\n');
    std::fs::write(artifacts.join("verdict.json"), verdict_json)?;
    if let Some(patch) = &outcome.accepted_patch {
        std::fs::write(artifacts.join("accepted-patch.diff"), patch.body_text())?;
    }
    if let Some(report) = &outcome.human_report {
        std::fs::write(artifacts.join("human-report.txt"), report)?;
    }
    Ok(RepairSummary {
        finding: finding_path.to_path_buf(),
        outcome,
        artifacts,
    })
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct ValidateSummary {
    pub finding: PathBuf,
    pub patch_target: String,
    pub placement: crate::validator::PlacementVerdict,
    pub verdict: ValidationVerdict,
}

/// Read a patch file: either a serialized [`CandidatePatch`] (JSON) or a
/// raw unified diff.
pub fn read_patch_file(path: &Path) -> Result<CandidatePatch> {
    let text = std::fs::read_to_string(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return serde_json::from_str(&text)
            .map_err(|e| Error::parse("patch file", format!("{e}")));
    }
    let target = crate::patch::parse_unified_diff(&text)?.target;
    Ok(CandidatePatch {
        target_function: target,
        form: PatchForm::UnifiedDiff { diff: text },
        backend_id: "file".into(),
        attempt: 1,
    })
}

pub fn cmd_validate(cfg: &RunConfig, finding_path: &Path, patch_path: &Path) -> Result<ValidateSummary> {
    let finding = read_finding(finding_path)?;
    let inputs = inputs_for_finding(cfg, &finding)?;
    let patch = read_patch_file(patch_path)?;
    let ctx = build_context(
        &inputs.scenario,
        &inputs.policy,
        finding.clone(),
        cfg.site_strategy,
    )?;
    let placement = check_placement(&patch, ctx.site.as_ref(), &inputs.policy)?;
    let verdict = if placement.trust_broken {
        ValidationVerdict {
            status: VerdictStatus::RejectedPlacement,
            counterexamples: Vec::new(),
            probes_run: 0,
            diagnostic: Some("patch target is inside the untrusted compartment".into()),
        }
    } else {
        validate(
            &inputs.scenario,
            &patch,
            &finding,
            &ctx.class,
            &inputs.policy.interface,
            cfg.probe_budget,
            cfg.extra_probes,
        )?
    };
    Ok(ValidateSummary {
        finding: finding_path.to_path_buf(),
        patch_target: patch.target_function.clone(),
        placement,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// bench-placement
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: String,
    pub iterations: u32,
    pub placement_ok: u32,
    pub trust_broken: u32,
    pub placement_ok_pct: f64,
    pub trust_broken_pct: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchSummary {
    pub scenario: String,
    pub finding_strategy: String,
    pub rows: Vec<BenchRow>,
}

/// Run patch generation `iterations` times against one canonical finding
/// and tally placement correctness and trust-model violations.
pub fn cmd_bench_placement(cfg: &RunConfig, iterations: u32) -> Result<BenchSummary> {
    if iterations == 0 {
        return Err(Error::Config("bench iterations must be >= 1".into()));
    }
    let inputs = load_inputs(cfg)?;
    let findings = fuzz_interface(&inputs.scenario, &inputs.policy.interface, cfg.budget, cfg.seed)?;
    let finding = findings
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("fuzzing found no CIV to benchmark against".into()))?;
    let strategy = finding.mutation.strategy.to_string();

    let ctx = build_context(
        &inputs.scenario,
        &inputs.policy,
        finding,
        cfg.site_strategy,
    )?;
    let prompt = build_prompt(&ctx);
    let mut backend = make_backend(&cfg.backend)?;

    let mut placement_ok = 0u32;
    let mut trust_broken = 0u32;
    for _ in 0..iterations {
        match backend.generate(&prompt) {
            Err(_) => {}
            Ok(patch) => {
                let verdict = check_placement(&patch, ctx.site.as_ref(), &inputs.policy)?;
                if verdict.placement_ok {
                    placement_ok += 1;
                }
                if verdict.trust_broken {
                    trust_broken += 1;
                }
            }
        }
    }
    let pct = |n: u32| f64::from(n) * 100.0 / f64::from(iterations);
    Ok(BenchSummary {
        scenario: inputs.scenario.name.clone(),
        finding_strategy: strategy,
        rows: vec![BenchRow {
            backend: backend.id().to_string(),
            iterations,
            placement_ok,
            trust_broken,
            placement_ok_pct: pct(placement_ok),
            trust_broken_pct: pct(trust_broken),
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::NaiveWeights;

    fn cfg_with(out: &Path, scenario: &str) -> RunConfig {
        RunConfig {
            scenario: Some(scenario.to_string()),
            out: out.to_path_buf(),
            seed: 7,
            budget: 500,
            ..RunConfig::default()
        }
    }

    #[test]
    fn fuzz_then_repair_apache_with_aware_mock() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), "apache_markdown");
        let summary = cmd_fuzz(&cfg).unwrap();
        assert!(summary.findings >= 1);
        let finding_path = summary.dir.join(&summary.files[0]);

        let repair = cmd_repair(&cfg, &finding_path).unwrap();
        assert_eq!(repair.outcome.status, VerdictStatus::Fixed);
        assert_eq!(repair.outcome.iterations.len(), 1);
        let patch = repair.outcome.accepted_patch.as_ref().unwrap();
        assert_eq!(patch.target_function, "log_table_entry");
        assert!(repair.artifacts.join("verdict.json").exists());
        assert!(repair.artifacts.join("accepted-patch.diff").exists());
    }

    #[test]
    fn repair_with_null_check_only_naive_mock_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg_with(dir.path(), "apache_markdown");
        cfg.backend = BackendChoice::NaiveMock {
            weights: NaiveWeights::default(),
            seed: 5,
        };
        cfg.max_iter = 2;
        let summary = cmd_fuzz(&cfg).unwrap();
        // The first finding is the NULL mutation of the header table.
        let finding_path = summary.dir.join(&summary.files[0]);
        let finding = read_finding(&finding_path).unwrap();
        assert_eq!(
            finding.mutation.strategy,
            crate::mutation::MutationStrategy::PtrNull
        );

        let repair = cmd_repair(&cfg, &finding_path).unwrap();
        assert_ne!(repair.outcome.status, VerdictStatus::Fixed);
        assert_eq!(repair.outcome.iterations.len(), 2);
        assert!(repair.outcome.human_report.is_some());
        assert!(repair.artifacts.join("human-report.txt").exists());
    }

    #[test]
    fn classify_and_analyze_commands() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg_with(dir.path(), "ffmpeg_libavcodec");
        cfg.budget = 100;
        cfg.seed = 1;
        let summary = cmd_fuzz(&cfg).unwrap();
        let finding_path = summary.dir.join(&summary.files[0]);

        let classified = cmd_classify(&cfg, &finding_path).unwrap();
        assert_eq!(
            classified.class.category,
            crate::classifier::CivCategory::Pointer
        );

        let analyzed = cmd_analyze(&cfg, &finding_path).unwrap();
        assert_eq!(
            analyzed.site.as_ref().unwrap().function,
            "print_all_libs_info"
        );
    }

    #[test]
    fn validate_command_distinguishes_partial_from_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), "apache_markdown");
        let summary = cmd_fuzz(&cfg).unwrap();
        let finding_path = summary.dir.join(&summary.files[0]); // ptr-null finding

        let weak = dir.path().join("weak.diff");
        std::fs::write(
            &weak,
            concat!(
                "--- a/log_table_entry\n",
                "+++ b/log_table_entry\n",
                "@@ -1,2 +1,3 @@\n",
                "+guard non_null(r.headers_in) on_fail return\n",
                " call apr_table_get(r.headers_in)\n",
                " return\n",
            ),
        )
        .unwrap();
        let result = cmd_validate(&cfg, &finding_path, &weak).unwrap();
        assert_eq!(result.verdict.status, VerdictStatus::Partial);
        assert!(result.placement.placement_ok);

        let strong = dir.path().join("strong.diff");
        std::fs::write(
            &strong,
            concat!(
                "--- a/log_table_entry\n",
                "+++ b/log_table_entry\n",
                "@@ -1,2 +1,3 @@\n",
                "+guard is_pointer_mapped(r.headers_in, 24) on_fail return\n",
                " call apr_table_get(r.headers_in)\n",
                " return\n",
            ),
        )
        .unwrap();
        let result = cmd_validate(&cfg, &finding_path, &strong).unwrap();
        assert_eq!(result.verdict.status, VerdictStatus::Fixed);
    }

    #[test]
    fn bench_placement_aware_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), "apache_markdown");
        let bench = cmd_bench_placement(&cfg, 10).unwrap();
        let row = &bench.rows[0];
        assert_eq!(row.placement_ok_pct, 100.0);
        assert_eq!(row.trust_broken_pct, 0.0);
    }

    #[test]
    fn bench_placement_naive_tracks_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg_with(dir.path(), "apache_markdown");
        cfg.backend = BackendChoice::NaiveMock {
            weights: NaiveWeights {
                null_check: 0.3,
                sandbox: 0.5,
                correct: 0.2,
            },
            seed: 11,
        };
        let bench = cmd_bench_placement(&cfg, 10).unwrap();
        let row = &bench.rows[0];
        assert_eq!(row.placement_ok_pct, 20.0);
        assert_eq!(row.trust_broken_pct, 50.0);
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let cfg = RunConfig::default();
        assert!(matches!(cmd_fuzz(&cfg), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.scenario = Some("no_such_fixture".into());
        assert!(matches!(cmd_fuzz(&cfg), Err(Error::Config(_))));
    }
}
