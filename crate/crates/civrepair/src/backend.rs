//! Patch generation backends.
//!
//! Three interchangeable generators sit behind [`PatchBackend`]:
//!
//! - [`AwareMockBackend`]: deterministic rule-based generation that follows
//!   the prompt's analysis — it inserts the class oracle guard at the
//!   preferred patch site. Stands in for an LLM driven by the full
//!   compartmentalization-aware prompt.
//! - [`NaiveMockBackend`]: emulates baseline prompting without compartment
//!   context. A seeded schedule draws among weak-check patches at arbitrary
//!   stack frames, patches inside the sandbox, and correct patches, with
//!   configurable weights, so placement experiments are reproducible.
//! - [`RemoteBackend`]: a chat-completions client; the response must carry
//!   a unified diff fenced between the patch sentinels. Transports are
//!   pluggable, and a replay transport serves canned responses keyed by
//!   request hash so no test needs the network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch::{extract_fenced_diff, parse_unified_diff, CandidatePatch, PatchForm};
use crate::prompt::RepairPrompt;
use crate::scenario::{GuardPatch, OnFail, Predicate};
use crate::stack::Role;

/// Environment variable holding the remote backend credential.
pub const API_KEY_ENV: &str = "CIVREPAIR_API_KEY";
/// Environment variable overriding the remote backend endpoint.
pub const API_URL_ENV: &str = "CIVREPAIR_API_URL";

pub trait PatchBackend {
    fn id(&self) -> &str;
    fn generate(&mut self, prompt: &RepairPrompt) -> Result<CandidatePatch>;
}

/// Obtain one candidate patch from a backend.
pub fn generate_patch(
    backend: &mut dyn PatchBackend,
    prompt: &RepairPrompt,
) -> Result<CandidatePatch> {
    backend.generate(prompt)
}

/// Render a unified diff for a guard insertion given the target's body
/// text (one op per line). Mirrors the scenario-side diff mapping without
/// needing the scenario itself.
fn diff_from_body(target: &str, body: &str, insert_before: usize, guard_line: &str) -> String {
    let lines: Vec<&str> = body.lines().collect();
    let mut out = String::new();
    out.push_str(&format!("--- a/{target}\n"));
    out.push_str(&format!("+++ b/{target}\n"));
    out.push_str(&format!("@@ -1,{} +1,{} @@\n", lines.len(), lines.len() + 1));
    for (i, line) in lines.iter().enumerate() {
        if i == insert_before {
            out.push_str(&format!("+{guard_line}\n"));
        }
        out.push_str(&format!(" {line}\n"));
    }
    if insert_before >= lines.len() {
        out.push_str(&format!("+{guard_line}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Aware mock
// ---------------------------------------------------------------------------

/// Deterministic generator that applies the prompt's own analysis: the
/// class oracle guard, at the preferred site, before the first op that
/// touches the unit.
#[derive(Debug, Default)]
pub struct AwareMockBackend {
    attempt: u32,
}

impl AwareMockBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl PatchBackend for AwareMockBackend {
    fn id(&self) -> &str {
        "aware-mock"
    }

    fn generate(&mut self, prompt: &RepairPrompt) -> Result<CandidatePatch> {
        self.attempt += 1;
        let site = prompt.meta.preferred_site.as_ref().ok_or_else(|| Error::Backend {
            backend: self.id().into(),
            detail: "prompt names no patch site".into(),
        })?;
        let pred_text = prompt.meta.oracle_guard.as_ref().ok_or_else(|| Error::Backend {
            backend: self.id().into(),
            detail: "prompt carries no oracle guard".into(),
        })?;
        let guard_line = format!("guard {pred_text} on_fail return");

        let form = match prompt.meta.excerpts.get(&site.function) {
            Some(body) => PatchForm::UnifiedDiff {
                diff: diff_from_body(&site.function, body, site.insert_before_op, &guard_line),
            },
            None => PatchForm::GuardInsertion {
                guard: GuardPatch {
                    target_function: site.function.clone(),
                    insert_before_op_index: site.insert_before_op,
                    predicate: Predicate::parse(pred_text).map_err(|e| Error::Backend {
                        backend: self.id().into(),
                        detail: format!("oracle guard does not parse: {e}"),
                    })?,
                    on_fail: OnFail::Return,
                },
            },
        };
        Ok(CandidatePatch {
            target_function: site.function.clone(),
            form,
            backend_id: self.id().into(),
            attempt: self.attempt,
        })
    }
}

// ---------------------------------------------------------------------------
// Naive mock
// ---------------------------------------------------------------------------

/// Relative frequencies of the naive generator's behaviors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveWeights {
    /// Weak check (NULL test or lower bound only) at an arbitrary frame.
    pub null_check: f64,
    /// Patch placed inside the untrusted compartment.
    pub sandbox: f64,
    /// The correct patch at the preferred site.
    pub correct: f64,
}

impl Default for NaiveWeights {
    fn default() -> Self {
        NaiveWeights {
            null_check: 1.0,
            sandbox: 0.0,
            correct: 0.0,
        }
    }
}

impl NaiveWeights {
    pub fn parse(text: &str) -> Result<NaiveWeights> {
        let mut w = NaiveWeights {
            null_check: 0.0,
            sandbox: 0.0,
            correct: 0.0,
        };
        for item in text.split(',') {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("weights must be key=value pairs, got `{item}`"))
            })?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad weight `{item}`: {e}")))?;
            match key.trim() {
                "null-check" | "null_check" => w.null_check = value,
                "sandbox" => w.sandbox = value,
                "correct" => w.correct = value,
                other => return Err(Error::Config(format!("unknown weight `{other}`"))),
            }
        }
        if w.null_check + w.sandbox + w.correct <= 0.0 {
            return Err(Error::Config("weights sum to zero".into()));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NaiveDraw {
    NullCheck,
    Sandbox,
    Correct,
}

/// Baseline emulation: seeded, quota-scheduled draws whose realized
/// frequencies track the configured weights exactly over any run length.
#[derive(Debug)]
pub struct NaiveMockBackend {
    weights: NaiveWeights,
    rng: ChaCha8Rng,
    counts: [u64; 3],
    drawn: u64,
    attempt: u32,
}

impl NaiveMockBackend {
    pub fn new(weights: NaiveWeights, seed: u64) -> Self {
        NaiveMockBackend {
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counts: [0; 3],
            drawn: 0,
            attempt: 0,
        }
    }

    /// Largest-remainder draw: pick the category whose realized count lags
    /// its quota the most. Deterministic, exact over any prefix.
    fn next_draw(&mut self) -> NaiveDraw {
        let raw = [
            self.weights.null_check.max(0.0),
            self.weights.sandbox.max(0.0),
            self.weights.correct.max(0.0),
        ];
        let total: f64 = raw.iter().sum();
        let n = (self.drawn + 1) as f64;
        let mut best = 0usize;
        let mut best_score = f64::MIN;
        for (i, w) in raw.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            let score = w / total * n - self.counts[i] as f64;
            if score > best_score + 1e-9 {
                best = i;
                best_score = score;
            }
        }
        self.counts[best] += 1;
        self.drawn += 1;
        match best {
            0 => NaiveDraw::NullCheck,
            1 => NaiveDraw::Sandbox,
            _ => NaiveDraw::Correct,
        }
    }

    /// The weak form of the prompt's oracle guard: NULL test for pointer
    /// checks, lower bound only for domain checks.
    fn weak_predicate(oracle_guard: &str, path: &str) -> String {
        if oracle_guard.starts_with("in_domain") {
            let lo = oracle_guard
                .split_once(", ")
                .and_then(|(_, spec)| spec.split("..").next().map(str::trim))
                .filter(|lo| lo.parse::<i64>().is_ok())
                .unwrap_or("0");
            format!("in_domain({path}, {lo}..)")
        } else {
            format!("non_null({path})")
        }
    }
}

impl PatchBackend for NaiveMockBackend {
    fn id(&self) -> &str {
        "naive-mock"
    }

    fn generate(&mut self, prompt: &RepairPrompt) -> Result<CandidatePatch> {
        self.attempt += 1;
        let draw = self.next_draw();
        let meta = &prompt.meta;

        let (target, insert_before, guard_line) = match draw {
            NaiveDraw::Correct => {
                let site = meta.preferred_site.as_ref().ok_or_else(|| Error::Backend {
                    backend: self.id().into(),
                    detail: "prompt names no patch site".into(),
                })?;
                let pred = meta.oracle_guard.clone().ok_or_else(|| Error::Backend {
                    backend: self.id().into(),
                    detail: "prompt carries no oracle guard".into(),
                })?;
                (
                    site.function.clone(),
                    site.insert_before_op,
                    format!("guard {pred} on_fail return"),
                )
            }
            NaiveDraw::Sandbox => {
                // Validation moved into the compromised compartment: the
                // classic trust-model violation.
                let path = &meta.unit_interface_path;
                (
                    meta.entry_function.clone(),
                    0,
                    format!("guard non_null({path}) on_fail return"),
                )
            }
            NaiveDraw::NullCheck => {
                let preferred = meta
                    .preferred_site
                    .as_ref()
                    .map(|s| s.function.clone())
                    .unwrap_or_default();
                let options: Vec<_> = meta
                    .frames
                    .iter()
                    .filter(|f| {
                        f.trusted
                            && f.has_source
                            && f.role != Role::Commit
                            && f.symbol != preferred
                    })
                    .collect();
                if options.is_empty() {
                    return Err(Error::Backend {
                        backend: self.id().into(),
                        detail: "no frame available for a misplaced check".into(),
                    });
                }
                let frame = options[self.rng.gen_range(0..options.len())];
                let path = frame
                    .unit_scope_path
                    .clone()
                    .or_else(|| frame.first_interaction.as_ref().map(|s| s.local_path.clone()))
                    .unwrap_or_else(|| meta.unit_interface_path.clone());
                let oracle = meta.oracle_guard.as_deref().unwrap_or("non_null(_)");
                (
                    frame.symbol.clone(),
                    0,
                    format!("guard {} on_fail return", Self::weak_predicate(oracle, &path)),
                )
            }
        };

        let form = match meta.excerpts.get(&target) {
            Some(body) => PatchForm::UnifiedDiff {
                diff: diff_from_body(&target, body, insert_before, &guard_line),
            },
            None => {
                let pred_text = guard_line
                    .trim_start_matches("guard ")
                    .trim_end_matches(" on_fail return");
                PatchForm::GuardInsertion {
                    guard: GuardPatch {
                        target_function: target.clone(),
                        insert_before_op_index: insert_before,
                        predicate: Predicate::parse(pred_text).map_err(|e| Error::Backend {
                            backend: self.id().into(),
                            detail: format!("generated guard does not parse: {e}"),
                        })?,
                        on_fail: OnFail::Return,
                    },
                }
            }
        };
        Ok(CandidatePatch {
            target_function: target,
            form,
            backend_id: self.id().into(),
            attempt: self.attempt,
        })
    }
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

/// Transport for chat-completions requests.
pub trait ChatTransport {
    fn post(&mut self, url: &str, body: &serde_json::Value) -> Result<String>;
}

/// Live HTTP transport. The credential travels only in the request header.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(api_key: Option<String>) -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::new(),
            api_key,
        }
    }
}

impl ChatTransport for HttpTransport {
    fn post(&mut self, url: &str, body: &serde_json::Value) -> Result<String> {
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Error::Backend {
            backend: "remote".into(),
            detail: format!("transport failure: {e}"),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| Error::Backend {
            backend: "remote".into(),
            detail: format!("failed reading response: {e}"),
        })?;
        if !status.is_success() {
            return Err(Error::Backend {
                backend: "remote".into(),
                detail: format!("HTTP {status}: {text}"),
            });
        }
        Ok(text)
    }
}

/// Canned transport: responses keyed by the SHA-256 of the request body.
/// Record once, replay forever; the test suite never touches the network.
pub struct ReplayTransport {
    exchanges: BTreeMap<String, String>,
}

impl ReplayTransport {
    pub fn from_json(text: &str) -> Result<ReplayTransport> {
        let exchanges: BTreeMap<String, String> = serde_json::from_str(text)
            .map_err(|e| Error::parse("replay fixture", format!("{e}")))?;
        Ok(ReplayTransport { exchanges })
    }

    /// Build a fixture entry for a request body.
    pub fn request_hash(body: &serde_json::Value) -> String {
        let canonical = serde_json::to_string(body).expect("request serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ChatTransport for ReplayTransport {
    fn post(&mut self, _url: &str, body: &serde_json::Value) -> Result<String> {
        let hash = Self::request_hash(body);
        self.exchanges.get(&hash).cloned().ok_or_else(|| Error::Backend {
            backend: "remote".into(),
            detail: format!("no recorded response for request {hash}"),
        })
    }
}

/// Chat-completions backend: POSTs `{model, messages}` and extracts the
/// fenced diff from the assistant's reply.
pub struct RemoteBackend<T: ChatTransport> {
    url: String,
    model: String,
    transport: T,
    attempt: u32,
}

impl<T: ChatTransport> RemoteBackend<T> {
    pub fn new(url: impl Into<String>, model: impl Into<String>, transport: T) -> Self {
        RemoteBackend {
            url: url.into(),
            model: model.into(),
            transport,
            attempt: 0,
        }
    }

    /// The request body for a prompt, exposed for fixture recording.
    pub fn request_body(&self, prompt: &RepairPrompt) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "user", "content": prompt.render()}
            ]
        })
    }
}

impl<T: ChatTransport> PatchBackend for RemoteBackend<T> {
    fn id(&self) -> &str {
        "remote"
    }

    fn generate(&mut self, prompt: &RepairPrompt) -> Result<CandidatePatch> {
        self.attempt += 1;
        let body = self.request_body(prompt);
        let response = self.transport.post(&self.url, &body)?;

        let parsed: serde_json::Value = serde_json::from_str(&response).map_err(|e| {
            Error::Backend {
                backend: self.id().into(),
                detail: format!("response is not JSON: {e}"),
            }
        })?;
        let content = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Backend {
                backend: self.id().into(),
                detail: "response has no choices[0].message.content".into(),
            })?;
        let diff = extract_fenced_diff(content).map_err(|e| Error::Backend {
            backend: self.id().into(),
            detail: format!("no usable patch in response: {e}"),
        })?;
        let target = parse_unified_diff(&diff)
            .map_err(|e| Error::Backend {
                backend: self.id().into(),
                detail: format!("fenced diff does not parse: {e}"),
            })?
            .target;
        Ok(CandidatePatch {
            target_function: target,
            form: PatchForm::UnifiedDiff { diff },
            backend_id: self.id().into(),
            attempt: self.attempt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mutation::MutationStrategy;
    use crate::prompt::build_prompt;
    use crate::stack::SiteStrategy;
    use crate::validator::build_context;

    fn prompt_for(fixture: &str, strategy: MutationStrategy) -> RepairPrompt {
        let (scenario, policy) = crate::fixtures::load(fixture).unwrap();
        let findings =
            crate::fuzzer::fuzz_interface(&scenario, &policy.interface, 500, 7).unwrap();
        let finding = findings
            .into_iter()
            .find(|f| f.mutation.strategy == strategy)
            .unwrap();
        let ctx = build_context(&scenario, &policy, finding, SiteStrategy::Late).unwrap();
        build_prompt(&ctx)
    }

    #[test]
    fn aware_mock_targets_the_preferred_site() {
        let prompt = prompt_for("apache_markdown", MutationStrategy::PtrUnmapped);
        let mut backend = AwareMockBackend::new();
        let patch = backend.generate(&prompt).unwrap();
        assert_eq!(patch.target_function, "log_table_entry");
        let PatchForm::UnifiedDiff { diff } = &patch.form else {
            panic!("aware mock should emit a diff for sourced targets");
        };
        assert!(
            diff.contains("+guard is_pointer_mapped(r.headers_in, 24) on_fail return"),
            "{diff}"
        );
    }

    #[test]
    fn aware_mock_on_ffmpeg_guards_the_forwarder() {
        let prompt = prompt_for("ffmpeg_libavcodec", MutationStrategy::PtrNull);
        let mut backend = AwareMockBackend::new();
        let patch = backend.generate(&prompt).unwrap();
        assert_eq!(patch.target_function, "print_all_libs_info");
        let PatchForm::UnifiedDiff { diff } = &patch.form else {
            panic!("expected diff");
        };
        assert!(diff.contains("+guard is_pointer_mapped(cfg, 1) on_fail return"), "{diff}");
        // Inserted after the call that produces cfg.
        let plus_pos = diff.lines().position(|l| l.starts_with('+') && l.contains("guard"));
        let call_pos = diff
            .lines()
            .position(|l| l.contains("libavcodec_configuration"));
        assert!(plus_pos > call_pos, "{diff}");
    }

    #[test]
    fn naive_quota_schedule_tracks_weights_exactly() {
        let weights = NaiveWeights {
            null_check: 0.3,
            sandbox: 0.5,
            correct: 0.2,
        };
        let mut backend = NaiveMockBackend::new(weights, 42);
        let mut counts = [0u64; 3];
        for _ in 0..10 {
            match backend.next_draw() {
                NaiveDraw::NullCheck => counts[0] += 1,
                NaiveDraw::Sandbox => counts[1] += 1,
                NaiveDraw::Correct => counts[2] += 1,
            }
        }
        assert_eq!(counts, [3, 5, 2]);
    }

    #[test]
    fn naive_null_check_avoids_the_preferred_site() {
        let prompt = prompt_for("apache_markdown", MutationStrategy::PtrNull);
        let mut backend = NaiveMockBackend::new(NaiveWeights::default(), 9);
        for _ in 0..8 {
            let patch = backend.generate(&prompt).unwrap();
            assert_ne!(patch.target_function, "log_table_entry");
            assert_ne!(patch.target_function, "markdown_output");
        }
    }

    #[test]
    fn naive_sandbox_draw_targets_the_entry() {
        let weights = NaiveWeights {
            null_check: 0.0,
            sandbox: 1.0,
            correct: 0.0,
        };
        let prompt = prompt_for("apache_markdown", MutationStrategy::PtrNull);
        let mut backend = NaiveMockBackend::new(weights, 1);
        let patch = backend.generate(&prompt).unwrap();
        assert_eq!(patch.target_function, "markdown_output");
    }

    #[test]
    fn naive_sequences_are_reproducible() {
        let weights = NaiveWeights {
            null_check: 0.6,
            sandbox: 0.2,
            correct: 0.2,
        };
        let prompt = prompt_for("apache_markdown", MutationStrategy::PtrNull);
        let run = |seed| {
            let mut backend = NaiveMockBackend::new(weights, seed);
            (0..6)
                .map(|_| backend.generate(&prompt).unwrap().target_function)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn weights_parser() {
        let w = NaiveWeights::parse("correct=0.2,sandbox=0.5,null-check=0.3").unwrap();
        assert_eq!(w.correct, 0.2);
        assert_eq!(w.sandbox, 0.5);
        assert_eq!(w.null_check, 0.3);
        assert!(NaiveWeights::parse("correct=0,sandbox=0,null-check=0").is_err());
        assert!(NaiveWeights::parse("bogus=1").is_err());
    }

    #[test]
    fn replay_transport_round_trips_a_remote_generation() {
        let prompt = prompt_for("apache_markdown", MutationStrategy::PtrUnmapped);

        // Build the canned response for this exact request.
        let probe = RemoteBackend::new("https://example.invalid/v1/chat", "test-model", ReplayTransport {
            exchanges: BTreeMap::new(),
        });
        let request = probe.request_body(&prompt);
        let hash = ReplayTransport::request_hash(&request);
        let diff = concat!(
            "--- a/log_table_entry\n",
            "+++ b/log_table_entry\n",
            "@@ -1,2 +1,3 @@\n",
            "+guard is_pointer_mapped(r.headers_in, 24) on_fail return\n",
            " call apr_table_get(r.headers_in)\n",
            " return\n",
        );
        let content = format!(
            "Here is the fix.\n{}\n{diff}{}\n",
            crate::patch::PATCH_BEGIN,
            crate::patch::PATCH_END
        );
        let response = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}]
        })
        .to_string();
        let fixture = serde_json::json!({ hash: response }).to_string();

        let transport = ReplayTransport::from_json(&fixture).unwrap();
        let mut backend = RemoteBackend::new("https://example.invalid/v1/chat", "test-model", transport);
        let patch = backend.generate(&prompt).unwrap();
        assert_eq!(patch.target_function, "log_table_entry");

        // The lowered patch applies to the scenario.
        let (scenario, _) = crate::fixtures::load("apache_markdown").unwrap();
        patch.to_guard_patch(&scenario).unwrap();
    }

    #[test]
    fn remote_without_fenced_diff_is_a_generation_failure() {
        let prompt = prompt_for("apache_markdown", MutationStrategy::PtrNull);
        let probe = RemoteBackend::new("u", "m", ReplayTransport {
            exchanges: BTreeMap::new(),
        });
        let request = probe.request_body(&prompt);
        let hash = ReplayTransport::request_hash(&request);
        let response = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "I cannot help."}}]
        })
        .to_string();
        let fixture = serde_json::json!({ hash: response }).to_string();
        let mut backend =
            RemoteBackend::new("u", "m", ReplayTransport::from_json(&fixture).unwrap());
        let err = backend.generate(&prompt).unwrap_err();
        assert!(matches!(err, Error::Backend { .. }));
    }
}
