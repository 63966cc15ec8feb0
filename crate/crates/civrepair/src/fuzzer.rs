//! Interface fuzzer: mutates payloads crossing the interface entry, detects
//! CIVs through the executor, and records replayable findings.
//!
//! Determinism contract: `fuzz_interface(s, spec, budget, seed)` always
//! returns the same finding list, byte-for-byte after serialization. Each
//! attempt derives its own RNG stream from `(seed, index)`, so values do
//! not depend on evaluation order, and findings are emitted in discovery
//! order. A finding's payload is the full recorded value tree — replaying
//! it through the deterministic executor reproduces the crash exactly, so
//! no process snapshotting is needed.

use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{execute_default, ExecutionOutcome};
use crate::mutation::{LoggedValue, MutationLog, MutationStrategy};
use crate::policy::{IfaceType, InterfaceSpec};
use crate::report::CrashReport;
use crate::scenario::{MemoryMap, Payload, Provenance, Scenario};
use crate::value::{Path, Value};

/// A discovered CIV: normalized crash report, mutation log, and the full
/// recorded payload for replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CivFinding {
    pub scenario_name: String,
    pub seed: u64,
    pub index: u64,
    pub report: CrashReport,
    pub mutation: MutationLog,
    pub payload: Payload,
}

impl CivFinding {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("finding serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<CivFinding> {
        serde_json::from_str(text).map_err(|e| Error::parse("finding", format!("{e}")))
    }

    /// Deduplication identity: crash site symbol + mutated path + strategy.
    pub fn dedup_key(&self) -> (String, String, MutationStrategy) {
        (
            self.report.crash_site().symbol.clone(),
            self.mutation.mutated_path.to_string(),
            self.mutation.strategy,
        )
    }
}

/// Apply one mutation strategy at one payload path. The result differs from
/// `payload` only at `path`; provenance carries the replay key.
pub fn mutate(
    payload: &Payload,
    strategy: MutationStrategy,
    path: &Path,
    leaf: &IfaceType,
    memory: &MemoryMap,
    rng: &mut ChaCha8Rng,
    provenance: Provenance,
) -> Result<Payload> {
    if !strategy.applies_to(leaf) {
        return Err(Error::StrategyMismatch {
            strategy: strategy.id().to_string(),
            leaf: leaf.leaf_name().to_string(),
            path: path.to_string(),
        });
    }
    let original = payload.get(path)?.clone();
    let mutated = mutated_value(&original, strategy, leaf, memory, rng)?;
    payload.with_value(path, mutated, provenance)
}

fn mutated_value(
    original: &Value,
    strategy: MutationStrategy,
    leaf: &IfaceType,
    memory: &MemoryMap,
    rng: &mut ChaCha8Rng,
) -> Result<Value> {
    let out = match strategy {
        MutationStrategy::PtrNull => Value::Ptr(0),
        MutationStrategy::PtrUnmapped => {
            // A fresh address overlapping no region.
            let mut addr;
            loop {
                addr = 0x4141_0000_0000u64 | (u64::from(rng.gen::<u32>()) << 4);
                if memory.region_containing(addr).is_none() && addr != 0 {
                    break;
                }
            }
            Value::Ptr(addr)
        }
        MutationStrategy::PtrMisaligned => match original {
            Value::Ptr(0) => Value::Ptr(1),
            Value::Ptr(a) => Value::Ptr(a | 1),
            _ => Value::Ptr(1),
        },
        MutationStrategy::PtrTruncated => match original {
            // Point at the very end of the original region so that any
            // multi-byte access runs off the mapped object.
            Value::Ptr(a) => match memory.region_containing(*a) {
                Some(region) => Value::Ptr(region.end().saturating_sub(1)),
                None => Value::Ptr(memory.unmapped_probe_address()),
            },
            _ => Value::Ptr(memory.unmapped_probe_address()),
        },
        MutationStrategy::ScalarNegative => Value::Int(-1 - rng.gen_range(0..1000)),
        MutationStrategy::ScalarZero => Value::Int(0),
        MutationStrategy::ScalarMax => Value::Int(i64::MAX),
        MutationStrategy::ScalarOutOfDomain => {
            let IfaceType::Scalar { domain } = leaf else {
                unreachable!("applies_to checked");
            };
            match domain.out_of_domain_value() {
                Some(v) => Value::Int(v),
                None => {
                    return Err(Error::StrategyMismatch {
                        strategy: strategy.id().to_string(),
                        leaf: "scalar covering the whole value space".to_string(),
                        path: String::new(),
                    })
                }
            }
        }
        MutationStrategy::HandleFormatCorrupt => match original {
            Value::Handle { kind, id } => Value::Handle {
                kind: kind.clone(),
                id: id | 0xDEAD_0000_0000_0000,
            },
            _ => Value::Handle {
                kind: "corrupt".into(),
                id: u64::MAX,
            },
        },
        MutationStrategy::HandleStaleId => match original {
            Value::Handle { kind, id } => Value::Handle {
                kind: kind.clone(),
                // Stays well-formed (fits 32 bits, nonzero) but no longer
                // names a live object; format checks cannot see this.
                id: ((id + 7919) & 0xFFFF_FFFF).max(1),
            },
            _ => Value::Handle {
                kind: "stale".into(),
                id: 7919,
            },
        },
        MutationStrategy::HandleWrongKind => match original {
            Value::Handle { id, .. } => Value::Handle {
                kind: "unknown-kind".into(),
                id: *id,
            },
            _ => Value::Handle {
                kind: "unknown-kind".into(),
                id: 1,
            },
        },
    };
    Ok(out)
}

/// Every (path, applicable strategy) pair for the entry function, in
/// canonical order.
pub fn mutation_pairs(
    spec: &InterfaceSpec,
    entry: &str,
) -> Result<Vec<(Path, IfaceType, MutationStrategy)>> {
    let mut pairs = Vec::new();
    for (path, leaf) in spec.leaf_paths(entry)? {
        for strategy in MutationStrategy::for_leaf(&leaf) {
            pairs.push((path.clone(), leaf.clone(), *strategy));
        }
    }
    Ok(pairs)
}

/// Fuzz the scenario's interface entry with `budget` payload injections.
///
/// Pairs are visited round-robin so a budget of at least
/// `|paths| x |strategies|` covers every pair at least once. Findings are
/// deduplicated by (crash site, path, strategy), keeping the first
/// discovery.
pub fn fuzz_interface(
    scenario: &Scenario,
    spec: &InterfaceSpec,
    budget: u64,
    seed: u64,
) -> Result<Vec<CivFinding>> {
    if budget == 0 {
        return Err(Error::Precondition("fuzz budget must be >= 1".into()));
    }
    let pairs = mutation_pairs(spec, &scenario.interface_entry)?;
    if pairs.is_empty() {
        return Ok(Vec::new());
    }

    let mut findings: Vec<CivFinding> = Vec::new();
    for index in 0..budget {
        let (path, leaf, strategy) = &pairs[(index % pairs.len() as u64) as usize];
        let mut rng = attempt_rng(seed, index);
        let payload = match mutate(
            &scenario.payload_template,
            *strategy,
            path,
            leaf,
            &scenario.memory,
            &mut rng,
            Provenance::Mutated { seed, index },
        ) {
            Ok(p) => p,
            // e.g. out-of-domain on a full-range scalar: nothing to inject.
            Err(Error::StrategyMismatch { .. }) => continue,
            Err(e) => return Err(e),
        };

        let outcome = execute_default(scenario, &payload)?;
        let Some(report) = outcome.to_crash_report(scenario) else {
            continue;
        };

        let finding = CivFinding {
            scenario_name: scenario.name.clone(),
            seed,
            index,
            report,
            mutation: MutationLog {
                entry_function: scenario.interface_entry.clone(),
                mutated_path: path.clone(),
                original_value: LoggedValue::Concrete(
                    scenario.payload_template.get(path)?.clone(),
                ),
                mutated_value: LoggedValue::Concrete(payload.get(path)?.clone()),
                strategy: *strategy,
                seed,
                index,
            },
            payload,
        };
        if findings.iter().any(|f| f.dedup_key() == finding.dedup_key()) {
            continue;
        }
        // Record-time replay check: the recorded payload must re-trigger
        // the identical stack.
        let replay = reproduce(scenario, &finding)?;
        let same_stack = replay
            .crash()
            .map(|c| c.stack == finding.report.stack_symbols())
            .unwrap_or(false);
        if same_stack {
            findings.push(finding);
        }
    }
    Ok(findings)
}

fn attempt_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Replay a recorded finding against a (possibly patched) scenario.
///
/// A crash means the CIV is still present; ok means the recorded trigger is
/// mitigated.
pub fn reproduce(scenario: &Scenario, finding: &CivFinding) -> Result<ExecutionOutcome> {
    if scenario.name != finding.scenario_name {
        return Err(Error::Precondition(format!(
            "finding was recorded on `{}`, not `{}`",
            finding.scenario_name, scenario.name
        )));
    }
    execute_default(scenario, &finding.payload)
}

/// Write findings as `finding-NNN.json` files under `dir`.
pub fn write_findings(dir: &FsPath, findings: &[CivFinding]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, finding) in findings.iter().enumerate() {
        let path = dir.join(format!("finding-{i:03}.json"));
        std::fs::write(&path, finding.to_json())?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_finding(path: &FsPath) -> Result<CivFinding> {
    let text = std::fs::read_to_string(path)?;
    CivFinding::from_json(&text)
}
