//! Scenario executor.
//!
//! Walks a scenario's function bodies starting at the root, binding the
//! payload to the interface entry's parameters, and either completes or
//! crashes with a captured call stack. Memory access ops fault exactly when
//! they touch addresses outside the mapped regions or leave declared
//! bounds. Everything is deterministic: the same (scenario, payload) pair
//! always yields the same outcome and trace.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::report::{CrashKind, CrashReport, Frame};
use crate::scenario::{OnFail, Op, Operand, Payload, Predicate, Scenario, DEPTH_LIMIT};
use crate::value::Value;

/// Coarse op classification recorded in traces; role analysis keys off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Deref,
    Index,
    ReadCStr,
    Call,
    Guard,
    Use,
    Pass,
    Commit,
    Return,
}

impl OpKind {
    pub fn of(op: &Op) -> OpKind {
        match op {
            Op::Deref { .. } => OpKind::Deref,
            Op::Index { .. } => OpKind::Index,
            Op::ReadCStr { .. } => OpKind::ReadCStr,
            Op::Call { .. } => OpKind::Call,
            Op::Guard { .. } => OpKind::Guard,
            Op::Use { .. } => OpKind::Use,
            Op::Pass { .. } => OpKind::Pass,
            Op::Commit { .. } => OpKind::Commit,
            Op::Return { .. } => OpKind::Return,
        }
    }

    /// Does this op interpret its operand (as opposed to moving it around)?
    pub fn interprets(&self) -> bool {
        matches!(
            self,
            OpKind::Deref | OpKind::Index | OpKind::ReadCStr | OpKind::Use | OpKind::Guard
        )
    }

    /// Does this op forward its operand without interpreting it?
    pub fn forwards(&self) -> bool {
        matches!(self, OpKind::Call | OpKind::Pass | OpKind::Return)
    }
}

/// One executed op with its resolved operands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub function: String,
    pub op_index: usize,
    pub rendered: String,
    pub kind: OpKind,
    /// (operand as written, resolved value) pairs, in op order.
    pub operands: Vec<(String, Value)>,
    /// For guards: whether the predicate held.
    pub guard_passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashInfo {
    pub kind: CrashKind,
    pub fault_address: u64,
    pub access_size: u64,
    pub faulting_symbol: String,
    pub faulting_op: usize,
    /// Symbols from the crash site outward.
    pub stack: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecStatus {
    Ok,
    Crash(CrashInfo),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    pub trace: Vec<TraceStep>,
}

impl ExecutionOutcome {
    pub fn crashed(&self) -> bool {
        matches!(self.status, ExecStatus::Crash(_))
    }

    pub fn crash(&self) -> Option<&CrashInfo> {
        match &self.status {
            ExecStatus::Crash(info) => Some(info),
            ExecStatus::Ok => None,
        }
    }

    /// Synthesize a normalized crash report, pulling module and source
    /// availability from the scenario's function table.
    pub fn to_crash_report(&self, scenario: &Scenario) -> Option<CrashReport> {
        let info = self.crash()?;
        let frames = info
            .stack
            .iter()
            .enumerate()
            .map(|(index, symbol)| {
                let body = scenario.function(symbol);
                Frame {
                    index,
                    symbol: symbol.clone(),
                    module: body.map(|b| b.module.clone()).unwrap_or_default(),
                    has_source: body.map(|b| b.has_source).unwrap_or(false),
                    file: None,
                    line: None,
                }
            })
            .collect();
        Some(CrashReport {
            kind: info.kind,
            fault_address: info.fault_address,
            access_size: info.access_size,
            frames,
        })
    }
}

struct ExecCtx<'a> {
    scenario: &'a Scenario,
    payload: &'a Payload,
    depth_limit: usize,
    trace: Vec<TraceStep>,
}

enum FrameExit {
    Returned(Option<Value>),
    Crashed(CrashInfo),
}

/// Run a payload through a scenario.
///
/// Errors cover contract violations (payload shape mismatch, depth limit
/// exceeded); actual faults come back as a crash outcome.
pub fn execute(scenario: &Scenario, payload: &Payload, depth_limit: usize) -> Result<ExecutionOutcome> {
    if !payload.same_shape(&scenario.payload_template) {
        return Err(Error::ShapeMismatch(format!(
            "payload does not match `{}` template", scenario.name
        )));
    }
    let mut ctx = ExecCtx {
        scenario,
        payload,
        depth_limit: depth_limit.min(DEPTH_LIMIT),
        trace: Vec::new(),
    };

    let root = &scenario.functions[&scenario.root];
    let mut env = BTreeMap::new();
    for param in &root.params {
        let value = payload.values.get(param).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "root `{}` parameter `{param}` is not a payload entry",
                scenario.root
            ))
        })?;
        env.insert(param.clone(), value.clone());
    }

    let exit = run_frame(&mut ctx, &scenario.root, env, 0)?;
    let status = match exit {
        FrameExit::Returned(_) => ExecStatus::Ok,
        FrameExit::Crashed(info) => ExecStatus::Crash(info),
    };
    Ok(ExecutionOutcome {
        status,
        trace: ctx.trace,
    })
}

/// Run with the executor's default depth limit.
pub fn execute_default(scenario: &Scenario, payload: &Payload) -> Result<ExecutionOutcome> {
    execute(scenario, payload, DEPTH_LIMIT)
}

fn run_frame(
    ctx: &mut ExecCtx<'_>,
    symbol: &str,
    mut env: BTreeMap<String, Value>,
    depth: usize,
) -> Result<FrameExit> {
    if depth >= ctx.depth_limit {
        return Err(Error::DepthLimit {
            symbol: symbol.to_string(),
            limit: ctx.depth_limit,
        });
    }
    let body = &ctx.scenario.functions[symbol];

    let mut i = 0usize;
    while i < body.ops.len() {
        let op = &body.ops[i];
        let mut operands = Vec::new();
        let mut resolve_failure: Option<String> = None;
        for operand in op.operands() {
            match resolve(ctx.scenario, &env, operand) {
                Ok(v) => operands.push((operand.to_string(), v)),
                Err(e) => {
                    resolve_failure = Some(e.to_string());
                    break;
                }
            }
        }

        let kind = OpKind::of(op);
        let mut guard_passed = None;

        if resolve_failure.is_some() {
            // A value this op depends on was never produced — possible only
            // when a skip-guard elided the producing op or a callee
            // returned nothing into an output. The computation depending on
            // the rejected value is itself elided: the frame returns early.
            // This keeps guard insertion from ever introducing a crash.
            ctx.trace.push(TraceStep {
                function: symbol.to_string(),
                op_index: i,
                rendered: op.to_string(),
                kind,
                operands,
                guard_passed,
            });
            return Ok(FrameExit::Returned(None));
        }

        // Evaluate the op. Memory faults produce a crash exit; calls recurse.
        let mut crash: Option<(CrashKind, u64, u64)> = None;
        match op {
            Op::Deref { size, write, .. } => {
                let addr = match &operands[0].1 {
                    Value::Ptr(a) => *a,
                    _ => {
                        crash = Some((CrashKind::Abort, 0, 0));
                        0
                    }
                };
                if crash.is_none() {
                    if let Some(fault) = ctx.scenario.memory.first_unmapped(addr, *size) {
                        let kind = if *write {
                            CrashKind::SegvWrite
                        } else {
                            CrashKind::SegvRead
                        };
                        crash = Some((kind, fault, *size));
                    }
                }
            }
            Op::Index { len, .. } => {
                let base = match &operands[0].1 {
                    Value::Ptr(a) => Some(*a),
                    _ => None,
                };
                let idx = match &operands[1].1 {
                    Value::Int(n) => Some(*n),
                    _ => None,
                };
                match (base, idx) {
                    (Some(base), Some(idx)) => {
                        if idx < 0 || idx as u64 >= *len {
                            crash = Some((
                                CrashKind::OverflowRead,
                                base.wrapping_add(idx as u64),
                                1,
                            ));
                        } else {
                            let addr = base.wrapping_add(idx as u64);
                            if ctx.scenario.memory.read_byte(addr).is_none() {
                                crash = Some((CrashKind::SegvRead, addr, 1));
                            }
                        }
                    }
                    _ => crash = Some((CrashKind::Abort, 0, 0)),
                }
            }
            Op::ReadCStr { max, .. } => {
                let addr = match &operands[0].1 {
                    Value::Ptr(a) => Some(*a),
                    _ => None,
                };
                match addr {
                    None => crash = Some((CrashKind::Abort, 0, 0)),
                    Some(addr) => {
                        if ctx.scenario.memory.region_containing(addr).is_none() {
                            crash = Some((CrashKind::SegvRead, addr, 1));
                        } else {
                            // Scans capped at `max` without a terminator are
                            // fine (bounded read); running off the mapped
                            // object is not.
                            for off in 0..*max {
                                let cur = addr.wrapping_add(off);
                                match ctx.scenario.memory.read_byte(cur) {
                                    Some(0) => break,
                                    Some(_) => {}
                                    None => {
                                        crash = Some((CrashKind::OverflowRead, cur, 1));
                                        break;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Call { callee, out, .. } => {
                let callee_body = &ctx.scenario.functions[callee.as_str()];
                let mut callee_env = BTreeMap::new();
                if callee == &ctx.scenario.interface_entry {
                    // The interface crossing: parameters bind to the
                    // (possibly mutated) payload, not the caller's arguments.
                    for param in &callee_body.params {
                        let value = ctx.payload.values.get(param).ok_or_else(|| {
                            Error::ShapeMismatch(format!(
                                "payload has no entry `{param}` for `{callee}`"
                            ))
                        })?;
                        callee_env.insert(param.clone(), value.clone());
                    }
                } else {
                    for (param, (_, value)) in callee_body.params.iter().zip(operands.iter()) {
                        callee_env.insert(param.clone(), value.clone());
                    }
                }
                ctx.trace.push(TraceStep {
                    function: symbol.to_string(),
                    op_index: i,
                    rendered: op.to_string(),
                    kind,
                    operands: operands.clone(),
                    guard_passed,
                });
                match run_frame(ctx, callee, callee_env, depth + 1)? {
                    FrameExit::Returned(value) => {
                        if let (Some(out), Some(value)) = (out, value) {
                            env.insert(out.clone(), value);
                        }
                        i += 1;
                        continue;
                    }
                    FrameExit::Crashed(mut info) => {
                        info.stack.push(symbol.to_string());
                        return Ok(FrameExit::Crashed(info));
                    }
                }
            }
            Op::Guard { pred, on_fail } => {
                let passed = eval_predicate(ctx.scenario, &env, pred);
                guard_passed = Some(passed);
                if !passed {
                    ctx.trace.push(TraceStep {
                        function: symbol.to_string(),
                        op_index: i,
                        rendered: op.to_string(),
                        kind,
                        operands,
                        guard_passed,
                    });
                    match on_fail {
                        OnFail::Return => return Ok(FrameExit::Returned(None)),
                        OnFail::Skip => {
                            i += 2;
                            continue;
                        }
                    }
                }
            }
            Op::Use { .. } | Op::Pass { .. } | Op::Commit { .. } => {}
            Op::Return { .. } => {
                let value = operands.first().map(|(_, v)| v.clone());
                ctx.trace.push(TraceStep {
                    function: symbol.to_string(),
                    op_index: i,
                    rendered: op.to_string(),
                    kind,
                    operands,
                    guard_passed,
                });
                return Ok(FrameExit::Returned(value));
            }
        }

        ctx.trace.push(TraceStep {
            function: symbol.to_string(),
            op_index: i,
            rendered: op.to_string(),
            kind,
            operands,
            guard_passed,
        });

        if let Some((kind, fault, size)) = crash {
            return Ok(FrameExit::Crashed(CrashInfo {
                kind,
                fault_address: fault,
                access_size: size,
                faulting_symbol: symbol.to_string(),
                faulting_op: i,
                stack: vec![symbol.to_string()],
            }));
        }
        i += 1;
    }
    // Fell off the end: implicit return.
    Ok(FrameExit::Returned(None))
}

fn resolve(scenario: &Scenario, env: &BTreeMap<String, Value>, operand: &Operand) -> Result<Value> {
    match operand {
        Operand::Region(id) => {
            let region = scenario.memory.get(id).ok_or_else(|| {
                Error::PathUnresolvable {
                    path: format!("@{id}"),
                    detail: "unknown region".into(),
                }
            })?;
            Ok(Value::Ptr(region.base))
        }
        Operand::Path(path) => {
            let root = env.get(&path.root).ok_or_else(|| Error::PathUnresolvable {
                path: path.to_string(),
                detail: format!("`{}` is not bound in this frame", path.root),
            })?;
            root.get_path(path).cloned()
        }
    }
}

/// Evaluate a guard predicate. Type mismatches fail closed: a guard that
/// cannot make sense of its operand rejects it.
fn eval_predicate(scenario: &Scenario, env: &BTreeMap<String, Value>, pred: &Predicate) -> bool {
    let value = match pred.operand() {
        None => return matches!(pred, Predicate::True),
        Some(operand) => match resolve(scenario, env, operand) {
            Ok(v) => v,
            Err(_) => return false,
        },
    };
    match pred {
        Predicate::True => true,
        Predicate::PointerMapped { size, .. } => match value {
            Value::Ptr(a) => scenario.memory.is_mapped_range(a, *size),
            _ => false,
        },
        Predicate::NonNull { .. } => match value {
            Value::Ptr(a) => a != 0,
            _ => false,
        },
        Predicate::InDomain { min, max, .. } => match value {
            Value::Int(n) => min.map_or(true, |lo| n >= lo) && max.map_or(true, |hi| n <= hi),
            _ => false,
        },
        Predicate::InSet { set, .. } => match value {
            Value::Int(n) => set.contains(&n),
            _ => false,
        },
        Predicate::VerifyFormat { kind, .. } => match value {
            Value::Handle { kind: k, id } => k == *kind && id != 0 && id <= u32::MAX as u64,
            _ => false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;
    use crate::value::Path;
    use crate::scenario::Provenance;

    fn scenario() -> Scenario {
        load_scenario(
            r#"{
              "name": "t",
              "root": "drive",
              "interface_entry": "ext_entry",
              "memory": {
                "buf": {"base": "0x1000", "size": 16},
                "msg": {"base": "0x2000", "size": 8, "ascii": "hi"}
              },
              "payload": {"p": {"ptr": "@buf"}, "n": {"int": 3}},
              "functions": {
                "drive": {"compartment": "app", "params": ["p", "n"],
                          "ops": ["call ext_entry(p, n)", "call touch(p, n)", "return"]},
                "ext_entry": {"compartment": "ext", "params": ["p", "n"],
                              "ops": ["commit p", "return"]},
                "touch": {"compartment": "app", "params": ["q", "i"],
                          "ops": ["deref q 8", "index @buf i 16", "read_cstr @msg 8", "return"]}
              }
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn clean_run_is_ok_and_traced() {
        let s = scenario();
        let out = execute_default(&s, &s.payload_template).unwrap();
        assert!(!out.crashed());
        assert!(out.trace.iter().any(|t| t.function == "touch"));
    }

    #[test]
    fn unmapped_pointer_faults_with_stack() {
        let s = scenario();
        let p = s
            .payload_template
            .with_value(
                &Path::parse("p").unwrap(),
                Value::Ptr(0x4141_0000),
                Provenance::Mutated { seed: 0, index: 0 },
            )
            .unwrap();
        let out = execute_default(&s, &p).unwrap();
        let info = out.crash().expect("crash");
        assert_eq!(info.kind, CrashKind::SegvRead);
        assert_eq!(info.fault_address, 0x4141_0000);
        assert_eq!(info.stack, vec!["touch".to_string(), "drive".to_string()]);
    }

    #[test]
    fn truncated_read_faults_at_region_end() {
        let s = scenario();
        let p = s
            .payload_template
            .with_value(
                &Path::parse("p").unwrap(),
                Value::Ptr(0x1000 + 15),
                Provenance::Mutated { seed: 0, index: 1 },
            )
            .unwrap();
        let out = execute_default(&s, &p).unwrap();
        let info = out.crash().expect("crash");
        assert_eq!(info.kind, CrashKind::SegvRead);
        assert_eq!(info.fault_address, 0x1010);
    }

    #[test]
    fn out_of_bounds_index_is_overflow() {
        let s = scenario();
        for (v, expect_fault) in [(-1i64, 0xfffu64), (16, 0x1010), (99, 0x1063)] {
            let p = s
                .payload_template
                .with_value(
                    &Path::parse("n").unwrap(),
                    Value::Int(v),
                    Provenance::Mutated { seed: 0, index: 2 },
                )
                .unwrap();
            let out = execute_default(&s, &p).unwrap();
            let info = out.crash().expect("crash");
            assert_eq!(info.kind, CrashKind::OverflowRead);
            assert_eq!(info.fault_address, expect_fault);
            assert_eq!(info.faulting_symbol, "touch");
        }
    }

    #[test]
    fn determinism() {
        let s = scenario();
        let p = s
            .payload_template
            .with_value(
                &Path::parse("p").unwrap(),
                Value::Ptr(0),
                Provenance::Mutated { seed: 1, index: 0 },
            )
            .unwrap();
        let a = execute_default(&s, &p).unwrap();
        let b = execute_default(&s, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = scenario();
        let mut values = s.payload_template.values.clone();
        values.remove("n");
        let p = Payload {
            values,
            provenance: Provenance::Original,
        };
        assert!(matches!(
            execute_default(&s, &p),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn guard_return_prevents_fault_and_later_ops() {
        let mut s = scenario();
        let patch = crate::scenario::GuardPatch {
            target_function: "touch".into(),
            insert_before_op_index: 0,
            predicate: Predicate::parse("is_pointer_mapped(q, 8)").unwrap(),
            on_fail: OnFail::Return,
        };
        s = crate::scenario::apply_guard_patch(&s, &patch).unwrap();
        let p = s
            .payload_template
            .with_value(
                &Path::parse("p").unwrap(),
                Value::Ptr(0),
                Provenance::Mutated { seed: 0, index: 0 },
            )
            .unwrap();
        let out = execute_default(&s, &p).unwrap();
        assert!(!out.crashed());
        // No op after the failing guard ran in `touch`.
        let touch_steps: Vec<_> = out.trace.iter().filter(|t| t.function == "touch").collect();
        assert_eq!(touch_steps.len(), 1);
        assert_eq!(touch_steps[0].guard_passed, Some(false));
    }

    #[test]
    fn crash_report_synthesis() {
        let s = scenario();
        let p = s
            .payload_template
            .with_value(
                &Path::parse("p").unwrap(),
                Value::Ptr(0),
                Provenance::Mutated { seed: 0, index: 0 },
            )
            .unwrap();
        let out = execute_default(&s, &p).unwrap();
        let report = out.to_crash_report(&s).unwrap();
        assert_eq!(report.frames[0].symbol, "touch");
        assert_eq!(report.frames[1].symbol, "drive");
        assert_eq!(report.fault_address, 0);
        let reparsed = crate::report::parse_sanitizer_report(&report.to_json()).unwrap();
        assert_eq!(report, reparsed);
    }
}
