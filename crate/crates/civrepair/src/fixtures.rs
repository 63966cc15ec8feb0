//! Bundled example targets.
//!
//! Three scenario/policy pairs ship with the crate so every pipeline stage
//! can run out of the box:
//!
//! - `apache_markdown`: a sandboxed markdown module corrupts a table
//!   pointer nested in the request structure; the crash surfaces deep in
//!   the trusted logging path, inside a library function without source.
//! - `ffmpeg_libavcodec`: a sandboxed codec returns a NULL configuration
//!   string that trusted code hands to `strcmp`.
//! - `decoder_index`: a sandboxed decoder returns a frame index that
//!   trusted code uses to address a fixed-size buffer.

use crate::error::{Error, Result};
use crate::policy::{parse_policy, CompartmentPolicy};
use crate::scenario::{load_scenario, Scenario};

pub struct BundledFixture {
    pub name: &'static str,
    pub policy_json: &'static str,
    pub scenario_json: &'static str,
}

pub const BUNDLED: &[BundledFixture] = &[
    BundledFixture {
        name: "apache_markdown",
        policy_json: include_str!("../fixtures/apache_markdown/policy.json"),
        scenario_json: include_str!("../fixtures/apache_markdown/scenario.json"),
    },
    BundledFixture {
        name: "ffmpeg_libavcodec",
        policy_json: include_str!("../fixtures/ffmpeg_libavcodec/policy.json"),
        scenario_json: include_str!("../fixtures/ffmpeg_libavcodec/scenario.json"),
    },
    BundledFixture {
        name: "decoder_index",
        policy_json: include_str!("../fixtures/decoder_index/policy.json"),
        scenario_json: include_str!("../fixtures/decoder_index/scenario.json"),
    },
];

pub fn names() -> Vec<&'static str> {
    BUNDLED.iter().map(|f| f.name).collect()
}

pub fn bundled(name: &str) -> Option<&'static BundledFixture> {
    BUNDLED.iter().find(|f| f.name == name)
}

/// Load a bundled fixture's scenario and policy by name.
pub fn load(name: &str) -> Result<(Scenario, CompartmentPolicy)> {
    let fixture = bundled(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown fixture `{name}` (bundled: {})",
            names().join(", ")
        ))
    })?;
    Ok((
        load_scenario(fixture.scenario_json)?,
        parse_policy(fixture.policy_json)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::execute_default;
    use crate::scenario::Provenance;
    use crate::value::{Path, Value};

    #[test]
    fn all_fixtures_load_and_run_clean() {
        for fixture in BUNDLED {
            let (scenario, policy) = load(fixture.name).unwrap();
            assert_eq!(scenario.name, fixture.name);
            assert!(policy.interface.function(&scenario.interface_entry).is_some());
            let out = execute_default(&scenario, &scenario.payload_template).unwrap();
            assert!(!out.crashed(), "{} crashed on its original payload", fixture.name);
        }
    }

    #[test]
    fn apache_unmapped_header_table_matches_known_stack() {
        let (scenario, _) = load("apache_markdown").unwrap();
        let payload = scenario
            .payload_template
            .with_value(
                &Path::parse("r.headers_in").unwrap(),
                Value::Ptr(0x4141_4141_0000),
                Provenance::Mutated { seed: 0, index: 0 },
            )
            .unwrap();
        let out = execute_default(&scenario, &payload).unwrap();
        let info = out.crash().expect("unmapped table pointer must crash");
        assert_eq!(
            info.stack,
            vec![
                "apr_table_get",
                "log_table_entry",
                "log_header",
                "do_errorlog_default",
                "log_error_core",
                "ap_log_rerror_",
                "ap_invoke_handler",
                "ap_process_async_request",
            ]
        );
        assert_eq!(info.fault_address, 0x4141_4141_0000);
    }

    #[test]
    fn ffmpeg_null_configuration_faults_at_zero() {
        let (scenario, _) = load("ffmpeg_libavcodec").unwrap();
        let payload = scenario
            .payload_template
            .with_value(
                &Path::parse("return").unwrap(),
                Value::Ptr(0),
                Provenance::Mutated { seed: 0, index: 0 },
            )
            .unwrap();
        let out = execute_default(&scenario, &payload).unwrap();
        let info = out.crash().expect("NULL cfg must crash");
        assert_eq!(info.kind, crate::report::CrashKind::SegvRead);
        assert_eq!(info.fault_address, 0);
        assert_eq!(info.stack[0], "strcmp");
        assert_eq!(info.stack[1], "print_all_libs_info");
    }

    #[test]
    fn decoder_negative_index_overflows() {
        let (scenario, _) = load("decoder_index").unwrap();
        let payload = scenario
            .payload_template
            .with_value(
                &Path::parse("return").unwrap(),
                Value::Int(-4),
                Provenance::Mutated { seed: 0, index: 0 },
            )
            .unwrap();
        let out = execute_default(&scenario, &payload).unwrap();
        let info = out.crash().expect("negative index must crash");
        assert_eq!(info.kind, crate::report::CrashKind::OverflowRead);
        assert_eq!(info.stack, vec!["draw_frame", "render_loop"]);
    }
}
