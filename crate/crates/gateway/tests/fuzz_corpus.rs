use std::path::{Path, PathBuf};

use mlcluster_core::log::{parse_line, Snapshot};
use mlcluster_core::scheduler::failover::HeartbeatMessage;
use mlcluster_core::sim::scenario::Scenario;
use mlcluster_core::ControlState;
use mlcluster_gateway::config::parse_override;
use mlcluster_gateway::GatewayConfig;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            let raw = std::fs::read(&path).unwrap();
            (path, raw)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

fn text(raw: &[u8]) -> &str {
    std::str::from_utf8(raw).unwrap()
}

#[test]
fn log_line_seeds_parse() {
    for (path, raw) in seeds("log_line") {
        let record = parse_line(text(&raw)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(
            record.payload["type"],
            path.file_name().unwrap().to_str().unwrap()
        );
    }
}

#[test]
fn snapshot_seeds_parse() {
    for (path, raw) in seeds("snapshot") {
        Snapshot::<ControlState>::parse(text(&raw))
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn scenario_seeds_validate() {
    for (path, raw) in seeds("scenario") {
        let scenario = Scenario::parse(&raw).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        scenario.validate().unwrap();
    }
}

#[test]
fn heartbeat_seeds_parse() {
    for (path, raw) in seeds("heartbeat") {
        HeartbeatMessage::parse(&raw).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn config_seeds_parse() {
    for (path, raw) in seeds("gateway_config") {
        GatewayConfig::parse(text(&raw)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn override_seeds_apply() {
    for (path, raw) in seeds("config_override") {
        parse_override(text(&raw)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        GatewayConfig::default()
            .apply_override(text(&raw))
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
