#![no_main]

use libfuzzer_sys::fuzz_target;
use mlcluster_gateway::config::parse_override;
use mlcluster_gateway::GatewayConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(raw) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((path, _)) = parse_override(raw) {
        assert!(!path.is_empty());
    }
    let mut config = GatewayConfig::default();
    let _ = config.apply_override(raw);
});
