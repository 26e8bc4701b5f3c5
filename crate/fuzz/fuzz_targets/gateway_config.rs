#![no_main]

use libfuzzer_sys::fuzz_target;
use mlcluster_gateway::GatewayConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = std::str::from_utf8(data) {
        let _ = GatewayConfig::parse(raw);
    }
});
