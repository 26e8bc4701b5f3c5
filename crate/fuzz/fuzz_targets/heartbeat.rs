#![no_main]

use libfuzzer_sys::fuzz_target;
use mlcluster_core::scheduler::failover::HeartbeatMessage;

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = HeartbeatMessage::parse(data) {
        let again = serde_json::to_vec(&msg).unwrap();
        assert_eq!(HeartbeatMessage::parse(&again).unwrap(), msg);
    }
});
