#![no_main]

use libfuzzer_sys::fuzz_target;
use mlcluster_core::log::Snapshot;
use mlcluster_core::ControlState;

fuzz_target!(|data: &[u8]| {
    let Ok(raw) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(snap) = Snapshot::<ControlState>::parse(raw) {
        let again = serde_json::to_string(&snap).unwrap();
        let _ = Snapshot::<ControlState>::parse(&again).unwrap();
    }
});
