#![no_main]

use libfuzzer_sys::fuzz_target;
use mlcluster_core::sim::scenario::Scenario;

fuzz_target!(|data: &[u8]| {
    let _ = Scenario::parse(data);
});
