#![no_main]

use libfuzzer_sys::fuzz_target;
use mlcluster_core::log::parse_line;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(record) = parse_line(line) {
        let again = serde_json::to_string(&record).unwrap();
        assert_eq!(parse_line(&again).unwrap(), record);
    }
});
