#![no_main]

use asymdsd_core::data_io::{manifest_to_string, parse_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text) {
        let again = manifest_to_string(&entries).expect("parsed entries serialize");
        assert_eq!(parse_manifest(&again).expect("round trip parses"), entries);
    }
});
