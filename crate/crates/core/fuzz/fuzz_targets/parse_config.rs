#![no_main]

use asymdsd_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// Input is a JSON document, optionally followed by a NUL and override lines.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (json, overrides) = text.split_once('\0').unwrap_or((text, ""));
    let base = RunConfig::micro();
    let Ok(mut cfg) = RunConfig::from_json(json, &base) else { return };
    let overrides: Vec<&str> = overrides.lines().collect();
    if cfg.apply_overrides(&overrides).is_ok() {
        assert!(cfg.validate().is_empty());
        let again = RunConfig::from_json(&cfg.to_json_pretty(), &base).expect("own output parses");
        assert_eq!(again.digest(), cfg.digest());
    }
});
