#![no_main]

use cmr::harness::parse_run_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_run_config(text, "fuzz") {
        let back = parse_run_config(&cfg.to_toml().unwrap(), "fuzz").unwrap();
        assert_eq!(back, cfg);
    }
});
