#![no_main]

use cmr::cluster_store::{parse_clusters, write_clusters};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(set) = parse_clusters(text, "fuzz") else {
        return;
    };
    // anything we accept must survive a write/parse cycle unchanged
    let mut out = Vec::new();
    write_clusters(&set, &mut out).unwrap();
    let back = parse_clusters(std::str::from_utf8(&out).unwrap(), "fuzz").unwrap();
    assert_eq!(back, set);
});
