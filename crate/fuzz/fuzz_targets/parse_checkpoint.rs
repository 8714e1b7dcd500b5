#![no_main]

use cmr::learner::{parse_checkpoint, write_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(state) = parse_checkpoint(text, "fuzz") {
        let mut out = Vec::new();
        write_checkpoint(&state, &mut out).unwrap();
        let back = parse_checkpoint(std::str::from_utf8(&out).unwrap(), "fuzz").unwrap();
        assert_eq!(back, state);
    }
});
