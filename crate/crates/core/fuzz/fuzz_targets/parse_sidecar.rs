#![no_main]

use hban_core::labels::{parse_sidecar, write_sidecar};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_sidecar(text) {
            assert_eq!(parse_sidecar(&write_sidecar(&rows)).expect("re-parse"), rows);
        }
    }
});
