#![no_main]

use hban_core::harness::{parse_cells, parse_series};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_cells(text);
        let _ = parse_series(text);
    }
});
