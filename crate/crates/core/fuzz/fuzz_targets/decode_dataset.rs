#![no_main]

use hban_core::channel::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        let again = decode_dataset(&encode_dataset(&ds)).expect("re-encoded dataset decodes");
        assert_eq!(encode_dataset(&again), encode_dataset(&ds));
    }
});
