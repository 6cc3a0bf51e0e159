#![no_main]

use hban_core::channel::{Scenario, SystemConfig};
use hban_core::codebook::Codebook;
use hban_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_toml(text) {
            let _ = cfg.validate();
            let _ = cfg.hash();
        }
        let _ = SystemConfig::from_toml(text);
        let _ = Scenario::from_toml(text);
        let _ = Codebook::from_toml(text);
    }
});
