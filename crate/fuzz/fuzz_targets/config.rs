#![no_main]

use bitflip_core::harness::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = PipelineConfig::parse(text) {
        let _ = c.validate();
        // NaN learning rates do not compare equal, so only check the parse.
        let _ = PipelineConfig::parse(&c.to_toml()).unwrap();
    }
});
