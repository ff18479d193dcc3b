#![no_main]

use bitflip_core::harness::PromptSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = PromptSet::parse(text) {
        assert!(p.n_q() >= 1);
        assert_eq!(p.n_q(), p.prompts().len());
        let _ = p.take(1).unwrap();
    }
});
