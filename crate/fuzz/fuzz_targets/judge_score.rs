#![no_main]

use bitflip_core::harness::parse_score;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Some(s) = parse_score(&text) {
        assert!((0.0..=100.0).contains(&s));
    }
});
