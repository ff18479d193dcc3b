#![no_main]

use bitflip_core::quant::{parse_flip_log, write_flip_log, Scheme};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for scheme in [Scheme::Int8, Scheme::Fp4] {
        if let Ok(entries) = parse_flip_log(text, scheme) {
            let mut out = Vec::new();
            write_flip_log(&mut out, &entries).unwrap();
            let back = parse_flip_log(std::str::from_utf8(&out).unwrap(), scheme).unwrap();
            assert_eq!(back.len(), entries.len());
        }
    }
});
