#![no_main]

use bitflip_core::keytoken::{extract_keywords, PosLexicon};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(lex) = PosLexicon::parse(text) {
        let _ = extract_keywords(text, &lex);
    }
});
