#![no_main]

use bitflip_core::keytoken::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::parse(text) {
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
        let ids = v.tokenize(text);
        assert!(ids.iter().all(|&i| i < v.len()));
        let _ = v.detokenize(&ids);
    }
});
