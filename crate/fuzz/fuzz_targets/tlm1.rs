#![no_main]

use bitflip_core::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(model) = decode_checkpoint(data) {
        assert_eq!(encode_checkpoint(&model).unwrap(), data);
    }
});
