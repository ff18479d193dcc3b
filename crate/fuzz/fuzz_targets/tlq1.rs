#![no_main]

use bitflip_core::quant::{decode_quantized, encode_quantized};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(qm) = decode_quantized(data) {
        let again = decode_quantized(&encode_quantized(&qm).unwrap()).unwrap();
        assert_eq!(again.checksum(), qm.checksum());
    }
});
