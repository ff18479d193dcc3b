//! Simulated fault layer: INT8 and FP4-LUT codecs, bit selection, flip
//! application and bit-exact rollback.

mod checkpoint;
mod flip;
mod fliplog;
mod lut;
mod qmodel;
mod qtensor;

pub use checkpoint::{decode_quantized, encode_quantized, load_quantized, save_quantized};
pub use flip::{apply_flip, select_flip_bit, select_flip_bit_with, BitRule, FlipRecord};
pub use fliplog::{parse_flip_log, write_flip_log, FlipLogEntry};
pub use lut::{Fp4Lut, DEFAULT_FP4_MAGNITUDES};
pub use qmodel::{ModelSnapshot, QuantizedModel};
pub use qtensor::{
    dequantize, quantize, quantize_fp4, quantize_int8, QuantSnapshot, QuantizedTensor, Scheme,
};
