use serde::{Deserialize, Serialize};

use super::{Fp4Lut, QuantizedTensor, Scheme};
use crate::error::Result;
use crate::model::ModuleId;

/// How the bit to flip inside one weight's code is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitRule {
    /// Bit whose inversion changes the decoded value the most.
    #[default]
    MaxDeviation,
    /// Always the top bit of the code (the sign bit for both schemes).
    Msb,
}

impl std::str::FromStr for BitRule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-deviation" => Ok(BitRule::MaxDeviation),
            "msb" => Ok(BitRule::Msb),
            _ => Err(crate::Error::Input(format!(
                "unknown bit rule `{s}` (max-deviation|msb)"
            ))),
        }
    }
}

/// Bit that maximizes `|value(code ^ (1 << b)) - value(code)|`.
///
/// INT8 always answers 7: the sign bit moves a two's-complement code by 128,
/// more than any other bit can. FP4 brute-forces the four bits against `lut`,
/// breaking ties toward the lower bit. `code` is the stored byte.
pub fn select_flip_bit(code: u8, scheme: Scheme, lut: &Fp4Lut) -> u8 {
    match scheme {
        Scheme::Int8 => 7,
        Scheme::Fp4 => {
            let code = code & 0x0f;
            let here = lut.value(code);
            let mut best = 0u8;
            let mut best_delta = -1.0;
            for b in 0..4u8 {
                let delta = (lut.value(code ^ (1 << b)) - here).abs();
                if delta > best_delta {
                    best = b;
                    best_delta = delta;
                }
            }
            best
        }
    }
}

pub fn select_flip_bit_with(rule: BitRule, code: u8, scheme: Scheme, lut: &Fp4Lut) -> u8 {
    match rule {
        BitRule::MaxDeviation => select_flip_bit(code, scheme, lut),
        BitRule::Msb => scheme.bits() - 1,
    }
}

/// Audit entry for one applied bit flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub module: ModuleId,
    pub flat_index: usize,
    /// 0 is the least significant bit.
    pub bit_index: u8,
    /// Numeric code (signed for INT8, 0..=15 for FP4).
    pub code_before: i32,
    pub code_after: i32,
    pub value_before: f64,
    pub value_after: f64,
}

impl FlipRecord {
    /// Checks `code_after == code_before ^ (1 << bit_index)` at the scheme's
    /// width.
    pub fn xor_consistent(&self, scheme: Scheme) -> bool {
        if self.bit_index >= scheme.bits() {
            return false;
        }
        let mask: i32 = (1 << scheme.bits()) - 1;
        (self.code_before & mask) ^ (1 << self.bit_index) == (self.code_after & mask)
    }
}

/// Flips one bit of one stored code and reports the change. The row scale
/// is left untouched.
pub fn apply_flip(
    q: &mut QuantizedTensor,
    module: ModuleId,
    flat_index: usize,
    bit_index: u8,
) -> Result<FlipRecord> {
    let value_before = q.value(flat_index)?;
    let (before, after) = q.xor_bit(flat_index, bit_index)?;
    let value_after = q.value(flat_index)?;
    Ok(FlipRecord {
        module,
        flat_index,
        bit_index,
        code_before: q.interpret(before),
        code_after: q.interpret(after),
        value_before,
        value_after,
    })
}
