use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign-magnitude 4-bit lookup table.
///
/// Bit 3 of a code is the sign; bits 2..0 index `magnitudes`. The default
/// magnitudes follow the bitsandbytes FP4 layout: `0000 -> 0`,
/// `0001 -> 0.0625`, `0010 -> 8`, `0100 -> 4`, `1000 -> -0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fp4Lut {
    magnitudes: [f64; 8],
}

pub const DEFAULT_FP4_MAGNITUDES: [f64; 8] = [0.0, 0.0625, 8.0, 12.0, 4.0, 6.0, 2.0, 3.0];

impl Default for Fp4Lut {
    fn default() -> Self {
        Self {
            magnitudes: DEFAULT_FP4_MAGNITUDES,
        }
    }
}

impl Fp4Lut {
    /// Builds a table from the eight sign-clear magnitudes.
    ///
    /// Magnitudes must be finite and non-negative, entry 0 must be zero, and
    /// at least one entry must be non-zero.
    pub fn from_magnitudes(magnitudes: [f64; 8]) -> Result<Self> {
        if magnitudes.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Input("LUT magnitudes must be finite and >= 0".into()));
        }
        if magnitudes[0] != 0.0 {
            return Err(Error::Input("LUT code 0 must map to 0".into()));
        }
        if magnitudes.iter().all(|&m| m == 0.0) {
            return Err(Error::Input("LUT must contain a non-zero magnitude".into()));
        }
        Ok(Self { magnitudes })
    }

    /// Builds a table from all 16 entries, checking the sign-bit symmetry.
    pub fn from_values(values: [f64; 16]) -> Result<Self> {
        let mut mags = [0.0; 8];
        for i in 0..8 {
            if values[i] < 0.0 || values[i | 8] != -values[i] {
                return Err(Error::Input(format!(
                    "LUT entries {i} and {} are not a sign-magnitude pair",
                    i | 8
                )));
            }
            mags[i] = values[i];
        }
        Self::from_magnitudes(mags)
    }

    pub fn magnitudes(&self) -> &[f64; 8] {
        &self.magnitudes
    }

    /// Value of a 4-bit code. Only the low four bits are read.
    pub fn value(&self, code: u8) -> f64 {
        let m = self.magnitudes[(code & 0b0111) as usize];
        if code & 0b1000 != 0 {
            -m
        } else {
            m
        }
    }

    pub fn values(&self) -> [f64; 16] {
        std::array::from_fn(|c| self.value(c as u8))
    }

    pub fn max_abs(&self) -> f64 {
        self.magnitudes.iter().cloned().fold(0.0, f64::max)
    }

    /// Code whose value is nearest to `x`; ties go to the lower code.
    pub fn nearest(&self, x: f64) -> u8 {
        let mut best = 0u8;
        let mut best_err = f64::INFINITY;
        for c in 0..16u8 {
            let err = (self.value(c) - x).abs();
            if err < best_err {
                best = c;
                best_err = err;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_matches_published_entries() {
        let lut = Fp4Lut::default();
        assert_eq!(lut.value(0b0000), 0.0);
        assert_eq!(lut.value(0b0001), 0.0625);
        assert_eq!(lut.value(0b0010), 8.0);
        assert_eq!(lut.value(0b0100), 4.0);
        assert_eq!(lut.value(0b1000), 0.0);
        assert!(lut.value(0b1000).is_sign_negative());
    }

    #[test]
    fn sign_bit_negates() {
        let lut = Fp4Lut::default();
        for c in 0..8u8 {
            assert_eq!(lut.value(c | 8), -lut.value(c));
        }
        assert_eq!(Fp4Lut::from_values(lut.values()).unwrap(), lut);
    }

    #[test]
    fn invalid_tables() {
        assert!(Fp4Lut::from_magnitudes([1.0; 8]).is_err());
        assert!(Fp4Lut::from_magnitudes([0.0; 8]).is_err());
        let mut m = DEFAULT_FP4_MAGNITUDES;
        m[3] = f64::NAN;
        assert!(Fp4Lut::from_magnitudes(m).is_err());
        let mut v = Fp4Lut::default().values();
        v[9] = 1.0;
        assert!(Fp4Lut::from_values(v).is_err());
    }

    #[test]
    fn nearest_prefers_lower_code_on_ties() {
        let lut = Fp4Lut::default();
        assert_eq!(lut.nearest(0.0), 0);
        assert_eq!(lut.nearest(-0.0), 0);
        assert_eq!(lut.nearest(10.0), 2); // 8 and 12 equidistant
        assert_eq!(lut.nearest(-11.0), 0b1011);
    }
}
