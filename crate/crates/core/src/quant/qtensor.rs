use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Fp4Lut;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Storage format of a quantized weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Signed two's-complement byte per weight.
    Int8,
    /// 4-bit LUT code per weight, one code per byte.
    Fp4,
}

impl Scheme {
    pub fn bits(self) -> u8 {
        match self {
            Scheme::Int8 => 8,
            Scheme::Fp4 => 4,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Scheme::Int8 => 0,
            Scheme::Fp4 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Scheme::Int8),
            1 => Some(Scheme::Fp4),
            _ => None,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int8" => Ok(Scheme::Int8),
            "fp4" => Ok(Scheme::Fp4),
            _ => Err(Error::Input(format!("unknown scheme `{s}` (int8|fp4)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Int8 => "int8",
            Scheme::Fp4 => "fp4",
        })
    }
}

/// A 2-D weight matrix stored as integer codes with one scale per row.
///
/// INT8 codes are kept as their two's-complement byte so a bit flip is a
/// plain XOR on the stored value.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    scheme: Scheme,
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    scales: Vec<f64>,
    lut: Fp4Lut,
}

/// Immutable copy of a tensor's codes and scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSnapshot {
    scheme: Scheme,
    rows: usize,
    cols: usize,
    codes: Arc<[u8]>,
    scales: Arc<[f64]>,
}

fn rows_cols(w: &Tensor) -> Result<(usize, usize)> {
    match *w.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Dimension(format!(
            "quantization expects a 2-D tensor, got {:?}",
            w.shape()
        ))),
    }
}

fn row_absmax(row: &[f64]) -> f64 {
    row.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Per-row symmetric absmax INT8: `scale = max|row| / 127`, codes clamped to
/// `[-127, 127]`; an all-zero row gets scale 1.
pub fn quantize_int8(w: &Tensor) -> Result<QuantizedTensor> {
    let (rows, cols) = rows_cols(w)?;
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cannot quantize non-finite weights".into()));
    }
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let amax = row_absmax(row);
        let scale = if amax > 0.0 { amax / 127.0 } else { 1.0 };
        scales.push(scale);
        codes.extend(
            row.iter()
                .map(|v| ((v / scale).round().clamp(-127.0, 127.0) as i8) as u8),
        );
    }
    Ok(QuantizedTensor {
        scheme: Scheme::Int8,
        rows,
        cols,
        codes,
        scales,
        lut: Fp4Lut::default(),
    })
}

/// Per-row absmax FP4: `scale = max|row| / max|lut|`, each weight mapped to
/// the nearest LUT entry; an all-zero row gets scale 1.
pub fn quantize_fp4(w: &Tensor, lut: &Fp4Lut) -> Result<QuantizedTensor> {
    let (rows, cols) = rows_cols(w)?;
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cannot quantize non-finite weights".into()));
    }
    let top = lut.max_abs();
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let amax = row_absmax(row);
        let scale = if amax > 0.0 { amax / top } else { 1.0 };
        scales.push(scale);
        codes.extend(row.iter().map(|v| lut.nearest(v / scale)));
    }
    Ok(QuantizedTensor {
        scheme: Scheme::Fp4,
        rows,
        cols,
        codes,
        scales,
        lut: *lut,
    })
}

/// Quantizes with the given scheme; `lut` is only used for FP4.
pub fn quantize(w: &Tensor, scheme: Scheme, lut: &Fp4Lut) -> Result<QuantizedTensor> {
    match scheme {
        Scheme::Int8 => quantize_int8(w),
        Scheme::Fp4 => quantize_fp4(w, lut),
    }
}

/// `code * scale` (INT8) or `lut[code] * scale` (FP4).
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(q.codes.len());
    for i in 0..q.codes.len() {
        data.push(q.value(i)?);
    }
    Tensor::new(vec![q.rows, q.cols], data)
}

impl QuantizedTensor {
    /// Assembles a tensor from raw parts, validating every invariant.
    pub fn from_parts(
        scheme: Scheme,
        rows: usize,
        cols: usize,
        codes: Vec<u8>,
        scales: Vec<f64>,
        lut: Fp4Lut,
    ) -> Result<Self> {
        if rows.checked_mul(cols) != Some(codes.len()) {
            return Err(Error::Corruption(format!(
                "{} codes for a {rows}x{cols} tensor",
                codes.len()
            )));
        }
        if scales.len() != rows {
            return Err(Error::Corruption(format!(
                "{} scales for {rows} rows",
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Corruption(format!("invalid scale {s}")));
        }
        if scheme == Scheme::Fp4 {
            if let Some(c) = codes.iter().find(|&&c| c > 15) {
                return Err(Error::Corruption(format!("FP4 code {c} out of range")));
            }
        }
        Ok(Self {
            scheme,
            rows,
            cols,
            codes,
            scales,
            lut,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn raw_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn lut(&self) -> &Fp4Lut {
        &self.lut
    }

    pub fn raw_code(&self, flat_index: usize) -> Result<u8> {
        self.codes.get(flat_index).copied().ok_or_else(|| {
            Error::Input(format!(
                "flat index {flat_index} out of range for {} weights",
                self.codes.len()
            ))
        })
    }

    /// Interprets a stored byte as a signed INT8 value or an FP4 code.
    pub fn interpret(&self, raw: u8) -> i32 {
        match self.scheme {
            Scheme::Int8 => i32::from(raw as i8),
            Scheme::Fp4 => i32::from(raw),
        }
    }

    /// Numeric code at `flat_index` (signed for INT8).
    pub fn code(&self, flat_index: usize) -> Result<i32> {
        Ok(self.interpret(self.raw_code(flat_index)?))
    }

    /// Scale-free codec value of a stored byte.
    pub fn codec_value(&self, raw: u8) -> Result<f64> {
        match self.scheme {
            Scheme::Int8 => Ok(f64::from(raw as i8)),
            Scheme::Fp4 if raw <= 15 => Ok(self.lut.value(raw)),
            Scheme::Fp4 => Err(Error::Corruption(format!("FP4 code {raw} out of range"))),
        }
    }

    /// Dequantized value at `flat_index`.
    pub fn value(&self, flat_index: usize) -> Result<f64> {
        let raw = self.raw_code(flat_index)?;
        let v = self.codec_value(raw)? * self.scales[flat_index / self.cols];
        // -0.0 from the FP4 sign bit is numerically zero.
        Ok(v + 0.0)
    }

    /// XORs bit `bit` of the stored code. Scales are never touched.
    pub(crate) fn xor_bit(&mut self, flat_index: usize, bit: u8) -> Result<(u8, u8)> {
        if bit >= self.scheme.bits() {
            return Err(Error::Input(format!(
                "bit {bit} out of range for {}-bit codes",
                self.scheme.bits()
            )));
        }
        let before = self.raw_code(flat_index)?;
        let after = before ^ (1 << bit);
        self.codes[flat_index] = after;
        Ok((before, after))
    }

    pub fn snapshot(&self) -> QuantSnapshot {
        QuantSnapshot {
            scheme: self.scheme,
            rows: self.rows,
            cols: self.cols,
            codes: self.codes.as_slice().into(),
            scales: self.scales.as_slice().into(),
        }
    }

    /// Makes codes and scales bit-identical to `snap`.
    pub fn restore(&mut self, snap: &QuantSnapshot) -> Result<()> {
        if snap.scheme != self.scheme || snap.rows != self.rows || snap.cols != self.cols {
            return Err(Error::State(format!(
                "snapshot {}x{} {} does not match tensor {}x{} {}",
                snap.rows, snap.cols, snap.scheme, self.rows, self.cols, self.scheme
            )));
        }
        self.codes.copy_from_slice(&snap.codes);
        self.scales.copy_from_slice(&snap.scales);
        Ok(())
    }

    pub fn hash_into<H: Hasher>(&self, h: &mut H) {
        self.scheme.hash(h);
        self.rows.hash(h);
        self.cols.hash(h);
        self.codes.hash(h);
        for s in &self.scales {
            s.to_bits().hash(h);
        }
    }

    /// Hash of the scheme, shape, codes and scale bits.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash_into(&mut h);
        h.finish()
    }
}

impl QuantSnapshot {
    pub fn raw_codes(&self) -> &[u8] {
        &self.codes
    }
}
