//! Float checkpoint (`TLM1`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TLM1"
//! u32 vocab_size, d_model, n_layers, n_heads, d_ff, context_len, seed
//! f64 data of every parameter in TinyModel::params order, row-major
//! ```

use std::path::Path;

use super::{param_shapes, ModelConfig, TinyModel};
use crate::autodiff::Tensor;
use crate::bytes::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TLM1";

/// Upper bound on parameters a decoder will accept (~1 GiB of f64).
pub(crate) const MAX_PARAMS: usize = 1 << 27;

pub(crate) fn write_config(out: &mut Vec<u8>, c: &ModelConfig) -> Result<()> {
    for (name, v) in [
        ("vocab_size", c.vocab_size),
        ("d_model", c.d_model),
        ("n_layers", c.n_layers),
        ("n_heads", c.n_heads),
        ("d_ff", c.d_ff),
        ("context_len", c.context_len),
    ] {
        put_u32(out, to_u32(v, name)?);
    }
    put_u32(out, c.seed);
    Ok(())
}

pub(crate) fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        context_len: dims[5],
        seed: r.u32()?,
    };
    config
        .validate()
        .map_err(|e| Error::Corruption(format!("invalid config: {e}")))?;
    Ok(config)
}

/// Total parameter count, or a corruption error if it is implausibly large.
pub(crate) fn checked_param_count(config: &ModelConfig) -> Result<usize> {
    let mut total = 0usize;
    for [r, c] in param_shapes(config) {
        total = r
            .checked_mul(c)
            .and_then(|n| total.checked_add(n))
            .filter(|&n| n <= MAX_PARAMS)
            .ok_or_else(|| Error::Corruption("parameter count exceeds decoder limit".into()))?;
    }
    Ok(total)
}

pub fn encode_checkpoint(model: &TinyModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_config(&mut out, model.config())?;
    for p in model.params() {
        put_f64s(&mut out, p.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TinyModel> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let config = read_config(&mut r)?;
    let total = checked_param_count(&config)?;
    if total.saturating_mul(8) != r.remaining() {
        return Err(Error::Corruption(format!(
            "expected {} bytes of weights, found {}",
            total * 8,
            r.remaining()
        )));
    }
    let params = param_shapes(&config)
        .into_iter()
        .map(|[rows, cols]| {
            let data = r.f64s(rows * cols)?;
            Tensor::new(vec![rows, cols], data)
                .map_err(|e| Error::Corruption(format!("bad weights: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    TinyModel::from_params(config, params)
}

pub fn save_checkpoint(model: &TinyModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinyModel> {
    decode_checkpoint(&std::fs::read(path)?)
}
