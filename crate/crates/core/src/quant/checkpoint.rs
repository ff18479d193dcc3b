//! Quantized checkpoint (`TLQ1`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TLQ1"
//! u8  scheme               0 = INT8, 1 = FP4
//! u32 x 7                  model config, as in TLM1
//! f64 x 16                 LUT values (FP4 only)
//! f64 ...                  token embedding, position embedding, unembedding
//! u32 module_count
//! per module, scan order:  u32 layer, u8 kind, u32 rows, u32 cols, f64 x rows scales
//! u8 ...                   raw codes of every module, same order, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Fp4Lut, QuantizedModel, QuantizedTensor, Scheme};
use crate::autodiff::Tensor;
use crate::bytes::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::model::checkpoint_internals::{checked_param_count, read_config, write_config};
use crate::model::{ModuleId, ModuleKind, TinyModel};

pub const MAGIC: &[u8; 4] = b"TLQ1";

pub fn encode_quantized(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let model = qm.view();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(qm.scheme().tag());
    write_config(&mut out, model.config())?;
    if qm.scheme() == Scheme::Fp4 {
        put_f64s(&mut out, &qm.lut().values());
    }
    let params = model.params();
    for p in [params[0], params[1], params[params.len() - 1]] {
        put_f64s(&mut out, p.data());
    }
    put_u32(&mut out, to_u32(qm.modules().len(), "module count")?);
    for (id, q) in qm.modules() {
        let [rows, cols] = q.shape();
        put_u32(&mut out, to_u32(id.layer, "layer")?);
        out.push(id.kind.index() as u8);
        put_u32(&mut out, to_u32(rows, "rows")?);
        put_u32(&mut out, to_u32(cols, "cols")?);
        put_f64s(&mut out, q.scales());
    }
    for q in qm.modules().values() {
        out.extend_from_slice(q.raw_codes());
    }
    Ok(out)
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let tag = r.u8()?;
    let scheme =
        Scheme::from_tag(tag).ok_or_else(|| Error::Corruption(format!("unknown scheme tag {tag}")))?;
    let config = read_config(&mut r)?;
    checked_param_count(&config)?;
    let lut = match scheme {
        Scheme::Fp4 => {
            let vals = r.f64s(16)?;
            Fp4Lut::from_values(vals.try_into().expect("16 values"))
                .map_err(|e| Error::Corruption(format!("bad LUT: {e}")))?
        }
        Scheme::Int8 => Fp4Lut::default(),
    };

    let float = |r: &mut Reader<'_>, rows: usize, cols: usize| -> Result<Tensor> {
        Tensor::new(vec![rows, cols], r.f64s(rows * cols)?)
            .map_err(|e| Error::Corruption(format!("bad float weights: {e}")))
    };
    let tok = float(&mut r, config.vocab_size, config.d_model)?;
    let pos = float(&mut r, config.context_len, config.d_model)?;
    let unemb = float(&mut r, config.d_model, config.vocab_size)?;

    let count = r.u32()? as usize;
    let expected: Vec<ModuleId> = ModuleId::all(config.n_layers).collect();
    if count != expected.len() {
        return Err(Error::Corruption(format!(
            "{count} modules listed, model has {}",
            expected.len()
        )));
    }
    let mut headers = Vec::with_capacity(count);
    for &id in &expected {
        let layer = r.u32()? as usize;
        let kind = ModuleKind::from_index(r.u8()? as usize)
            .ok_or_else(|| Error::Corruption("unknown module kind".into()))?;
        if ModuleId::new(layer, kind) != id {
            return Err(Error::Corruption(format!(
                "module table out of order: found layer{layer}.{}, expected {id}",
                kind.name()
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let want = crate::model::module_shape(&config, kind);
        if [rows, cols] != want {
            return Err(Error::Corruption(format!(
                "module {id} is {rows}x{cols}, expected {}x{}",
                want[0], want[1]
            )));
        }
        let scales = r.f64s(rows)?;
        headers.push((id, rows, cols, scales));
    }
    let mut modules = BTreeMap::new();
    for (id, rows, cols, scales) in headers {
        let codes = r.take(rows * cols)?.to_vec();
        modules.insert(id, QuantizedTensor::from_parts(scheme, rows, cols, codes, scales, lut)?);
    }
    r.finish()?;

    let mut params = vec![tok, pos];
    for id in &expected {
        let [rows, cols] = crate::model::module_shape(&config, id.kind);
        params.push(Tensor::zeros(vec![rows, cols]));
    }
    params.push(unemb);
    let view = TinyModel::from_params(config, params)?;
    QuantizedModel::from_parts(view, modules, scheme, lut)
}

pub fn save_quantized(qm: &QuantizedModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_quantized(qm)?)?;
    Ok(())
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    decode_quantized(&std::fs::read(path)?)
}
