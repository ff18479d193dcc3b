use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};

use super::{apply_flip, dequantize, quantize, FlipRecord, Fp4Lut, QuantSnapshot, QuantizedTensor, Scheme};
use crate::error::{Error, Result};
use crate::model::{ModuleId, TinyModel};

/// A victim whose attackable modules live as quantized codes.
///
/// `view` is the float model the forward pass runs on: embeddings and the
/// unembedding are the original floats, every module weight is the
/// dequantized value of its codes. Flips and restores keep the two in sync.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    view: TinyModel,
    modules: BTreeMap<ModuleId, QuantizedTensor>,
    scheme: Scheme,
    lut: Fp4Lut,
}

/// Snapshot of every module's codes and scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    modules: BTreeMap<ModuleId, QuantSnapshot>,
}

impl QuantizedModel {
    pub fn quantize(model: &TinyModel, scheme: Scheme, lut: &Fp4Lut) -> Result<Self> {
        let modules = model
            .module_ids()
            .map(|id| Ok((id, quantize(model.weight(id)?, scheme, lut)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_parts(model.clone(), modules, scheme, *lut)
    }

    /// Builds from a float model (module weights are overwritten) and codes.
    pub fn from_parts(
        mut view: TinyModel,
        modules: BTreeMap<ModuleId, QuantizedTensor>,
        scheme: Scheme,
        lut: Fp4Lut,
    ) -> Result<Self> {
        let expected: Vec<ModuleId> = view.module_ids().collect();
        if !modules.keys().copied().eq(expected.iter().copied()) {
            return Err(Error::Input("quantized modules do not match the model layout".into()));
        }
        for (&id, q) in &modules {
            if q.scheme() != scheme {
                return Err(Error::Input(format!("module {id} uses a different scheme")));
            }
            let w = view.weight_mut(id)?;
            if w.shape() != q.shape() {
                return Err(Error::Dimension(format!(
                    "module {id}: codes {:?} vs weight {:?}",
                    q.shape(),
                    w.shape()
                )));
            }
            *w = dequantize(q)?;
        }
        view.clear_grads();
        Ok(Self {
            view,
            modules,
            scheme,
            lut,
        })
    }

    /// The float model the forward pass runs on.
    pub fn view(&self) -> &TinyModel {
        &self.view
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn lut(&self) -> &Fp4Lut {
        &self.lut
    }

    pub fn modules(&self) -> &BTreeMap<ModuleId, QuantizedTensor> {
        &self.modules
    }

    pub fn module(&self, id: ModuleId) -> Result<&QuantizedTensor> {
        self.modules
            .get(&id)
            .ok_or_else(|| Error::Input(format!("unknown module {id}")))
    }

    pub fn apply_flip(&mut self, id: ModuleId, flat_index: usize, bit: u8) -> Result<FlipRecord> {
        let q = self
            .modules
            .get_mut(&id)
            .ok_or_else(|| Error::Input(format!("unknown module {id}")))?;
        let rec = apply_flip(q, id, flat_index, bit)?;
        self.view.weight_mut(id)?.data_mut()[flat_index] = rec.value_after;
        Ok(rec)
    }

    pub fn snapshot(&self, id: ModuleId) -> Result<QuantSnapshot> {
        Ok(self.module(id)?.snapshot())
    }

    pub fn restore(&mut self, id: ModuleId, snap: &QuantSnapshot) -> Result<()> {
        let q = self
            .modules
            .get_mut(&id)
            .ok_or_else(|| Error::Input(format!("unknown module {id}")))?;
        q.restore(snap)?;
        let w = dequantize(q)?;
        *self.view.weight_mut(id)? = w;
        Ok(())
    }

    pub fn snapshot_all(&self) -> ModelSnapshot {
        ModelSnapshot {
            modules: self.modules.iter().map(|(&id, q)| (id, q.snapshot())).collect(),
        }
    }

    pub fn restore_all(&mut self, snap: &ModelSnapshot) -> Result<()> {
        if !snap.modules.keys().eq(self.modules.keys()) {
            return Err(Error::State("snapshot covers a different module set".into()));
        }
        for (&id, s) in &snap.modules {
            self.restore(id, s)?;
        }
        Ok(())
    }

    /// Hash over every module's codes and scales, in scan order.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (id, q) in &self.modules {
            h.write_usize(id.layer);
            h.write_usize(id.kind.index());
            q.hash_into(&mut h);
        }
        h.finish()
    }
}
