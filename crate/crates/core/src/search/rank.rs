use std::collections::BTreeSet;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModuleId;
use crate::quant::{select_flip_bit_with, BitRule, QuantizedTensor};

/// A (module, flat index, bit) triple that has already been committed.
pub type FlipKey = (ModuleId, usize, u8);

fn check_shapes(grad: &Tensor, codes: &QuantizedTensor) -> Result<()> {
    let [r, c] = codes.shape();
    if grad.shape() != [r, c] {
        return Err(Error::Dimension(format!(
            "gradient {:?} vs codes {:?}",
            grad.shape(),
            codes.shape()
        )));
    }
    Ok(())
}

/// Every flat index ordered by `|grad|` descending, ties by lower index.
fn order_by_magnitude(grad: &Tensor) -> Vec<usize> {
    let g = grad.data();
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    idx
}

/// Flat indices of the `k` largest `|grad|` entries.
///
/// Ties go to the lower index; `k` larger than the tensor returns every
/// index in ranked order.
pub fn rank_topk(grad: &Tensor, codes: &QuantizedTensor, k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::Input("top-k must be at least 1".into()));
    }
    check_shapes(grad, codes)?;
    let mut idx = order_by_magnitude(grad);
    idx.truncate(k);
    Ok(idx)
}

/// Top-`k` (index, bit) pairs for one module, skipping any pair that was
/// already committed. Flipping such a pair again would undo an earlier
/// iteration, so ranking moves on to the next candidate.
pub fn plan_flips(
    module: ModuleId,
    grad: &Tensor,
    codes: &QuantizedTensor,
    k: usize,
    rule: BitRule,
    committed: &BTreeSet<FlipKey>,
) -> Result<Vec<(usize, u8)>> {
    if k < 1 {
        return Err(Error::Input("top-k must be at least 1".into()));
    }
    check_shapes(grad, codes)?;
    let mut out = Vec::with_capacity(k);
    for i in order_by_magnitude(grad) {
        if out.len() == k {
            break;
        }
        let bit = select_flip_bit_with(rule, codes.raw_code(i)?, codes.scheme(), codes.lut());
        if !committed.contains(&(module, i, bit)) {
            out.push((i, bit));
        }
    }
    Ok(out)
}
