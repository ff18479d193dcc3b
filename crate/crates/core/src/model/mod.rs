//! The victim: a tiny decoder-only transformer with per-module weight access.

mod checkpoint;
mod config;
mod generate;
mod module_id;
mod train;
mod transformer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use generate::{argmax, generate_greedy};
pub use module_id::{ModuleId, ModuleKind};
pub use train::{dataset_nll, train_toy, TrainOptions, TrainOutcome};
pub use transformer::{Bindings, TinyModel};

pub(crate) use transformer::{module_shape, param_shapes};

pub(crate) mod checkpoint_internals {
    pub(crate) use super::checkpoint::{checked_param_count, read_config, write_config};
}

/// Rewrites `model` so every position predicts `token`: constant embeddings,
/// silenced residual branches and an unembedding that only scores `token`.
#[cfg(test)]
pub(crate) fn force_constant_output(model: &mut TinyModel, token: usize) {
    let ids: Vec<ModuleId> = model.module_ids().collect();
    for id in ids {
        if matches!(id.kind, ModuleKind::Output | ModuleKind::Down) {
            model.weight_mut(id).unwrap().data_mut().fill(0.0);
        }
    }
    let mut params = model.params_mut();
    params[0].data_mut().fill(1.0);
    params[1].data_mut().fill(0.0);
    let unemb = params.pop().unwrap();
    let vocab = unemb.cols();
    for (i, w) in unemb.data_mut().iter_mut().enumerate() {
        *w = if i % vocab == token { 1.0 } else { 0.0 };
    }
}
