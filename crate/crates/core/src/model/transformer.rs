use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModuleId, ModuleKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-6;

/// Decoder-only transformer: pre-norm blocks of causal multi-head attention
/// followed by a SiLU-gated MLP, with learned positions and an untied
/// unembedding.
///
/// Parameter order (used by checkpoints and [`TinyModel::params`]):
/// token embedding, position embedding, then for each layer the seven
/// projections in [`ModuleKind::ALL`] order, then the unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    config: ModelConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<[Tensor; 7]>,
    unembedding: Tensor,
}

/// Tape handles for every parameter, in [`TinyModel::params`] order.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn token_embedding(&self) -> Var {
        self.vars[0]
    }

    fn position_embedding(&self) -> Var {
        self.vars[1]
    }

    fn module(&self, layer: usize, kind: ModuleKind) -> Var {
        self.vars[2 + layer * 7 + kind.index()]
    }

    fn unembedding(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }

    pub fn module_var(&self, id: ModuleId) -> Var {
        self.module(id.layer, id.kind)
    }
}

pub(crate) fn module_shape(config: &ModelConfig, kind: ModuleKind) -> [usize; 2] {
    let (d, f) = (config.d_model, config.d_ff);
    match kind {
        ModuleKind::Query | ModuleKind::Key | ModuleKind::Value | ModuleKind::Output => [d, d],
        ModuleKind::Up | ModuleKind::Gate => [d, f],
        ModuleKind::Down => [f, d],
    }
}

/// Shapes of every parameter in checkpoint order.
pub(crate) fn param_shapes(config: &ModelConfig) -> Vec<[usize; 2]> {
    let mut shapes = vec![
        [config.vocab_size, config.d_model],
        [config.context_len, config.d_model],
    ];
    for _ in 0..config.n_layers {
        shapes.extend(ModuleKind::ALL.iter().map(|&k| module_shape(config, k)));
    }
    shapes.push([config.d_model, config.vocab_size]);
    shapes
}

impl TinyModel {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(config.seed));
        let mut init = |shape: [usize; 2], std: f64| -> Tensor {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..shape[0] * shape[1]).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("finite init")
        };
        let d = config.d_model as f64;
        let residual_std = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let token_embedding = init([config.vocab_size, config.d_model], 1.0);
        let position_embedding = init([config.context_len, config.d_model], 0.3);
        let layers = (0..config.n_layers)
            .map(|_| {
                ModuleKind::ALL.map(|kind| {
                    let shape = module_shape(&config, kind);
                    let mut std = 1.0 / (shape[0] as f64).sqrt();
                    if matches!(kind, ModuleKind::Output | ModuleKind::Down) {
                        std *= residual_std;
                    }
                    init(shape, std)
                })
            })
            .collect();
        let unembedding = init([config.d_model, config.vocab_size], 1.0 / d.sqrt());
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }

    /// Assembles a model from tensors in [`TinyModel::params`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if params.len() != shapes.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s {
                return Err(Error::Dimension(format!(
                    "parameter {i} has shape {:?}, expected {s:?}",
                    p.shape()
                )));
            }
        }
        let mut it = params.into_iter();
        let token_embedding = it.next().expect("length checked");
        let position_embedding = it.next().expect("length checked");
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let block: Vec<Tensor> = it.by_ref().take(7).collect();
            layers.push(block.try_into().expect("length checked"));
        }
        let unembedding = it.next().expect("length checked");
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for block in &self.layers {
            out.extend(block.iter());
        }
        out.push(&self.unembedding);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for block in &mut self.layers {
            out.extend(block.iter_mut());
        }
        out.push(&mut self.unembedding);
        out
    }

    pub fn module_ids(&self) -> impl Iterator<Item = ModuleId> {
        ModuleId::all(self.config.n_layers)
    }

    fn check_module(&self, id: ModuleId) -> Result<()> {
        if id.layer >= self.config.n_layers {
            return Err(Error::Input(format!(
                "module {id} out of range for {} layers",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    pub fn weight(&self, id: ModuleId) -> Result<&Tensor> {
        self.check_module(id)?;
        Ok(&self.layers[id.layer][id.kind.index()])
    }

    pub fn weight_mut(&mut self, id: ModuleId) -> Result<&mut Tensor> {
        self.check_module(id)?;
        Ok(&mut self.layers[id.layer][id.kind.index()])
    }

    pub fn unembedding_mut(&mut self) -> &mut Tensor {
        &mut self.unembedding
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.params().into_iter().map(|p| tape.leaf(p)).collect(),
        }
    }

    fn check_input(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > self.config.context_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds context length {}",
                ids.len(),
                self.config.context_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records a forward pass and returns the `[len, vocab]` logits node.
    pub fn forward_on_tape(&self, tape: &mut Tape, b: &Bindings, ids: &[usize]) -> Result<Var> {
        self.check_input(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather(b.token_embedding(), ids)?;
        let pos = tape.gather(b.position_embedding(), &positions)?;
        let mut x = tape.add(tok, pos)?;
        for layer in 0..self.config.n_layers {
            let h = tape.rms_norm(x, NORM_EPS)?;
            let q = tape.matmul(h, b.module(layer, ModuleKind::Query))?;
            let k = tape.matmul(h, b.module(layer, ModuleKind::Key))?;
            let v = tape.matmul(h, b.module(layer, ModuleKind::Value))?;
            let a = tape.causal_attention(q, k, v, self.config.n_heads)?;
            let o = tape.matmul(a, b.module(layer, ModuleKind::Output))?;
            x = tape.add(x, o)?;

            let h = tape.rms_norm(x, NORM_EPS)?;
            let gate = tape.matmul(h, b.module(layer, ModuleKind::Gate))?;
            let up = tape.matmul(h, b.module(layer, ModuleKind::Up))?;
            let act = tape.silu(gate);
            let m = tape.mul(act, up)?;
            let down = tape.matmul(m, b.module(layer, ModuleKind::Down))?;
            x = tape.add(x, down)?;
        }
        let h = tape.rms_norm(x, NORM_EPS)?;
        tape.matmul(h, b.unembedding())
    }

    /// Pre-softmax logits, one row per input position.
    pub fn forward_logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &b, ids)?;
        Ok(tape.to_tensor(logits))
    }

    /// Copies gradients from a differentiated tape into each parameter's grad
    /// slot. Parameters that did not reach the root keep their old slot.
    pub fn absorb_grads(&mut self, tape: &Tape, b: &Bindings) -> Result<()> {
        if !tape.is_backpropagated() {
            return Err(Error::State("backward has not run on this tape".into()));
        }
        for (p, &v) in self.params_mut().into_iter().zip(b.vars()) {
            if let Some(g) = tape.grad(v) {
                p.set_grad(g.to_vec())?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Gradient of the last absorbed loss for every attackable module.
    ///
    /// A module whose weights did not reach the loss gets an all-zero entry.
    /// Fails if no gradient has been absorbed at all.
    pub fn grad_by_module(&self) -> Result<BTreeMap<ModuleId, Tensor>> {
        if self.params().iter().all(|p| p.grad().is_none()) {
            return Err(Error::State("no gradients: run backward first".into()));
        }
        self.module_ids()
            .map(|id| {
                let w = self.weight(id)?;
                let g = w
                    .grad()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; w.numel()]);
                Ok((id, Tensor::new(w.shape().to_vec(), g)?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyModel {
        TinyModel::new(ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            context_len: 10,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = small();
        let a = m.forward_logits(&[1, 2, 3, 4]).unwrap();
        assert_eq!(a.shape(), &[4, 11]);
        let b = m.forward_logits(&[1, 2, 3, 4]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn input_errors() {
        let m = small();
        assert!(matches!(m.forward_logits(&[11]), Err(Error::Input(_))));
        assert!(matches!(m.forward_logits(&[0; 11]), Err(Error::Input(_))));
        assert!(matches!(m.forward_logits(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn prefix_logits_match_truncated_input() {
        let m = small();
        let ids = [5, 1, 9, 9, 0, 2, 7];
        let full = m.forward_logits(&ids).unwrap();
        for i in 0..ids.len() {
            let part = m.forward_logits(&ids[..=i]).unwrap();
            for r in 0..=i {
                for (x, y) in full.row(r).iter().zip(part.row(r)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn module_addressing_is_a_bijection() {
        let mut m = small();
        let ids: Vec<_> = m.module_ids().collect();
        assert_eq!(ids.len(), 14);
        for (n, &id) in ids.iter().enumerate() {
            m.weight_mut(id).unwrap().data_mut()[0] = 1000.0 + n as f64;
        }
        for (n, &id) in ids.iter().enumerate() {
            assert_eq!(m.weight(id).unwrap().data()[0], 1000.0 + n as f64);
        }
        assert!(m.weight(ModuleId::new(2, ModuleKind::Up)).is_err());
    }

    #[test]
    fn grad_by_module_requires_backward() {
        let m = small();
        assert!(matches!(m.grad_by_module(), Err(Error::State(_))));
    }

    #[test]
    fn from_params_round_trip() {
        let m = small();
        let params = m.params().into_iter().cloned().collect();
        assert_eq!(TinyModel::from_params(*m.config(), params).unwrap(), m);
        assert!(TinyModel::from_params(*m.config(), vec![]).is_err());
    }
}
