//! Progressive bit search over a quantized victim.
//!
//! Each iteration ranks weights by the attack-loss gradient, simulates a
//! top-k flip inside every module, keeps the module with the lowest
//! simulated loss and commits its flips. The loop repeats until the flip
//! budget cannot fit another top-k batch.

mod rank;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::loss::{attack_loss, attack_loss_with_grads, AttackSample, LossMode};
use crate::model::ModuleId;
use crate::quant::{BitRule, FlipRecord, QuantizedModel, Scheme};

pub use rank::{plan_flips, rank_topk, FlipKey};

/// Tolerance for re-checking a committed loss against its simulation.
pub const COMMIT_TOLERANCE: f64 = 1e-9;

/// When ranking gradients are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Recomputed on the attacked model at the start of every iteration.
    #[default]
    PerIteration,
    /// Computed once on the clean model and reused.
    CleanOnce,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-iteration" => Ok(GradientMode::PerIteration),
            "clean-once" => Ok(GradientMode::CleanOnce),
            _ => Err(Error::Input(format!(
                "unknown gradient mode `{s}` (per-iteration|clean-once)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Bits flipped per in-module attack.
    pub top_k: usize,
    /// Total flip budget. Zero runs no iterations.
    pub n_bits: usize,
    /// Attack-dataset size.
    pub n_q: usize,
    pub scheme: Scheme,
    pub loss_mode: LossMode,
    /// Modules eligible for attack; `None` means all.
    pub module_scope: Option<Vec<ModuleId>>,
    pub seed: u64,
    pub bit_rule: BitRule,
    pub gradient_mode: GradientMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            n_bits: 50,
            n_q: 2,
            scheme: Scheme::Int8,
            loss_mode: LossMode::Full,
            module_scope: None,
            seed: 0,
            bit_rule: BitRule::MaxDeviation,
            gradient_mode: GradientMode::PerIteration,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Input("top-k must be at least 1".into()));
        }
        if self.n_bits != 0 && self.n_bits < self.top_k {
            return Err(Error::Input(format!(
                "n-bits {} is below top-k {}",
                self.n_bits, self.top_k
            )));
        }
        if self.n_q < 1 {
            return Err(Error::Input("n-q must be at least 1".into()));
        }
        Ok(())
    }

    /// Iterations the budget allows.
    pub fn iterations(&self) -> usize {
        self.n_bits / self.top_k.max(1)
    }

    fn scope(&self, qm: &QuantizedModel) -> Result<Vec<ModuleId>> {
        match &self.module_scope {
            None => Ok(qm.modules().keys().copied().collect()),
            Some(ids) => {
                let set: BTreeSet<ModuleId> = ids.iter().copied().collect();
                for id in &set {
                    qm.module(*id)?;
                }
                Ok(set.into_iter().collect())
            }
        }
    }
}

/// Outcome of one simulated in-module attack. The flips are not applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleScanResult {
    pub module: ModuleId,
    pub simulated_loss: f64,
    pub flips: Vec<FlipRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub module: ModuleId,
    pub simulated_loss: f64,
}

/// Per-iteration trace for the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// 1-based.
    pub iteration: usize,
    pub loss_before: f64,
    pub scanned: Vec<ScanEntry>,
    pub selected: ModuleId,
    pub committed_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub committed: Vec<FlipRecord>,
    pub iteration: usize,
    /// Committed attack loss after each iteration.
    pub loss_history: Vec<f64>,
    pub baseline_loss: f64,
    pub reports: Vec<IterationReport>,
}

impl SearchState {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(self.baseline_loss)
    }
}

/// Simulates flipping the planned bits of `module`, measures the attack
/// loss forward-only, then restores the module.
///
/// `grad` is this iteration's gradient for the module. Pairs in `committed`
/// are skipped during ranking. A restore that does not reproduce the
/// pre-call checksum is reported as a state error: the experiment can no
/// longer be trusted.
pub fn simulate_module_attack(
    qm: &mut QuantizedModel,
    module: ModuleId,
    grad: &Tensor,
    samples: &[AttackSample],
    config: &AttackConfig,
    committed: &BTreeSet<FlipKey>,
) -> Result<ModuleScanResult> {
    let plan = plan_flips(module, grad, qm.module(module)?, config.top_k, config.bit_rule, committed)?;
    let before = qm.checksum();
    let snap = qm.snapshot(module)?;
    let applied = plan
        .iter()
        .map(|&(i, b)| qm.apply_flip(module, i, b))
        .collect::<Result<Vec<_>>>();
    let loss = match &applied {
        Ok(_) => attack_loss(qm.view(), samples, config.loss_mode).map(|l| l.attack_loss),
        Err(_) => Ok(f64::NAN),
    };
    qm.restore(module, &snap)?;
    if qm.checksum() != before {
        return Err(Error::State(format!("module {module} did not restore cleanly")));
    }
    Ok(ModuleScanResult {
        module,
        flips: applied?,
        simulated_loss: loss?,
    })
}

/// Lowest simulated loss; ties go to the earlier module in scan order.
pub fn select_vulnerable_module(results: &[ModuleScanResult]) -> Result<&ModuleScanResult> {
    results
        .iter()
        .min_by(|a, b| {
            a.simulated_loss
                .total_cmp(&b.simulated_loss)
                .then(a.module.cmp(&b.module))
        })
        .ok_or_else(|| Error::Input("no scan results to select from".into()))
}

fn fresh_gradients(
    qm: &QuantizedModel,
    samples: &[AttackSample],
    mode: LossMode,
) -> Result<(f64, BTreeMap<ModuleId, Tensor>)> {
    let mut model = qm.view().clone();
    let loss = attack_loss_with_grads(&mut model, samples, mode)?;
    Ok((loss.attack_loss, model.grad_by_module()?))
}

/// Runs the progressive search to the end of the budget, committing flips
/// into `qm`.
pub fn run_attack(
    qm: &mut QuantizedModel,
    samples: &[AttackSample],
    config: &AttackConfig,
) -> Result<SearchState> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no attack samples".into()));
    }
    if qm.scheme() != config.scheme {
        return Err(Error::Input(format!(
            "model is {} but the attack expects {}",
            qm.scheme(),
            config.scheme
        )));
    }
    let scope = config.scope(qm)?;
    if scope.is_empty() && config.iterations() > 0 {
        return Err(Error::Input("module scope is empty".into()));
    }

    let baseline_loss = attack_loss(qm.view(), samples, config.loss_mode)?.attack_loss;
    let mut state = SearchState {
        committed: Vec::new(),
        iteration: 0,
        loss_history: Vec::new(),
        baseline_loss,
        reports: Vec::new(),
    };
    let mut done: BTreeSet<FlipKey> = BTreeSet::new();
    let mut clean_grads: Option<BTreeMap<ModuleId, Tensor>> = None;

    while state.committed.len() + config.top_k <= config.n_bits {
        let iteration = state.iteration + 1;
        let (current, grads) = match config.gradient_mode {
            GradientMode::PerIteration => fresh_gradients(qm, samples, config.loss_mode)?,
            GradientMode::CleanOnce => {
                if clean_grads.is_none() {
                    clean_grads = Some(fresh_gradients(qm, samples, config.loss_mode)?.1);
                }
                let loss = attack_loss(qm.view(), samples, config.loss_mode)?.attack_loss;
                (loss, clean_grads.clone().expect("computed above"))
            }
        };

        let scan_checksum = qm.checksum();
        let results = scope
            .iter()
            .map(|&id| simulate_module_attack(qm, id, &grads[&id], samples, config, &done))
            .collect::<Result<Vec<_>>>()?;
        if qm.checksum() != scan_checksum {
            return Err(Error::State(format!("iteration {iteration}: scan left the model dirty")));
        }

        // A module with fewer eligible weights than top_k cannot keep the
        // budget arithmetic exact, so it is scanned but never selected.
        let full: Vec<ModuleScanResult> = results
            .iter()
            .filter(|r| r.flips.len() == config.top_k)
            .cloned()
            .collect();
        let best = select_vulnerable_module(&full)?.clone();
        let improved = best.simulated_loss < current;
        if !improved {
            log::warn!(
                "iteration {iteration}: best module {} does not lower the loss ({} -> {}); committing anyway",
                best.module,
                current,
                best.simulated_loss
            );
        }
        for f in &best.flips {
            let rec = qm.apply_flip(f.module, f.flat_index, f.bit_index)?;
            if rec != *f {
                return Err(Error::State(format!(
                    "iteration {iteration}: commit of {} #{} diverged from its simulation",
                    f.module, f.flat_index
                )));
            }
            done.insert((f.module, f.flat_index, f.bit_index));
        }
        let committed_loss = attack_loss(qm.view(), samples, config.loss_mode)?.attack_loss;
        if (committed_loss - best.simulated_loss).abs() > COMMIT_TOLERANCE {
            return Err(Error::State(format!(
                "iteration {iteration}: committed loss {committed_loss} vs simulated {}",
                best.simulated_loss
            )));
        }
        log::info!(
            "iteration {iteration}: {} flips in {}, loss {current:.6} -> {committed_loss:.6}",
            best.flips.len(),
            best.module
        );

        state.committed.extend(best.flips.iter().cloned());
        state.iteration = iteration;
        state.loss_history.push(committed_loss);
        state.reports.push(IterationReport {
            iteration,
            loss_before: current,
            scanned: results
                .iter()
                .map(|r| ScanEntry {
                    module: r.module,
                    simulated_loss: r.simulated_loss,
                })
                .collect(),
            selected: best.module,
            committed_loss,
            improved,
        });
    }
    Ok(state)
}
