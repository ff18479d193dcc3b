use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::model::ModuleId;
use crate::quant::{BitRule, Scheme};
use crate::search::{AttackConfig, GradientMode};

/// Every knob of a pipeline run. Keys in the TOML file are the kebab-case
/// field names, the same as the command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub n_bits: usize,
    pub n_q: usize,
    pub scheme: Scheme,
    pub loss_mode: LossMode,
    /// Seeds victim training when no checkpoint is given.
    pub seed: u64,
    pub bit_rule: BitRule,
    pub gradient_mode: GradientMode,
    /// Restricts the attack to these modules, e.g. `["layer0.up"]`.
    pub modules: Option<Vec<String>>,

    /// Attack prompt file; the bundled prompts are used when absent.
    pub prompts: Option<PathBuf>,
    /// Float victim checkpoint; a toy victim is trained when absent.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Extra part-of-speech entries layered over the built-in lexicon.
    pub lexicon: Option<PathBuf>,
    /// Token budget for clean attack responses.
    pub max_new: usize,
    /// Tokens in the held-out perplexity corpus.
    pub heldout_tokens: usize,

    pub judge_endpoint: Option<String>,
    pub judge_model: String,
    pub judge_delay_ms: u64,
    /// Responses sent to the judge per side (before, after).
    pub judge_samples: usize,

    pub train_steps: usize,
    pub train_lr: f64,
    /// Value written as the flip-log timestamp. Fixed per run so that logs
    /// of identical runs compare byte for byte.
    pub run_epoch: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let attack = AttackConfig::default();
        let train = crate::model::TrainOptions::default();
        Self {
            top_k: attack.top_k,
            n_bits: attack.n_bits,
            n_q: attack.n_q,
            scheme: attack.scheme,
            loss_mode: attack.loss_mode,
            seed: 7,
            bit_rule: attack.bit_rule,
            gradient_mode: attack.gradient_mode,
            modules: None,
            prompts: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            lexicon: None,
            max_new: 12,
            heldout_tokens: 2000,
            judge_endpoint: None,
            judge_model: "gpt-4o".into(),
            judge_delay_ms: 0,
            judge_samples: 8,
            train_steps: train.steps,
            train_lr: train.lr,
            run_epoch: 0,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let module_scope = self
            .modules
            .as_ref()
            .map(|ids| ids.iter().map(|s| s.parse::<ModuleId>()).collect::<Result<Vec<_>>>())
            .transpose()?;
        let cfg = AttackConfig {
            top_k: self.top_k,
            n_bits: self.n_bits,
            n_q: self.n_q,
            scheme: self.scheme,
            loss_mode: self.loss_mode,
            module_scope,
            seed: self.seed,
            bit_rule: self.bit_rule,
            gradient_mode: self.gradient_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack_config()?;
        if self.max_new == 0 {
            return Err(Error::Input("max-new must be at least 1".into()));
        }
        if self.heldout_tokens < 2 {
            return Err(Error::Input("heldout-tokens must be at least 2".into()));
        }
        if !(self.train_lr.is_finite() && self.train_lr > 0.0) {
            return Err(Error::Input("train-lr must be positive".into()));
        }
        if u32::try_from(self.seed).is_err() {
            return Err(Error::Input("seed must fit in 32 bits".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn kebab_keys_and_enums() {
        let c = PipelineConfig::parse(
            "top-k = 5\nn-bits = 20\nscheme = \"fp4\"\nloss-mode = \"no-ppl\"\nbit-rule = \"msb\"\n\
             gradient-mode = \"clean-once\"\nmodules = [\"layer1.gate\"]\nout-dir = \"x\"\n",
        )
        .unwrap();
        assert_eq!((c.top_k, c.n_bits, c.scheme), (5, 20, Scheme::Fp4));
        assert_eq!(c.loss_mode, LossMode::NoPpl);
        let a = c.attack_config().unwrap();
        assert_eq!(a.bit_rule, BitRule::Msb);
        assert_eq!(a.gradient_mode, GradientMode::CleanOnce);
        assert_eq!(a.module_scope.unwrap()[0].to_string(), "layer1.gate");
    }

    #[test]
    fn round_trip() {
        let mut c = PipelineConfig::default();
        c.checkpoint = Some("v.tlm1".into());
        c.judge_endpoint = Some("http://localhost:1".into());
        assert_eq!(PipelineConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejections() {
        assert!(PipelineConfig::parse("topk = 3").is_err());
        assert!(PipelineConfig::parse("scheme = \"int4\"").is_err());
        assert!(PipelineConfig::parse("n-bits = 5").unwrap().validate().is_err());
        assert!(PipelineConfig::parse("n-bits = 0").unwrap().validate().is_ok());
        assert!(PipelineConfig::parse("modules = [\"layer0.mlp\"]").unwrap().validate().is_err());
        assert!(PipelineConfig::parse("seed = 5000000000").unwrap().validate().is_err());
    }
}
