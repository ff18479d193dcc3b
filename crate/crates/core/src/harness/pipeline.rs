use std::fs;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    eval_accuracy, eval_perplexity, judge_naturalness, prepare_samples, JudgeConfig,
    PipelineConfig, PromptSet,
};
use crate::error::{Error, Result};
use crate::keytoken::{PosLexicon, EOS};
use crate::model::{generate_greedy, load_checkpoint, train_toy, ModelConfig, TinyModel, TrainOptions};
use crate::quant::{write_flip_log, FlipLogEntry, Fp4Lut, QuantizedModel};
use crate::search::{run_attack, SearchState};
use crate::toy::{CorpusOptions, ToyWorld};

pub const BUNDLED_PROMPTS: &str = include_str!("../../data/prompts.txt");

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const FLIP_LOG: &str = "fliplog.jsonl";
pub const MANIFEST: &str = "manifest.json";

/// Before/after metrics of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: String,
    pub loss_mode: String,
    pub top_k: usize,
    pub n_bits: usize,
    pub n_q: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub ppl_before: f64,
    pub ppl_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub naturalness_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub naturalness_after: Option<f64>,
    pub flips_committed: usize,
    pub iterations: usize,
    pub baseline_loss: f64,
    pub loss_history: Vec<f64>,
}

/// Where the float victim came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum VictimSource {
    Checkpoint { path: String },
    Trained { steps: usize, lr: f64, seed: u64, initial_nll: f64, final_nll: f64 },
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub state: SearchState,
    pub manifest: serde_json::Value,
}

/// Trains the reference victim on the toy world.
pub fn train_victim(config: &PipelineConfig, world: &ToyWorld) -> Result<(TinyModel, VictimSource)> {
    let seed = u32::try_from(config.seed)
        .map_err(|_| Error::Input("seed must fit in 32 bits".into()))?;
    let model_config = ModelConfig {
        seed,
        ..ModelConfig::reference(world.vocab().len())
    };
    let data = world.training_corpus(CorpusOptions::default())?;
    let out = train_toy(
        model_config,
        &data,
        TrainOptions {
            steps: config.train_steps,
            lr: config.train_lr,
            ..TrainOptions::default()
        },
    )?;
    let source = VictimSource::Trained {
        steps: config.train_steps,
        lr: config.train_lr,
        seed: config.seed,
        initial_nll: out.initial_nll,
        final_nll: out.final_nll,
    };
    Ok((out.model, source))
}

/// Loads the configured checkpoint, or trains a victim when none is set.
pub fn load_victim(config: &PipelineConfig, world: &ToyWorld) -> Result<(TinyModel, VictimSource)> {
    match &config.checkpoint {
        Some(path) => {
            let model = load_checkpoint(path)?;
            if model.config().vocab_size != world.vocab().len() {
                return Err(Error::Input(format!(
                    "checkpoint vocabulary has {} tokens, the toy world has {}",
                    model.config().vocab_size,
                    world.vocab().len()
                )));
            }
            Ok((
                model,
                VictimSource::Checkpoint {
                    path: path.display().to_string(),
                },
            ))
        }
        None => train_victim(config, world),
    }
}

pub fn load_prompts(config: &PipelineConfig) -> Result<PromptSet> {
    let text = match &config.prompts {
        Some(p) => fs::read_to_string(p)?,
        None => BUNDLED_PROMPTS.to_string(),
    };
    PromptSet::parse(&text)?.take(config.n_q)
}

pub fn load_lexicon(config: &PipelineConfig) -> Result<PosLexicon> {
    let mut lex = PosLexicon::builtin();
    if let Some(p) = &config.lexicon {
        lex.extend(PosLexicon::parse(&fs::read_to_string(p)?)?);
    }
    Ok(lex)
}

fn continuations(model: &TinyModel, world: &ToyWorld, prompts: &[Vec<usize>], max_new: usize) -> Result<Vec<String>> {
    prompts
        .iter()
        .map(|p| {
            let budget = max_new.min(model.config().context_len.saturating_sub(p.len()));
            let out = generate_greedy(model, p, budget, Some(EOS))?;
            let text: Vec<usize> = out[p.len()..].iter().copied().filter(|&t| t != EOS).collect();
            Ok(world.vocab().detokenize(&text))
        })
        .collect()
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs prepare, quantize, attack and evaluation against `victim`, then
/// writes the artifacts into `config.out_dir`.
pub fn run_with_victim(
    config: &PipelineConfig,
    world: &ToyWorld,
    victim: &TinyModel,
    source: VictimSource,
) -> Result<PipelineOutcome> {
    let started = unix_now();
    let attack = config.attack_config().map_err(|e| e.in_stage("config"))?;
    let prompts = load_prompts(config).map_err(|e| e.in_stage("prompts"))?;
    let lexicon = load_lexicon(config).map_err(|e| e.in_stage("prompts"))?;

    let prepared = prepare_samples(victim, world.vocab(), &lexicon, &prompts, config.max_new)
        .map_err(|e| e.in_stage("prepare"))?;
    let mut qm = QuantizedModel::quantize(victim, config.scheme, &Fp4Lut::default())
        .map_err(|e| e.in_stage("quantize"))?;

    let tasks = world.eval_tasks(prompts.prompts());
    let heldout = world.heldout_corpus(config.heldout_tokens, CorpusOptions::default());
    let accuracy_before = eval_accuracy(qm.view(), &tasks).map_err(|e| e.in_stage("evaluate"))?;
    let ppl_before = eval_perplexity(qm.view(), &heldout).map_err(|e| e.in_stage("evaluate"))?;
    let judge_prompts: Vec<Vec<usize>> = tasks.iter().take(config.judge_samples).map(|t| t.prompt_ids.clone()).collect();
    let texts_before = continuations(qm.view(), world, &judge_prompts, config.max_new)
        .map_err(|e| e.in_stage("evaluate"))?;

    let state = run_attack(&mut qm, &prepared.samples, &attack).map_err(|e| e.in_stage("attack"))?;

    let accuracy_after = eval_accuracy(qm.view(), &tasks).map_err(|e| e.in_stage("evaluate"))?;
    let ppl_after = eval_perplexity(qm.view(), &heldout).map_err(|e| e.in_stage("evaluate"))?;
    let texts_after = continuations(qm.view(), world, &judge_prompts, config.max_new)
        .map_err(|e| e.in_stage("evaluate"))?;

    let (naturalness_before, naturalness_after) = judge_pair(config, &texts_before, &texts_after)?;

    let report = EvalReport {
        scheme: config.scheme.to_string(),
        loss_mode: config.loss_mode.to_string(),
        top_k: config.top_k,
        n_bits: config.n_bits,
        n_q: config.n_q,
        accuracy_before,
        accuracy_after,
        ppl_before,
        ppl_after,
        naturalness_before,
        naturalness_after,
        flips_committed: state.committed.len(),
        iterations: state.iteration,
        baseline_loss: state.baseline_loss,
        loss_history: state.loss_history.clone(),
    };

    let samples: Vec<serde_json::Value> = prepared
        .samples
        .iter()
        .zip(&prepared.responses)
        .zip(prompts.prompts())
        .map(|((s, r), p)| {
            let words: Vec<&str> = s.key_tokens.iter().filter_map(|&t| world.vocab().word(t)).collect();
            json!({"prompt": p, "response": r, "key_tokens": words})
        })
        .collect();
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started,
        "finished_unix": unix_now(),
        "config": config,
        "victim": source,
        "samples": samples,
        "rejected": prepared.rejected,
        "iterations": state.reports,
        "final_loss": state.final_loss(),
        "responses_before": texts_before,
        "responses_after": texts_after,
        "artifacts": [REPORT_JSON, REPORT_CSV, FLIP_LOG, MANIFEST],
    });

    write_artifacts(&config.out_dir, &report, &state, config, &manifest).map_err(|e| e.in_stage("emit"))?;
    Ok(PipelineOutcome {
        report,
        state,
        manifest,
    })
}

fn judge_pair(config: &PipelineConfig, before: &[String], after: &[String]) -> Result<(Option<f64>, Option<f64>)> {
    let judge = match JudgeConfig::from_env(
        config.judge_endpoint.as_deref(),
        &config.judge_model,
        Duration::from_millis(config.judge_delay_ms),
    ) {
        Ok(Some(j)) => j,
        Ok(None) => return Ok((None, None)),
        Err(e) => {
            log::warn!("judge disabled: {e}");
            return Ok((None, None));
        }
    };
    if before.is_empty() {
        return Ok((None, None));
    }
    let score = |texts: &[String]| match judge_naturalness(&judge, texts) {
        Ok(s) => Ok(Some(s)),
        Err(Error::JudgeUnavailable(msg)) => {
            log::warn!("judge unavailable: {msg}");
            Ok(None)
        }
        Err(e) => Err(e.in_stage("judge")),
    };
    Ok((score(before)?, score(after)?))
}

/// Flip-log entries for a finished search; each iteration commits `top_k`
/// consecutive records.
pub fn flip_log_entries(state: &SearchState, top_k: usize, run_epoch: u64) -> Vec<FlipLogEntry> {
    state
        .committed
        .iter()
        .enumerate()
        .map(|(i, r)| FlipLogEntry {
            record: r.clone(),
            iteration: i / top_k.max(1) + 1,
            timestamp: run_epoch,
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    scheme: &'a str,
    loss_mode: &'a str,
    top_k: usize,
    n_bits: usize,
    n_q: usize,
    accuracy_before: f64,
    accuracy_after: f64,
    ppl_before: f64,
    ppl_after: f64,
    naturalness_before: Option<f64>,
    naturalness_after: Option<f64>,
    flips_committed: usize,
    iterations: usize,
    baseline_loss: f64,
    final_loss: f64,
    loss_history: String,
}

pub fn report_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(CsvRow {
        scheme: &report.scheme,
        loss_mode: &report.loss_mode,
        top_k: report.top_k,
        n_bits: report.n_bits,
        n_q: report.n_q,
        accuracy_before: report.accuracy_before,
        accuracy_after: report.accuracy_after,
        ppl_before: report.ppl_before,
        ppl_after: report.ppl_after,
        naturalness_before: report.naturalness_before,
        naturalness_after: report.naturalness_after,
        flips_committed: report.flips_committed,
        iterations: report.iterations,
        baseline_loss: report.baseline_loss,
        final_loss: report.loss_history.last().copied().unwrap_or(report.baseline_loss),
        loss_history: report
            .loss_history
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    })
    .map_err(|e| Error::Input(format!("csv: {e}")))?;
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_artifacts(
    dir: &Path,
    report: &EvalReport,
    state: &SearchState,
    config: &PipelineConfig,
    manifest: &serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join(REPORT_CSV), report_csv(report)?)?;
    let mut log = Vec::new();
    write_flip_log(&mut log, &flip_log_entries(state, config.top_k, config.run_epoch))?;
    fs::write(dir.join(FLIP_LOG), log)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Full run from a configuration: victim, attack, evaluation, artifacts.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let world = ToyWorld::new();
    let (victim, source) = load_victim(config, &world).map_err(|e| e.in_stage("victim"))?;
    run_with_victim(config, &world, &victim, source)
}

/// Reads a report written by a previous run.
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(dir.join(REPORT_JSON))?;
    Ok(serde_json::from_str(&text)?)
}
