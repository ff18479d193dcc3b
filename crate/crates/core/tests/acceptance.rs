//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each, and exits non-zero if any criterion fails.
//!
//! The reference victim is trained once (default pipeline settings) and
//! shared by every criterion that needs it.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bitflip_core::autodiff::{grad_check, GradCheckConfig, Tape, Tensor, Var};
use bitflip_core::harness::{
    eval_accuracy, prepare_samples, run_pipeline, run_with_victim, train_victim, EvalReport, PipelineConfig,
    PromptSet, VictimSource, BUNDLED_PROMPTS, FLIP_LOG, MANIFEST, REPORT_CSV, REPORT_JSON,
};
use bitflip_core::keytoken::PosLexicon;
use bitflip_core::loss::{
    attack_loss, attack_loss_with_grads, key_tokens_loss, ppl_loss, record_attack_loss, AttackSample, LossMode,
};
use bitflip_core::model::{Bindings, ModuleId, ModuleKind, TinyModel};
use bitflip_core::quant::{select_flip_bit, BitRule, Fp4Lut, QuantizedModel, Scheme};
use bitflip_core::search::{run_attack, simulate_module_attack, AttackConfig, FlipKey};
use bitflip_core::toy::ToyWorld;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Victim {
    world: ToyWorld,
    model: TinyModel,
    source: VictimSource,
    clean_accuracy: f64,
    trained_in: Duration,
}

fn victim() -> &'static Victim {
    static V: OnceLock<Victim> = OnceLock::new();
    V.get_or_init(|| {
        let world = ToyWorld::new();
        let t = Instant::now();
        let (model, source) = train_victim(&PipelineConfig::default(), &world).expect("victim trains");
        let trained_in = t.elapsed();
        let clean_accuracy = eval_accuracy(&model, &world.eval_tasks::<&str>(&[])).expect("eval");
        Victim {
            world,
            model,
            source,
            clean_accuracy,
            trained_in,
        }
    })
}

fn attack_samples(v: &Victim, prompts: &[String]) -> Result<Vec<AttackSample>, String> {
    let set = ok(PromptSet::new(prompts.to_vec()))?;
    let prep = ok(prepare_samples(&v.model, v.world.vocab(), &PosLexicon::builtin(), &set, 12))?;
    Ok(prep.samples)
}

fn bundled(n: usize) -> Vec<String> {
    PromptSet::parse(BUNDLED_PROMPTS)
        .and_then(|p| p.take(n))
        .expect("bundled prompts")
        .prompts()
        .to_vec()
}

/// One full pipeline run against the shared victim, artifacts in a temp dir.
fn pipeline(tweak: impl FnOnce(&mut PipelineConfig)) -> Result<EvalReport, String> {
    let v = victim();
    let dir = ok(tempfile::tempdir())?;
    let mut c = PipelineConfig {
        out_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    tweak(&mut c);
    Ok(ok(run_with_victim(&c, &v.world, &v.model, v.source.clone()))?.report)
}

fn pipeline_cached(key: &'static str) -> Result<EvalReport, String> {
    static RUNS: OnceLock<std::sync::Mutex<BTreeMap<&'static str, EvalReport>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some(r) = runs.lock().unwrap().get(key) {
        return Ok(r.clone());
    }
    let mode: LossMode = ok(key.parse())?;
    let r = pipeline(|c| c.loss_mode = mode)?;
    runs.lock().unwrap().insert(key, r.clone());
    Ok(r)
}

// 1
fn gradient_correctness() -> Check {
    let t = Instant::now();
    let v = victim();
    let samples = attack_samples(v, &bundled(2))?;
    let all: Vec<Tensor> = v.model.params().into_iter().cloned().collect();
    let n_layers = v.model.config().n_layers;
    let mut worst = 0.0f64;
    let mut per_kind = Vec::new();
    for kind in ModuleKind::ALL {
        // Only this kind's weights become checked leaves; the rest are
        // recorded as constants inside the closure.
        let slots: Vec<usize> = (0..n_layers).map(|l| 2 + l * 7 + kind.index()).collect();
        let checked: Vec<Tensor> = slots.iter().map(|&i| all[i].clone()).collect();
        let err = ok(grad_check(
            |tape: &mut Tape, vars: &[Var]| {
                let mut bound = Vec::with_capacity(all.len());
                for (i, p) in all.iter().enumerate() {
                    match slots.iter().position(|&s| s == i) {
                        Some(j) => bound.push(vars[j]),
                        None => bound.push(tape.leaf(p)),
                    }
                }
                let b = Bindings::from_vars(bound);
                Ok(record_attack_loss(&v.model, tape, &b, &samples, LossMode::Full)?.0)
            },
            &checked,
            GradCheckConfig {
                samples_per_param: Some(12),
                seed: kind.index() as u64,
                ..Default::default()
            },
        ))?;
        per_kind.push(format!("{kind:?}={err:.1e}"));
        worst = worst.max(err);
    }
    let elapsed = t.elapsed();
    ensure!(worst < 1e-4, "max relative error {worst:.3e} ({})", per_kind.join(" "));
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("max rel err {worst:.2e} over {} kinds in {elapsed:.1?}", per_kind.len()))
}

// 2
fn int8_msb_maximality() -> Check {
    let t = Instant::now();
    let lut = Fp4Lut::default();
    for code in 0u8..=255 {
        let here = code as i8 as i32;
        let deltas: Vec<i32> = (0..8).map(|b| ((code ^ (1 << b)) as i8 as i32 - here).abs()).collect();
        let best = *deltas.iter().max().unwrap();
        ensure!(deltas[7] == best, "code {code:#04x}: bit 7 moves {} but max is {best}", deltas[7]);
        ensure!(select_flip_bit(code, Scheme::Int8, &lut) == 7, "code {code:#04x}: selector disagrees");
    }
    ensure!(t.elapsed() < Duration::from_secs(1), "took {:?}", t.elapsed());
    Ok(format!("256 codes checked in {:.1?}", t.elapsed()))
}

// 3
fn fp4_lut_optimality() -> Check {
    let t = Instant::now();
    // Reference table written out independently: bit 3 is the sign.
    let mags: [f64; 8] = [0.0, 0.0625, 8.0, 12.0, 4.0, 6.0, 2.0, 3.0];
    let value = |c: u8| if c & 8 == 0 { mags[(c & 7) as usize] } else { -mags[(c & 7) as usize] };
    let lut = Fp4Lut::default();
    for code in 0u8..16 {
        let deltas: Vec<f64> = (0..4).map(|b| (value(code ^ (1 << b)) - value(code)).abs()).collect();
        let best = deltas.iter().cloned().fold(0.0, f64::max);
        let pick = select_flip_bit(code, Scheme::Fp4, &lut);
        ensure!(pick < 4, "code {code:#06b}: bit {pick} out of range");
        ensure!(
            deltas[pick as usize] == best,
            "code {code:#06b}: bit {pick} moves {} but max is {best}",
            deltas[pick as usize]
        );
    }
    let zero = select_flip_bit(0b0000, Scheme::Fp4, &lut);
    ensure!(zero == 1, "0b0000 picks bit {zero}, expected 1");
    ensure!(value(0b0010) == 8.0 && lut.value(0b0010) == 8.0, "0b0010 should decode to 8");
    ensure!(t.elapsed() < Duration::from_secs(1), "took {:?}", t.elapsed());
    Ok(format!("16 codes x 4 bits checked, 0b0000 -> bit 1 (0 -> 8) in {:.1?}", t.elapsed()))
}

// 4
fn loss_oracles() -> Check {
    fn probs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.leaf(&Tensor::new(vec![rows.len(), rows[0].len()], data).unwrap())
    }
    fn kt(rows: &[&[f64]], k: &[usize]) -> Result<f64, String> {
        let mut tape = Tape::new();
        let p = probs(&mut tape, rows);
        let l = ok(key_tokens_loss(&mut tape, p, &k.iter().copied().collect()))?;
        ok(tape.scalar(l))
    }
    fn ppl(rows: &[&[f64]], y: &[usize]) -> Result<f64, String> {
        let mut tape = Tape::new();
        let p = probs(&mut tape, rows);
        let l = ok(ppl_loss(&mut tape, p, y))?;
        ok(tape.scalar(l))
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let r = [0.5, 0.3, 0.2];
    let cases = [
        ("kt empty K", kt(&[&r], &[])?, 0.0),
        ("kt 0.64", kt(&[&r], &[0, 1])?, 0.64),
        ("kt identical rows", kt(&[&r, &r], &[0, 2])?, (2.0f64 * 0.7).powi(2)),
        ("ppl perfect", ppl(&[&[0.0, 1.0], &[1.0, 0.0]], &[1, 0])?, 1.0),
        ("ppl uniform", ppl(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]], &[0, 3, 1])?, 4.0),
        ("ppl (0.5, 0.125)", ppl(&[&[0.5, 0.5], &[0.125, 0.875]], &[0, 0])?, 4.0),
    ];
    for (name, got, want) in cases {
        ensure!(close(got, want), "{name}: {got} vs {want}");
    }
    Ok(format!("{} fixtures within 1e-9", cases.len()))
}

fn codes(qm: &QuantizedModel) -> Vec<Vec<u8>> {
    qm.modules().values().map(|q| q.raw_codes().to_vec()).collect()
}

// 5
fn restore_invariance() -> Check {
    let v = victim();
    let items = v.world.items();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_5005);
    let lut = Fp4Lut::default();
    let modes = [LossMode::Full, LossMode::NoPpl, LossMode::NoKey, LossMode::InvertedPpl];
    for round in 0..20 {
        let scheme = if round % 2 == 0 { Scheme::Int8 } else { Scheme::Fp4 };
        let mut qm = ok(QuantizedModel::quantize(&v.model, scheme, &lut))?;
        // Start each round from a different dirty state.
        let mut committed: BTreeSet<FlipKey> = BTreeSet::new();
        let ids: Vec<ModuleId> = qm.modules().keys().copied().collect();
        for _ in 0..rng.random_range(0..30) {
            let id = ids[rng.random_range(0..ids.len())];
            let idx = rng.random_range(0..ok(qm.module(id))?.len());
            let bit = rng.random_range(0..scheme.bits());
            ok(qm.apply_flip(id, idx, bit))?;
            committed.insert((id, idx, bit));
        }
        let prompts: Vec<String> = (0..rng.random_range(1..4))
            .map(|_| items[rng.random_range(0..items.len())].prompt.clone())
            .collect();
        let samples = attack_samples(v, &prompts)?;
        let config = AttackConfig {
            top_k: rng.random_range(1..=30),
            n_bits: 30,
            scheme,
            loss_mode: modes[round % modes.len()],
            bit_rule: if rng.random_bool(0.5) { BitRule::Msb } else { BitRule::MaxDeviation },
            ..AttackConfig::default()
        };
        let mut grad_model = qm.view().clone();
        ok(attack_loss_with_grads(&mut grad_model, &samples, config.loss_mode))?;
        let grads = ok(grad_model.grad_by_module())?;

        let (sum_before, codes_before, view_before) = (qm.checksum(), codes(&qm), qm.view().clone());
        for &id in &ids {
            ok(simulate_module_attack(&mut qm, id, &grads[&id], &samples, &config, &committed))?;
        }
        ensure!(qm.checksum() == sum_before, "round {round}: checksum changed");
        ensure!(codes(&qm) == codes_before, "round {round}: codes changed");
        ensure!(*qm.view() == view_before, "round {round}: float view changed");
    }
    Ok("20 randomized full scans restored bit-identically".into())
}

// 6
fn selection_and_budget() -> Check {
    let v = victim();
    let samples = attack_samples(v, &bundled(2))?;
    let mut qm = ok(QuantizedModel::quantize(&v.model, Scheme::Int8, &Fp4Lut::default()))?;
    let cfg = AttackConfig::default();
    ensure!((cfg.top_k, cfg.n_bits) == (10, 50), "unexpected defaults");
    let state = ok(run_attack(&mut qm, &samples, &cfg))?;
    ensure!(state.iteration == 5, "{} iterations, expected 5", state.iteration);
    ensure!(
        state.committed.len() == cfg.top_k * state.iteration && state.committed.len() <= cfg.n_bits,
        "{} flips over {} iterations",
        state.committed.len(),
        state.iteration
    );
    for r in &state.reports {
        let min = r.scanned.iter().map(|s| s.simulated_loss).fold(f64::INFINITY, f64::min);
        let chosen = r.scanned.iter().find(|s| s.module == r.selected).map(|s| s.simulated_loss);
        ensure!(chosen == Some(min), "iteration {}: selected {:?} but min is {min}", r.iteration, chosen);
        ensure!(r.committed_loss == min, "iteration {}: committed {} vs {min}", r.iteration, r.committed_loss);
    }
    let replay = ok(attack_loss(qm.view(), &samples, cfg.loss_mode))?.attack_loss;
    ensure!((replay - state.final_loss()).abs() < 1e-9, "replayed loss {replay} vs {}", state.final_loss());
    Ok(format!("5 iterations x 10 flips, selected = scan minimum each time"))
}

// 7
fn end_to_end_direction() -> Check {
    let t = Instant::now();
    let v = victim();
    ensure!(v.clean_accuracy >= 0.9, "victim only reaches {:.3} toy accuracy", v.clean_accuracy);
    let r = pipeline_cached("full")?;
    let elapsed = t.elapsed() + v.trained_in;
    let detail = format!(
        "victim {:.3}; accuracy {:.3} -> {:.3} (need < {:.3}); ppl {:.3} -> {:.3} (limit {:.3}); {elapsed:.0?}",
        v.clean_accuracy,
        r.accuracy_before,
        r.accuracy_after,
        0.5 * r.accuracy_before,
        r.ppl_before,
        r.ppl_after,
        10.0 * r.ppl_before
    );
    ensure!(r.flips_committed == 50, "{} flips committed: {detail}", r.flips_committed);
    ensure!(r.accuracy_after < 0.5 * r.accuracy_before, "accuracy did not halve: {detail}");
    ensure!(r.ppl_after <= 10.0 * r.ppl_before, "perplexity grew too much: {detail}");
    ensure!(elapsed < Duration::from_secs(1800), "too slow: {detail}");
    Ok(detail)
}

// 8
fn ablation_direction() -> Check {
    let full = pipeline_cached("full")?;
    let no_ppl = pipeline_cached("no-ppl")?;
    let no_key = pipeline_cached("no-key")?;
    let detail = format!(
        "ppl after: no-ppl {:.4} vs full {:.4}; accuracy after: no-key {:.3} vs full {:.3}",
        no_ppl.ppl_after, full.ppl_after, no_key.accuracy_after, full.accuracy_after
    );
    ensure!(no_ppl.ppl_after > full.ppl_after, "no-ppl perplexity not above full: {detail}");
    ensure!(no_key.accuracy_after > full.accuracy_after, "no-key accuracy not above full: {detail}");
    Ok(detail)
}

// 9
fn fp4_strategy_ablation() -> Check {
    let v = victim();
    let samples = attack_samples(v, &bundled(2))?;
    let run = |rule: BitRule| -> Result<(f64, usize), String> {
        let mut qm = ok(QuantizedModel::quantize(&v.model, Scheme::Fp4, &Fp4Lut::default()))?;
        let cfg = AttackConfig {
            scheme: Scheme::Fp4,
            n_bits: 100,
            bit_rule: rule,
            ..AttackConfig::default()
        };
        let s = ok(run_attack(&mut qm, &samples, &cfg))?;
        Ok((s.baseline_loss - s.final_loss(), s.iteration))
    };
    let (lut_drop, lut_it) = run(BitRule::MaxDeviation)?;
    let (msb_drop, msb_it) = run(BitRule::Msb)?;
    let (lut_rate, msb_rate) = (lut_drop / lut_it as f64, msb_drop / msb_it as f64);
    let detail = format!("loss reduction per iteration: msb {msb_rate:.4} vs lut {lut_rate:.4} (100 bits)");
    ensure!(msb_rate < lut_rate, "msb not weaker: {detail}");
    Ok(detail)
}

// 10
fn iteration_necessity() -> Check {
    let v = victim();
    let samples = attack_samples(v, &bundled(2))?;
    let run = |top_k: usize| -> Result<f64, String> {
        let mut qm = ok(QuantizedModel::quantize(&v.model, Scheme::Int8, &Fp4Lut::default()))?;
        let cfg = AttackConfig {
            top_k,
            n_bits: 50,
            ..AttackConfig::default()
        };
        Ok(ok(run_attack(&mut qm, &samples, &cfg))?.final_loss())
    };
    let (single, iterative) = (run(50)?, run(10)?);
    let detail = format!("final loss: single iteration {single:.4} vs iterative {iterative:.4}");
    ensure!(single > iterative, "single pass not worse: {detail}");
    Ok(detail)
}

// 11
fn determinism() -> Check {
    let dirs = [ok(tempfile::tempdir())?, ok(tempfile::tempdir())?];
    let mut logs = Vec::new();
    for d in &dirs {
        let c = PipelineConfig {
            out_dir: d.path().to_path_buf(),
            train_steps: 60,
            ..PipelineConfig::default()
        };
        ok(run_pipeline(&c))?;
        for f in [REPORT_JSON, REPORT_CSV, MANIFEST] {
            ensure!(d.path().join(f).exists(), "{f} missing");
        }
        logs.push(ok(std::fs::read(d.path().join(FLIP_LOG)))?);
    }
    ensure!(!logs[0].is_empty(), "empty flip log");
    ensure!(logs[0] == logs[1], "flip logs differ");
    Ok(format!("two trained runs wrote identical {}-byte flip logs", logs[0].len()))
}

fn main() {
    // `cargo test -- --list` style probes from tooling should not train.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Check); 11] = [
        ("gradient correctness", gradient_correctness),
        ("INT8 bit-selection maximality", int8_msb_maximality),
        ("FP4 bit-selection optimality", fp4_lut_optimality),
        ("loss oracles", loss_oracles),
        ("restore invariance", restore_invariance),
        ("selection and budget invariants", selection_and_budget),
        ("end-to-end directional attack", end_to_end_direction),
        ("ablation direction", ablation_direction),
        ("FP4 strategy ablation", fp4_strategy_ablation),
        ("iteration necessity", iteration_necessity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.1?}]", i + 1, t.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{:.1?}]", i + 1, t.elapsed());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
