use std::path::PathBuf;
use std::process::ExitCode;

use bitflip_core::harness::{
    eval_accuracy, eval_perplexity, load_prompts, read_report, report_csv, run_pipeline, train_victim,
    PipelineConfig, VictimSource,
};
use bitflip_core::loss::LossMode;
use bitflip_core::model::{load_checkpoint, save_checkpoint};
use bitflip_core::quant::{decode_quantized, BitRule, Fp4Lut, QuantizedModel, Scheme};
use bitflip_core::search::GradientMode;
use bitflip_core::toy::{CorpusOptions, ToyWorld};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bitflip", version, about = "Progressive bit-flip attacks on a quantized toy language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference victim on the toy world and save a checkpoint
    TrainToy(TrainArgs),
    /// Run the full attack pipeline and write report, flip log and manifest
    Attack(AttackArgs),
    /// Toy accuracy and held-out perplexity of a checkpoint
    Eval(EvalArgs),
    /// Print the report of a finished run
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Output checkpoint path
    #[arg(long, short, default_value = "victim.tlm1")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the vocabulary, one token per line
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// TOML file with the same keys as these flags; flags win
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    n_bits: Option<usize>,
    #[arg(long)]
    n_q: Option<usize>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bit_rule: Option<BitRule>,
    #[arg(long)]
    gradient_mode: Option<GradientMode>,
    /// Restrict the attack to these modules (e.g. layer0.up); repeatable
    #[arg(long = "module")]
    modules: Vec<String>,
    /// Attack prompts, one per line
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Float victim; a toy victim is trained when omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Extra word<TAB>pos entries for key-token extraction
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    judge_endpoint: Option<String>,
    #[arg(long)]
    judge_model: Option<String>,
    #[arg(long)]
    judge_delay_ms: Option<u64>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    run_epoch: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Float (TLM1) or quantized (TLQ1) checkpoint
    checkpoint: PathBuf,
    /// Quantize a float checkpoint before evaluating
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Leave these prompts' items out of the accuracy set
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    n_q: usize,
    #[arg(long, default_value_t = 2000)]
    heldout_tokens: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory a previous `attack` wrote into
    #[arg(default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

fn merge(args: AttackArgs) -> bitflip_core::Result<PipelineConfig> {
    let mut c = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { c.$field = v; } )* };
    }
    set!(top_k, n_bits, n_q, scheme, loss_mode, seed, bit_rule, gradient_mode, out_dir, max_new, judge_model, judge_delay_ms, train_steps, run_epoch);
    if args.prompts.is_some() {
        c.prompts = args.prompts;
    }
    if args.checkpoint.is_some() {
        c.checkpoint = args.checkpoint;
    }
    if args.lexicon.is_some() {
        c.lexicon = args.lexicon;
    }
    if args.judge_endpoint.is_some() {
        c.judge_endpoint = args.judge_endpoint;
    }
    if !args.modules.is_empty() {
        c.modules = Some(args.modules);
    }
    c.validate()?;
    Ok(c)
}

fn train(args: TrainArgs) -> bitflip_core::Result<()> {
    let mut c = PipelineConfig::default();
    c.train_steps = args.steps.unwrap_or(c.train_steps);
    c.train_lr = args.lr.unwrap_or(c.train_lr);
    c.seed = args.seed.unwrap_or(c.seed);
    c.validate()?;
    let world = ToyWorld::new();
    let (model, source) = train_victim(&c, &world)?;
    save_checkpoint(&model, &args.out)?;
    if let Some(p) = &args.vocab_out {
        std::fs::write(p, world.vocab().to_file_string())?;
    }
    if let VictimSource::Trained { initial_nll, final_nll, .. } = source {
        println!("trained {} steps: nll {initial_nll:.4} -> {final_nll:.4}", c.train_steps);
    }
    let acc = eval_accuracy(&model, &world.eval_tasks::<&str>(&[]))?;
    println!("toy accuracy {acc:.3}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn attack(args: AttackArgs) -> bitflip_core::Result<()> {
    let config = merge(args)?;
    let out = run_pipeline(&config)?;
    let r = &out.report;
    println!(
        "{} flips in {} iterations, attack loss {:.4} -> {:.4}",
        r.flips_committed,
        r.iterations,
        r.baseline_loss,
        out.state.final_loss()
    );
    println!("accuracy {:.3} -> {:.3}", r.accuracy_before, r.accuracy_after);
    println!("perplexity {:.3} -> {:.3}", r.ppl_before, r.ppl_after);
    if let (Some(b), Some(a)) = (r.naturalness_before, r.naturalness_after) {
        println!("naturalness {b:.1} -> {a:.1}");
    }
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> bitflip_core::Result<()> {
    let bytes = std::fs::read(&args.checkpoint)?;
    let model = if bytes.starts_with(b"TLQ1") {
        decode_quantized(&bytes)?.view().clone()
    } else {
        let m = load_checkpoint(&args.checkpoint)?;
        match args.scheme {
            Some(s) => QuantizedModel::quantize(&m, s, &Fp4Lut::default())?.view().clone(),
            None => m,
        }
    };
    let world = ToyWorld::new();
    let excluded = match &args.prompts {
        Some(p) => {
            let c = PipelineConfig {
                prompts: Some(p.clone()),
                n_q: args.n_q,
                ..PipelineConfig::default()
            };
            load_prompts(&c)?.prompts().to_vec()
        }
        None => Vec::new(),
    };
    let tasks = world.eval_tasks(&excluded);
    let held = world.heldout_corpus(args.heldout_tokens, CorpusOptions::default());
    println!("tasks {}", tasks.len());
    println!("accuracy {:.4}", eval_accuracy(&model, &tasks)?);
    println!("perplexity {:.4}", eval_perplexity(&model, &held)?);
    Ok(())
}

fn report(args: ReportArgs) -> bitflip_core::Result<()> {
    let r = read_report(&args.out_dir)?;
    match args.format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&r)?),
        ReportFormat::Csv => print!("{}", report_csv(&r)?),
        ReportFormat::Text => {
            println!("scheme {}  loss {}  top-k {}  n-bits {}  n-q {}", r.scheme, r.loss_mode, r.top_k, r.n_bits, r.n_q);
            println!("{:<12} {:>10} {:>10}", "", "before", "after");
            println!("{:<12} {:>10.3} {:>10.3}", "accuracy", r.accuracy_before, r.accuracy_after);
            println!("{:<12} {:>10.3} {:>10.3}", "perplexity", r.ppl_before, r.ppl_after);
            if let (Some(b), Some(a)) = (r.naturalness_before, r.naturalness_after) {
                println!("{:<12} {:>10.1} {:>10.1}", "naturalness", b, a);
            }
            println!("flips {} over {} iterations", r.flips_committed, r.iterations);
            let hist: Vec<String> = r.loss_history.iter().map(|l| format!("{l:.4}")).collect();
            println!("loss {:.4} -> [{}]", r.baseline_loss, hist.join(", "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainToy(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
