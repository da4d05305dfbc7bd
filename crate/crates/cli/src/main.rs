//! `ipagnn` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ipagnn_autodiff::grad_check_sampled;
use ipagnn_core::corpus::{generate_corpus, CorpusManifest, GenerateOptions, Split, TemplateMix};
use ipagnn_core::interp::{parse_stdin_arg, run_interpreter_a, run_interpreter_b, DEFAULT_STEP_BUDGET};
use ipagnn_core::minilang::{build_cfg, parse};
use ipagnn_models::ipagnn::{argmax_line, provenance_csv};
use ipagnn_models::train::{history_csv, train_with_callback};
use ipagnn_models::{Checkpoint, Model, ModelError, TrainConfig, Vocabulary};

#[derive(Parser)]
#[command(name = "ipagnn", version, about = "Relaxed-interpreter models for runtime error prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus (JSON lines).
    GenCorpus(GenCorpusArgs),
    /// Train a model; writes checkpoint.txt and history.csv into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Print the predicted class distribution for one program.
    Predict(ProgramArgs),
    /// Dump the discrete execution trace of a program.
    Trace(TraceArgs),
    /// Write the instruction-pointer heatmap of a program as CSV.
    Heatmap(HeatmapArgs),
    /// Print per-line provenance and the predicted error line.
    Localize(ProgramArgs),
    /// Compare model gradients against central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Template weights, e.g. `eof,zerodiv:2`; `all` for every template.
    #[arg(long, default_value = "all")]
    mix: String,
    #[arg(long, default_value_t = 0.2)]
    uninformative_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    try_fraction: f64,
    #[arg(long, default_value_t = 4)]
    max_fillers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Print a progress line every this many steps (0 = quiet).
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the CSV report here instead of after the table on stdout.
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct ProgramArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Path to a program source file.
    #[arg(long)]
    program: PathBuf,
    /// Resource description (input format) text.
    #[arg(long)]
    stdin_desc: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interpreter {
    A,
    B,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    program: PathBuf,
    /// Input lines, comma separated.
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    stdin: String,
    #[arg(long, value_enum, default_value_t = Interpreter::B)]
    interpreter: Interpreter,
    #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
    budget: usize,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    program: ProgramArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of parameter coordinates checked.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

type CliResult = Result<ExitCode, ModelError>;

fn read(path: &Path) -> Result<String, ModelError> {
    std::fs::read_to_string(path)
        .map_err(|e| ModelError::InvalidArgument(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<CorpusManifest, ModelError> {
    CorpusManifest::load(path).map_err(|e| ModelError::InvalidArgument(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::load(path).map_err(|e| ModelError::InvalidArgument(format!("{}: {e}", path.display())))
}

fn gen_corpus(a: GenCorpusArgs) -> CliResult {
    let mut opts = GenerateOptions::new(a.seed, a.size);
    opts.mix = if a.mix == "all" { TemplateMix::all() } else { TemplateMix::parse(&a.mix)? };
    opts.uninformative_fraction = a.uninformative_fraction;
    opts.try_fraction = a.try_fraction;
    opts.max_fillers = a.max_fillers;
    let manifest = generate_corpus(&opts)?;
    manifest.save(&a.out)?;
    let counts = manifest.class_counts();
    for (split, c) in counts {
        eprintln!("{split}: {} examples", c.iter().sum::<usize>());
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> CliResult {
    let config = TrainConfig::parse(&read(&a.config)?)?;
    let manifest = load_corpus(&a.corpus)?;
    let every = a.log_every;
    let out = train_with_callback(&config, &manifest, |s| {
        if every > 0 && s.step % every == 0 {
            eprintln!("step {} loss {:.4} grad-norm {:.4}", s.step, s.loss, s.grad_norm);
        }
    })?;
    std::fs::create_dir_all(&a.out)?;
    out.checkpoint.save(&a.out.join("checkpoint.txt"))?;
    std::fs::write(a.out.join("history.csv"), history_csv(&out.history))?;
    if let Some(last) = out.history.last() {
        println!(
            "step {} loss {:.4} val-accuracy {:.4} val-weighted-f1 {:.4}",
            last.step, last.loss, last.val_accuracy, last.val_weighted_f1
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> CliResult {
    let split = Split::from_name(&a.split)
        .ok_or_else(|| ModelError::InvalidArgument(format!("unknown split `{}`", a.split)))?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let manifest = load_corpus(&a.corpus)?;
    let report = ipagnn_models::train::evaluate(&ck, &manifest, split)?;
    print!("{}", report.to_table());
    match a.csv_out {
        Some(p) => std::fs::write(p, report.to_csv())?,
        None => print!("\n{}", report.to_csv()),
    }
    Ok(ExitCode::SUCCESS)
}

fn load_program(a: &ProgramArgs) -> Result<(Checkpoint, Model, ipagnn_models::model::Prepared), ModelError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    let prepared = model.prepare(&read(&a.program)?, a.stdin_desc.as_deref())?;
    Ok((ck, model, prepared))
}

fn predict(a: ProgramArgs) -> CliResult {
    let (ck, model, p) = load_program(&a)?;
    let pred = model.predict(&ck.params, &[&p])?.remove(0);
    println!("{}", pred.to_record());
    Ok(ExitCode::SUCCESS)
}

fn trace(a: TraceArgs) -> CliResult {
    let program = parse(&read(&a.program)?)?;
    let cfg = build_cfg(&program);
    let stdin = parse_stdin_arg(&a.stdin);
    let tr = match a.interpreter {
        Interpreter::A => run_interpreter_a(&cfg, &program, &stdin, a.budget),
        Interpreter::B => run_interpreter_b(&cfg, &program, &stdin, a.budget),
    };
    print!("t,node,line\n{}", tr.dump(&cfg));
    Ok(ExitCode::SUCCESS)
}

fn heatmap(a: HeatmapArgs) -> CliResult {
    let (ck, model, p) = load_program(&a.program)?;
    let pred = model.predict(&ck.params, &[&p])?.remove(0);
    let trace = pred
        .trace
        .ok_or_else(|| ModelError::InvalidArgument("heatmaps need an IPA-GNN checkpoint".into()))?;
    std::fs::write(&a.out, trace.heatmap_csv())?;
    Ok(ExitCode::SUCCESS)
}

fn localize(a: ProgramArgs) -> CliResult {
    let (ck, model, p) = load_program(&a)?;
    if !model.localizes() {
        return Err(ModelError::InvalidArgument(format!(
            "model kind `{}` does not localize errors",
            model.config.model_kind
        )));
    }
    let pred = model.predict(&ck.params, &[&p])?.remove(0);
    let lines = pred.line_probs.unwrap_or_default();
    print!("{}", provenance_csv(&lines));
    match argmax_line(&lines) {
        Some(l) => println!("predicted-line,{l}"),
        None => println!("predicted-line,-"),
    }
    Ok(ExitCode::SUCCESS)
}

const GRAD_CHECK_PROGRAMS: [(&str, &str); 2] = [
    (
        "x = input_int()\nif x > 0:\n  y = 4 / 3 * x\nelse:\n  y = abs(x)\nz = y + sqrt(x)\n",
        "read one integer x",
    ),
    ("n = input_int()\ns = 0\nwhile n > 0:\n  s = s + 10 // n\n  n = n - 1\nprint(s)\n", "an integer n"),
];

fn grad_check(a: GradCheckArgs) -> CliResult {
    let mut config = TrainConfig::parse(&read(&a.config)?)?;
    config.encoder.dropout = 0.0;
    let programs = GRAD_CHECK_PROGRAMS
        .iter()
        .map(|(s, d)| Ok((parse(s)?, *d)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let vocab = Vocabulary::from_corpus(programs.iter().map(|(p, d)| (p, *d)), config.vocab_cap)?;
    let model = Model::new(config, vocab)?;
    let items = GRAD_CHECK_PROGRAMS
        .iter()
        .enumerate()
        .map(|(k, (s, d))| {
            let mut p = model.prepare(s, Some(d))?;
            p.target = k + 1;
            Ok(p)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let refs: Vec<_> = items.iter().collect();
    let targets: Vec<usize> = items.iter().map(|p| p.target).collect();
    let store = model.init_params();
    let report = grad_check_sampled(&store, a.eps, a.samples, model.config.seed, |g| {
        let out = model
            .forward(g, &refs, None)
            .map_err(|e| ipagnn_autodiff::Error::Io(e.to_string()))?;
        let (loss, _) = model
            .loss(g, out.log_probs, &targets)
            .map_err(|e| ipagnn_autodiff::Error::Io(e.to_string()))?;
        Ok(loss)
    })?;
    println!("coordinates {}", report.coordinates);
    println!("max-relative-error {:e}", report.max_rel_error);
    if let Some((name, i, an, fd)) = &report.worst {
        println!("worst {name}[{i}] analytic {an:e} numeric {fd:e}");
    }
    Ok(if report.max_rel_error > a.tolerance {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Trace(a) => trace(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Localize(a) => localize(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
