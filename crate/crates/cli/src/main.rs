//! `ddx`: knowledge-base validation, case simulation, training, evaluation
//! and prediction.

mod manifest;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ddx::checkpoint;
use ddx::dataset::{build_vocabulary, merge, read_cases_file, write_cases, CaseSet};
use ddx::eval::{evaluate, format_table, EvalReport, ExpertDiagnoser, ModelDiagnoser, TruthMode};
use ddx::kb::{parse_knowledge_base, KbDocument, ValidationReport, DEFAULT_MIN_FINDINGS};
use ddx::model::{init_parameters, DEFAULT_DIM};
use ddx::simulate::simulate_dataset_with;
use ddx::synthetic::{separable_kb_document, SeparableKbSpec};
use ddx::trainer::{train_with, TrainConfig};
use ddx::{Execution, KnowledgeBase, SimConfig};

use manifest::{sidecar, Recorder};

#[derive(Parser)]
#[command(name = "ddx", version, about = "Differential diagnosis from a knowledge base and learned embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-base utilities.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Simulate labelled cases from a knowledge base.
    Simulate(SimulateArgs),
    /// Train a diagnosis model on one or more case files.
    Train(TrainArgs),
    /// Score models and/or the expert engine on case files.
    Eval(EvalArgs),
    /// Rank diseases for a single set of findings.
    Predict(PredictArgs),
}

#[derive(Subcommand)]
enum KbCommand {
    /// Check a knowledge-base file and report every problem.
    Validate(ValidateArgs),
    /// Write a synthetic separable knowledge base.
    Synth(SynthArgs),
}

#[derive(Args, Serialize)]
struct ValidateArgs {
    file: PathBuf,
    /// Minimum nonzero clinical findings per disease before warning.
    #[arg(long, default_value_t = DEFAULT_MIN_FINDINGS)]
    min_findings: usize,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    diseases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    kb: PathBuf,
    /// Total number of cases.
    #[arg(long, default_value_t = SimConfig::default().cases_total)]
    cases: usize,
    #[arg(long, default_value_t = SimConfig::default().min_cases_per_disease)]
    min_per_disease: usize,
    /// Diseases kept in each simulated differential.
    #[arg(long, default_value_t = SimConfig::default().ddx_top_k)]
    ddx_top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Case files (JSON lines); repeat or list several.
    #[arg(long, required = true, num_args = 1..)]
    cases: Vec<PathBuf>,
    /// Knowledge base used for demographic masks and finding metadata.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Keep only these findings: one id per line, or a knowledge-base file.
    #[arg(long)]
    restrict_findings: Option<PathBuf>,
    /// Cases scored after every epoch.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Truth::Argmax)]
    truth: Truth,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    #[arg(long, default_value_t = TrainConfig::default().dropout_rate)]
    dropout: f64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Model checkpoints to evaluate; repeat for several variants.
    #[arg(long, num_args = 1..)]
    model: Vec<PathBuf>,
    /// Also evaluate the expert engine over this knowledge base.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    cases: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    topk: Vec<usize>,
    #[arg(long)]
    target_disease: Option<String>,
    #[arg(long, value_enum, default_value_t = Truth::Argmax)]
    truth: Truth,
    #[arg(long, default_value_t = SimConfig::default().ddx_top_k)]
    ddx_top_k: usize,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long, value_enum, default_value_t = Engine::Model)]
    engine: Engine,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Present findings, comma separated.
    #[arg(long, value_delimiter = ',')]
    pos: Vec<String>,
    /// Absent findings, comma separated.
    #[arg(long, value_delimiter = ',')]
    neg: Vec<String>,
    /// Number of diseases listed is the largest k.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    topk: Vec<usize>,
    #[arg(long, default_value_t = SimConfig::default().ddx_top_k)]
    ddx_top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Truth {
    Argmax,
    SeedDisease,
}

impl From<Truth> for TruthMode {
    fn from(t: Truth) -> Self {
        match t {
            Truth::Argmax => TruthMode::Argmax,
            Truth::SeedDisease => TruthMode::SeedDisease,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Engine {
    Model,
    Expert,
}

/// A flag combination that parses but makes no sense.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.chain().any(|c| {
                c.is::<Usage>() || matches!(c.downcast_ref::<ddx::Error>(), Some(ddx::Error::Config(_)))
            });
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Kb(KbCommand::Validate(a)) => kb_validate(a),
        Command::Kb(KbCommand::Synth(a)) => kb_synth(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    }
}

fn execution(threads: usize) -> anyhow::Result<Execution> {
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    if threads == 1 {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting thread pool")?;
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without parallel support; ignoring --threads {threads}");
    Ok(Execution::Parallel)
}

fn load_kb(path: &Path) -> anyhow::Result<KnowledgeBase> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_knowledge_base(&text).with_context(|| format!("loading knowledge base {}", path.display()))
}

fn load_cases(paths: &[PathBuf], rec: &mut Recorder) -> anyhow::Result<CaseSet> {
    let mut sets = Vec::with_capacity(paths.len());
    for p in paths {
        sets.push(read_cases_file(p).with_context(|| format!("reading cases {}", p.display()))?);
        rec.input(p);
    }
    Ok(merge(&sets)?)
}

fn check_ks(ks: &[usize]) -> anyhow::Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--topk values must be positive"));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn kb_validate(a: ValidateArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let report = match KbDocument::from_json(&text) {
        Ok(doc) => doc.validate(a.min_findings),
        Err(e) => {
            let mut r = ValidationReport::default();
            r.errors.push(ddx::kb::Issue {
                severity: ddx::kb::Severity::Error,
                location: a.file.display().to_string(),
                message: e.to_string(),
            });
            r
        }
    };
    for issue in report.issues() {
        println!("{issue}");
    }
    if report.is_empty() {
        println!("ok");
    }
    if let Some(out) = &a.out {
        write(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        let mut rec = Recorder::start("kb validate", &a, 1);
        rec.input(&a.file);
        rec.output(out);
        rec.finish(out)?;
    }
    Ok(if report.is_valid() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn kb_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let spec = SeparableKbSpec { diseases: a.diseases, seed: a.seed, ..Default::default() };
    if spec.diseases == 0 {
        return Err(usage("--diseases must be at least 1"));
    }
    let mut rec = Recorder::start("kb synth", &a, 1);
    rec.seed("kb", a.seed);
    write(&a.out, &(separable_kb_document(&spec).to_json() + "\n"))?;
    rec.output(&a.out);
    rec.finish(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn simulate(a: SimulateArgs) -> anyhow::Result<ExitCode> {
    let exec = execution(a.threads)?;
    let mut rec = Recorder::start("simulate", &a, a.threads);
    rec.seed("simulate", a.seed);
    let kb = load_kb(&a.kb)?;
    rec.input(&a.kb);
    let cfg = SimConfig {
        cases_total: a.cases,
        min_cases_per_disease: a.min_per_disease,
        ddx_top_k: a.ddx_top_k,
        seed: a.seed,
        ..Default::default()
    };
    let cases = simulate_dataset_with(&kb, &cfg, exec)?;
    write(&a.out, &write_cases(&cases))?;
    rec.output(&a.out);
    rec.finish(&a.out)?;
    log::info!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// One id per line (`#` starts a comment), or a knowledge-base file whose
/// finding ids are kept.
fn read_restriction(path: &Path) -> anyhow::Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let doc = KbDocument::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(doc.findings.into_iter().map(|f| f.id).collect());
    }
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let exec = execution(a.threads)?;
    let mut rec = Recorder::start("train", &a, a.threads);
    rec.seed("train", a.seed);
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        dropout_rate: a.dropout,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;

    let cases = load_cases(&a.cases, &mut rec)?;
    let kb = match &a.kb {
        Some(p) => {
            rec.input(p);
            Some(load_kb(p)?)
        }
        None => None,
    };
    let restrict = match &a.restrict_findings {
        Some(p) => {
            rec.input(p);
            Some(read_restriction(p)?)
        }
        None => None,
    };
    let holdout = match &a.holdout {
        Some(p) => {
            rec.input(p);
            Some(read_cases_file(p).with_context(|| format!("reading cases {}", p.display()))?)
        }
        None => None,
    };

    let vocab = build_vocabulary(&[&cases], kb.as_ref(), restrict.as_ref())?;
    let p0 = init_parameters(&vocab, a.dim, a.seed, kb.as_ref())?;
    let (p, history) = train_with(p0, &cases, &cfg, holdout.as_ref().map(|h| (h, a.truth.into())), exec)?;

    checkpoint::save(&p, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    rec.output(&a.out);
    let log_path = sidecar(&a.out, "log");
    write(&log_path, &history.to_log())?;
    rec.output(&log_path);
    rec.finish(&a.out)?;
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} steps over {} cases; final mean loss {:.6}",
            history.steps,
            cases.len(),
            last.mean_loss
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn variant_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    reports: &'a [EvalReport],
}

fn eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    check_ks(&a.topk)?;
    if a.model.is_empty() && a.kb.is_none() {
        return Err(usage("give at least one --model or a --kb for the expert engine"));
    }
    let exec = execution(a.threads)?;
    let mut rec = Recorder::start("eval", &a, a.threads);
    let cases = load_cases(&a.cases, &mut rec)?;
    let truth: TruthMode = a.truth.into();
    let target = a.target_disease.as_deref();

    let mut reports = Vec::new();
    for path in &a.model {
        let p = checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))?;
        rec.input(path);
        reports.push(evaluate(&ModelDiagnoser(&p), &variant_name(path), &cases, &a.topk, truth, target, exec)?);
    }
    if let Some(path) = &a.kb {
        let kb = load_kb(path)?;
        rec.input(path);
        let engine = ExpertDiagnoser { kb: &kb, k: a.ddx_top_k };
        reports.push(evaluate(&engine, "expert", &cases, &a.topk, truth, target, exec)?);
    }

    print!("{}", format_table(&reports));
    if let Some(out) = &a.out {
        write(out, &(serde_json::to_string_pretty(&EvalOutput { reports: &reports })? + "\n"))?;
        rec.output(out);
        rec.finish(out)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Prediction {
    engine: Engine,
    ranked: Vec<(String, f64)>,
    skipped_findings: usize,
}

fn predict(a: PredictArgs) -> anyhow::Result<ExitCode> {
    check_ks(&a.topk)?;
    let k = a.topk.iter().copied().max().unwrap_or(5);
    let pos: BTreeSet<String> = a.pos.iter().filter(|s| !s.is_empty()).cloned().collect();
    let neg: BTreeSet<String> = a.neg.iter().filter(|s| !s.is_empty()).cloned().collect();
    if let Some(f) = pos.intersection(&neg).next() {
        return Err(usage(format!("finding `{f}` is both present and absent")));
    }
    let ranking = match a.engine {
        Engine::Model => {
            let Some(path) = &a.model else { bail!(usage("--engine model needs --model")) };
            let p = checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))?;
            ddx::eval::Diagnoser::diagnose(&ModelDiagnoser(&p), &pos, &neg)?
        }
        Engine::Expert => {
            let Some(path) = &a.kb else { bail!(usage("--engine expert needs --kb")) };
            let kb = load_kb(path)?;
            ddx::eval::Diagnoser::diagnose(&ExpertDiagnoser { kb: &kb, k: a.ddx_top_k }, &pos, &neg)?
        }
    };
    if ranking.skipped > 0 {
        log::warn!("ignored {} unknown finding(s)", ranking.skipped);
    }
    let ranked: Vec<(String, f64)> = ranking.ranked.into_iter().take(k).collect();
    for (i, (d, p)) in ranked.iter().enumerate() {
        println!("{:>2}  {d:<24} {p:.6}", i + 1);
    }
    if let Some(out) = &a.out {
        let pred = Prediction { engine: a.engine, ranked, skipped_findings: ranking.skipped };
        write(out, &(serde_json::to_string_pretty(&pred)? + "\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}
