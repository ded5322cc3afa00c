//! Command-line entry point: `run`, `grad-check`, `synth` and `inspect`.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::embeddings::{load_embeddings, save_embeddings, synthesize, DataError, EmbeddingDataset, SyntheticSpec};
use crate::interpreter::labels::{format_labels, read_labels};
use crate::interpreter::{FrozenInterpreter, InterpreterConfig, InterpreterError};
use crate::model::{ClassVocabulary, MemoryPrompt};
use crate::numerics::gradcheck::{central_difference, compare, GradCheckReport, DEFAULT_FLOOR};
use crate::numerics::{grad, BackwardFault, NumericsError, RealArray, Tape};
use crate::protocol::{build_plan, run_experiment, thread_count, Experiment, ProtocolError, ResultsTable, SessionResult};
use crate::seeds::{derive, Stream};
use crate::training::{
    image_matrix, read_checkpoint, session_gamma, stimulation_rate_on, total_loss, write_checkpoint, Checkpoint,
    TrainConfig, TrainError, TrainingState,
};

pub use config::{CheckConfig, ConfigError, DataSource, InjectedFault, RunConfig, Settings};

pub const RESULTS_FILE: &str = "results.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mfck";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        Self::Numeric(e.to_string())
    }
}

fn interpreter_code(e: &InterpreterError) -> i32 {
    match e {
        InterpreterError::InvalidConfig(_) => 2,
        InterpreterError::Numerics(_) => 4,
        _ => 3,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::InvalidConfig(_) => 2,
        TrainError::Numerics(_) | TrainError::NonFiniteGradient { .. } => 4,
        TrainError::Interpreter(inner) => interpreter_code(inner),
        _ => 3,
    }
}

fn protocol_code(e: &ProtocolError) -> i32 {
    match e {
        ProtocolError::Session { source, .. } => protocol_code(source),
        ProtocolError::InvalidPlan(_) => 2,
        ProtocolError::Numerics(_) => 4,
        ProtocolError::Train(inner) => train_code(inner),
        ProtocolError::Interpreter(inner) => interpreter_code(inner),
        _ => 3,
    }
}

fn with_code(code: i32, message: String) -> CliError {
    match code {
        2 => CliError::Config(message),
        4 => CliError::Numeric(message),
        _ => CliError::Data(message),
    }
}

impl From<InterpreterError> for CliError {
    fn from(e: InterpreterError) -> Self {
        with_code(interpreter_code(&e), e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        with_code(train_code(&e), e.to_string())
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        with_code(protocol_code(&e), e.to_string())
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "mfscil", version, about = "Few-shot class-incremental learning with a learned memory prompt")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every session described by a config file.
    Run { config: PathBuf },
    /// Compare analytic gradients with central finite differences.
    GradCheck { config: Option<PathBuf> },
    /// Write a synthetic train/test embedding pair and a labels file.
    Synth(SynthArgs),
    /// Summarize a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 14)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for train.mfse, test.mfse and labels.tsv.
    out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config, out).map(|_| ()),
        Command::GradCheck { config } => cmd_grad_check(config.as_deref(), out).map(|_| ()),
        Command::Synth(args) => cmd_synth(&args.spec(), &args.out, out),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

impl SynthArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            dim: self.dim,
            separation: self.separation,
            noise_std: self.noise,
            seed: self.seed,
        }
    }
}

fn load_settings(path: Option<&Path>) -> Result<Settings, CliError> {
    Ok(match path {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    })
}

/// The interpreter a config seed selects.
pub fn seeded_interpreter(config: &InterpreterConfig, seed: u64) -> InterpreterConfig {
    InterpreterConfig {
        seed: derive(seed, Stream::Interpreter, 0),
        ..config.clone()
    }
}

/// The train/test datasets a run config describes.
pub fn load_data(config: &RunConfig) -> Result<(EmbeddingDataset, EmbeddingDataset), CliError> {
    let dim = config.interpreter.model_dim;
    match &config.data {
        DataSource::Synthetic(spec) => {
            let spec = SyntheticSpec {
                seed: derive(config.seed, Stream::Data, 0),
                ..spec.clone()
            };
            let (_, train, test) = synthesize(&spec)?;
            Ok((train, test))
        }
        DataSource::Files { train, test, labels } => {
            let labels = read_labels(labels).map_err(|e| CliError::Data(format!("{}: {e}", labels.display())))?;
            let load = |path: &Path| {
                load_embeddings(path, labels.clone(), Some(dim))
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
            };
            Ok((load(train)?, load(test)?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub results: ResultsTable,
    pub results_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn cmd_run(config_path: &Path, out: &mut dyn Write) -> Result<RunSummary, CliError> {
    let config = RunConfig::from_settings(&Settings::load(config_path)?)?;
    run_config(&config, out)
}

pub fn run_config(config: &RunConfig, out: &mut dyn Write) -> Result<RunSummary, CliError> {
    let (train, test) = load_data(config)?;
    let interpreter = FrozenInterpreter::<f32>::build(&seeded_interpreter(&config.interpreter, config.seed))?;

    let resume = match &config.resume {
        None => None,
        Some(path) => {
            let ck = read_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if ck.prompt_len != config.prompt_len || ck.dim != config.interpreter.model_dim {
                return Err(CliError::Data(format!(
                    "checkpoint has L={} D={}, config has L={} D={}",
                    ck.prompt_len, ck.dim, config.prompt_len, config.interpreter.model_dim
                )));
            }
            let plan = build_plan(&train, config.plan, config.seed)?;
            if ck.session > plan.sessions() {
                return Err(CliError::Data(format!(
                    "checkpoint is at session {} but the plan has {}",
                    ck.session,
                    plan.sessions()
                )));
            }
            let learned = plan.learned(ck.session).unwrap_or_default();
            let csv = path.with_file_name(RESULTS_FILE);
            let prior = match std::fs::read_to_string(&csv) {
                Ok(text) => ResultsTable::from_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => ResultsTable::default(),
                Err(e) => return Err(io(&csv, e)),
            };
            Some((ck.into_state::<f32>(learned)?, prior))
        }
    };

    let experiment = Experiment {
        plan: config.plan,
        prompt_len: config.prompt_len,
        suffix: config.suffix.clone(),
        train: config.train.clone(),
        seed: config.seed,
        threads: thread_count(),
        stop_after: config.stop_after,
        record_wall_time: config.record_wall_time,
    };
    let _ = writeln!(out, "{:>7} {:>7} {:>9} {:>10} {:>8}", "session", "classes", "accuracy", "loss", "seconds");
    let print_row = |out: &mut dyn Write, r: &SessionResult| {
        let _ = writeln!(
            out,
            "{:>7} {:>7} {:>9.4} {:>10.6} {:>8.2}",
            r.session, r.classes, r.accuracy, r.loss, r.seconds
        );
    };
    if let Some((_, prior)) = &resume {
        for r in &prior.rows {
            print_row(out, r);
        }
    }
    let outcome = run_experiment(&experiment, &interpreter, &train, &test, resume, |r| print_row(out, r))?;

    std::fs::create_dir_all(&config.output_dir).map_err(|e| io(&config.output_dir, e))?;
    let results_path = config.output_dir.join(RESULTS_FILE);
    std::fs::write(&results_path, outcome.results.to_csv()).map_err(|e| io(&results_path, e))?;
    let checkpoint_path = config.output_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint_path, &Checkpoint::from_state(&outcome.state))
        .map_err(|e| CliError::Data(format!("{}: {e}", checkpoint_path.display())))?;
    let _ = writeln!(
        out,
        "average accuracy {:.4}; wrote {} and {}",
        outcome.results.average_accuracy(),
        results_path.display(),
        checkpoint_path.display()
    );
    Ok(RunSummary {
        results: outcome.results,
        results_path,
        checkpoint_path,
    })
}

/// Outcome of one finite-difference suite; `None` when skipped.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub report: Option<GradCheckReport>,
}

#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub suites: Vec<SuiteResult>,
    pub tolerance: f64,
    pub dim: usize,
}

impl GradCheckSummary {
    pub fn passes(&self) -> bool {
        self.suites
            .iter()
            .all(|s| s.report.as_ref().is_none_or(|r| r.passes(self.tolerance)))
    }
}

pub fn cmd_grad_check(config_path: Option<&Path>, out: &mut dyn Write) -> Result<GradCheckSummary, CliError> {
    let config = CheckConfig::from_settings(&load_settings(config_path)?)?;
    let summary = grad_check(&config)?;
    let mut failure = None;
    for suite in &summary.suites {
        match &suite.report {
            None => {
                let _ = writeln!(out, "{}: skipped (prompt length 0, no prompt gradient)", suite.name);
            }
            Some(r) => {
                let (row, col) = (r.worst_index / summary.dim, r.worst_index % summary.dim);
                let verdict = if r.passes(summary.tolerance) { "pass" } else { "FAIL" };
                let _ = writeln!(
                    out,
                    "{}: max relative error {:.3e} at entry {} (row {row}, col {col}) over {} entries: {verdict}",
                    suite.name,
                    r.max_rel_error,
                    r.worst_index,
                    r.analytic.len()
                );
                if !r.passes(summary.tolerance) && failure.is_none() {
                    failure = Some(format!(
                        "{} gradient check failed: relative error {:.3e} >= {:.0e} at entry {} (row {row}, col {col})",
                        suite.name, r.max_rel_error, summary.tolerance, r.worst_index
                    ));
                }
            }
        }
    }
    match failure {
        Some(message) => Err(CliError::Numeric(message)),
        None => Ok(summary),
    }
}

/// Finite-difference suites for `total_loss` (with an active penalty) and
/// `stimulation_rate`, in 64-bit.
pub fn grad_check(config: &CheckConfig) -> Result<GradCheckSummary, CliError> {
    let (l, d) = (config.prompt_len, config.interpreter.model_dim);
    let skipped = |name| SuiteResult { name, report: None };
    if l == 0 {
        return Ok(GradCheckSummary {
            suites: vec![skipped("total_loss"), skipped("stimulation_rate")],
            tolerance: config.tolerance,
            dim: d,
        });
    }
    let interpreter = FrozenInterpreter::<f64>::build(&seeded_interpreter(&config.interpreter, config.seed))?;
    let spec = SyntheticSpec {
        classes: config.classes,
        train_per_class: 3,
        test_per_class: 1,
        dim: d,
        separation: 0.5,
        noise_std: 0.1,
        seed: derive(config.seed, Stream::Data, 0),
    };
    let (_, data, _) = synthesize(&spec)?;
    let vocabulary = ClassVocabulary::new(&interpreter.config().clone(), data.labels(), config.suffix.as_deref(), l)?;
    let learned: Vec<u32> = (0..config.classes as u32).collect();
    let (base, session) = learned.split_at(config.classes / 2);

    let anchor = MemoryPrompt::<f64>::init(l, d, derive(config.seed, Stream::Prompt, 0)).into_array();
    let offset = MemoryPrompt::<f64>::init(l, d, derive(config.seed, Stream::Prompt, 1)).into_array();
    let theta = RealArray::new(
        vec![l, d],
        anchor.data().iter().zip(offset.data()).map(|(a, o)| a + 10.0 * o).collect(),
    )?;
    let base_pairs: Vec<(u32, u32)> = base
        .iter()
        .flat_map(|&c| data.class_samples(c).map(move |s| (c, s.sample_id())))
        .collect();
    let gamma = session_gamma(&interpreter, &anchor, &vocabulary, &data, base, &base_pairs)?;
    let state = TrainingState::restore(
        MemoryPrompt::from_array(theta.clone())?,
        Some(anchor),
        gamma,
        1,
        base.to_vec(),
    )?;
    let session_pairs: Vec<(u32, u32)> = session
        .iter()
        .flat_map(|&c| data.class_samples(c).map(move |s| (c, s.sample_id())))
        .collect::<Vec<_>>()
        .into_iter()
        .cycle()
        .take(config.batch)
        .collect();
    let images = image_matrix::<f64>(&data, &session_pairs)?;
    let labels: Vec<u32> = session_pairs.iter().map(|&(c, _)| c).collect();
    let train = TrainConfig {
        penalty_weight: config.penalty_weight,
        logit_scale: config.logit_scale,
        normalize_gamma: config.normalize_gamma,
        ..TrainConfig::default()
    };
    let fault = config.fault.map(|f| match f {
        InjectedFault::GeluSlope => BackwardFault::GeluSlope,
    });

    let loss_at = |probe: &RealArray<f64>, with_grad: bool| -> Result<(f64, Option<RealArray<f64>>), TrainError> {
        let mut tape = Tape::new();
        tape.set_backward_fault(fault);
        let leaf = tape.leaf(probe.clone());
        let loss = total_loss(
            &mut tape,
            &interpreter,
            leaf,
            &state,
            &vocabulary,
            &learned,
            session,
            &images,
            &labels,
            &train,
        )?;
        let value = tape.value(loss).scalar_value()?;
        let gradient = if with_grad { Some(grad(&tape, loss, leaf)?) } else { None };
        Ok((value, gradient))
    };
    let analytic = loss_at(&theta, true)?.1.expect("gradient requested");
    let numeric = central_difference(|probe| Ok::<_, TrainError>(loss_at(probe, false)?.0), &theta, config.step)?;
    let loss_report = compare(&analytic, &numeric, DEFAULT_FLOOR);

    let mut worst: Option<GradCheckReport> = None;
    for &c in &learned {
        let sample = data
            .class_samples(c)
            .next()
            .ok_or_else(|| CliError::Data(format!("class {c} has no samples")))?;
        let image: Vec<f64> = sample.vector().iter().map(|&v| v as f64).collect();
        let tokens = vocabulary.tokens(c);
        let mut tape = Tape::new();
        tape.set_backward_fault(fault);
        let analytic = stimulation_rate_on(&mut tape, &interpreter, &theta, &image, tokens)?;
        let numeric = central_difference(
            |probe| -> Result<f64, CliError> {
                let m = interpreter.interpret(probe, tokens)?;
                Ok(m.data().iter().zip(&image).map(|(a, b)| a * b).sum())
            },
            &theta,
            config.step,
        )?;
        let report = compare(&analytic, &numeric, DEFAULT_FLOOR);
        if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
            worst = Some(report);
        }
    }

    Ok(GradCheckSummary {
        suites: vec![
            SuiteResult {
                name: "total_loss",
                report: Some(loss_report),
            },
            SuiteResult {
                name: "stimulation_rate",
                report: worst,
            },
        ],
        tolerance: config.tolerance,
        dim: d,
    })
}

pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (_, train, test) = synthesize(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    save_embeddings(&out_dir.join("train.mfse"), &train)?;
    save_embeddings(&out_dir.join("test.mfse"), &test)?;
    let labels = out_dir.join("labels.tsv");
    std::fs::write(&labels, format_labels(train.labels())).map_err(|e| io(&labels, e))?;
    let _ = writeln!(
        out,
        "wrote {} classes ({} train, {} test samples, dim {}) to {}",
        spec.classes,
        train.len(),
        test.len(),
        spec.dim,
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_inspect(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = read_checkpoint(path).map_err(|e| CliError::Data(format!("corrupt checkpoint {}: {e}", path.display())))?;
    let g = ck.gamma_summary();
    let _ = writeln!(out, "prompt length      {}", ck.prompt_len);
    let _ = writeln!(out, "dimension          {}", ck.dim);
    let _ = writeln!(out, "session            {}", ck.session);
    let _ = writeln!(out, "anchor             {}", if ck.anchor.is_some() { "present" } else { "absent" });
    let _ = writeln!(out, "gamma min |.|      {:.6e}", g.min_abs);
    let _ = writeln!(out, "gamma max |.|      {:.6e}", g.max_abs);
    let _ = writeln!(out, "gamma mean |.|     {:.6e}", g.mean_abs);
    let _ = writeln!(out, "gamma top decile   {:.6e}", g.top_decile_threshold);
    Ok(())
}
