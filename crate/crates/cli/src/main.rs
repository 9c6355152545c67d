use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use reassign_core::fusion::{IbcConfig, Method, WpibcConfig};
use reassign_core::hmm::TrainConfig;
use reassign_core::io;
use reassign_core::pipeline::{
    build_field_ensemble, evaluate_field, extract_records, fields_in, predict_field, split_field,
    train_field_models, EnsembleConfig, FieldDataset, FieldPrediction, Layout, StateGrid, TraceRecord,
};
use reassign_core::report::emit_report;
use reassign_core::trace::{Dialect, ExtractOptions, Extractor, RawBugReport, TracePolicy};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_IO: u8 = 3;

/// Predict bug-report field reassignment from stack traces with HMM ensembles.
#[derive(Debug, Parser)]
#[command(name = "reassign", version)]
struct Cli {
    /// Seed for every random choice (splits, initialisation).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads for model training (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Log progress to stderr (-vv for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract one stack trace per bug report into trace JSONL.
    Extract(ExtractArgs),
    /// Split each field and train the HMM-R and HMM-NR grids.
    Train(TrainArgs),
    /// Fuse the trained models of each field into an ensemble.
    Combine(CombineArgs),
    /// Predict reassignment of one field for new bug reports.
    Predict(PredictArgs),
    /// Evaluate ensembles on the held-out test portions and write reports.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Bug-report JSONL: {"id", "text", "labels"} per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    dialect: Dialect,
    #[command(flatten)]
    extract: ExtractFlags,
}

#[derive(Debug, Args)]
struct ExtractFlags {
    /// Which trace to keep when a report has several: first or concat.
    #[arg(long, default_value = "first")]
    policy: TracePolicy,
    /// Start a new trace at "Caused by:" instead of continuing the current one.
    #[arg(long)]
    no_caused_by: bool,
    /// Keep at most this many top-of-stack frames per trace.
    #[arg(long)]
    max_frames: Option<usize>,
}

impl ExtractFlags {
    fn extractor(&self, dialect: Dialect) -> Extractor {
        Extractor::new(dialect).with_options(ExtractOptions {
            follow_caused_by: !self.no_caused_by,
            max_frames: self.max_frames,
        })
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Trace JSONL produced by `extract`.
    #[arg(long)]
    traces: PathBuf,
    /// Artifact directory (models/, splits/, ensembles/).
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these fields (repeatable); default is every labelled field.
    #[arg(long = "field")]
    fields: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hidden-state grid: start..end:step or a comma list.
    #[arg(long, default_value = "10..200:10")]
    states: StateGrid,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Relative log-likelihood gain below which EM stops.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Args)]
struct CombineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "wpibc")]
    method: Method,
    /// Weighted-kappa level at which a detector counts as redundant.
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    /// Crisp detectors kept per base detector.
    #[arg(long, default_value_t = 10)]
    d: usize,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Bug-report JSONL.
    #[arg(long)]
    input: PathBuf,
    /// Artifact directory holding models/ and ensembles/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    field: String,
    #[arg(long)]
    dialect: Dialect,
    /// Prediction JSONL; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    extract: ExtractFlags,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Maximum tolerable false-positive rate for the TPR comparison.
    #[arg(long, default_value_t = 0.12)]
    mtfpr: f64,
    /// Report directory; default <out>/report.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined with ": ", skipping causes a message already
/// ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<reassign_core::Error>() {
            return if core.is_io() { EXIT_IO } else { EXIT_DATA };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_DATA
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Extract(args) => extract(args),
        Command::Train(args) => train(cli, args),
        Command::Combine(args) => combine(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => evaluate(args),
    }
}

fn extract(args: &ExtractArgs) -> anyhow::Result<()> {
    let reports: Vec<RawBugReport> = io::read_jsonl(&args.input)?;
    let extractor = args.extract.extractor(args.dialect);
    let (records, skipped) = extract_records(&reports, &extractor, args.extract.policy);
    io::write_jsonl(&args.output, &records)?;
    info!("{} traces extracted, {skipped} reports without a trace", records.len());
    Ok(())
}

/// Field datasets named on the command line, or every labelled field.
fn load_fields(data: &DataArgs) -> anyhow::Result<Vec<FieldDataset>> {
    let records: Vec<TraceRecord> = io::read_jsonl(&data.traces)?;
    let fields: Vec<String> = if data.fields.is_empty() {
        fields_in(&records).into_iter().collect()
    } else {
        data.fields.clone()
    };
    if fields.is_empty() {
        bail!("no labelled fields in {}", data.traces.display());
    }
    fields
        .iter()
        .map(|f| Ok(FieldDataset::from_records(f, &records)?))
        .collect()
}

fn train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<()> {
    let layout = Layout::new(&args.data.out);
    let config = TrainConfig {
        max_iters: args.max_iters,
        rel_tol: args.tol,
        restarts: args.restarts,
        seed: cli.seed,
        ..TrainConfig::default()
    };
    for data in load_fields(&args.data)? {
        let split = split_field(&data, cli.seed).with_context(|| format!("field {}", data.field))?;
        layout.write_split(&split)?;
        let models = train_field_models(&split, &data, &args.states, &config, cli.jobs)
            .with_context(|| format!("training field {}", data.field))?;
        let paths = layout.write_models(&models)?;
        info!("{}: wrote {} models", data.field, paths.len());
    }
    Ok(())
}

fn combine(args: &CombineArgs) -> anyhow::Result<()> {
    let layout = Layout::new(&args.data.out);
    let config = EnsembleConfig {
        method: args.method,
        wpibc: WpibcConfig {
            tau: args.tau,
            d: args.d,
            ibc: IbcConfig::default(),
            ..WpibcConfig::default()
        },
    };
    for data in load_fields(&args.data)? {
        let split = layout.read_split(&data.field)?;
        let validation = split.validation(&data)?;
        let models = layout.discover_models(&data.field)?;
        let fusion = build_field_ensemble(&data.field, &models, &validation, &config)
            .with_context(|| format!("combining field {}", data.field))?;
        let path = layout.write_ensemble(&fusion.ensemble)?;
        info!(
            "{}: {} bases, {} rules, validation AUC {:.4} -> {}",
            data.field,
            fusion.stats.bases.len(),
            fusion.ensemble.rules.len(),
            fusion.auc(),
            path.display()
        );
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let layout = Layout::new(&args.out);
    let ensemble = layout.read_ensemble(&args.field)?;
    let bases = layout.read_bases(&ensemble)?;
    let base_refs: Vec<_> = bases.iter().collect();
    let reports: Vec<RawBugReport> = io::read_jsonl(&args.input)?;
    let extractor = args.extract.extractor(args.dialect);
    let predictions: Vec<FieldPrediction> = reports
        .iter()
        .map(|r| predict_field(&ensemble, &base_refs, &extractor, args.extract.policy, r))
        .collect::<reassign_core::Result<_>>()?;
    match &args.output {
        Some(path) => io::write_jsonl(path, &predictions)?,
        None => write_stdout(&predictions)?,
    }
    Ok(())
}

fn write_stdout(predictions: &[FieldPrediction]) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let layout = Layout::new(&args.data.out);
    let mut reports = Vec::new();
    for data in load_fields(&args.data)? {
        let split = layout.read_split(&data.field)?;
        let ensemble = layout.read_ensemble(&data.field)?;
        let models = layout.discover_models(&data.field)?;
        let evaluation = evaluate_field(
            &ensemble,
            &models,
            &split.validation(&data)?,
            &split.ensemble_test(&data)?,
            args.mtfpr,
        )
        .with_context(|| format!("evaluating field {}", data.field))?;
        let r = &evaluation.report;
        if r.improvement.value().is_none() {
            warn!("{}: best single detector has zero TPR at mtfpr {}", r.field, r.mtfpr);
        }
        info!("{}: test AUC {:.4}, F {:.4}", r.field, r.auc, r.f_measure);
        reports.push(evaluation.report);
    }
    let dir = report_dir(args);
    for path in emit_report(&dir, &reports)? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn report_dir(args: &EvaluateArgs) -> PathBuf {
    args.report
        .clone()
        .unwrap_or_else(|| Path::new(&args.data.out).join("report"))
}
