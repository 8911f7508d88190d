//! Command-line front end: `verify` runs the full assertion suite over
//! randomized instances; `experiment` reproduces one of the quantitative
//! tables (or the sigmoid-decay sweep) and emits flat result records as CSV
//! or JSON.
//!
//! Exit codes: 0 success, 1 assertion/run failure, 2 usage error, 3 I/O
//! error (with a message on the diagnostic stream). Given the same command,
//! configuration, and seed, emitted output files are byte-identical across
//! runs.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnblind_core::blindcheck::verify_theorems;
use bnblind_core::experiments::{
    experiment_sigmoid_decay, experiment_table1, experiment_table2, experiment_table3,
    experiment_table3_sweep, experiment_table4, trial_stream, ExperimentResult,
};
use bnblind_core::normlayers::standardize_batch;
use bnblind_core::numkit::{gaussian_matrix, gaussian_vector};
use bnblind_core::{Mode, NetCfg, NormKind, RngStream, TaylorModel, Tolerance};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Environment override for the output directory; the only environment
/// variable the tool reads. A relative `--output` path is joined onto it.
pub const OUT_DIR_ENV: &str = "BNBLIND_OUT_DIR";

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "bnblind",
    version,
    about = "Verify and reproduce the gradient blindness of batch standardization"
)]
struct Cli {
    #[command(subcommand)]
    command: CommandArg,
}

#[derive(Debug, Subcommand)]
enum CommandArg {
    /// Run the randomized theorem-verification suite.
    Verify(CommonArgs),
    /// Reproduce one quantitative experiment and emit its records.
    Experiment {
        /// Which experiment to run.
        #[arg(value_enum)]
        name: ExperimentName,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Table1,
    Table2,
    Table3,
    Table4,
    SigmoidDecay,
}

impl ExperimentName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::Table1 => "table1",
            ExperimentName::Table2 => "table2",
            ExperimentName::Table3 => "table3",
            ExperimentName::Table4 => "table4",
            ExperimentName::SigmoidDecay => "sigmoid-decay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    Bn,
    Ln,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON configuration file; explicit flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Feature count D at the normalization layer (≥ 2).
    #[arg(long)]
    dims: Option<usize>,
    /// Batch size n (≥ 2).
    #[arg(long)]
    batch: Option<usize>,
    /// Trial count (≥ 1).
    #[arg(long)]
    trials: Option<usize>,
    /// Tower depth above the normalization (1–3). Table 3 sweeps all three
    /// depths unless this is given.
    #[arg(long = "bn-depth")]
    bn_depth: Option<usize>,
    /// Normalization variant for the experiment networks.
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Train- or eval-mode verification where applicable.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Forward ε of the normalization layer (≥ 0).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output encoding.
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Output file; records go to standard output when omitted.
    #[arg(long = "output", value_name = "PATH")]
    output_path: Option<PathBuf>,
}

/// Optional JSON configuration file. Unknown keys are rejected so typos
/// fail loudly instead of silently falling back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    dims: Option<usize>,
    batch: Option<usize>,
    trials: Option<usize>,
    bn_depth: Option<usize>,
    norm: Option<String>,
    mode: Option<String>,
    epsilon: Option<f64>,
    format: Option<String>,
    output: Option<PathBuf>,
}

/// Fully resolved invocation: defaults, then config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub dims: usize,
    pub batch: usize,
    pub trials: usize,
    /// Tower depth; `None` means "sweep 1–3" for table 3 and depth 2
    /// elsewhere.
    pub bn_depth: Option<usize>,
    pub norm: NormKind,
    pub mode: Mode,
    pub epsilon: f64,
    pub format: OutputFormat,
    pub output_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Verify,
    Experiment(ExperimentName),
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Failure channel with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config values, malformed config file → 2.
    Usage(String),
    /// Filesystem failures (unreadable config, unwritable output) → 3.
    Io(String),
    /// The run itself failed (evaluation error, aborted experiment) → 1.
    Run(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Run(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Run(m) => m,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration resolution
// ---------------------------------------------------------------------------

fn norm_from_str(s: &str) -> Result<NormKind, CliError> {
    match s {
        "bn" => Ok(NormKind::Bn),
        "ln" => Ok(NormKind::Ln),
        "none" => Ok(NormKind::None),
        other => Err(CliError::Usage(format!(
            "config: norm must be bn, ln, or none, got {other:?}"
        ))),
    }
}

fn mode_from_str(s: &str) -> Result<Mode, CliError> {
    match s {
        "train" => Ok(Mode::Train),
        "eval" => Ok(Mode::Eval),
        other => Err(CliError::Usage(format!(
            "config: mode must be train or eval, got {other:?}"
        ))),
    }
}

fn format_from_str(s: &str) -> Result<OutputFormat, CliError> {
    match s {
        "csv" => Ok(OutputFormat::Csv),
        "json" => Ok(OutputFormat::Json),
        other => Err(CliError::Usage(format!(
            "config: format must be csv or json, got {other:?}"
        ))),
    }
}

fn resolve(command: Command, common: CommonArgs) -> Result<RunConfig, CliError> {
    let file: FileConfig = match &common.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Io(format!("cannot read config file {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("malformed config file {}: {e}", path.display()))
            })?
        }
    };

    let norm = match common.norm {
        Some(NormArg::Bn) => NormKind::Bn,
        Some(NormArg::Ln) => NormKind::Ln,
        Some(NormArg::None) => NormKind::None,
        None => match &file.norm {
            Some(s) => norm_from_str(s)?,
            None => NormKind::Bn,
        },
    };
    let mode = match common.mode {
        Some(ModeArg::Train) => Mode::Train,
        Some(ModeArg::Eval) => Mode::Eval,
        None => match &file.mode {
            Some(s) => mode_from_str(s)?,
            None => Mode::Train,
        },
    };
    let format = match common.format {
        Some(f) => f,
        None => match &file.format {
            Some(s) => format_from_str(s)?,
            None => OutputFormat::Csv,
        },
    };

    let mut output_path = common.output_path.or(file.output);
    if let Some(p) = &output_path {
        if p.is_relative() {
            if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
                output_path = Some(PathBuf::from(dir).join(p));
            }
        }
    }

    let cfg = RunConfig {
        command,
        seed: common.seed.or(file.seed).unwrap_or(42),
        dims: common.dims.or(file.dims).unwrap_or(8),
        batch: common.batch.or(file.batch).unwrap_or(128),
        trials: common.trials.or(file.trials).unwrap_or(100),
        bn_depth: common.bn_depth.or(file.bn_depth),
        norm,
        mode,
        epsilon: common.epsilon.or(file.epsilon).unwrap_or(0.0),
        format,
        output_path,
    };

    if cfg.dims < 2 {
        return Err(CliError::Usage(format!("dims must be ≥ 2, got {}", cfg.dims)));
    }
    if cfg.batch < 2 {
        return Err(CliError::Usage(format!("batch must be ≥ 2, got {}", cfg.batch)));
    }
    if cfg.trials < 1 {
        return Err(CliError::Usage("trials must be ≥ 1".to_string()));
    }
    if let Some(depth) = cfg.bn_depth {
        if !(1..=3).contains(&depth) {
            return Err(CliError::Usage(format!("bn-depth must be 1–3, got {depth}")));
        }
    }
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(CliError::Usage(format!(
            "epsilon must be finite and ≥ 0, got {}",
            cfg.epsilon
        )));
    }
    Ok(cfg)
}

/// Parse an argument vector into a resolved configuration. Exposed for
/// tests; [`run`] wraps this with clap's help/usage handling.
pub fn parse_args<I, T>(args: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    match cli.command {
        CommandArg::Verify(common) => resolve(Command::Verify, common),
        CommandArg::Experiment { name, common } => resolve(Command::Experiment(name), common),
    }
}

// ---------------------------------------------------------------------------
// Records and emission
// ---------------------------------------------------------------------------

/// One flat output row. Field order is the emission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub seed: u64,
    pub passed: bool,
}

/// Flatten experiment results into records under one experiment label.
pub fn records_from_results(
    experiment: &str,
    results: &[ExperimentResult],
    seed: u64,
) -> Vec<ResultRecord> {
    results
        .iter()
        .map(|r| ResultRecord {
            experiment: experiment.to_string(),
            metric: r.name.clone(),
            mean: r.mean,
            std: r.std,
            trials: r.trials,
            seed,
            passed: r.passed(),
        })
        .collect()
}

/// Serialize records as RFC-4180 CSV with LF line endings and shortest
/// round-trip float rendering. Zero records still emit the header line.
pub fn emit_csv<W: Write>(out: W, records: &[ResultRecord]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["experiment", "metric", "mean", "std", "trials", "seed", "passed"])
        .map_err(|e| CliError::Io(format!("csv write: {e}")))?;
    for r in records {
        w.serialize(r).map_err(|e| CliError::Io(format!("csv write: {e}")))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("csv flush: {e}")))
}

/// Serialize records as a pretty-printed JSON array (newline-terminated);
/// zero records emit `[]`.
pub fn emit_json<W: Write>(mut out: W, records: &[ResultRecord]) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut out, records)
        .map_err(|e| CliError::Io(format!("json write: {e}")))?;
    out.write_all(b"\n").map_err(|e| CliError::Io(format!("json write: {e}")))
}

/// Render records to bytes in the requested format.
pub fn render(records: &[ResultRecord], format: OutputFormat) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    match format {
        OutputFormat::Csv => emit_csv(&mut buf, records)?,
        OutputFormat::Json => emit_json(&mut buf, records)?,
    }
    Ok(buf)
}

fn write_output(cfg: &RunConfig, bytes: &[u8]) -> Result<(), CliError> {
    match &cfg.output_path {
        Some(path) => write_file(path, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

fn net_cfg(cfg: &RunConfig) -> NetCfg {
    NetCfg {
        dims: cfg.dims,
        batch: cfg.batch,
        depth: cfg.bn_depth.unwrap_or(2),
        norm: cfg.norm,
        mode: cfg.mode,
        epsilon: cfg.epsilon,
        ..NetCfg::default()
    }
}

fn run_error(e: bnblind_core::CoreError) -> CliError {
    CliError::Run(e.to_string())
}

/// Randomized verification: a fresh symmetric Taylor model and a fresh
/// standardized batch per trial, through the full assertion engine.
/// Returns the aggregate records and whether every assertion passed.
pub fn run_verify(cfg: &RunConfig) -> Result<(Vec<ResultRecord>, bool), CliError> {
    let mut zero_checked = 0usize;
    let mut zero_failed = 0usize;
    let mut zero_max: f64 = 0.0;
    let mut nonzero_checked = 0usize;
    let mut nonzero_failed = 0usize;
    let mut nonzero_min = f64::INFINITY;
    let mut fd_max: f64 = 0.0;
    let mut closed_max: f64 = 0.0;
    let mut gamma_max: f64 = 0.0;
    for t in 0..cfg.trials {
        let mut xr = RngStream::new(cfg.seed, trial_stream(t, 0));
        let x = gaussian_matrix(&mut xr, cfg.dims, cfg.batch, 0.0, 1.0).map_err(run_error)?;
        let yb = standardize_batch(&x, 0.0).map_err(run_error)?;
        let mut mr = RngStream::new(cfg.seed, trial_stream(t, 1));
        let y_tilde = gaussian_vector(&mut mr, cfg.dims, 0.0, 0.5).map_err(run_error)?;
        let g = gaussian_vector(&mut mr, cfg.dims, 0.0, 1.0).map_err(run_error)?;
        let raw = gaussian_matrix(&mut mr, cfg.dims, cfg.dims, 0.0, 1.0).map_err(run_error)?;
        let h = raw.add(&raw.transpose()).scaled(0.5);
        let model = TaylorModel::new(y_tilde, g, h).map_err(run_error)?;
        let report = verify_theorems(&model, &yb, Tolerance::ZERO_ASSERTION).map_err(run_error)?;
        for a in &report.zero_assertions {
            zero_checked += 1;
            zero_max = zero_max.max(a.norm);
            if !a.passed {
                zero_failed += 1;
            }
        }
        for a in &report.nonzero_assertions {
            nonzero_checked += 1;
            nonzero_min = nonzero_min.min(a.norm);
            if !a.passed {
                nonzero_failed += 1;
            }
        }
        fd_max = fd_max.max(report.delta_metrics["fd_residual_max"]);
        closed_max = closed_max.max(report.delta_metrics["closed_form_residual_max"]);
        gamma_max = gamma_max.max(report.delta_metrics["gamma_grad_norm"]);
    }
    if nonzero_checked == 0 {
        nonzero_min = 0.0;
    }
    let all_passed = zero_failed == 0 && nonzero_failed == 0;
    let row = |metric: &str, value: f64, passed: bool| ResultRecord {
        experiment: "verify".to_string(),
        metric: metric.to_string(),
        mean: value,
        std: 0.0,
        trials: cfg.trials,
        seed: cfg.seed,
        passed,
    };
    let records = vec![
        row("zero_assertion_max_norm", zero_max, zero_failed == 0),
        row("nonzero_assertion_min_norm", nonzero_min, nonzero_failed == 0),
        row("fd_residual_max", fd_max, fd_max <= 1e-5),
        row("closed_form_residual_max", closed_max, closed_max <= 1e-9),
        row("gamma_grad_norm_max", gamma_max, true),
    ];
    let summary = format!(
        "verify: trials={} dims={} batch={} seed={}\n\
         zero assertions: {zero_checked} checked, {zero_failed} failed (max norm {zero_max:e})\n\
         nonzero assertions: {nonzero_checked} checked, {nonzero_failed} failed (min norm {nonzero_min:e})\n\
         fd residual max: {fd_max:e}\n\
         closed-form residual max: {closed_max:e}\n\
         {}",
        cfg.trials,
        cfg.dims,
        cfg.batch,
        cfg.seed,
        if all_passed { "PASS" } else { "FAIL" },
    );
    println!("{summary}");
    Ok((records, all_passed))
}

/// Run one experiment to records.
pub fn run_experiment(cfg: &RunConfig, name: ExperimentName) -> Result<Vec<ResultRecord>, CliError> {
    let net = net_cfg(cfg);
    let results = match name {
        ExperimentName::Table1 => {
            experiment_table1(cfg.seed, cfg.trials, &net).map_err(run_error)?
        }
        ExperimentName::Table2 => {
            experiment_table2(cfg.seed, cfg.trials, &net).map_err(run_error)?
        }
        ExperimentName::Table3 => match cfg.bn_depth {
            Some(_) => vec![experiment_table3(cfg.seed, cfg.trials, &net).map_err(run_error)?],
            None => experiment_table3_sweep(cfg.seed, cfg.trials, &net).map_err(run_error)?,
        },
        ExperimentName::Table4 => {
            experiment_table4(cfg.seed, cfg.trials, &net).map_err(run_error)?
        }
        ExperimentName::SigmoidDecay => experiment_sigmoid_decay(cfg.seed).map_err(run_error)?,
    };
    Ok(records_from_results(name.as_str(), &results, cfg.seed))
}

/// Execute a resolved configuration. Returns the process exit code.
pub fn execute(cfg: &RunConfig) -> Result<u8, CliError> {
    match cfg.command {
        Command::Verify => {
            let (records, all_passed) = run_verify(cfg)?;
            if cfg.output_path.is_some() {
                let bytes = render(&records, cfg.format)?;
                write_output(cfg, &bytes)?;
            }
            Ok(if all_passed { 0 } else { 1 })
        }
        Command::Experiment(name) => {
            let records = run_experiment(cfg, name)?;
            let bytes = render(&records, cfg.format)?;
            write_output(cfg, &bytes)?;
            Ok(if records.iter().all(|r| r.passed) { 0 } else { 1 })
        }
    }
}

/// Argument vector in, exit code out. Help and version print to standard
/// output and exit 0; other parse failures print clap's message and exit 2.
pub fn run_code<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    2
                }
            };
        }
    };
    let resolved = match cli.command {
        CommandArg::Verify(common) => resolve(Command::Verify, common),
        CommandArg::Experiment { name, common } => resolve(Command::Experiment(name), common),
    };
    let cfg = match resolved {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return e.code();
        }
    };
    match execute(&cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

/// Process entry point used by the binary.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    ExitCode::from(run_code(args))
}
