//! Command-line front end.
//!
//! Exit status: 0 success, 1 usage error, 2 data or format error, 3 solver or
//! fit error. Failures end with a single `error_code=<n> detail=<text>` line on
//! stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::calibration::{calibrate_file, write_residuals_csv, CalibrationOptions, SystemMode};
use crate::error::{Error, Result};
use crate::evaluate::{apply_transfer, evaluate_reports, fit_transfer, write_evaluation_csv};
use crate::model::{load_table_file, BucketTaxonomy, EnergyTable, LookupMode};
use crate::nnls::DEFAULT_TOL;
use crate::predict::{attribute, predict_energy, render_attribution_text, write_attribution_csv, PredictionReport};
use crate::profile::{load_instruction_profile, GroupingRules, InstructionProfile};
use crate::synth::{generate, write_dataset, SynthSpec};
use crate::trace::{DEFAULT_CV_THRESHOLD, DEFAULT_WINDOW_MS};

pub const LOG_ENV: &str = "WATTBENCH_LOG";

#[derive(Debug, Parser)]
#[command(name = "wattbench", version, about = "Per-instruction GPU energy calibration and prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate an energy table from a microbenchmark manifest.
    Train(TrainArgs),
    /// Predict the energy of a profiled kernel.
    Predict(PredictArgs),
    /// Rank the energy contributors of a prediction report.
    Attribute(AttributeArgs),
    /// Score prediction reports against measured energies.
    Evaluate(EvaluateArgs),
    /// Fit an affine map between systems and transfer a table.
    Transfer(TransferArgs),
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Summarize an energy table.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    /// Grouping rules JSON (defaults to the built-in rules).
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

impl RulesArgs {
    fn load(&self) -> Result<GroupingRules> {
        match &self.rules {
            Some(p) => GroupingRules::load(p),
            None => Ok(GroupingRules::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Residual CSV path (defaults to `<out stem>.residuals.csv`).
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    #[arg(long, default_value = "square")]
    pub system: SystemMode,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW_MS)]
    pub window_ms: f64,
    #[arg(long, default_value_t = DEFAULT_CV_THRESHOLD)]
    pub cv_threshold: f64,
    #[command(flatten)]
    pub rules: RulesArgs,
    /// Bucket taxonomy JSON (defaults to the built-in taxonomy).
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// Opcode count CSV.
    #[arg(long)]
    pub profile: PathBuf,
    /// Profile metadata JSON (defaults to `<profile stem>.meta.json`).
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long, default_value = "pred")]
    pub mode: LookupMode,
    #[command(flatten)]
    pub rules: RulesArgs,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Also write the ranking as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with `workload,measured_j,prediction_report_file`.
    #[arg(long)]
    pub input: PathBuf,
    /// Scored CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub source: PathBuf,
    /// JSON object of measured target energies, group key to joules.
    #[arg(long)]
    pub target_subset: PathBuf,
    /// Share of the measured keys used in the fit.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target constant power in watts.
    #[arg(long)]
    pub p_const: Option<f64>,
    /// Target static power in watts.
    #[arg(long)]
    pub p_static: Option<f64>,
    #[arg(long)]
    pub map_out: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthesis parameters as JSON; unset fields take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_instructions: Option<usize>,
    #[arg(long)]
    pub n_benchmarks: Option<usize>,
    #[arg(long)]
    pub noise_pct: Option<f64>,
    #[arg(long)]
    pub n_apps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub table: PathBuf,
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Input(_) => 1,
        Error::Solver { .. } | Error::Fit(_) | Error::DegenerateFit(_) => 3,
        _ => 2,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn fail(code: i32, detail: &str) -> i32 {
    let detail = detail.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error_code={code} detail={detail}");
    code
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("usage error");
            return fail(1, first.trim_start_matches("error: "));
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => fail(exit_code(&e), &e.to_string()),
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Attribute(a) => attribute_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Transfer(a) => transfer(a),
        Command::Synth(a) => synth(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

/// Writes through a temporary file in the destination directory, renamed
/// into place only once complete.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn stdout_write(contents: &[u8]) -> Result<()> {
    std::io::stdout()
        .write_all(contents)
        .map_err(|e| Error::io("<stdout>", e))
}

fn residuals_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "table".into());
    out.with_file_name(format!("{stem}.residuals.csv"))
}

fn train(a: &TrainArgs) -> Result<()> {
    require_file(&a.manifest)?;
    let options = CalibrationOptions {
        mode: a.system,
        tol: a.tol,
        window_ms: a.window_ms,
        cv_threshold: a.cv_threshold,
        rules: a.rules.load()?,
        taxonomy: match &a.taxonomy {
            Some(p) => BucketTaxonomy::load(p)?,
            None => BucketTaxonomy::default(),
        },
    };
    let outcome = calibrate_file(&a.manifest, &options)?;
    for w in &outcome.warnings {
        info!("{w}");
    }
    let mut residuals = Vec::new();
    write_residuals_csv(&outcome.solve, &mut residuals)?;
    write_atomic(&a.out, outcome.table.to_json().as_bytes())?;
    let residual_path = a.residuals.clone().unwrap_or_else(|| residuals_path(&a.out));
    write_atomic(&residual_path, &residuals)?;
    println!(
        "trained {} instructions from {} benchmarks; residual {:e} J; table {}",
        outcome.solve.energies.len(),
        outcome.records.len(),
        outcome.solve.residual_norm,
        a.out.display()
    );
    Ok(())
}

/// `foo.opcodes.csv` or `foo.csv` becomes `foo.meta.json`.
pub fn infer_meta_path(profile: &Path) -> PathBuf {
    let name = profile.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".opcodes.csv")
        .or_else(|| name.strip_suffix(".csv"))
        .unwrap_or(&name);
    profile.with_file_name(format!("{stem}.meta.json"))
}

fn predict(a: &PredictArgs) -> Result<()> {
    let meta = a.meta.clone().unwrap_or_else(|| infer_meta_path(&a.profile));
    for p in [&a.table, &a.profile, &meta] {
        require_file(p)?;
    }
    let table = load_table_file(&a.table)?;
    let rules = a.rules.load()?;
    let parsed = load_instruction_profile(&a.profile, &meta)?;
    let (profile, warnings) = InstructionProfile::from_parsed(&parsed, &rules)?;
    for w in &warnings {
        warn!("{w}");
    }
    let report = predict_energy(&profile, &table, a.mode)?;
    for n in &report.notes {
        info!("{n}");
    }
    match &a.out {
        Some(p) => {
            write_atomic(p, report.to_json().as_bytes())?;
            println!(
                "{}: {:.6} J, coverage {:.2}%",
                report.kernel_label,
                report.total_j,
                100.0 * report.covered_instruction_fraction
            );
        }
        None => stdout_write(report.to_json().as_bytes())?,
    }
    Ok(())
}

fn load_report(path: &Path) -> Result<PredictionReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PredictionReport::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn attribute_cmd(a: &AttributeArgs) -> Result<()> {
    require_file(&a.report)?;
    let report = load_report(&a.report)?;
    let rows = attribute(&report, a.top_k);
    if let Some(p) = &a.csv {
        let mut buf = Vec::new();
        write_attribution_csv(&rows, &mut buf)?;
        write_atomic(p, &buf)?;
    }
    stdout_write(render_attribution_text(&report, &rows).as_bytes())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    require_file(&a.input)?;
    let file = std::fs::File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let base = a.input.parent().unwrap_or(Path::new("."));
    let rows = evaluate_reports(file, base)?;
    let mut buf = Vec::new();
    let score = write_evaluation_csv(&rows, &mut buf)?;
    match &a.out {
        Some(p) => {
            write_atomic(p, &buf)?;
            println!("MAPE,{score}");
        }
        None => stdout_write(&buf)?,
    }
    Ok(())
}

fn transfer(a: &TransferArgs) -> Result<()> {
    require_file(&a.source)?;
    require_file(&a.target_subset)?;
    if a.p_const.is_none() || a.p_static.is_none() {
        return Err(Error::Input("--p-const and --p-static are required for the target system".into()));
    }
    let source = load_table_file(&a.source)?;
    let text = std::fs::read_to_string(&a.target_subset).map_err(|e| Error::io(&a.target_subset, e))?;
    let known: BTreeMap<String, f64> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", a.target_subset.display())))?;
    let map = fit_transfer(&source, &known, a.fraction, a.seed)?;
    let (table, warnings) = apply_transfer(&source, &map, &known, a.p_const, a.p_static)?;
    for w in &warnings {
        warn!("{w}");
    }
    write_atomic(&a.map_out, map.to_json().as_bytes())?;
    write_atomic(&a.out, table.to_json().as_bytes())?;
    println!(
        "slope {:.6} intercept {:e} J r_squared {:.6} over {} keys",
        map.slope,
        map.intercept,
        map.r_squared,
        map.fitted_on.len()
    );
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            require_file(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_instructions {
        spec.n_instructions = n;
    }
    if a.n_benchmarks.is_some() {
        spec.n_benchmarks = a.n_benchmarks;
    }
    if let Some(n) = a.noise_pct {
        spec.trace_noise_pct = n;
    }
    if let Some(n) = a.n_apps {
        spec.n_apps = n;
    }
    if a.out.exists() {
        let empty = std::fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))?.next().is_none();
        if !empty {
            return Err(Error::Input(format!("{} exists and is not empty", a.out.display())));
        }
    }
    let ds = generate(&spec)?;
    // Build the dataset beside its destination and move it into place whole.
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".wattbench-synth")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    write_dataset(&ds, staging.path())?;
    if a.out.exists() {
        std::fs::remove_dir(&a.out).map_err(|e| Error::io(&a.out, e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, &a.out).map_err(|e| Error::io(&a.out, e))?;
    println!(
        "wrote {} benchmarks and {} applications to {}",
        ds.benchmarks.len(),
        ds.apps.len(),
        a.out.display()
    );
    Ok(())
}

/// Human-readable table summary.
pub fn summarize_table(table: &EnergyTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "architecture: {}", table.architecture_label);
    let _ = writeln!(out, "constant power: {:.3} W", table.p_const_w);
    let _ = writeln!(out, "static power: {:.3} W", table.p_static_w);
    let _ = writeln!(out, "entries: {}", table.entries().len());
    for (p, n) in table.provenance_counts() {
        let _ = writeln!(out, "  {p}: {n}");
    }
    if !table.bucket_averages().is_empty() {
        let _ = writeln!(out, "bucket averages:");
        for (b, e) in table.bucket_averages() {
            let _ = writeln!(out, "  {b}: {e:.6e} J");
        }
    }
    if !table.scaling_factors().is_empty() {
        let _ = writeln!(out, "scaling factors:");
        for (k, f) in table.scaling_factors() {
            let _ = writeln!(out, "  {k}: {f:.6}");
        }
    }
    if let Some(fp) = &table.grouping_fingerprint {
        let _ = writeln!(out, "grouping rules: {fp}");
    }
    out
}

fn inspect(a: &InspectArgs) -> Result<()> {
    require_file(&a.table)?;
    let table = load_table_file(&a.table)?;
    stdout_write(summarize_table(&table).as_bytes())
}
