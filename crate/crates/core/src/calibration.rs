//! Microbenchmark calibration: assemble the count matrix and dynamic-energy
//! vector, solve for non-negative per-instruction energies, and build a table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{qualified_key, split_key, BucketTaxonomy, EnergyEntry, EnergyTable, Provenance};
use crate::nnls::{nnls, DEFAULT_TOL};
use crate::predict::expand_levels;
use crate::profile::{apply_grouping, load_instruction_profile, scale_counts, GroupingRules, InstructionProfile};
use crate::trace::{
    decompose_energy, detect_steady_window, estimate_idle_power, estimate_static_power,
    integrate_energy, parse_power_trace, PowerTrace, SteadyWindow, Span, DEFAULT_CV_THRESHOLD,
    DEFAULT_WINDOW_MS,
};

/// One calibration row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchmarkRecord {
    pub name: String,
    /// Group keys, level-qualified for memory instructions.
    pub grouped_counts: BTreeMap<String, f64>,
    pub dynamic_energy_j: f64,
    pub primary_instruction: String,
}

impl MicrobenchmarkRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.dynamic_energy_j >= 0.0) || !self.dynamic_energy_j.is_finite() {
            return Err(Error::Value(format!(
                "benchmark {}: dynamic energy {} must be non-negative",
                self.name, self.dynamic_energy_j
            )));
        }
        if let Some((k, c)) = self.grouped_counts.iter().find(|(_, c)| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::Value(format!(
                "benchmark {}: count {c} for {k} must be non-negative",
                self.name
            )));
        }
        if !self.grouped_counts.values().any(|&c| c > 0.0) {
            return Err(Error::Value(format!("benchmark {} has no instructions", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemMode {
    /// One benchmark per instruction.
    #[default]
    Square,
    /// At least as many benchmarks as instructions, solved in the least-squares sense.
    Overdetermined,
}

impl fmt::Display for SystemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemMode::Square => "square",
            SystemMode::Overdetermined => "overdetermined",
        })
    }
}

impl FromStr for SystemMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(SystemMode::Square),
            "overdetermined" => Ok(SystemMode::Overdetermined),
            other => Err(Error::Input(format!(
                "unknown system mode `{other}` (expected square or overdetermined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSystem {
    /// Rows are benchmarks, columns are group keys.
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Lexicographically sorted.
    pub columns: Vec<String>,
    pub row_names: Vec<String>,
}

pub fn build_system(records: &[MicrobenchmarkRecord], mode: SystemMode) -> Result<CalibrationSystem> {
    build_system_with(records, mode, &[])
}

/// Like [`build_system`], also requiring a column for every key in `required`.
pub fn build_system_with(
    records: &[MicrobenchmarkRecord],
    mode: SystemMode,
    required: &[String],
) -> Result<CalibrationSystem> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no microbenchmark records".into()));
    }
    for r in records {
        r.validate()?;
    }
    let columns: Vec<String> = records
        .iter()
        .flat_map(|r| r.grouped_counts.keys().cloned())
        .chain(required.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (rows, cols) = (records.len(), columns.len());
    let mut matrix = DMatrix::zeros(rows, cols);
    for (i, r) in records.iter().enumerate() {
        for (j, key) in columns.iter().enumerate() {
            matrix[(i, j)] = r.grouped_counts.get(key).copied().unwrap_or(0.0);
        }
    }
    let zero: Vec<&str> = (0..cols)
        .filter(|&j| matrix.column(j).iter().all(|&v| v == 0.0))
        .map(|j| columns[j].as_str())
        .collect();
    if !zero.is_empty() {
        return Err(Error::Coverage(format!(
            "no benchmark executes {}",
            zero.join(", ")
        )));
    }

    let primaries: BTreeSet<&str> = records.iter().map(|r| r.primary_instruction.as_str()).collect();
    let uncovered: Vec<&str> = columns
        .iter()
        .map(String::as_str)
        .filter(|c| !primaries.contains(c))
        .collect();
    match mode {
        SystemMode::Square if rows < cols => {
            return Err(Error::Shape(format!(
                "{rows} benchmarks for {cols} instructions; no benchmark targets {}",
                uncovered.join(", ")
            )));
        }
        SystemMode::Square if rows > cols => {
            let mut seen = BTreeSet::new();
            let extra: Vec<&str> = records
                .iter()
                .filter(|r| !seen.insert(r.primary_instruction.as_str()))
                .map(|r| r.name.as_str())
                .collect();
            return Err(Error::Shape(format!(
                "{rows} benchmarks for {cols} instructions; extra benchmarks {}",
                extra.join(", ")
            )));
        }
        SystemMode::Overdetermined if rows < cols => {
            return Err(Error::Shape(format!(
                "{rows} benchmarks cannot determine {cols} instructions; uncovered {}",
                uncovered.join(", ")
            )));
        }
        _ => {}
    }
    Ok(CalibrationSystem {
        matrix,
        rhs: DVector::from_iterator(rows, records.iter().map(|r| r.dynamic_energy_j)),
        columns,
        row_names: records.iter().map(|r| r.name.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub energies: BTreeMap<String, f64>,
    pub residual_norm: f64,
    pub per_row_residuals: Vec<(String, f64)>,
    pub iterations: usize,
}

/// Solves the system under non-negativity. Residuals are `A·x − b` per row.
pub fn solve_nnls(system: &CalibrationSystem, tol: f64) -> Result<SolveResult> {
    let sol = nnls(&system.matrix, &system.rhs, tol).map_err(|e| match e {
        Error::Coverage(msg) => Error::Coverage(name_column(msg, &system.columns)),
        other => other,
    })?;
    let residuals = &system.matrix * &sol.x - &system.rhs;
    Ok(SolveResult {
        energies: system.columns.iter().cloned().zip(sol.x.iter().copied()).collect(),
        residual_norm: residuals.norm(),
        per_row_residuals: system.row_names.iter().cloned().zip(residuals.iter().copied()).collect(),
        iterations: sol.iterations,
    })
}

fn name_column(msg: String, columns: &[String]) -> String {
    msg.strip_prefix("column ")
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|idx| idx.parse::<usize>().ok())
        .and_then(|idx| columns.get(idx))
        .map(|c| format!("no benchmark executes {c}"))
        .unwrap_or(msg)
}

/// Residual diagnostics as `benchmark,residual_j`.
pub fn write_residuals_csv<W: Write>(result: &SolveResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["benchmark", "residual_j"])?;
    for (name, r) in &result.per_row_residuals {
        w.write_record([name.clone(), r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<residual writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub trace_file: PathBuf,
    pub opcode_counts_file: PathBuf,
    pub metadata_file: PathBuf,
    pub primary_instruction: String,
    /// Takes precedence over the metadata's own scale factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_scale_factor: Option<f64>,
}

/// Calibration manifest. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationManifest {
    #[serde(default = "default_architecture")]
    pub architecture_label: String,
    pub idle_trace: PathBuf,
    pub active_idle_trace: PathBuf,
    pub benchmarks: Vec<BenchmarkSpec>,
}

fn default_architecture() -> String {
    "unknown".into()
}

impl CalibrationManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub mode: SystemMode,
    pub tol: f64,
    pub window_ms: f64,
    pub cv_threshold: f64,
    pub rules: GroupingRules,
    pub taxonomy: BucketTaxonomy,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            mode: SystemMode::Square,
            tol: DEFAULT_TOL,
            window_ms: DEFAULT_WINDOW_MS,
            cv_threshold: DEFAULT_CV_THRESHOLD,
            rules: GroupingRules::default(),
            taxonomy: BucketTaxonomy::default(),
        }
    }
}

/// Per-benchmark measurement summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkMeasurement {
    pub name: String,
    pub window: SteadyWindow,
    pub window_energy_j: f64,
    pub total_j: f64,
    pub t_exec_s: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub table: EnergyTable,
    pub solve: SolveResult,
    pub records: Vec<MicrobenchmarkRecord>,
    pub measurements: Vec<BenchmarkMeasurement>,
    pub warnings: Vec<String>,
}

impl CalibrationOutcome {
    pub fn rhs_norm(&self) -> f64 {
        self.records.iter().map(|r| r.dynamic_energy_j.powi(2)).sum::<f64>().sqrt()
    }
}

pub fn calibrate_file(manifest_path: &Path, options: &CalibrationOptions) -> Result<CalibrationOutcome> {
    let manifest = CalibrationManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    calibrate(&manifest, base, options)
}

fn load_trace(path: &Path, label: &str) -> Result<PowerTrace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (trace, warnings) = parse_power_trace(file, label)?;
    if warnings.total() > 0 {
        warn!(
            "{label}: {} out-of-order and {} duplicate timestamps repaired",
            warnings.out_of_order_rows, warnings.duplicate_timestamps
        );
    }
    Ok(trace)
}

/// End-to-end calibration: baseline powers from the idle traces, one
/// dynamic-energy row per benchmark, then the non-negative solve.
pub fn calibrate(
    manifest: &CalibrationManifest,
    base_dir: &Path,
    options: &CalibrationOptions,
) -> Result<CalibrationOutcome> {
    if manifest.benchmarks.is_empty() {
        return Err(Error::InsufficientData("manifest lists no benchmarks".into()));
    }
    let resolve = |p: &Path| base_dir.join(p);
    let p_const = estimate_idle_power(&load_trace(&resolve(&manifest.idle_trace), "idle")?)?;
    let p_static = estimate_static_power(
        &load_trace(&resolve(&manifest.active_idle_trace), "active-idle")?,
        p_const,
    )?;
    info!("constant power {p_const:.3} W, static power {p_static:.3} W");

    let rows: Vec<Result<(MicrobenchmarkRecord, BenchmarkMeasurement, Vec<String>)>> = manifest
        .benchmarks
        .par_iter()
        .map(|b| {
            measure_benchmark(b, &resolve, p_const, p_static, options).map_err(|e| e.in_benchmark(&b.name))
        })
        .collect();
    let mut records = Vec::with_capacity(rows.len());
    let mut measurements = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    for row in rows {
        let (r, m, w) = row?;
        records.push(r);
        measurements.push(m);
        warnings.extend(w);
    }

    let system = build_system(&records, options.mode)?;
    let solve = solve_nnls(&system, options.tol)?;
    info!(
        "solved {} instructions in {} iterations, residual {:e} J",
        solve.energies.len(),
        solve.iterations,
        solve.residual_norm
    );

    let primaries: BTreeSet<&str> = records.iter().map(|r| r.primary_instruction.as_str()).collect();
    let mut table = EnergyTable::new(manifest.architecture_label.clone(), p_const, p_static);
    for (key, &energy) in &solve.energies {
        let (group, level) = split_key(key)?;
        let provenance = if primaries.contains(key.as_str()) {
            Provenance::Direct
        } else {
            Provenance::Solved
        };
        let mut entry = EnergyEntry::new(group, energy, provenance);
        if let Some(l) = level {
            entry = entry.at_level(l);
        }
        table.insert(entry)?;
    }
    table.derive_all_scaling();
    warnings.extend(table.assign_buckets(&options.taxonomy));
    table.grouping_fingerprint = Some(options.rules.fingerprint());
    Ok(CalibrationOutcome {
        table,
        solve,
        records,
        measurements,
        warnings,
    })
}

fn measure_benchmark(
    spec: &BenchmarkSpec,
    resolve: &(dyn Fn(&Path) -> PathBuf + Sync),
    p_const: f64,
    p_static: f64,
    options: &CalibrationOptions,
) -> Result<(MicrobenchmarkRecord, BenchmarkMeasurement, Vec<String>)> {
    let trace = load_trace(&resolve(&spec.trace_file), &spec.name)?;
    let window = detect_steady_window(&trace, options.window_ms, options.cv_threshold)?;
    let window_energy_j = integrate_energy(&trace, Span::from(&window))?;

    let parsed = load_instruction_profile(&resolve(&spec.opcode_counts_file), &resolve(&spec.metadata_file))?;
    let (profile, mut warnings) = InstructionProfile::from_parsed(&parsed, &options.rules)?;
    let profile = match (spec.count_scale_factor, parsed.metadata.count_scale_factor) {
        (Some(f), Some(g)) => scale_counts(&profile, f / g)?,
        (Some(f), None) => scale_counts(&profile, f)?,
        _ => profile,
    };

    let t_exec_s = profile.t_exec_s;
    let total_j = window.mean_power * t_exec_s;
    let parts = decompose_energy(total_j, p_const, p_static, t_exec_s)?;
    if let Some(c) = parts.clamped_j {
        warnings.push(format!("{}: negative dynamic energy ({c:.6} J) clamped to 0", spec.name));
    }

    let mut grouped_counts = BTreeMap::new();
    for lc in expand_levels(&profile.grouped_counts, &profile.hit_rates) {
        *grouped_counts.entry(qualified_key(&lc.group_key, lc.level)).or_insert(0.0) += lc.count;
    }
    let primary_instruction = resolve_primary(&spec.primary_instruction, &grouped_counts, &options.rules)?;
    let record = MicrobenchmarkRecord {
        name: spec.name.clone(),
        grouped_counts,
        dynamic_energy_j: parts.dynamic_j,
        primary_instruction,
    };
    record.validate()?;
    let measurement = BenchmarkMeasurement {
        name: spec.name.clone(),
        window,
        window_energy_j,
        total_j,
        t_exec_s,
    };
    Ok((record, measurement, warnings))
}

/// Maps a declared primary instruction onto a record column. Raw opcodes are
/// grouped first; an unqualified memory key resolves to its dominant level.
fn resolve_primary(declared: &str, counts: &BTreeMap<String, f64>, rules: &GroupingRules) -> Result<String> {
    if counts.contains_key(declared) {
        return Ok(declared.to_string());
    }
    let (raw_group, level) = split_key(declared)?;
    let grouped = apply_grouping(std::iter::once((raw_group, 1.0)), rules);
    let group = grouped.keys().next().map(String::as_str).unwrap_or(raw_group);
    let key = qualified_key(group, level);
    if counts.contains_key(&key) {
        return Ok(key);
    }
    if level.is_none() {
        let prefix = format!("{group}@");
        let dominant = counts
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .fold(None::<(&String, f64)>, |best, (k, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((k, c)),
            });
        if let Some((k, _)) = dominant {
            return Ok(k.clone());
        }
    }
    Err(Error::Input(format!(
        "primary instruction {declared} does not appear in the benchmark profile"
    )))
}
