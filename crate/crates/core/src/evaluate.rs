//! Scoring predictions against measurements, the max-power baseline, and
//! affine transfer of energy tables between systems.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EnergyEntry, EnergyTable, Provenance};
use crate::predict::PredictionReport;
use crate::profile::InstructionProfile;
use crate::trace::PowerTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub workload: String,
    pub measured_j: f64,
    pub predicted_j: f64,
    pub abs_pct_error: f64,
}

impl EvaluationRow {
    pub fn new(workload: impl Into<String>, measured_j: f64, predicted_j: f64) -> Result<Self> {
        let workload = workload.into();
        if !(measured_j > 0.0) || !measured_j.is_finite() {
            return Err(Error::Value(format!(
                "workload {workload}: measured energy must be positive, got {measured_j}"
            )));
        }
        if !(predicted_j >= 0.0) || !predicted_j.is_finite() {
            return Err(Error::Value(format!(
                "workload {workload}: predicted energy must be non-negative, got {predicted_j}"
            )));
        }
        Ok(Self {
            abs_pct_error: 100.0 * (predicted_j - measured_j).abs() / measured_j,
            workload,
            measured_j,
            predicted_j,
        })
    }
}

/// Mean absolute percent error, in percent.
pub fn mape(rows: &[EvaluationRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no evaluation rows".into()));
    }
    let mut sum = 0.0;
    for r in rows {
        if !(r.measured_j > 0.0) {
            return Err(Error::Value(format!(
                "workload {}: measured energy must be positive, got {}",
                r.workload, r.measured_j
            )));
        }
        sum += 100.0 * (r.predicted_j - r.measured_j).abs() / r.measured_j;
    }
    Ok(sum / rows.len() as f64)
}

/// Reads `workload,measured_j,prediction_report_file` and scores each report's
/// total. Report paths resolve against `base_dir`.
pub fn evaluate_reports<R: Read>(reader: R, base_dir: &Path) -> Result<Vec<EvaluationRow>> {
    #[derive(Deserialize)]
    struct Input {
        workload: String,
        measured_j: f64,
        prediction_report_file: PathBuf,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for record in rdr.deserialize() {
        let input: Input = record?;
        let path = base_dir.join(&input.prediction_report_file);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report = PredictionReport::from_json(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        rows.push(EvaluationRow::new(input.workload, input.measured_j, report.total_j)?);
    }
    Ok(rows)
}

/// Writes `workload,measured_j,predicted_j,abs_pct_error` rows followed by a
/// `MAPE,<value>` summary line.
pub fn write_evaluation_csv<W: Write>(rows: &[EvaluationRow], mut writer: W) -> Result<f64> {
    let score = mape(rows)?;
    {
        let mut w = csv::Writer::from_writer(&mut writer);
        w.write_record(["workload", "measured_j", "predicted_j", "abs_pct_error"])?;
        for r in rows {
            w.write_record([
                r.workload.clone(),
                r.measured_j.to_string(),
                r.predicted_j.to_string(),
                r.abs_pct_error.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<evaluation writer>", e))?;
    }
    writeln!(writer, "MAPE,{score}").map_err(|e| Error::io("<evaluation writer>", e))?;
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GuserEstimate {
    pub energy_j: f64,
    pub max_power_w: f64,
    /// Total energy spread evenly over every executed instruction; zero for an
    /// empty profile.
    pub per_instruction_j: f64,
}

/// Maximum sampled power times execution time, constant and static energy
/// included.
pub fn guser_baseline(trace: &PowerTrace, t_exec_s: f64, profile: &InstructionProfile) -> Result<GuserEstimate> {
    let max_power_w = trace
        .max_power_w()
        .ok_or_else(|| Error::InsufficientData(format!("trace {} is empty", trace.session_label)))?;
    if !(t_exec_s > 0.0) {
        return Err(Error::Value(format!("t_exec must be positive, got {t_exec_s}")));
    }
    let energy_j = max_power_w * t_exec_s;
    let n = profile.total_instructions();
    Ok(GuserEstimate {
        energy_j,
        max_power_w,
        per_instruction_j: if n > 0.0 { energy_j / n } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMap {
    pub slope: f64,
    /// Joules per instruction.
    pub intercept: f64,
    pub r_squared: f64,
    pub seed: u64,
    pub fraction: f64,
    pub fitted_on: Vec<String>,
}

impl TransferMap {
    pub fn apply(&self, energy_j: f64) -> f64 {
        self.slope * energy_j + self.intercept
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transfer map serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Chooses `ceil(fraction · n)` of the sorted keys with a seeded uniform draw
/// without replacement; the result is sorted.
pub fn select_subset(keys: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Value(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut sorted = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    if k == n {
        return Ok(sorted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| sorted[i].clone()).collect())
}

/// Ordinary least squares of target energies on source energies (with
/// intercept) over a seeded subset of `target_subset`.
pub fn fit_transfer(
    source: &EnergyTable,
    target_subset: &BTreeMap<String, f64>,
    fraction: f64,
    seed: u64,
) -> Result<TransferMap> {
    let keys: Vec<String> = target_subset.keys().cloned().collect();
    let chosen = select_subset(&keys, fraction, seed)?;
    let mut points = Vec::with_capacity(chosen.len());
    for key in &chosen {
        let src = source
            .entry(key)
            .ok_or_else(|| Error::Input(format!("{key} is not in the source table")))?;
        points.push((src.energy_j, target_subset[key]));
    }
    let (slope, intercept, r_squared) = ols(&points)?;
    Ok(TransferMap {
        slope,
        intercept,
        r_squared,
        seed,
        fraction,
        fitted_on: chosen,
    })
}

/// Slope, intercept and R² of `y` on `x`.
fn ols(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 points to fit a line, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("source energies have zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok((slope, intercept, r_squared))
}

/// Builds a target-system table: measured keys keep their energies, every
/// other source entry (and bucket average) goes through the affine map,
/// floored at zero. Scaling ratios carry over from the source.
pub fn apply_transfer(
    source: &EnergyTable,
    map: &TransferMap,
    known_target: &BTreeMap<String, f64>,
    p_const_w: Option<f64>,
    p_static_w: Option<f64>,
) -> Result<(EnergyTable, Vec<String>)> {
    let (Some(p_const_w), Some(p_static_w)) = (p_const_w, p_static_w) else {
        return Err(Error::Input(
            "transfer needs the target system's constant and static power".into(),
        ));
    };
    for (name, v) in [("constant", p_const_w), ("static", p_static_w)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Value(format!("{name} power must be non-negative, got {v}")));
        }
    }
    let mut warnings = Vec::new();
    let mut clamp = |what: &str, value: f64| {
        if value < 0.0 {
            let msg = format!("transferred energy for {what} was negative ({value:e} J); clamped to 0");
            warn!("{msg}");
            warnings.push(msg);
            0.0
        } else {
            value
        }
    };

    let mut table = EnergyTable::new(source.architecture_label.clone(), p_const_w, p_static_w);
    table.grouping_fingerprint = source.grouping_fingerprint.clone();
    for (key, entry) in source.entries() {
        let transferred = match known_target.get(key) {
            Some(&measured) => {
                let provenance = if entry.provenance == Provenance::Direct {
                    Provenance::Direct
                } else {
                    Provenance::Solved
                };
                EnergyEntry { energy_j: measured, provenance, ..entry.clone() }
            }
            None => EnergyEntry {
                energy_j: clamp(key, map.apply(entry.energy_j)),
                provenance: Provenance::Scaled,
                ..entry.clone()
            },
        };
        table.insert(transferred)?;
    }
    for (key, &measured) in known_target {
        if source.entry(key).is_none() {
            let (group, level) = crate::model::split_key(key)?;
            let mut entry = EnergyEntry::new(group, measured, Provenance::Solved);
            if let Some(l) = level {
                entry = entry.at_level(l);
            }
            table.insert(entry)?;
        }
    }
    // Adopt the taxonomy, then replace its recomputed averages with mapped ones.
    table.assign_buckets(source.taxonomy());
    for (bucket, &avg) in source.bucket_averages() {
        let v = clamp(&format!("bucket {bucket}"), map.apply(avg));
        table.set_bucket_average(bucket, v)?;
    }
    for (key, &factor) in source.scaling_factors() {
        table.set_scaling_factor(*key, factor)?;
    }
    Ok((table, warnings))
}
