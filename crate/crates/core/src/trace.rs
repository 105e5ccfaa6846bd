//! Power trace ingestion and analysis.
//!
//! A trace is a CSV of `timestamp_ms,power_mw[,utilization_pct]` rows recorded
//! while one workload runs. From it we locate the steady-state window, integrate
//! energy with the trapezoidal rule and split total energy into constant, static
//! and dynamic parts.

use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_MS: f64 = 5_000.0;
pub const DEFAULT_CV_THRESHOLD: f64 = 0.02;

/// Minimum number of samples for the median-based power estimators.
pub const MIN_IDLE_SAMPLES: usize = 5;

/// Multiples of the robust spread used to strip a leading transient.
const TRANSIENT_BAND_SIGMAS: f64 = 3.0;
/// Fraction of the detection window skipped after a trimmed transient.
const SETTLE_GUARD_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_ms: f64,
    pub power_w: f64,
    pub utilization_pct: Option<f64>,
}

impl PowerSample {
    pub fn new(timestamp_ms: f64, power_w: f64) -> Self {
        Self {
            timestamp_ms,
            power_w,
            utilization_pct: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    samples: Vec<PowerSample>,
    pub session_label: String,
}

/// Canonicalization events seen while building a trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceWarnings {
    pub out_of_order_rows: usize,
    pub duplicate_timestamps: usize,
}

impl TraceWarnings {
    pub fn total(&self) -> usize {
        self.out_of_order_rows + self.duplicate_timestamps
    }
}

impl PowerTrace {
    /// Builds a trace, sorting by timestamp and keeping the last sample for
    /// duplicated timestamps.
    pub fn new(session_label: impl Into<String>, samples: Vec<PowerSample>) -> Result<Self> {
        Ok(Self::canonicalize(session_label.into(), samples)?.0)
    }

    fn canonicalize(
        session_label: String,
        mut samples: Vec<PowerSample>,
    ) -> Result<(Self, TraceWarnings)> {
        let mut warnings = TraceWarnings::default();
        for (i, s) in samples.iter().enumerate() {
            if !s.timestamp_ms.is_finite() || s.timestamp_ms < 0.0 {
                return Err(Error::Value(format!(
                    "sample {}: timestamp {} must be a non-negative number",
                    i + 1,
                    s.timestamp_ms
                )));
            }
            if !s.power_w.is_finite() || s.power_w < 0.0 {
                return Err(Error::Value(format!(
                    "sample {}: negative or non-finite power {}",
                    i + 1,
                    s.power_w
                )));
            }
            if let Some(u) = s.utilization_pct {
                if !(0.0..=100.0).contains(&u) {
                    return Err(Error::Value(format!(
                        "sample {}: utilization {u} outside [0, 100]",
                        i + 1
                    )));
                }
            }
        }
        warnings.out_of_order_rows = samples
            .windows(2)
            .filter(|w| w[1].timestamp_ms < w[0].timestamp_ms)
            .count();
        // stable sort keeps file order among equal timestamps, so "last wins" below
        samples.sort_by(|a, b| a.timestamp_ms.total_cmp(&b.timestamp_ms));
        let mut deduped: Vec<PowerSample> = Vec::with_capacity(samples.len());
        for s in samples {
            match deduped.last_mut() {
                Some(last) if last.timestamp_ms == s.timestamp_ms => {
                    warnings.duplicate_timestamps += 1;
                    *last = s;
                }
                _ => deduped.push(s),
            }
        }
        Ok((
            Self {
                samples: deduped,
                session_label,
            },
            warnings,
        ))
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_ms(&self) -> Option<f64> {
        self.samples.first().map(|s| s.timestamp_ms)
    }

    pub fn end_ms(&self) -> Option<f64> {
        self.samples.last().map(|s| s.timestamp_ms)
    }

    pub fn duration_ms(&self) -> f64 {
        match (self.start_ms(), self.end_ms()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn max_power_w(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.power_w).reduce(f64::max)
    }

    /// Every power value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| PowerSample {
                power_w: s.power_w * factor,
                ..*s
            })
            .collect();
        Self::new(self.session_label.clone(), samples)
    }
}

/// Parses a power trace CSV. Power is stored in integer milliwatts.
pub fn parse_power_trace<R: Read>(
    reader: R,
    session_label: &str,
) -> Result<(PowerTrace, TraceWarnings)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = col("timestamp_ms")
        .ok_or_else(|| Error::Format("power trace missing column `timestamp_ms`".into()))?;
    let pw_col = col("power_mw")
        .ok_or_else(|| Error::Format("power trace missing column `power_mw`".into()))?;
    let util_col = col("utilization_pct");

    let mut samples = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = idx + 2;
        let field = |c: usize, name: &str| -> Result<&str> {
            record
                .get(c)
                .ok_or_else(|| Error::Format(format!("row {row}: missing `{name}` value")))
        };
        let ts: f64 = field(ts_col, "timestamp_ms")?
            .parse()
            .map_err(|_| Error::Format(format!("row {row}: unparsable timestamp_ms")))?;
        let mw: f64 = field(pw_col, "power_mw")?
            .parse()
            .map_err(|_| Error::Format(format!("row {row}: unparsable power_mw")))?;
        if mw < 0.0 {
            return Err(Error::Value(format!("row {row}: negative power {mw} mW")));
        }
        if ts < 0.0 {
            return Err(Error::Value(format!("row {row}: negative timestamp {ts} ms")));
        }
        let utilization_pct = match util_col.and_then(|c| record.get(c)) {
            None | Some("") => None,
            Some(s) => {
                let u: f64 = s
                    .parse()
                    .map_err(|_| Error::Format(format!("row {row}: unparsable utilization_pct")))?;
                if !(0.0..=100.0).contains(&u) {
                    return Err(Error::Value(format!(
                        "row {row}: utilization {u} outside [0, 100]"
                    )));
                }
                Some(u)
            }
        };
        samples.push(PowerSample {
            timestamp_ms: ts,
            power_w: mw / 1000.0,
            utilization_pct,
        });
    }
    let (trace, warnings) = PowerTrace::canonicalize(session_label.to_string(), samples)?;
    if warnings.total() > 0 {
        warn!(
            "trace {session_label}: {} out-of-order rows, {} duplicate timestamps",
            warnings.out_of_order_rows, warnings.duplicate_timestamps
        );
    }
    Ok((trace, warnings))
}

/// Writes a trace in the CSV format read by [`parse_power_trace`], rounding
/// power to whole milliwatts.
pub fn write_power_trace<W: Write>(trace: &PowerTrace, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp_ms", "power_mw", "utilization_pct"])?;
    for s in trace.samples() {
        let util = s.utilization_pct.map(|u| format!("{u}")).unwrap_or_default();
        w.write_record([
            format_ms(s.timestamp_ms),
            format!("{}", (s.power_w * 1000.0).round() as i64),
            util,
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trace writer>", e))?;
    Ok(())
}

fn format_ms(ms: f64) -> String {
    if ms.fract() == 0.0 {
        format!("{}", ms as i64)
    } else {
        format!("{ms}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyWindow {
    pub start_ms: f64,
    pub end_ms: f64,
    /// Time-averaged power over the window.
    pub mean_power: f64,
    pub coefficient_of_variation: f64,
}

impl SteadyWindow {
    pub fn duration_s(&self) -> f64 {
        (self.end_ms - self.start_ms) / 1000.0
    }
}

/// Integration bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Span {
    Full,
    Window { start_ms: f64, end_ms: f64 },
}

impl From<&SteadyWindow> for Span {
    fn from(w: &SteadyWindow) -> Self {
        Span::Window {
            start_ms: w.start_ms,
            end_ms: w.end_ms,
        }
    }
}

/// Running sums for O(1) window mean/variance. Values are shifted by the first
/// sample to limit cancellation.
struct Moments {
    shift: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Moments {
    fn new(power: &[f64]) -> Self {
        let shift = power.first().copied().unwrap_or(0.0);
        let mut s1 = Vec::with_capacity(power.len() + 1);
        let mut s2 = Vec::with_capacity(power.len() + 1);
        s1.push(0.0);
        s2.push(0.0);
        for &p in power {
            let d = p - shift;
            s1.push(s1.last().unwrap() + d);
            s2.push(s2.last().unwrap() + d * d);
        }
        Self { shift, s1, s2 }
    }

    /// Coefficient of variation over samples `lo..=hi`.
    fn cv(&self, lo: usize, hi: usize) -> f64 {
        let n = (hi - lo + 1) as f64;
        let m1 = (self.s1[hi + 1] - self.s1[lo]) / n;
        let m2 = (self.s2[hi + 1] - self.s2[lo]) / n;
        let var = (m2 - m1 * m1).max(0.0);
        let mean = m1 + self.shift;
        let std = var.sqrt();
        if mean > 0.0 {
            std / mean
        } else if std == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Finds the steady-state window of a trace.
///
/// Every window of `min_duration_ms` whose coefficient of variation is within
/// `cv_threshold` qualifies; consecutive qualifying windows merge into a
/// segment and the longest segment wins (later one on ties). A leading
/// transient (samples outside median ± 3 robust sigma) is stripped together with
/// a settling guard of a fifth of the window, and the start is advanced further
/// if needed so the reported window itself satisfies the threshold.
pub fn detect_steady_window(
    trace: &PowerTrace,
    min_duration_ms: f64,
    cv_threshold: f64,
) -> Result<SteadyWindow> {
    if !(min_duration_ms > 0.0) {
        return Err(Error::Value(format!(
            "min_duration_ms must be positive, got {min_duration_ms}"
        )));
    }
    if !(cv_threshold >= 0.0) {
        return Err(Error::Value(format!(
            "cv_threshold must be non-negative, got {cv_threshold}"
        )));
    }
    let samples = trace.samples();
    if samples.len() < 2 || trace.duration_ms() < min_duration_ms {
        return Err(Error::InsufficientData(format!(
            "trace {} spans {} ms, shorter than the {} ms steady window",
            trace.session_label,
            trace.duration_ms(),
            min_duration_ms
        )));
    }
    let t: Vec<f64> = samples.iter().map(|s| s.timestamp_ms).collect();
    let p: Vec<f64> = samples.iter().map(|s| s.power_w).collect();
    let moments = Moments::new(&p);
    let n = t.len();

    // window i covers samples i..=window_end[i]
    let mut window_end = Vec::new();
    let mut j = 0;
    for i in 0..n {
        j = j.max(i);
        while j < n && t[j] - t[i] < min_duration_ms {
            j += 1;
        }
        if j == n {
            break;
        }
        window_end.push(j);
    }

    let mut best_cv = f64::INFINITY;
    let mut best: Option<(usize, usize)> = None;
    let mut run_start: Option<usize> = None;
    let close_run = |first: usize, last: usize, best: &mut Option<(usize, usize)>| {
        let seg = (first, window_end[last]);
        let len = t[seg.1] - t[seg.0];
        match best {
            Some((a, b)) if t[*b] - t[*a] > len => {}
            _ => *best = Some(seg),
        }
    };
    for (i, &end) in window_end.iter().enumerate() {
        let cv = moments.cv(i, end);
        best_cv = best_cv.min(cv);
        if cv <= cv_threshold {
            run_start.get_or_insert(i);
        } else if let Some(first) = run_start.take() {
            close_run(first, i - 1, &mut best);
        }
    }
    if let Some(first) = run_start {
        close_run(first, window_end.len() - 1, &mut best);
    }
    let (seg_start, seg_end) = best.ok_or(Error::NoSteadyState { best_cv })?;

    // strip a leading transient
    let mut seg_power: Vec<f64> = p[seg_start..=seg_end].to_vec();
    let center = median_in_place(&mut seg_power);
    let mut deviations: Vec<f64> = p[seg_start..=seg_end]
        .iter()
        .map(|x| (x - center).abs())
        .collect();
    let sigma = 1.4826 * median_in_place(&mut deviations);
    let band = TRANSIENT_BAND_SIGMAS * sigma + 1e-9 * center.abs();
    let mut start = seg_start;
    while start < seg_end && (p[start] - center).abs() > band {
        start += 1;
    }
    if start > 0 {
        let guarded = t[start] + SETTLE_GUARD_FRACTION * min_duration_ms;
        if let Some(k) = (start..=seg_end).find(|&k| t[k] >= guarded) {
            if t[seg_end] - t[k] >= min_duration_ms {
                start = k;
            }
        }
    }
    if t[seg_end] - t[start] < min_duration_ms {
        start = seg_start;
    }
    while moments.cv(start, seg_end) > cv_threshold && t[seg_end] - t[start + 1] >= min_duration_ms
    {
        start += 1;
    }
    let cv = moments.cv(start, seg_end);
    if cv > cv_threshold {
        return Err(Error::NoSteadyState { best_cv });
    }
    let (start_ms, end_ms) = (t[start], t[seg_end]);
    let energy = integrate_energy(
        trace,
        Span::Window { start_ms, end_ms },
    )?;
    Ok(SteadyWindow {
        start_ms,
        end_ms,
        mean_power: energy / ((end_ms - start_ms) / 1000.0),
        coefficient_of_variation: cv,
    })
}

/// Trapezoidal energy in joules over `span`. Window bounds that fall between
/// samples are linearly interpolated.
pub fn integrate_energy(trace: &PowerTrace, span: Span) -> Result<f64> {
    let samples = trace.samples();
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "trace {} has {} samples, integration needs at least 2",
            trace.session_label,
            samples.len()
        )));
    }
    let first = samples[0].timestamp_ms;
    let last = samples[samples.len() - 1].timestamp_ms;
    let (a, b) = match span {
        Span::Full => (first, last),
        Span::Window { start_ms, end_ms } => (start_ms, end_ms),
    };
    if !(a < b) || a < first || b > last {
        return Err(Error::Range(format!(
            "window [{a}, {b}] ms not a non-empty interval within trace bounds [{first}, {last}] ms"
        )));
    }
    let mut joules = 0.0;
    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let (t0, t1) = (s0.timestamp_ms, s1.timestamp_ms);
        if t1 <= a || t0 >= b {
            continue;
        }
        let lo = t0.max(a);
        let hi = t1.min(b);
        let at = |t: f64| {
            if t == t0 {
                s0.power_w
            } else if t == t1 {
                s1.power_w
            } else {
                s0.power_w + (s1.power_w - s0.power_w) * (t - t0) / (t1 - t0)
            }
        };
        joules += 0.5 * (at(lo) + at(hi)) * (hi - lo) / 1000.0;
    }
    Ok(joules)
}

fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_power(trace: &PowerTrace, what: &str) -> Result<f64> {
    if trace.len() < MIN_IDLE_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{what} trace {} has {} samples, need at least {MIN_IDLE_SAMPLES}",
            trace.session_label,
            trace.len()
        )));
    }
    let mut power: Vec<f64> = trace.samples().iter().map(|s| s.power_w).collect();
    Ok(median_in_place(&mut power))
}

/// Constant (idle) power: the median sample power of a trace recorded with no
/// workload.
pub fn estimate_idle_power(idle_trace: &PowerTrace) -> Result<f64> {
    median_power(idle_trace, "idle")
}

/// Static power: median power of an active-but-idle (sleep kernel) trace minus
/// the constant power, floored at zero.
pub fn estimate_static_power(active_idle_trace: &PowerTrace, p_const: f64) -> Result<f64> {
    let active = median_power(active_idle_trace, "active-idle")?;
    if active < p_const {
        warn!(
            "active-idle power {active:.3} W below constant power {p_const:.3} W; static power floored at 0"
        );
    }
    Ok((active - p_const).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyComponents {
    pub total_j: f64,
    pub const_j: f64,
    pub static_j: f64,
    pub dynamic_j: f64,
    pub p_const: f64,
    pub p_static: f64,
    pub t_exec: f64,
    /// Magnitude of the negative dynamic energy that was clamped to zero.
    pub clamped_j: Option<f64>,
}

pub fn decompose_energy(
    total_j: f64,
    p_const: f64,
    p_static: f64,
    t_exec: f64,
) -> Result<EnergyComponents> {
    if !(t_exec > 0.0) {
        return Err(Error::Value(format!("t_exec must be positive, got {t_exec}")));
    }
    for (name, v) in [("total_j", total_j), ("p_const", p_const), ("p_static", p_static)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Value(format!("{name} must be non-negative, got {v}")));
        }
    }
    let const_j = p_const * t_exec;
    let static_j = p_static * t_exec;
    let raw_dynamic = total_j - const_j - static_j;
    let (dynamic_j, clamped_j) = if raw_dynamic < 0.0 {
        warn!("dynamic energy {raw_dynamic:.6} J below zero; clamped");
        (0.0, Some(-raw_dynamic))
    } else {
        (raw_dynamic, None)
    };
    Ok(EnergyComponents {
        total_j,
        const_j,
        static_j,
        dynamic_j,
        p_const,
        p_static,
        t_exec,
        clamped_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from(points: &[(f64, f64)]) -> PowerTrace {
        PowerTrace::new(
            "t",
            points.iter().map(|&(t, p)| PowerSample::new(t, p)).collect(),
        )
        .unwrap()
    }

    fn constant(power: f64, seconds: f64, period_ms: f64) -> PowerTrace {
        let n = (seconds * 1000.0 / period_ms).round() as usize;
        trace_from(
            &(0..=n)
                .map(|k| (k as f64 * period_ms, power))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn parses_milliwatts() {
        let csv = "timestamp_ms,power_mw,utilization_pct\n0,150000,100\n100,150000,100";
        let (trace, warnings) = parse_power_trace(csv.as_bytes(), "x").unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace.samples()[0].power_w, 150.0);
        assert_eq!(trace.samples()[1].utilization_pct, Some(100.0));
        assert_eq!(warnings.total(), 0);
    }

    #[test]
    fn sorts_out_of_order_rows_and_keeps_last_duplicate() {
        let csv = "timestamp_ms,power_mw,utilization_pct\n200,3000,\n0,1000,\n100,2000,\n100,2500,50";
        let (trace, warnings) = parse_power_trace(csv.as_bytes(), "x").unwrap();
        let ts: Vec<f64> = trace.samples().iter().map(|s| s.timestamp_ms).collect();
        assert_eq!(ts, vec![0.0, 100.0, 200.0]);
        assert_eq!(trace.samples()[1].power_w, 2.5);
        assert_eq!(trace.samples()[1].utilization_pct, Some(50.0));
        assert!(warnings.out_of_order_rows > 0);
        assert_eq!(warnings.duplicate_timestamps, 1);
    }

    #[test]
    fn utilization_column_is_optional() {
        let csv = "timestamp_ms,power_mw\n0,1000\n10,1000";
        let (trace, _) = parse_power_trace(csv.as_bytes(), "x").unwrap();
        assert_eq!(trace.samples()[0].utilization_pct, None);
    }

    #[test]
    fn missing_power_column_is_format_error() {
        let csv = "timestamp_ms,watts\n0,1\n";
        match parse_power_trace(csv.as_bytes(), "x") {
            Err(Error::Format(msg)) => assert!(msg.contains("power_mw")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_power_names_row() {
        let csv = "timestamp_ms,power_mw\n0,1000\n10,-5\n";
        match parse_power_trace(csv.as_bytes(), "x") {
            Err(Error::Value(msg)) => assert!(msg.contains("row 3"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_utilization_rejected() {
        let csv = "timestamp_ms,power_mw,utilization_pct\n0,1000,120\n";
        assert!(matches!(
            parse_power_trace(csv.as_bytes(), "x"),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn write_then_parse() {
        let trace = trace_from(&[(0.0, 80.2), (100.0, 80.2), (250.0, 81.0)]);
        let mut buf = Vec::new();
        write_power_trace(&trace, &mut buf).unwrap();
        let (back, _) = parse_power_trace(buf.as_slice(), "t").unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn constant_trace_integrates_to_p_times_t() {
        let trace = constant(150.0, 180.0, 100.0);
        let e = integrate_energy(&trace, Span::Full).unwrap();
        assert!((e - 27_000.0).abs() < 1e-9);
    }

    #[test]
    fn linear_ramp_integrates_exactly() {
        let trace = trace_from(&[(0.0, 100.0), (10_000.0, 200.0)]);
        assert!((integrate_energy(&trace, Span::Full).unwrap() - 1500.0).abs() < 1e-12);
    }

    #[test]
    fn window_bounds_interpolate() {
        let trace = trace_from(&[(0.0, 100.0), (10_000.0, 200.0)]);
        let half = integrate_energy(
            &trace,
            Span::Window {
                start_ms: 0.0,
                end_ms: 5_000.0,
            },
        )
        .unwrap();
        assert!((half - 625.0).abs() < 1e-12);
        let trace = trace_from(&[(0.0, 100.0), (5_000.0, 150.0), (10_000.0, 200.0)]);
        let e = integrate_energy(
            &trace,
            Span::Window {
                start_ms: 2_500.0,
                end_ms: 7_500.0,
            },
        )
        .unwrap();
        assert!((e - 750.0).abs() < 1e-9);
    }

    #[test]
    fn window_outside_trace_is_range_error() {
        let trace = constant(10.0, 1.0, 100.0);
        let r = integrate_energy(
            &trace,
            Span::Window {
                start_ms: 500.0,
                end_ms: 2_000.0,
            },
        );
        assert!(matches!(r, Err(Error::Range(_))));
    }

    #[test]
    fn single_sample_cannot_integrate() {
        let trace = trace_from(&[(0.0, 10.0)]);
        assert!(matches!(
            integrate_energy(&trace, Span::Full),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn steady_window_of_constant_trace_spans_everything() {
        let trace = constant(150.0, 180.0, 100.0);
        let w = detect_steady_window(&trace, DEFAULT_WINDOW_MS, DEFAULT_CV_THRESHOLD).unwrap();
        assert_eq!(w.start_ms, 0.0);
        assert_eq!(w.end_ms, 180_000.0);
        assert!((w.mean_power - 150.0).abs() < 1e-9);
        assert_eq!(w.coefficient_of_variation, 0.0);
    }

    #[test]
    fn trace_shorter_than_window_is_rejected() {
        let trace = constant(150.0, 2.0, 100.0);
        assert!(matches!(
            detect_steady_window(&trace, DEFAULT_WINDOW_MS, DEFAULT_CV_THRESHOLD),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn alternating_signal_has_no_steady_state() {
        // +-30% square wave: CV is exactly 0.3 in every window
        let points: Vec<(f64, f64)> = (0..600)
            .map(|k| (k as f64 * 100.0, if k % 2 == 0 { 65.0 } else { 35.0 }))
            .collect();
        match detect_steady_window(&trace_from(&points), 5_000.0, 0.02) {
            Err(Error::NoSteadyState { best_cv }) => assert!((best_cv - 0.3).abs() < 5e-3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn steady_window_is_deterministic() {
        let points: Vec<(f64, f64)> = (0..900)
            .map(|k| {
                let t = k as f64 * 100.0;
                (t, if t < 8_000.0 { 60.0 + t / 100.0 } else { 140.0 + (k % 3) as f64 })
            })
            .collect();
        let trace = trace_from(&points);
        let a = detect_steady_window(&trace, 5_000.0, 0.02).unwrap();
        let b = detect_steady_window(&trace, 5_000.0, 0.02).unwrap();
        assert_eq!(a, b);
        assert!(a.start_ms >= 8_000.0);
        assert!(a.coefficient_of_variation <= 0.02);
    }

    #[test]
    fn idle_power_is_median() {
        let t = trace_from(&[(0.0, 40.0), (1.0, 41.0), (2.0, 39.0), (3.0, 40.0), (4.0, 42.0)]);
        assert_eq!(estimate_idle_power(&t).unwrap(), 40.0);
        let mut pts: Vec<(f64, f64)> = (0..9).map(|k| (k as f64, 40.0)).collect();
        pts.push((9.0, 300.0));
        assert_eq!(estimate_idle_power(&trace_from(&pts)).unwrap(), 40.0);
    }

    #[test]
    fn idle_power_needs_samples() {
        let empty = PowerTrace::new("idle", vec![]).unwrap();
        assert!(matches!(
            estimate_idle_power(&empty),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn static_power_floors_at_zero() {
        let t = constant(80.0, 1.0, 100.0);
        assert_eq!(estimate_static_power(&t, 40.0).unwrap(), 40.0);
        assert_eq!(estimate_static_power(&t, 90.0).unwrap(), 0.0);
    }

    #[test]
    fn decompose_reference_example() {
        let c = decompose_energy(27_000.0, 40.0, 40.0, 180.0).unwrap();
        assert_eq!(c.const_j, 7_200.0);
        assert_eq!(c.static_j, 7_200.0);
        assert_eq!(c.dynamic_j, 12_600.0);
        assert_eq!(c.clamped_j, None);
        assert_eq!(c.const_j + c.static_j + c.dynamic_j, c.total_j);
    }

    #[test]
    fn decompose_boundary_and_clamp() {
        let c = decompose_energy(80.0 * 10.0, 40.0, 40.0, 10.0).unwrap();
        assert_eq!(c.dynamic_j, 0.0);
        assert_eq!(c.clamped_j, None);
        let c = decompose_energy(700.0, 40.0, 40.0, 10.0).unwrap();
        assert_eq!(c.dynamic_j, 0.0);
        assert_eq!(c.clamped_j, Some(100.0));
    }

    #[test]
    fn decompose_rejects_non_positive_time() {
        assert!(matches!(
            decompose_energy(1.0, 1.0, 1.0, 0.0),
            Err(Error::Value(_))
        ));
    }
}
