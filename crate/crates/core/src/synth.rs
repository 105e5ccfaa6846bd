//! Synthetic datasets with known ground truth: a planted energy table,
//! microbenchmark traces and profiles that calibrate back to it, and
//! application profiles with exactly computed energies.
//!
//! Trace files store integer milliwatts, so after rounding each benchmark's
//! steady power the planted energies are re-solved against the quantized
//! dynamic energies. The published ground truth is therefore exactly what a
//! noiseless calibration should recover.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{BenchmarkSpec, CalibrationManifest};
use crate::error::{Error, Result};
use crate::model::{
    qualified_key, split_key, BucketTaxonomy, EnergyEntry, EnergyTable, MemoryFamily, MemoryLevel,
    Provenance,
};
use crate::nnls::least_squares;
use crate::profile::{GroupingRules, HitRates, InstructionProfile, ParsedProfile, ProfileMetadata, RawOpcodeCount};
use crate::trace::{write_power_trace, PowerSample, PowerTrace};

const BASELINE_TRACE_S: f64 = 30.0;
const MAX_REDRAWS: usize = 100;

const POOL: &[&str] = &[
    "IADD3",
    "FFMA",
    "MOV",
    "IMAD",
    "BRA",
    "FADD",
    "FMUL",
    "DADD",
    "DFMA",
    "DMUL",
    "LOP3.LUT",
    "ISETP.GE.AND",
    "SHFL.IDX",
    "F2F.F64.F32",
    "HMMA.884.F32.F32",
    "LDG.E.64@L1",
    "LDG.E.64@L2",
    "LDG.E.64@DRAM",
    "IMAD.IADD",
    "STS",
    "LDS",
    "FSETP.GEU.AND",
    "IMAD.WIDE",
    "SEL",
    "POPC",
    "FMNMX",
    "I2F",
    "F2I",
    "MUFU.RCP",
    "BAR.SYNC",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_instructions: usize,
    /// Defaults to `n_instructions` (square system) when absent.
    pub n_benchmarks: Option<usize>,
    pub energy_range_j: (f64, f64),
    pub p_const_w: f64,
    pub p_static_w: f64,
    pub trace_noise_pct: f64,
    pub warmup_s: f64,
    pub steady_s: f64,
    pub sample_period_ms: f64,
    pub seed: u64,
    pub primary_fraction: f64,
    /// Instructions per benchmark; drawn per benchmark when absent so the
    /// dynamic power lands between 50 and 100 W.
    pub benchmark_instructions: Option<f64>,
    pub n_apps: usize,
    pub architecture_label: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_instructions: 20,
            n_benchmarks: None,
            energy_range_j: (0.5e-9, 5e-9),
            p_const_w: 40.0,
            p_static_w: 40.0,
            trace_noise_pct: 0.0,
            warmup_s: 5.0,
            steady_s: 60.0,
            sample_period_ms: 100.0,
            seed: 0,
            primary_fraction: 0.8,
            benchmark_instructions: None,
            n_apps: 5,
            architecture_label: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    pub fn n_benchmarks(&self) -> usize {
        self.n_benchmarks.unwrap_or(self.n_instructions)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Value(msg));
        let (lo, hi) = self.energy_range_j;
        if self.n_instructions == 0 {
            return bad("n_instructions must be at least 1".into());
        }
        if self.n_benchmarks() < self.n_instructions {
            return bad(format!(
                "n_benchmarks ({}) must be at least n_instructions ({})",
                self.n_benchmarks(),
                self.n_instructions
            ));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("energy range ({lo}, {hi}) must be positive and ordered"));
        }
        if !(self.steady_s > 0.0) || !(self.warmup_s >= 0.0) || !(self.sample_period_ms > 0.0) {
            return bad("steady_s and sample_period_ms must be positive, warmup_s non-negative".into());
        }
        if !(self.trace_noise_pct >= 0.0) {
            return bad(format!("trace_noise_pct must be non-negative, got {}", self.trace_noise_pct));
        }
        if !(self.primary_fraction > 0.0 && self.primary_fraction <= 1.0) {
            return bad(format!("primary_fraction must be in (0, 1], got {}", self.primary_fraction));
        }
        if !(self.p_const_w >= 0.0) || !(self.p_static_w >= 0.0) {
            return bad("baseline powers must be non-negative".into());
        }
        if let Some(c) = self.benchmark_instructions {
            if !(c >= 1.0) {
                return bad(format!("benchmark_instructions must be at least 1, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub name: String,
    pub primary_instruction: String,
    /// Column counts, level-qualified for memory instructions.
    pub counts: BTreeMap<String, f64>,
    pub raw: Vec<RawOpcodeCount>,
    pub metadata: ProfileMetadata,
    pub trace: PowerTrace,
}

#[derive(Debug, Clone)]
pub struct SynthApp {
    pub name: String,
    pub raw: Vec<RawOpcodeCount>,
    pub metadata: ProfileMetadata,
    pub profile: InstructionProfile,
    pub true_energy_j: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub truth: EnergyTable,
    pub idle_trace: PowerTrace,
    pub active_idle_trace: PowerTrace,
    pub benchmarks: Vec<SynthBenchmark>,
    pub apps: Vec<SynthApp>,
}

fn quantize_mw(p: f64) -> f64 {
    (p * 1000.0).round() / 1000.0
}

fn file_stem(key: &str) -> String {
    key.replace('@', "_")
}

/// Opcodes a profiler would report for one grouped count, spread over
/// variants the default grouping rules fold back together.
fn raw_opcodes(group: &str, count: f64) -> Vec<(String, f64)> {
    let half = (count / 2.0).floor();
    match group {
        "HMMA.884.F32.F32" => (0..4).map(|s| (format!("{group}.STEP{s}"), count)).collect(),
        "LDG.E.64" => vec![("LDG.E.EF.64".into(), half), (group.into(), count - half)],
        "ISETP.GE.AND" => vec![("ISETP.LT.OR".into(), half), (group.into(), count - half)],
        _ => vec![(group.into(), count)],
    }
}

fn to_raw(counts: &BTreeMap<String, f64>) -> Vec<RawOpcodeCount> {
    counts
        .iter()
        .flat_map(|(g, &c)| raw_opcodes(g, c))
        .filter(|(_, c)| *c > 0.0)
        .map(|(opcode, count)| RawOpcodeCount { opcode, count })
        .collect()
}

/// Global-load hit rates that place every access at `level`.
fn pinned_rates(level: MemoryLevel) -> (f64, Option<f64>) {
    match level {
        MemoryLevel::L1 => (1.0, None),
        MemoryLevel::L2 => (0.0, Some(1.0)),
        MemoryLevel::Dram => (0.0, Some(0.0)),
    }
}

struct Noise {
    dist: Option<Normal<f64>>,
}

impl Noise {
    fn new(pct: f64) -> Self {
        Self {
            dist: (pct > 0.0).then(|| Normal::new(1.0, pct / 100.0).expect("finite sigma")),
        }
    }

    fn apply(&self, rng: &mut ChaCha8Rng, p: f64) -> f64 {
        match &self.dist {
            Some(d) => (p * d.sample(rng)).max(0.0),
            None => p,
        }
    }
}

fn flat_trace(label: &str, power: f64, seconds: f64, period_ms: f64, noise: &Noise, rng: &mut ChaCha8Rng) -> Result<PowerTrace> {
    let n = (seconds * 1000.0 / period_ms).round() as usize;
    let samples = (0..=n)
        .map(|k| PowerSample::new(k as f64 * period_ms, quantize_mw(noise.apply(rng, power))))
        .collect();
    PowerTrace::new(label, samples)
}

/// Linear warm-up from the constant power to `steady_w`, then a flat segment.
fn benchmark_trace(spec: &SynthSpec, label: &str, steady_w: f64, noise: &Noise, rng: &mut ChaCha8Rng) -> Result<PowerTrace> {
    let warm_ms = spec.warmup_s * 1000.0;
    let n = ((spec.warmup_s + spec.steady_s) * 1000.0 / spec.sample_period_ms).round() as usize;
    let samples = (0..=n)
        .map(|k| {
            let t = k as f64 * spec.sample_period_ms;
            let p = if t < warm_ms {
                spec.p_const_w + (steady_w - spec.p_const_w) * t / warm_ms
            } else {
                steady_w
            };
            PowerSample::new(t, quantize_mw(noise.apply(rng, p)))
        })
        .collect();
    PowerTrace::new(label, samples)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys: Vec<String> = (0..spec.n_instructions)
        .map(|i| POOL.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("OP{i}")))
        .collect();
    let ancillary_pool: Vec<&String> = keys.iter().filter(|k| MemoryFamily::of(k).is_none()).collect();
    let p_const = quantize_mw(spec.p_const_w);
    let p_static = quantize_mw(spec.p_static_w);
    let baseline = p_const + p_static;

    let (lo, hi) = spec.energy_range_j;
    let mut energies: BTreeMap<String, f64> = keys
        .iter()
        .map(|k| (k.clone(), if lo == hi { lo } else { rng.random_range(lo..=hi) }))
        .collect();
    // Memory energies grow with distance from the core.
    let mut mem: Vec<f64> = MemoryLevel::ALL
        .iter()
        .filter_map(|&l| energies.get(&qualified_key("LDG.E.64", Some(l))).copied())
        .collect();
    mem.sort_by(f64::total_cmp);
    let planted_levels: Vec<String> = MemoryLevel::ALL
        .iter()
        .map(|&l| qualified_key("LDG.E.64", Some(l)))
        .filter(|k| energies.contains_key(k))
        .collect();
    for (k, e) in planted_levels.into_iter().zip(mem) {
        energies.insert(k, e);
    }

    let primaries: Vec<String> = (0..spec.n_benchmarks()).map(|i| keys[i % keys.len()].clone()).collect();
    let mut rows: Option<Vec<BTreeMap<String, f64>>> = None;
    for _ in 0..MAX_REDRAWS {
        let candidate: Vec<BTreeMap<String, f64>> = primaries
            .iter()
            .map(|p| draw_counts(spec, p, &ancillary_pool, &energies, &mut rng))
            .collect();
        if full_column_rank(&candidate, &keys) {
            rows = Some(candidate);
            break;
        }
    }
    let rows = rows.ok_or_else(|| {
        Error::Generation(format!(
            "count matrix stayed singular after {MAX_REDRAWS} draws; raise primary_fraction"
        ))
    })?;

    // Quantize each benchmark's steady power, then re-solve the energies so
    // they reproduce the quantized dynamic energies.
    let steady: Vec<f64> = rows
        .iter()
        .map(|r| {
            let dynamic: f64 = r.iter().map(|(k, c)| c * energies[k]).sum();
            quantize_mw(baseline + dynamic / spec.steady_s)
        })
        .collect();
    let a = DMatrix::from_fn(rows.len(), keys.len(), |i, j| rows[i].get(&keys[j]).copied().unwrap_or(0.0));
    let b = DVector::from_iterator(rows.len(), steady.iter().map(|p| (p - baseline) * spec.steady_s));
    let replanted = least_squares(&a, &b);
    if replanted.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Generation(
            "milliwatt quantization drove a planted energy non-positive; widen the energy range or lengthen steady_s".into(),
        ));
    }
    for (j, k) in keys.iter().enumerate() {
        energies.insert(k.clone(), replanted[j]);
    }

    let noise = Noise::new(spec.trace_noise_pct);
    let idle_trace = flat_trace("idle", p_const, BASELINE_TRACE_S, spec.sample_period_ms, &noise, &mut rng)?;
    let active_idle_trace = flat_trace("active-idle", baseline, BASELINE_TRACE_S, spec.sample_period_ms, &noise, &mut rng)?;

    let mut benchmarks = Vec::with_capacity(rows.len());
    let mut used_names: BTreeMap<String, usize> = BTreeMap::new();
    for ((primary, counts), &steady_w) in primaries.iter().zip(&rows).zip(&steady) {
        let n = used_names.entry(primary.clone()).or_insert(0);
        let name = match *n {
            0 => format!("{}_bench", file_stem(primary)),
            k => format!("{}_bench{}", file_stem(primary), k + 1),
        };
        *n += 1;
        let (_, level) = split_key(primary)?;
        let (l1, l2) = level.map(pinned_rates).map_or((None, None), |(a, b)| (Some(a), b));
        let mut grouped: BTreeMap<String, f64> = BTreeMap::new();
        for (k, &c) in counts {
            let (g, _) = split_key(k)?;
            *grouped.entry(g.to_string()).or_insert(0.0) += c;
        }
        let metadata = ProfileMetadata {
            kernel_label: name.clone(),
            t_exec_s: spec.steady_s,
            l1_load_hit_rate: l1,
            l2_hit_rate: l2,
            hit_rates: BTreeMap::new(),
            count_scale_factor: None,
        };
        let trace = benchmark_trace(spec, &name, steady_w, &noise, &mut rng)?;
        benchmarks.push(SynthBenchmark {
            name,
            primary_instruction: primary.clone(),
            counts: counts.clone(),
            raw: to_raw(&grouped),
            metadata,
            trace,
        });
    }

    let mut truth = EnergyTable::new(spec.architecture_label.clone(), p_const, p_static);
    for (key, &e) in &energies {
        let (g, level) = split_key(key)?;
        let mut entry = EnergyEntry::new(g, e, Provenance::Direct);
        if let Some(l) = level {
            entry = entry.at_level(l);
        }
        truth.insert(entry)?;
    }
    truth.derive_all_scaling();
    truth.assign_buckets(&BucketTaxonomy::default());
    truth.grouping_fingerprint = Some(GroupingRules::default().fingerprint());

    let apps = (0..spec.n_apps)
        .map(|i| draw_app(i, &truth, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthDataset {
        spec: spec.clone(),
        truth,
        idle_trace,
        active_idle_trace,
        benchmarks,
        apps,
    })
}

fn draw_counts(
    spec: &SynthSpec,
    primary: &str,
    ancillary_pool: &[&String],
    energies: &BTreeMap<String, f64>,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, f64> {
    let others: Vec<&String> = ancillary_pool.iter().copied().filter(|k| k.as_str() != primary).collect();
    let k = if others.is_empty() || spec.primary_fraction >= 1.0 {
        0
    } else {
        rng.random_range(1..=others.len().min(3))
    };
    let chosen: Vec<&String> = others.choose_multiple(rng, k).copied().collect();
    let weights: Vec<f64> = chosen.iter().map(|_| rng.random_range(0.2..1.0)).collect();
    let wsum: f64 = weights.iter().sum();
    let pf = if chosen.is_empty() { 1.0 } else { spec.primary_fraction };
    let fractions: Vec<f64> = weights.iter().map(|w| (1.0 - pf) * w / wsum).collect();

    let total = match spec.benchmark_instructions {
        Some(t) => t,
        None => {
            let mean_e = pf * energies[primary]
                + chosen.iter().zip(&fractions).map(|(k, f)| f * energies[*k]).sum::<f64>();
            rng.random_range(50.0..100.0) * spec.steady_s / mean_e
        }
    };
    let mut counts = BTreeMap::new();
    let mut assigned = 0.0;
    for (key, f) in chosen.iter().zip(&fractions) {
        let c = (f * total).round().max(1.0);
        assigned += c;
        counts.insert((*key).clone(), c);
    }
    counts.insert(primary.to_string(), (total.round() - assigned).max(1.0));
    counts
}

fn full_column_rank(rows: &[BTreeMap<String, f64>], keys: &[String]) -> bool {
    let a = DMatrix::from_fn(rows.len(), keys.len(), |i, j| rows[i].get(&keys[j]).copied().unwrap_or(0.0));
    let norms: Vec<f64> = (0..keys.len()).map(|j| a.column(j).norm()).collect();
    if norms.contains(&0.0) {
        return false;
    }
    let mut scaled = a;
    for (j, n) in norms.iter().enumerate() {
        scaled.column_mut(j).unscale_mut(*n);
    }
    let sv = scaled.singular_values();
    sv.min() > 1e-8 * sv.max()
}

fn draw_app(index: usize, truth: &EnergyTable, rng: &mut ChaCha8Rng) -> Result<SynthApp> {
    let name = format!("app{index:02}");
    let mut groups: Vec<String> = Vec::new();
    for e in truth.entries().values() {
        let usable = match e.memory_level {
            None => true,
            Some(_) => {
                MemoryLevel::ALL
                    .iter()
                    .all(|&l| truth.entry(&qualified_key(&e.group_key, Some(l))).is_some())
                    && !groups.contains(&e.group_key)
            }
        };
        if usable {
            groups.push(e.group_key.clone());
        }
    }
    let k = rng.random_range(groups.len().min(3)..=groups.len());
    let chosen: Vec<String> = groups.choose_multiple(rng, k).cloned().collect();
    let mut grouped: BTreeMap<String, f64> = BTreeMap::new();
    for g in chosen {
        grouped.insert(g, rng.random_range(1e8..1e10_f64).round());
    }
    let t_exec_s = rng.random_range(1.0..30.0_f64);
    let has_memory = grouped.keys().any(|g| MemoryFamily::of(g).is_some());
    let (l1, l2) = if has_memory {
        (Some(rng.random_range(0.0..1.0)), Some(rng.random_range(0.0..1.0)))
    } else {
        (None, None)
    };
    let metadata = ProfileMetadata {
        kernel_label: name.clone(),
        t_exec_s,
        l1_load_hit_rate: l1,
        l2_hit_rate: l2,
        hit_rates: BTreeMap::new(),
        count_scale_factor: None,
    };
    let raw = to_raw(&grouped);
    let parsed = ParsedProfile { raw: raw.clone(), metadata: metadata.clone(), warnings: vec![] };
    let (profile, _) = InstructionProfile::from_parsed(&parsed, &GroupingRules::default())?;
    let true_energy_j = true_energy(&profile, truth)?;
    Ok(SynthApp { name, raw, metadata, profile, true_energy_j })
}

/// Reference energy of a profile under a ground-truth table: baseline power
/// times execution time plus every count times its planted energy, memory
/// counts split across levels by the profile's hit rates.
pub fn true_energy(profile: &InstructionProfile, truth: &EnergyTable) -> Result<f64> {
    let price = |key: &str| {
        truth
            .entry(key)
            .map(|e| e.energy_j)
            .ok_or_else(|| Error::Input(format!("{key} is not in the ground-truth table")))
    };
    let mut dynamic = 0.0;
    for (group, &count) in &profile.grouped_counts {
        let rates = MemoryFamily::of(group).and_then(|f| {
            let own = profile.hit_rates.get(&f).filter(|r| !r.is_empty()).copied();
            match f {
                MemoryFamily::GlobalStore => own.or_else(|| profile.hit_rates.get(&MemoryFamily::GlobalLoad).copied()),
                _ => own,
            }
        });
        match rates {
            Some(HitRates { l1, l2 }) => {
                let (h1, h2) = (l1.unwrap_or(0.0), l2.unwrap_or(0.0));
                let at_l1 = count * h1;
                let at_l2 = (count - at_l1) * h2;
                let at_dram = count - at_l1 - at_l2;
                for (c, level) in [(at_l1, MemoryLevel::L1), (at_l2, MemoryLevel::L2), (at_dram, MemoryLevel::Dram)] {
                    if c > 0.0 {
                        dynamic += c * price(&qualified_key(group, Some(level)))?;
                    }
                }
            }
            None => dynamic += count * price(group)?,
        }
    }
    Ok((truth.p_const_w + truth.p_static_w) * profile.t_exec_s + dynamic)
}

/// Target-system energies related to `source` by `slope·e + intercept` plus
/// gaussian noise with standard deviation `noise_pct` percent of the mean
/// mapped energy. Floored at zero.
pub fn affine_target(source: &EnergyTable, slope: f64, intercept: f64, noise_pct: f64, seed: u64) -> BTreeMap<String, f64> {
    let mapped: BTreeMap<String, f64> = source
        .entries()
        .iter()
        .map(|(k, e)| (k.clone(), slope * e.energy_j + intercept))
        .collect();
    if mapped.is_empty() || noise_pct == 0.0 {
        return mapped;
    }
    let mean = mapped.values().sum::<f64>() / mapped.len() as f64;
    let normal = Normal::new(0.0, noise_pct / 100.0 * mean.abs()).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mapped
        .into_iter()
        .map(|(k, v)| (k, (v + normal.sample(&mut rng)).max(0.0)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthApp {
    pub name: String,
    pub opcode_counts_file: PathBuf,
    pub metadata_file: PathBuf,
    pub true_energy_j: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub table: serde_json::Value,
    pub applications: Vec<GroundTruthApp>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opcode_csv(raw: &[RawOpcodeCount]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["opcode", "count"])?;
    for r in raw {
        w.write_record([r.opcode.clone(), r.count.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn trace_bytes(trace: &PowerTrace) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_power_trace(trace, &mut buf)?;
    Ok(buf)
}

/// Writes `manifest.json`, `traces/`, `profiles/`, `apps/` and
/// `ground_truth.json` under `dir`. Returns the manifest path.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<PathBuf> {
    for sub in ["traces", "profiles", "apps"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_file(&dir.join("traces/idle.csv"), &trace_bytes(&ds.idle_trace)?)?;
    write_file(&dir.join("traces/active_idle.csv"), &trace_bytes(&ds.active_idle_trace)?)?;

    let mut specs = Vec::with_capacity(ds.benchmarks.len());
    for b in &ds.benchmarks {
        let trace_file = PathBuf::from(format!("traces/{}.csv", b.name));
        let opcode_counts_file = PathBuf::from(format!("profiles/{}.opcodes.csv", b.name));
        let metadata_file = PathBuf::from(format!("profiles/{}.meta.json", b.name));
        write_file(&dir.join(&trace_file), &trace_bytes(&b.trace)?)?;
        write_file(&dir.join(&opcode_counts_file), &opcode_csv(&b.raw)?)?;
        write_file(&dir.join(&metadata_file), &json_bytes(&b.metadata))?;
        specs.push(BenchmarkSpec {
            name: b.name.clone(),
            trace_file,
            opcode_counts_file,
            metadata_file,
            primary_instruction: b.primary_instruction.clone(),
            count_scale_factor: None,
        });
    }
    let manifest = CalibrationManifest {
        architecture_label: ds.spec.architecture_label.clone(),
        idle_trace: "traces/idle.csv".into(),
        active_idle_trace: "traces/active_idle.csv".into(),
        benchmarks: specs,
    };
    let manifest_path = dir.join("manifest.json");
    write_file(&manifest_path, manifest.to_json().as_bytes())?;

    let mut applications = Vec::with_capacity(ds.apps.len());
    for app in &ds.apps {
        let opcode_counts_file = PathBuf::from(format!("apps/{}.opcodes.csv", app.name));
        let metadata_file = PathBuf::from(format!("apps/{}.meta.json", app.name));
        write_file(&dir.join(&opcode_counts_file), &opcode_csv(&app.raw)?)?;
        write_file(&dir.join(&metadata_file), &json_bytes(&app.metadata))?;
        applications.push(GroundTruthApp {
            name: app.name.clone(),
            opcode_counts_file,
            metadata_file,
            true_energy_j: app.true_energy_j,
        });
    }
    let truth = GroundTruth {
        spec: ds.spec.clone(),
        table: serde_json::from_str(&ds.truth.to_json())?,
        applications,
    };
    write_file(&dir.join("ground_truth.json"), &json_bytes(&truth))?;
    Ok(manifest_path)
}
