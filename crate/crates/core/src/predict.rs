//! Energy prediction and attribution for profiled kernels.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{qualified_key, EnergyTable, LookupMode, MemoryFamily, MemoryLevel, Provenance};
use crate::profile::{HitRates, InstructionProfile};

/// Per-level instruction counts of one memory instruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSplit {
    pub l1: f64,
    pub l2: f64,
    pub dram: f64,
}

impl LevelSplit {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2 + self.dram
    }

    pub fn get(&self, level: MemoryLevel) -> f64 {
        match level {
            MemoryLevel::L1 => self.l1,
            MemoryLevel::L2 => self.l2,
            MemoryLevel::Dram => self.dram,
        }
    }
}

/// Cascading split: L1 hits take `count * l1`, the misses reach L2 where a
/// fraction `l2` hits, and the rest goes to DRAM. Absent rates count as 0.
pub fn split_by_hit_rate(count: f64, rates: HitRates) -> LevelSplit {
    let l1 = count * rates.l1.unwrap_or(0.0);
    let l1_miss = count - l1;
    let l2 = l1_miss * rates.l2.unwrap_or(0.0);
    LevelSplit {
        l1,
        l2,
        dram: l1_miss - l2,
    }
}

/// Hit rates that apply to `group_key` in a profile. Stores fall back to the
/// global-load cascade when no store rates were exported.
pub fn hit_rates_for(
    group_key: &str,
    rates: &BTreeMap<MemoryFamily, HitRates>,
) -> Option<HitRates> {
    let family = MemoryFamily::of(group_key)?;
    let own = rates.get(&family).filter(|r| !r.is_empty());
    match (family, own) {
        (_, Some(r)) => Some(*r),
        (MemoryFamily::GlobalStore, None) => rates
            .get(&MemoryFamily::GlobalLoad)
            .filter(|r| !r.is_empty())
            .copied(),
        _ => None,
    }
}

/// A count attributed to one (group, level) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCount {
    pub group_key: String,
    pub level: Option<MemoryLevel>,
    pub count: f64,
}

/// Expands grouped counts into per-level counts for memory families with hit
/// rates. Zero counts are dropped.
pub fn expand_levels(
    grouped_counts: &BTreeMap<String, f64>,
    rates: &BTreeMap<MemoryFamily, HitRates>,
) -> Vec<LevelCount> {
    let mut out = Vec::new();
    for (key, &count) in grouped_counts {
        match hit_rates_for(key, rates) {
            Some(r) => {
                let split = split_by_hit_rate(count, r);
                for level in MemoryLevel::ALL {
                    let c = split.get(level);
                    if c > 0.0 {
                        out.push(LevelCount {
                            group_key: key.clone(),
                            level: Some(level),
                            count: c,
                        });
                    }
                }
            }
            None if count > 0.0 => out.push(LevelCount {
                group_key: key.clone(),
                level: None,
                count,
            }),
            None => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownEntry {
    pub count: f64,
    pub energy_j: f64,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<MemoryLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub kernel_label: String,
    pub mode: LookupMode,
    pub t_exec_s: f64,
    pub total_j: f64,
    pub const_j: f64,
    pub static_j: f64,
    pub dynamic_j: f64,
    /// Keyed by group key, level-qualified (`GROUP@LEVEL`) where priced per level.
    pub dynamic_breakdown: BTreeMap<String, BreakdownEntry>,
    pub covered_instruction_fraction: f64,
    pub uncovered_keys: Vec<String>,
    pub uncovered_instruction_count: f64,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl PredictionReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Prices a profile against a table: constant and static energy from
/// execution time, dynamic energy per (group, level). Uncovered instructions
/// contribute nothing and are listed.
pub fn predict_energy(
    profile: &InstructionProfile,
    table: &EnergyTable,
    mode: LookupMode,
) -> Result<PredictionReport> {
    if let (Some(p), Some(t)) = (&profile.grouping_fingerprint, &table.grouping_fingerprint) {
        if p != t {
            return Err(Error::Compatibility(format!(
                "profile {} was grouped with rules {} but the table was trained with {}",
                profile.kernel_label,
                &p[..p.len().min(12)],
                &t[..t.len().min(12)]
            )));
        }
    }
    if !(profile.t_exec_s > 0.0) {
        return Err(Error::Value(format!(
            "profile {}: t_exec_s must be positive",
            profile.kernel_label
        )));
    }
    let mut notes = Vec::new();
    for key in profile.grouped_counts.keys() {
        if let Some(family) = MemoryFamily::of(key) {
            if hit_rates_for(key, &profile.hit_rates).is_none() {
                notes.push(format!(
                    "{key}: no {} hit rates; priced at the level of its table entry",
                    family.as_str()
                ));
            }
        }
    }

    let mut breakdown: BTreeMap<String, BreakdownEntry> = BTreeMap::new();
    let mut uncovered_keys = Vec::new();
    let (mut covered, mut uncovered) = (0.0, 0.0);
    for lc in expand_levels(&profile.grouped_counts, &profile.hit_rates) {
        match table.lookup_energy(&lc.group_key, lc.level, mode) {
            Some(r) => {
                covered += lc.count;
                let entry = breakdown
                    .entry(qualified_key(&lc.group_key, r.level))
                    .or_insert(BreakdownEntry {
                        count: 0.0,
                        energy_j: 0.0,
                        provenance: r.provenance,
                        level: r.level,
                    });
                entry.count += lc.count;
                entry.energy_j += lc.count * r.energy_j;
            }
            None => {
                uncovered += lc.count;
                uncovered_keys.push(qualified_key(&lc.group_key, lc.level));
            }
        }
    }
    let const_j = table.p_const_w * profile.t_exec_s;
    let static_j = table.p_static_w * profile.t_exec_s;
    let dynamic_j: f64 = breakdown.values().map(|b| b.energy_j).sum();
    let total = covered + uncovered;
    Ok(PredictionReport {
        kernel_label: profile.kernel_label.clone(),
        mode,
        t_exec_s: profile.t_exec_s,
        total_j: const_j + static_j + dynamic_j,
        const_j,
        static_j,
        dynamic_j,
        dynamic_breakdown: breakdown,
        covered_instruction_fraction: if total > 0.0 { covered / total } else { 1.0 },
        uncovered_keys,
        uncovered_instruction_count: uncovered,
        notes,
    })
}

pub const CONSTANT_ROW: &str = "constant";
pub const STATIC_ROW: &str = "static";
pub const REMAINDER_ROW: &str = "remainder";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionRow {
    pub rank: usize,
    pub group_key: String,
    pub level: Option<MemoryLevel>,
    pub count: Option<f64>,
    pub energy_j: f64,
    pub provenance: Option<Provenance>,
    pub share_pct: f64,
}

/// Ranks constant, static and per-group energies together, highest first with
/// ties broken by key, keeping `top_k` rows and folding the rest into a
/// remainder row.
pub fn attribute(report: &PredictionReport, top_k: usize) -> Vec<AttributionRow> {
    struct Item {
        sort_key: String,
        group_key: String,
        level: Option<MemoryLevel>,
        count: Option<f64>,
        energy_j: f64,
        provenance: Option<Provenance>,
    }
    let mut items: Vec<Item> = report
        .dynamic_breakdown
        .iter()
        .map(|(key, b)| Item {
            sort_key: key.clone(),
            group_key: key.split('@').next().unwrap_or(key).to_string(),
            level: b.level,
            count: Some(b.count),
            energy_j: b.energy_j,
            provenance: Some(b.provenance),
        })
        .collect();
    for (name, energy) in [(CONSTANT_ROW, report.const_j), (STATIC_ROW, report.static_j)] {
        items.push(Item {
            sort_key: name.to_string(),
            group_key: name.to_string(),
            level: None,
            count: None,
            energy_j: energy,
            provenance: None,
        });
    }
    items.sort_by(|a, b| {
        b.energy_j
            .partial_cmp(&a.energy_j)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.sort_key.cmp(&b.sort_key))
    });
    let share = |e: f64| {
        if report.total_j > 0.0 {
            100.0 * e / report.total_j
        } else {
            0.0
        }
    };
    let mut rows: Vec<AttributionRow> = items
        .iter()
        .take(top_k)
        .enumerate()
        .map(|(i, it)| AttributionRow {
            rank: i + 1,
            group_key: it.group_key.clone(),
            level: it.level,
            count: it.count,
            energy_j: it.energy_j,
            provenance: it.provenance,
            share_pct: share(it.energy_j),
        })
        .collect();
    if items.len() > top_k {
        let rest = &items[top_k..];
        let energy: f64 = rest.iter().map(|it| it.energy_j).sum();
        let count: f64 = rest.iter().filter_map(|it| it.count).sum();
        rows.push(AttributionRow {
            rank: top_k + 1,
            group_key: REMAINDER_ROW.to_string(),
            level: None,
            count: Some(count),
            energy_j: energy,
            provenance: None,
            share_pct: share(energy),
        });
    }
    rows
}

/// CSV export: `rank,group_key,level,count,energy_j,provenance,share_pct`.
pub fn write_attribution_csv<W: Write>(rows: &[AttributionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "rank",
        "group_key",
        "level",
        "count",
        "energy_j",
        "provenance",
        "share_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.rank.to_string(),
            r.group_key.clone(),
            r.level.map(|l| l.to_string()).unwrap_or_default(),
            r.count.map(|c| c.to_string()).unwrap_or_default(),
            r.energy_j.to_string(),
            r.provenance.map(|p| p.to_string()).unwrap_or_default(),
            format!("{:.4}", r.share_pct),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<attribution writer>", e))?;
    Ok(())
}

pub fn render_attribution_text(report: &PredictionReport, rows: &[AttributionRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} ({} mode): {:.3} J total over {:.3} s, coverage {:.1}%",
        report.kernel_label,
        report.mode,
        report.total_j,
        report.t_exec_s,
        100.0 * report.covered_instruction_fraction
    );
    let _ = writeln!(
        out,
        "{:>4}  {:<28} {:>5} {:>14} {:>14} {:>9} {:>7}",
        "rank", "group", "level", "count", "energy_j", "source", "share"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>4}  {:<28} {:>5} {:>14} {:>14.6} {:>9} {:>6.2}%",
            r.rank,
            r.group_key,
            r.level.map(|l| l.to_string()).unwrap_or_default(),
            r.count.map(|c| format!("{c:.4e}")).unwrap_or_default(),
            r.energy_j,
            r.provenance.map(|p| p.to_string()).unwrap_or_default(),
            r.share_pct
        );
    }
    if !report.uncovered_keys.is_empty() {
        let _ = writeln!(out, "uncovered: {}", report.uncovered_keys.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BucketTaxonomy, EnergyEntry};

    const NJ: f64 = 1e-9;

    fn profile(pairs: &[(&str, f64)], t: f64) -> InstructionProfile {
        InstructionProfile {
            kernel_label: "k".into(),
            grouped_counts: pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            t_exec_s: t,
            hit_rates: BTreeMap::new(),
            grouping_fingerprint: None,
        }
    }

    #[test]
    fn ninety_percent_l1_split() {
        let s = split_by_hit_rate(100.0, HitRates { l1: Some(0.9), l2: None });
        assert_eq!(s, LevelSplit { l1: 90.0, l2: 0.0, dram: 10.0 });
    }

    #[test]
    fn cascade_reaches_l2() {
        let s = split_by_hit_rate(100.0, HitRates::new(0.9, 0.5));
        assert_eq!(s, LevelSplit { l1: 90.0, l2: 5.0, dram: 5.0 });
    }

    #[test]
    fn full_l1_hits() {
        let s = split_by_hit_rate(100.0, HitRates::new(1.0, 0.3));
        assert_eq!(s, LevelSplit { l1: 100.0, l2: 0.0, dram: 0.0 });
    }

    #[test]
    fn store_falls_back_to_load_rates() {
        let mut rates = BTreeMap::new();
        rates.insert(MemoryFamily::GlobalLoad, HitRates::new(0.5, 0.5));
        assert_eq!(hit_rates_for("STG.E.64", &rates), Some(HitRates::new(0.5, 0.5)));
        rates.insert(MemoryFamily::GlobalStore, HitRates::new(0.0, 1.0));
        assert_eq!(hit_rates_for("STG.E.64", &rates), Some(HitRates::new(0.0, 1.0)));
        assert_eq!(hit_rates_for("LDL.64", &rates), None);
        assert_eq!(hit_rates_for("IADD3", &rates), None);
    }

    #[test]
    fn arithmetic_example() {
        let mut t = EnergyTable::new("a", 40.0, 40.0);
        t.insert(EnergyEntry::new("IADD3", 2.0 * NJ, Provenance::Solved)).unwrap();
        let r = predict_energy(&profile(&[("IADD3", 1e9)], 10.0), &t, LookupMode::Pred).unwrap();
        assert_eq!(r.const_j, 400.0);
        assert_eq!(r.static_j, 400.0);
        assert!((r.dynamic_j - 2.0).abs() < 1e-12);
        assert!((r.total_j - 802.0).abs() < 1e-9);
        assert_eq!(r.covered_instruction_fraction, 1.0);
    }

    #[test]
    fn empty_profile_is_baseline_only() {
        let t = EnergyTable::new("a", 40.0, 40.0);
        let r = predict_energy(&profile(&[], 1.0), &t, LookupMode::Pred).unwrap();
        assert_eq!(r.total_j, 80.0);
        assert_eq!(r.dynamic_j, 0.0);
        assert!(r.uncovered_keys.is_empty());
        assert_eq!(r.covered_instruction_fraction, 1.0);
    }

    #[test]
    fn uncovered_instructions_contribute_nothing() {
        let mut t = EnergyTable::new("a", 1.0, 1.0);
        t.insert(EnergyEntry::new("IADD3", 2.0 * NJ, Provenance::Solved)).unwrap();
        let r = predict_energy(&profile(&[("IADD3", 300.0), ("FOO", 100.0)], 1.0), &t, LookupMode::Pred)
            .unwrap();
        assert_eq!(r.uncovered_keys, vec!["FOO".to_string()]);
        assert_eq!(r.covered_instruction_fraction, 0.75);
        assert_eq!(r.total_j, r.const_j + r.static_j + r.dynamic_j);
    }

    #[test]
    fn memory_instructions_are_split_and_scaled() {
        let mut t = EnergyTable::new("a", 0.0, 0.0);
        t.insert(EnergyEntry::new("LDG.E", 1.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L1))
            .unwrap();
        t.insert(EnergyEntry::new("LDG.E", 3.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L2))
            .unwrap();
        t.insert(EnergyEntry::new("LDG.E", 9.0 * NJ, Provenance::Direct).at_level(MemoryLevel::Dram))
            .unwrap();
        t.insert(EnergyEntry::new("LDG.E.128", 2.0 * NJ, Provenance::Solved).at_level(MemoryLevel::L1))
            .unwrap();
        t.derive_all_scaling();
        let mut p = profile(&[("LDG.E", 100.0), ("LDG.E.128", 100.0)], 1.0);
        p.hit_rates.insert(MemoryFamily::GlobalLoad, HitRates::new(0.9, 0.5));
        let r = predict_energy(&p, &t, LookupMode::Pred).unwrap();
        let b = &r.dynamic_breakdown;
        assert!((b["LDG.E@L1"].energy_j - 90.0 * NJ).abs() < 1e-18);
        assert!((b["LDG.E@DRAM"].energy_j - 45.0 * NJ).abs() < 1e-18);
        assert_eq!(b["LDG.E.128@L2"].provenance, Provenance::Scaled);
        assert!((b["LDG.E.128@L2"].energy_j - 5.0 * 6.0 * NJ).abs() < 1e-18);
        assert_eq!(r.covered_instruction_fraction, 1.0);

        let direct = predict_energy(&p, &t, LookupMode::Direct).unwrap();
        assert!(direct.total_j <= r.total_j);
        assert!(direct.covered_instruction_fraction < 1.0);
    }

    #[test]
    fn missing_hit_rates_are_noted() {
        let mut t = EnergyTable::new("a", 0.0, 0.0);
        t.insert(EnergyEntry::new("LDG.E", 1.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L2))
            .unwrap();
        let r = predict_energy(&profile(&[("LDG.E", 10.0)], 1.0), &t, LookupMode::Direct).unwrap();
        assert_eq!(r.dynamic_breakdown["LDG.E@L2"].count, 10.0);
        assert_eq!(r.notes.len(), 1);
    }

    #[test]
    fn fingerprint_mismatch_is_compatibility_error() {
        let mut t = EnergyTable::new("a", 0.0, 0.0);
        t.grouping_fingerprint = Some("aaaa".into());
        let mut p = profile(&[], 1.0);
        p.grouping_fingerprint = Some("bbbb".into());
        assert!(matches!(
            predict_energy(&p, &t, LookupMode::Pred),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn bucketed_coverage_in_pred_mode_only() {
        let mut t = EnergyTable::new("a", 0.0, 0.0);
        t.insert(EnergyEntry::new("MOV", 2.0 * NJ, Provenance::Solved)).unwrap();
        t.insert(EnergyEntry::new("LOP3.LUT", 4.0 * NJ, Provenance::Solved)).unwrap();
        t.assign_buckets(&BucketTaxonomy::default());
        let p = profile(&[("MOV", 10.0), ("R2UR", 10.0)], 1.0);
        let direct = predict_energy(&p, &t, LookupMode::Direct).unwrap();
        let pred = predict_energy(&p, &t, LookupMode::Pred).unwrap();
        assert_eq!(direct.covered_instruction_fraction, 0.5);
        assert_eq!(pred.covered_instruction_fraction, 1.0);
        assert_eq!(pred.dynamic_breakdown["R2UR"].provenance, Provenance::Bucketed);
        assert!(direct.total_j < pred.total_j);
    }

    fn report(breakdown: &[(&str, f64)], const_j: f64) -> PredictionReport {
        let dynamic_breakdown: BTreeMap<String, BreakdownEntry> = breakdown
            .iter()
            .map(|&(k, e)| {
                (
                    k.to_string(),
                    BreakdownEntry { count: 1.0, energy_j: e, provenance: Provenance::Solved, level: None },
                )
            })
            .collect();
        let dynamic_j = breakdown.iter().map(|b| b.1).sum::<f64>();
        PredictionReport {
            kernel_label: "k".into(),
            mode: LookupMode::Pred,
            t_exec_s: 1.0,
            total_j: const_j + dynamic_j,
            const_j,
            static_j: 0.0,
            dynamic_j,
            dynamic_breakdown,
            covered_instruction_fraction: 1.0,
            uncovered_keys: vec![],
            uncovered_instruction_count: 0.0,
            notes: vec![],
        }
    }

    fn keys(rows: &[AttributionRow]) -> Vec<&str> {
        rows.iter().map(|r| r.group_key.as_str()).collect()
    }

    #[test]
    fn attribution_ranks_by_energy() {
        let rows = attribute(&report(&[("A", 10.0), ("B", 30.0)], 5.0), 3);
        assert_eq!(keys(&rows)[..3], ["B", "A", CONSTANT_ROW]);
        assert_eq!(rows[0].rank, 1);
        assert!((rows[0].share_pct - 100.0 * 30.0 / 45.0).abs() < 1e-12);
    }

    #[test]
    fn attribution_truncates_into_remainder() {
        let rows = attribute(&report(&[("A", 10.0), ("B", 30.0)], 5.0), 1);
        assert_eq!(keys(&rows), ["B", REMAINDER_ROW]);
        assert_eq!(rows[1].energy_j, 15.0);
    }

    #[test]
    fn attribution_ties_break_by_key() {
        let rows = attribute(&report(&[("B", 10.0), ("A", 10.0)], 0.0), 2);
        assert_eq!(keys(&rows), ["A", "B", REMAINDER_ROW]);
    }

    #[test]
    fn attribution_csv_has_contract_header() {
        let rows = attribute(&report(&[("A", 10.0)], 5.0), 5);
        let mut buf = Vec::new();
        write_attribution_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("rank,group_key,level,count,energy_j,provenance,share_pct\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
