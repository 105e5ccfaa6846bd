//! The trained energy model.
//!
//! An [`EnergyTable`] holds constant and static power plus per-group dynamic
//! energies. Memory instructions may carry one entry per hierarchy level; such
//! entries are keyed `GROUP@LEVEL` (e.g. `LDG.E.64@L2`). Coverage for
//! instructions without a measured entry comes from memory-level scaling
//! factors and per-bucket averages.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::glob::OpcodeGlob;

pub const SCHEMA_VERSION: &str = "1.0";
const SCHEMA_MAJOR: u64 = 1;

const DEFAULT_TAXONOMY: &str = include_str!("../config/bucket_taxonomy.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemoryLevel {
    L1,
    L2,
    #[serde(rename = "DRAM")]
    Dram,
}

impl MemoryLevel {
    pub const ALL: [MemoryLevel; 3] = [MemoryLevel::L1, MemoryLevel::L2, MemoryLevel::Dram];

    pub fn as_str(&self) -> &'static str {
        match self {
            MemoryLevel::L1 => "L1",
            MemoryLevel::L2 => "L2",
            MemoryLevel::Dram => "DRAM",
        }
    }
}

impl fmt::Display for MemoryLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemoryLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" => Ok(MemoryLevel::L1),
            "L2" => Ok(MemoryLevel::L2),
            "DRAM" => Ok(MemoryLevel::Dram),
            other => Err(Error::Format(format!("unknown memory level `{other}`"))),
        }
    }
}

/// Memory-instruction families that see the cache hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryFamily {
    GlobalLoad,
    GlobalStore,
    Local,
    Texture,
}

impl MemoryFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            MemoryFamily::GlobalLoad => "global_load",
            MemoryFamily::GlobalStore => "global_store",
            MemoryFamily::Local => "local",
            MemoryFamily::Texture => "texture",
        }
    }

    /// Family of a group key, judged by its base mnemonic.
    pub fn of(group_key: &str) -> Option<Self> {
        let base = group_key.split(['.', '@']).next().unwrap_or("");
        match base {
            "LDG" | "LD" => Some(MemoryFamily::GlobalLoad),
            "STG" | "ST" => Some(MemoryFamily::GlobalStore),
            "LDL" | "STL" => Some(MemoryFamily::Local),
            "TEX" | "TLD" | "TLD4" | "TXD" | "TMML" | "TXQ" => Some(MemoryFamily::Texture),
            _ => None,
        }
    }
}

impl FromStr for MemoryFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_load" => Ok(MemoryFamily::GlobalLoad),
            "global_store" => Ok(MemoryFamily::GlobalStore),
            "local" => Ok(MemoryFamily::Local),
            "texture" => Ok(MemoryFamily::Texture),
            other => Err(Error::Format(format!("unknown memory family `{other}`"))),
        }
    }
}

pub fn qualified_key(group_key: &str, level: Option<MemoryLevel>) -> String {
    match level {
        Some(l) => format!("{group_key}@{l}"),
        None => group_key.to_string(),
    }
}

/// Splits `GROUP@LEVEL` into its parts.
pub fn split_key(key: &str) -> Result<(&str, Option<MemoryLevel>)> {
    match key.rsplit_once('@') {
        Some((group, level)) => Ok((group, Some(level.parse()?))),
        None => Ok((key, None)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Direct,
    Solved,
    Grouped,
    Bucketed,
    Scaled,
}

impl Provenance {
    /// Measured or solved, as opposed to approximated.
    pub fn is_known(&self) -> bool {
        matches!(self, Provenance::Direct | Provenance::Solved)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Direct => "direct",
            Provenance::Solved => "solved",
            Provenance::Grouped => "grouped",
            Provenance::Bucketed => "bucketed",
            Provenance::Scaled => "scaled",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEntry {
    pub group_key: String,
    pub energy_j: f64,
    pub provenance: Provenance,
    pub memory_level: Option<MemoryLevel>,
}

impl EnergyEntry {
    pub fn new(group_key: impl Into<String>, energy_j: f64, provenance: Provenance) -> Self {
        Self {
            group_key: group_key.into(),
            energy_j,
            provenance,
            memory_level: None,
        }
    }

    pub fn at_level(mut self, level: MemoryLevel) -> Self {
        self.memory_level = Some(level);
        self
    }

    pub fn key(&self) -> String {
        qualified_key(&self.group_key, self.memory_level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub bucket: String,
    pub patterns: Vec<String>,
}

/// Ordered bucket list; a key belongs to the first bucket with a matching
/// pattern.
#[derive(Debug, Clone)]
pub struct BucketTaxonomy {
    buckets: Vec<Bucket>,
    compiled: Vec<Vec<OpcodeGlob>>,
}

impl PartialEq for BucketTaxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.buckets == other.buckets
    }
}

impl BucketTaxonomy {
    pub fn new(buckets: Vec<Bucket>) -> Result<Self> {
        let compiled = buckets
            .iter()
            .map(|b| b.patterns.iter().map(|p| OpcodeGlob::new(p)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { buckets, compiled })
    }

    pub fn empty() -> Self {
        Self {
            buckets: Vec::new(),
            compiled: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let buckets: Vec<Bucket> = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("bucket taxonomy: {e}")))?;
        Self::new(buckets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn bucket_of(&self, group_key: &str) -> Option<&str> {
        self.compiled
            .iter()
            .position(|globs| globs.iter().any(|g| g.is_match(group_key)))
            .map(|i| self.buckets[i].bucket.as_str())
    }
}

impl Default for BucketTaxonomy {
    fn default() -> Self {
        Self::from_json(DEFAULT_TAXONOMY).expect("shipped taxonomy is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScalingKey {
    pub family: MemoryFamily,
    pub from: MemoryLevel,
    pub to: MemoryLevel,
}

impl fmt::Display for ScalingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}->{}", self.family.as_str(), self.from, self.to)
    }
}

impl FromStr for ScalingKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad scaling factor key `{s}`"));
        let (family, levels) = s.split_once(':').ok_or_else(bad)?;
        let (from, to) = levels.split_once("->").ok_or_else(bad)?;
        Ok(Self {
            family: family.parse()?,
            from: from.parse()?,
            to: to.parse()?,
        })
    }
}

/// Which table entries a lookup may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LookupMode {
    /// Direct and solved entries only.
    Direct,
    /// Adds scaled and bucketed resolution.
    #[default]
    Pred,
}

impl fmt::Display for LookupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LookupMode::Direct => "direct",
            LookupMode::Pred => "pred",
        })
    }
}

impl FromStr for LookupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(LookupMode::Direct),
            "pred" => Ok(LookupMode::Pred),
            other => Err(Error::Input(format!("unknown mode `{other}` (direct|pred)"))),
        }
    }
}

/// Result of a successful lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub energy_j: f64,
    pub provenance: Provenance,
    /// Level the energy was priced at, when level-specific.
    pub level: Option<MemoryLevel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    pub architecture_label: String,
    pub p_const_w: f64,
    pub p_static_w: f64,
    entries: BTreeMap<String, EnergyEntry>,
    bucket_averages: BTreeMap<String, f64>,
    scaling_factors: BTreeMap<ScalingKey, f64>,
    taxonomy: BucketTaxonomy,
    pub grouping_fingerprint: Option<String>,
}

impl EnergyTable {
    pub fn new(architecture_label: impl Into<String>, p_const_w: f64, p_static_w: f64) -> Self {
        Self {
            architecture_label: architecture_label.into(),
            p_const_w,
            p_static_w,
            entries: BTreeMap::new(),
            bucket_averages: BTreeMap::new(),
            scaling_factors: BTreeMap::new(),
            taxonomy: BucketTaxonomy::empty(),
            grouping_fingerprint: None,
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, EnergyEntry> {
        &self.entries
    }

    pub fn entry(&self, key: &str) -> Option<&EnergyEntry> {
        self.entries.get(key)
    }

    pub fn bucket_averages(&self) -> &BTreeMap<String, f64> {
        &self.bucket_averages
    }

    pub fn scaling_factors(&self) -> &BTreeMap<ScalingKey, f64> {
        &self.scaling_factors
    }

    pub fn scaling_factor(&self, key: &ScalingKey) -> Option<f64> {
        self.scaling_factors.get(key).copied()
    }

    pub fn taxonomy(&self) -> &BucketTaxonomy {
        &self.taxonomy
    }

    /// Inserts an entry. Known (direct/solved) entries are never replaced by
    /// approximated ones; returns whether the entry was stored.
    pub fn insert(&mut self, entry: EnergyEntry) -> Result<bool> {
        if !(entry.energy_j >= 0.0) || !entry.energy_j.is_finite() {
            return Err(Error::Value(format!(
                "energy for {} must be non-negative, got {}",
                entry.key(),
                entry.energy_j
            )));
        }
        let key = entry.key();
        if let Some(existing) = self.entries.get(&key) {
            if existing.provenance.is_known() && !entry.provenance.is_known() {
                return Ok(false);
            }
        }
        self.entries.insert(key, entry);
        Ok(true)
    }

    /// Recomputes bucket averages from known entries and adopts `taxonomy`
    /// for later lookups. Returns warnings for buckets without known members.
    pub fn assign_buckets(&mut self, taxonomy: &BucketTaxonomy) -> Vec<String> {
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for entry in self.entries.values().filter(|e| e.provenance.is_known()) {
            if let Some(b) = taxonomy.bucket_of(&entry.group_key) {
                let s = sums.entry(b).or_insert((0.0, 0));
                s.0 += entry.energy_j;
                s.1 += 1;
            }
        }
        let mut warnings = Vec::new();
        let mut averages = BTreeMap::new();
        for bucket in taxonomy.buckets() {
            match sums.get(bucket.bucket.as_str()) {
                Some(&(sum, n)) if n > 0 => {
                    averages.insert(bucket.bucket.clone(), sum / n as f64);
                }
                _ => {
                    let msg = format!("bucket {} has no known members; no average", bucket.bucket);
                    info!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        self.bucket_averages = averages;
        self.taxonomy = taxonomy.clone();
        warnings
    }

    /// Sets one bucket average directly (used when a table is derived from
    /// another rather than trained).
    pub fn set_bucket_average(&mut self, bucket: &str, energy_j: f64) -> Result<()> {
        if !(energy_j >= 0.0) || !energy_j.is_finite() {
            return Err(Error::Value(format!(
                "bucket average for {bucket} must be non-negative, got {energy_j}"
            )));
        }
        self.bucket_averages.insert(bucket.to_string(), energy_j);
        Ok(())
    }

    pub fn set_scaling_factor(&mut self, key: ScalingKey, factor: f64) -> Result<()> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Value(format!("scaling factor {key} must be positive, got {factor}")));
        }
        self.scaling_factors.insert(key, factor);
        Ok(())
    }

    /// Stores the ratio energy(to)/energy(from) of `reference_group` (and its
    /// reciprocal) as the scaling factor for the reference's family.
    pub fn derive_scaling(
        &mut self,
        reference_group: &str,
        from: MemoryLevel,
        to: MemoryLevel,
    ) -> Result<f64> {
        let family = MemoryFamily::of(reference_group).ok_or_else(|| {
            Error::Derivation(format!("{reference_group} is not a memory instruction"))
        })?;
        let known = |level: MemoryLevel| -> Result<f64> {
            self.entries
                .get(&qualified_key(reference_group, Some(level)))
                .filter(|e| e.provenance.is_known())
                .map(|e| e.energy_j)
                .ok_or_else(|| {
                    Error::Derivation(format!(
                        "{reference_group} has no direct or solved energy at level {level}"
                    ))
                })
        };
        let (e_from, e_to) = (known(from)?, known(to)?);
        if e_from <= 0.0 || e_to <= 0.0 {
            return Err(Error::Derivation(format!(
                "{reference_group}: zero energy at {} cannot anchor a ratio",
                if e_from <= 0.0 { from } else { to }
            )));
        }
        let factor = e_to / e_from;
        self.scaling_factors
            .insert(ScalingKey { family, from, to }, factor);
        self.scaling_factors.insert(
            ScalingKey {
                family,
                from: to,
                to: from,
            },
            e_from / e_to,
        );
        Ok(factor)
    }

    /// Derives scaling factors for every family and level pair that some
    /// group (the lexicographically first) has known energies for.
    pub fn derive_all_scaling(&mut self) -> Vec<ScalingKey> {
        let mut candidates: BTreeMap<(MemoryFamily, MemoryLevel, MemoryLevel), String> =
            BTreeMap::new();
        let mut levels_by_group: BTreeMap<&str, Vec<MemoryLevel>> = BTreeMap::new();
        for e in self.entries.values() {
            if let (Some(level), true) = (e.memory_level, e.provenance.is_known() && e.energy_j > 0.0)
            {
                levels_by_group.entry(&e.group_key).or_default().push(level);
            }
        }
        for (group, levels) in &levels_by_group {
            let Some(family) = MemoryFamily::of(group) else { continue };
            for &a in levels {
                for &b in levels {
                    if a < b {
                        candidates
                            .entry((family, a, b))
                            .or_insert_with(|| group.to_string());
                    }
                }
            }
        }
        let mut derived = Vec::new();
        for ((family, from, to), group) in candidates {
            if self.derive_scaling(&group, from, to).is_ok() {
                derived.push(ScalingKey { family, from, to });
            }
        }
        derived
    }

    /// Resolves the energy of `group_key` at `level`: exact entry, then (pred
    /// mode) an entry at another level times the family scaling factor, then
    /// (pred mode) the bucket average. `None` is a coverage miss.
    ///
    /// A level-less lookup of a group measured only per level uses the first
    /// known level in L1, L2, DRAM order.
    pub fn lookup_energy(
        &self,
        group_key: &str,
        level: Option<MemoryLevel>,
        mode: LookupMode,
    ) -> Option<Resolved> {
        let exact = self.entries.get(&qualified_key(group_key, level));
        let per_level = |known_only: bool| {
            MemoryLevel::ALL.iter().find_map(|&l| {
                self.entries
                    .get(&qualified_key(group_key, Some(l)))
                    .filter(|e| !known_only || e.provenance.is_known())
            })
        };
        let hit = |e: &EnergyEntry, level: Option<MemoryLevel>| Resolved {
            energy_j: e.energy_j,
            provenance: e.provenance,
            level,
        };
        // known entries first so pred mode prices everything direct mode covers
        // identically
        if let Some(e) = exact.filter(|e| e.provenance.is_known()) {
            return Some(hit(e, level));
        }
        if level.is_none() {
            if let Some(e) = per_level(true) {
                return Some(hit(e, e.memory_level));
            }
        }
        if mode == LookupMode::Direct {
            return None;
        }
        if let Some(e) = exact {
            return Some(hit(e, level));
        }
        if level.is_none() {
            if let Some(e) = per_level(false) {
                return Some(hit(e, e.memory_level));
            }
        }
        if let (Some(to), Some(family)) = (level, MemoryFamily::of(group_key)) {
            for from in MemoryLevel::ALL.into_iter().filter(|&l| l != to) {
                let source = self
                    .entries
                    .get(&qualified_key(group_key, Some(from)))
                    .filter(|e| e.provenance.is_known());
                let factor = self.scaling_factor(&ScalingKey { family, from, to });
                if let (Some(e), Some(f)) = (source, factor) {
                    return Some(Resolved {
                        energy_j: e.energy_j * f,
                        provenance: Provenance::Scaled,
                        level: Some(to),
                    });
                }
            }
        }
        let bucket = self.taxonomy.bucket_of(group_key)?;
        self.bucket_averages.get(bucket).map(|&avg| Resolved {
            energy_j: avg,
            provenance: Provenance::Bucketed,
            level,
        })
    }

    /// Count of entries per provenance.
    pub fn provenance_counts(&self) -> BTreeMap<Provenance, usize> {
        let mut counts = BTreeMap::new();
        for e in self.entries.values() {
            *counts.entry(e.provenance).or_insert(0) += 1;
        }
        counts
    }

    fn to_document(&self) -> Value {
        let entries: serde_json::Map<String, Value> = self
            .entries
            .iter()
            .map(|(k, e)| {
                let mut v = json!({
                    "energy_j": e.energy_j,
                    "provenance": e.provenance,
                });
                if let Some(l) = e.memory_level {
                    v["memory_level"] = json!(l);
                }
                (k.clone(), v)
            })
            .collect();
        let scaling: serde_json::Map<String, Value> = self
            .scaling_factors
            .iter()
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect();
        let mut doc = json!({
            "schema_version": SCHEMA_VERSION,
            "architecture_label": self.architecture_label,
            "p_const_w": self.p_const_w,
            "p_static_w": self.p_static_w,
            "entries": entries,
            "bucket_averages": self.bucket_averages,
            "scaling_factors": scaling,
            "bucket_taxonomy": self.taxonomy.buckets(),
        });
        if let Some(fp) = &self.grouping_fingerprint {
            doc["grouping_fingerprint"] = json!(fp);
        }
        doc
    }

    fn from_document(doc: Value) -> Result<Self> {
        let version = doc
            .get("schema_version")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format("energy table missing `schema_version`".into()))?;
        let major: u64 = version
            .split('.')
            .next()
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad schema_version `{version}`")))?;
        if major != SCHEMA_MAJOR {
            return Err(Error::Format(format!(
                "energy table schema version {version} unsupported (expected {SCHEMA_MAJOR}.x)"
            )));
        }

        #[derive(Deserialize)]
        struct EntryDoc {
            energy_j: f64,
            provenance: Provenance,
            #[serde(default)]
            memory_level: Option<MemoryLevel>,
        }
        #[derive(Deserialize)]
        struct TableDoc {
            architecture_label: String,
            p_const_w: f64,
            p_static_w: f64,
            entries: BTreeMap<String, EntryDoc>,
            #[serde(default)]
            bucket_averages: BTreeMap<String, f64>,
            #[serde(default)]
            scaling_factors: BTreeMap<String, f64>,
            #[serde(default)]
            bucket_taxonomy: Vec<Bucket>,
            #[serde(default)]
            grouping_fingerprint: Option<String>,
        }
        let d: TableDoc = serde_json::from_value(doc)?;
        let mut table = EnergyTable::new(d.architecture_label, d.p_const_w, d.p_static_w);
        table.grouping_fingerprint = d.grouping_fingerprint;
        for (key, e) in d.entries {
            let (group, key_level) = split_key(&key)?;
            if key_level != e.memory_level {
                return Err(Error::Format(format!(
                    "entry {key}: memory_level does not match key"
                )));
            }
            let mut entry = EnergyEntry::new(group, e.energy_j, e.provenance);
            entry.memory_level = e.memory_level;
            table.insert(entry)?;
        }
        for (key, factor) in d.scaling_factors {
            if !(factor > 0.0) {
                return Err(Error::Format(format!(
                    "scaling factor {key} must be positive, got {factor}"
                )));
            }
            table.scaling_factors.insert(key.parse()?, factor);
        }
        table.bucket_averages = d.bucket_averages;
        table.taxonomy = BucketTaxonomy::new(d.bucket_taxonomy)?;
        Ok(table)
    }

    /// Canonical JSON: sorted keys at every level, shortest round-trip floats.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_document()).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

pub fn save_table<W: Write>(table: &EnergyTable, mut writer: W) -> Result<()> {
    writer
        .write_all(table.to_json().as_bytes())
        .map_err(|e| Error::io("<table writer>", e))
}

pub fn load_table<R: Read>(mut reader: R) -> Result<EnergyTable> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<table reader>", e))?;
    EnergyTable::from_json(&text)
}

pub fn load_table_file(path: &Path) -> Result<EnergyTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EnergyTable::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NJ: f64 = 1e-9;

    fn int_alu_table() -> EnergyTable {
        let mut t = EnergyTable::new("test", 40.0, 40.0);
        t.insert(EnergyEntry::new("MOV", 2.0 * NJ, Provenance::Solved)).unwrap();
        t.insert(EnergyEntry::new("LOP3.LUT", 4.0 * NJ, Provenance::Direct)).unwrap();
        t.insert(EnergyEntry::new("IADD3", 2.0 * NJ, Provenance::Solved)).unwrap();
        t
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-30)
    }

    #[test]
    fn bucket_average_is_mean_of_known_members() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        t.insert(EnergyEntry::new("MOV", 2.0 * NJ, Provenance::Solved)).unwrap();
        t.insert(EnergyEntry::new("LOP3.LUT", 4.0 * NJ, Provenance::Direct)).unwrap();
        t.assign_buckets(&BucketTaxonomy::default());
        assert!(close(t.bucket_averages()["integer-ALU"], 3.0 * NJ));
    }

    #[test]
    fn empty_taxonomy_gives_no_averages() {
        let mut t = int_alu_table();
        let before = t.entries().clone();
        let warnings = t.assign_buckets(&BucketTaxonomy::empty());
        assert!(t.bucket_averages().is_empty());
        assert!(warnings.is_empty());
        assert_eq!(t.entries(), &before);
    }

    #[test]
    fn approximated_members_do_not_count() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        t.insert(EnergyEntry::new("DADD", 9.0 * NJ, Provenance::Bucketed)).unwrap();
        let tax = BucketTaxonomy::new(vec![Bucket {
            bucket: "double-ALU".into(),
            patterns: vec!["D*".into()],
        }])
        .unwrap();
        let warnings = t.assign_buckets(&tax);
        assert!(t.bucket_averages().get("double-ALU").is_none());
        assert_eq!(warnings.len(), 1);
        assert!(t.lookup_energy("DMUL", None, LookupMode::Pred).is_none());
    }

    #[test]
    fn lookup_exact_hit() {
        let t = int_alu_table();
        let r = t.lookup_energy("IADD3", None, LookupMode::Pred).unwrap();
        assert_eq!((r.energy_j, r.provenance), (2.0 * NJ, Provenance::Solved));
    }

    #[test]
    fn lookup_falls_back_to_bucket() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        t.insert(EnergyEntry::new("MOV", 2.0 * NJ, Provenance::Solved)).unwrap();
        t.insert(EnergyEntry::new("LOP3.LUT", 4.0 * NJ, Provenance::Direct)).unwrap();
        t.assign_buckets(&BucketTaxonomy::default());
        let r = t.lookup_energy("R2UR", None, LookupMode::Pred).unwrap();
        assert!(close(r.energy_j, 3.0 * NJ));
        assert_eq!(r.provenance, Provenance::Bucketed);
        assert!(t.lookup_energy("R2UR", None, LookupMode::Direct).is_none());
    }

    #[test]
    fn lookup_scales_across_levels() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        t.insert(EnergyEntry::new("LDG.E", 4.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L1))
            .unwrap();
        t.insert(EnergyEntry::new("LDG.E", 10.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L2))
            .unwrap();
        t.insert(
            EnergyEntry::new("LDG.E.128", 6.0 * NJ, Provenance::Solved).at_level(MemoryLevel::L1),
        )
        .unwrap();
        let f = t.derive_scaling("LDG.E", MemoryLevel::L1, MemoryLevel::L2).unwrap();
        assert!(close(f, 2.5));
        let r = t
            .lookup_energy("LDG.E.128", Some(MemoryLevel::L2), LookupMode::Pred)
            .unwrap();
        assert!(close(r.energy_j, 15.0 * NJ));
        assert_eq!(r.provenance, Provenance::Scaled);
        assert!(t
            .lookup_energy("LDG.E.128", Some(MemoryLevel::L2), LookupMode::Direct)
            .is_none());
    }

    #[test]
    fn level_less_lookup_uses_measured_level() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        t.insert(EnergyEntry::new("LDG.E", 4.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L2))
            .unwrap();
        let r = t.lookup_energy("LDG.E", None, LookupMode::Direct).unwrap();
        assert_eq!(r.level, Some(MemoryLevel::L2));
        assert_eq!(r.energy_j, 4.0 * NJ);
    }

    #[test]
    fn scaling_round_trip_is_reciprocal() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        t.insert(EnergyEntry::new("LDG.E", 3.7 * NJ, Provenance::Direct).at_level(MemoryLevel::L1))
            .unwrap();
        t.insert(EnergyEntry::new("LDG.E", 11.3 * NJ, Provenance::Solved).at_level(MemoryLevel::L2))
            .unwrap();
        t.derive_scaling("LDG.E", MemoryLevel::L1, MemoryLevel::L2).unwrap();
        let fam = MemoryFamily::GlobalLoad;
        let up = t
            .scaling_factor(&ScalingKey { family: fam, from: MemoryLevel::L1, to: MemoryLevel::L2 })
            .unwrap();
        let down = t
            .scaling_factor(&ScalingKey { family: fam, from: MemoryLevel::L2, to: MemoryLevel::L1 })
            .unwrap();
        assert!((up * down - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn scaling_needs_both_levels_and_nonzero_anchor() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        t.insert(EnergyEntry::new("LDG.E", 0.0, Provenance::Direct).at_level(MemoryLevel::L1))
            .unwrap();
        assert!(matches!(
            t.derive_scaling("LDG.E", MemoryLevel::L1, MemoryLevel::L2),
            Err(Error::Derivation(m)) if m.contains("L2")
        ));
        t.insert(EnergyEntry::new("LDG.E", 5.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L2))
            .unwrap();
        assert!(matches!(
            t.derive_scaling("LDG.E", MemoryLevel::L1, MemoryLevel::L2),
            Err(Error::Derivation(_))
        ));
        assert!(t.scaling_factors().is_empty());
    }

    #[test]
    fn known_entries_are_not_overwritten_by_approximations() {
        let mut t = int_alu_table();
        let stored = t
            .insert(EnergyEntry::new("MOV", 99.0 * NJ, Provenance::Bucketed))
            .unwrap();
        assert!(!stored);
        assert_eq!(t.entry("MOV").unwrap().energy_j, 2.0 * NJ);
        assert!(t.insert(EnergyEntry::new("MOV", 3.0 * NJ, Provenance::Direct)).unwrap());
    }

    #[test]
    fn negative_energy_rejected() {
        let mut t = EnergyTable::new("test", 0.0, 0.0);
        assert!(t.insert(EnergyEntry::new("X", -1.0, Provenance::Direct)).is_err());
    }

    #[test]
    fn save_load_round_trip_is_canonical() {
        let mut t = int_alu_table();
        t.insert(EnergyEntry::new("LDG.E", 4.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L1))
            .unwrap();
        t.insert(EnergyEntry::new("LDG.E", 10.0 * NJ, Provenance::Direct).at_level(MemoryLevel::L2))
            .unwrap();
        t.derive_all_scaling();
        t.assign_buckets(&BucketTaxonomy::default());
        t.grouping_fingerprint = Some("abc".into());
        let mut buf = Vec::new();
        save_table(&t, &mut buf).unwrap();
        let back = load_table(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        save_table(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        let mut twice = Vec::new();
        save_table(&t, &mut twice).unwrap();
        assert_eq!(buf, twice);
    }

    #[test]
    fn newer_major_schema_rejected() {
        let text = int_alu_table().to_json().replace("\"1.0\"", "\"2.0\"");
        assert!(matches!(EnergyTable::from_json(&text), Err(Error::Format(m)) if m.contains("2.0")));
    }

    #[test]
    fn memory_family_classification() {
        assert_eq!(MemoryFamily::of("LDG.E.64"), Some(MemoryFamily::GlobalLoad));
        assert_eq!(MemoryFamily::of("STG.E.128"), Some(MemoryFamily::GlobalStore));
        assert_eq!(MemoryFamily::of("LDL.64"), Some(MemoryFamily::Local));
        assert_eq!(MemoryFamily::of("TEX.SCR"), Some(MemoryFamily::Texture));
        assert_eq!(MemoryFamily::of("LDS.U.128"), None);
        assert_eq!(MemoryFamily::of("IADD3"), None);
    }

    #[test]
    fn scaling_key_round_trips_through_text() {
        let k = ScalingKey {
            family: MemoryFamily::GlobalStore,
            from: MemoryLevel::L2,
            to: MemoryLevel::Dram,
        };
        assert_eq!(k.to_string(), "global_store:L2->DRAM");
        assert_eq!(k.to_string().parse::<ScalingKey>().unwrap(), k);
    }

    #[test]
    fn qualified_keys_split() {
        assert_eq!(split_key("LDG.E@L2").unwrap(), ("LDG.E", Some(MemoryLevel::L2)));
        assert_eq!(split_key("IADD3").unwrap(), ("IADD3", None));
        assert!(split_key("LDG.E@L9").is_err());
    }
}
