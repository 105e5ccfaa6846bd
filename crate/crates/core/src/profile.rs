//! Instruction profile ingestion.
//!
//! Profiler exports arrive as an `opcode,count` CSV (SASS mnemonics with their
//! full modifier chain) plus a JSON metadata document carrying execution time
//! and cache hit rates. Opcodes are folded into energy group keys by an ordered
//! list of glob rewrite rules; multi-step sequences such as `HMMA.*.STEP0..3`
//! collapse into one logical instruction.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::glob::OpcodeGlob;
use crate::model::MemoryFamily;

const DEFAULT_RULES: &str = include_str!("../config/grouping_rules.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOpcodeCount {
    pub opcode: String,
    pub count: f64,
}

/// L1 / L2 hit fractions for one memory-instruction family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HitRates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
}

impl HitRates {
    pub fn new(l1: f64, l2: f64) -> Self {
        Self {
            l1: Some(l1),
            l2: Some(l2),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.l1.is_none() && self.l2.is_none()
    }

    fn validate(&self, what: &str) -> Result<()> {
        for (level, v) in [("l1", self.l1), ("l2", self.l2)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Value(format!(
                        "{what} {level} hit rate {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Profile metadata document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetadata {
    pub kernel_label: String,
    pub t_exec_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_load_hit_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_hit_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hit_rates: BTreeMap<MemoryFamily, HitRates>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_scale_factor: Option<f64>,
}

impl ProfileMetadata {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_exec_s > 0.0) || !self.t_exec_s.is_finite() {
            return Err(Error::Value(format!(
                "kernel {}: t_exec_s must be positive, got {}",
                self.kernel_label, self.t_exec_s
            )));
        }
        HitRates {
            l1: self.l1_load_hit_rate,
            l2: self.l2_hit_rate,
        }
        .validate("global load")?;
        for (family, rates) in &self.hit_rates {
            rates.validate(family.as_str())?;
        }
        if let Some(f) = self.count_scale_factor {
            if !(f > 0.0) {
                return Err(Error::Value(format!(
                    "count_scale_factor must be positive, got {f}"
                )));
            }
        }
        Ok(())
    }

    /// Hit rates per family, with the top-level `l1_load_hit_rate` /
    /// `l2_hit_rate` filling in for global loads.
    pub fn family_hit_rates(&self) -> BTreeMap<MemoryFamily, HitRates> {
        let mut rates = self.hit_rates.clone();
        let top = HitRates {
            l1: self.l1_load_hit_rate,
            l2: self.l2_hit_rate,
        };
        if !top.is_empty() {
            let entry = rates.entry(MemoryFamily::GlobalLoad).or_default();
            entry.l1 = entry.l1.or(top.l1);
            entry.l2 = entry.l2.or(top.l2);
        }
        rates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedProfile {
    pub raw: Vec<RawOpcodeCount>,
    pub metadata: ProfileMetadata,
    pub warnings: Vec<String>,
}

/// Reads an opcode-count CSV and its metadata document. Duplicate opcode rows
/// are summed.
pub fn parse_instruction_profile<C: Read, M: Read>(counts: C, meta: M) -> Result<ParsedProfile> {
    let metadata: ProfileMetadata = serde_json::from_reader(meta)
        .map_err(|e| Error::Format(format!("profile metadata: {e}")))?;
    metadata.validate()?;

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(counts);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("opcode counts missing column `{name}`")))
    };
    let (op_col, count_col) = (col("opcode")?, col("count")?);

    let mut order: Vec<String> = Vec::new();
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = idx + 2;
        let opcode = record.get(op_col).unwrap_or("").to_string();
        if opcode.is_empty() {
            return Err(Error::Format(format!("row {row}: empty opcode")));
        }
        let count: f64 = record
            .get(count_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Format(format!("row {row}: unparsable count")))?;
        if !(count >= 0.0) || !count.is_finite() {
            return Err(Error::Value(format!(
                "row {row}: count {count} for {opcode} must be non-negative"
            )));
        }
        match totals.get_mut(&opcode) {
            Some(total) => {
                let msg = format!("duplicate opcode row {opcode} at row {row}; counts summed");
                warn!("{msg}");
                warnings.push(msg);
                *total += count;
            }
            None => {
                order.push(opcode.clone());
                totals.insert(opcode, count);
            }
        }
    }
    let raw = order
        .into_iter()
        .map(|opcode| {
            let count = totals[&opcode];
            RawOpcodeCount { opcode, count }
        })
        .collect();
    Ok(ParsedProfile {
        raw,
        metadata,
        warnings,
    })
}

/// Reads a profile from an opcode CSV path and a metadata path.
pub fn load_instruction_profile(counts: &Path, meta: &Path) -> Result<ParsedProfile> {
    let c = std::fs::File::open(counts).map_err(|e| Error::io(counts, e))?;
    let m = std::fs::File::open(meta).map_err(|e| Error::io(meta, e))?;
    parse_instruction_profile(c, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub rewrite: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_divisor: Option<u32>,
}

/// Ordered grouping rules. The first matching rule decides an opcode's fate;
/// opcodes no rule matches pass through as their own group.
#[derive(Debug, Clone)]
pub struct GroupingRules {
    rules: Vec<GroupingRule>,
    compiled: Vec<OpcodeGlob>,
}

impl GroupingRules {
    pub fn new(rules: Vec<GroupingRule>) -> Result<Self> {
        let compiled = rules
            .iter()
            .map(|r| OpcodeGlob::new(&r.pattern))
            .collect::<Result<Vec<_>>>()?;
        for r in &rules {
            if r.rewrite.is_empty() {
                return Err(Error::Format(format!(
                    "grouping rule `{}` has an empty rewrite",
                    r.pattern
                )));
            }
            if r.sequence_divisor == Some(0) {
                return Err(Error::Format(format!(
                    "grouping rule `{}` has a zero sequence_divisor",
                    r.pattern
                )));
            }
        }
        Ok(Self { rules, compiled })
    }

    /// Rules with only the pass-through fallback.
    pub fn empty() -> Self {
        Self {
            rules: Vec::new(),
            compiled: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rules: Vec<GroupingRule> =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("grouping rules: {e}")))?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn rules(&self) -> &[GroupingRule] {
        &self.rules
    }

    /// SHA-256 of the canonical rule list, used to detect tables and
    /// profiles grouped under different rules.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(&self.rules).expect("rules serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    fn first_match(&self, opcode: &str) -> Option<(usize, &GroupingRule)> {
        self.compiled
            .iter()
            .position(|g| g.is_match(opcode))
            .map(|i| (i, &self.rules[i]))
    }
}

impl Default for GroupingRules {
    /// Eviction-hint stripping on LDG/STG, ISETP comparison/logic-op
    /// canonicalization and HMMA step collapse.
    fn default() -> Self {
        Self::from_json(DEFAULT_RULES).expect("shipped grouping rules are valid")
    }
}

/// Rewrites each opcode to its group key and accumulates counts. Opcodes whose
/// first matching rule is a sequence rule are left for
/// [`collapse_sequences`].
pub fn apply_grouping<'a, I>(raw_counts: I, rules: &GroupingRules) -> BTreeMap<String, f64>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut grouped = BTreeMap::new();
    for (opcode, count) in raw_counts {
        let key = match rules.first_match(opcode) {
            Some((i, rule)) if rule.sequence_divisor.is_none() => rules.compiled[i]
                .rewrite(opcode, &rule.rewrite)
                .unwrap_or_else(|| opcode.to_string()),
            _ => opcode.to_string(),
        };
        *grouped.entry(key).or_insert(0.0) += count;
    }
    grouped
}

/// Folds step-modified instructions into their family key, dividing the
/// family total by the rule's divisor. Non-integral quotients of integral
/// totals are rounded to nearest with a warning.
pub fn collapse_sequences(
    grouped: &BTreeMap<String, f64>,
    rules: &GroupingRules,
) -> (BTreeMap<String, f64>, Vec<String>) {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    let mut families: BTreeMap<String, (f64, u32)> = BTreeMap::new();
    for (key, &count) in grouped {
        match rules.first_match(key) {
            Some((i, rule)) if rule.sequence_divisor.is_some() => {
                let family = rules.compiled[i]
                    .rewrite(key, &rule.rewrite)
                    .unwrap_or_else(|| key.clone());
                let entry = families
                    .entry(family)
                    .or_insert((0.0, rule.sequence_divisor.unwrap()));
                entry.0 += count;
            }
            _ => *out.entry(key.clone()).or_insert(0.0) += count,
        }
    }
    let mut warnings = Vec::new();
    for (family, (total, divisor)) in families {
        let quotient = total / divisor as f64;
        let integral_total = total.fract() == 0.0;
        let collapsed = if integral_total && quotient.fract() != 0.0 {
            let rounded = quotient.round();
            let msg = format!(
                "sequence {family}: step total {total} not divisible by {divisor}; rounded {quotient} to {rounded}"
            );
            warn!("{msg}");
            warnings.push(msg);
            rounded
        } else {
            quotient
        };
        *out.entry(family).or_insert(0.0) += collapsed;
    }
    (out, warnings)
}

/// A workload kernel's grouped instruction mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionProfile {
    pub kernel_label: String,
    pub grouped_counts: BTreeMap<String, f64>,
    pub t_exec_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hit_rates: BTreeMap<MemoryFamily, HitRates>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping_fingerprint: Option<String>,
}

impl InstructionProfile {
    pub fn total_instructions(&self) -> f64 {
        self.grouped_counts.values().sum()
    }

    /// Groups a parsed profile and applies its metadata count scale factor.
    pub fn from_parsed(parsed: &ParsedProfile, rules: &GroupingRules) -> Result<(Self, Vec<String>)> {
        let grouped = apply_grouping(
            parsed.raw.iter().map(|r| (r.opcode.as_str(), r.count)),
            rules,
        );
        let (grouped_counts, mut warnings) = collapse_sequences(&grouped, rules);
        warnings.extend(parsed.warnings.iter().cloned());
        let profile = Self {
            kernel_label: parsed.metadata.kernel_label.clone(),
            grouped_counts,
            t_exec_s: parsed.metadata.t_exec_s,
            hit_rates: parsed.metadata.family_hit_rates(),
            grouping_fingerprint: Some(rules.fingerprint()),
        };
        let profile = match parsed.metadata.count_scale_factor {
            Some(f) => scale_counts(&profile, f)?,
            None => profile,
        };
        Ok((profile, warnings))
    }
}

/// Multiplies every count by `factor`, leaving hit rates and time alone (short
/// profiling runs scaled up to the full iteration count).
pub fn scale_counts(profile: &InstructionProfile, factor: f64) -> Result<InstructionProfile> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Value(format!(
            "scale factor must be positive, got {factor}"
        )));
    }
    let mut scaled = profile.clone();
    for c in scaled.grouped_counts.values_mut() {
        *c *= factor;
    }
    Ok(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    fn group(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        apply_grouping(pairs.iter().copied(), &GroupingRules::default())
    }

    #[test]
    fn parses_counts_and_metadata() {
        let csv = "opcode,count\nLDG.E,100\nIADD3,400";
        let meta = r#"{"kernel_label":"k","t_exec_s":1.0,"l1_load_hit_rate":0.9,"l2_hit_rate":0.5}"#;
        let p = parse_instruction_profile(csv.as_bytes(), meta.as_bytes()).unwrap();
        assert_eq!(p.raw.len(), 2);
        assert_eq!(p.raw[0].opcode, "LDG.E");
        assert_eq!(p.metadata.l1_load_hit_rate, Some(0.9));
        assert!(p.warnings.is_empty());
        let rates = p.metadata.family_hit_rates();
        assert_eq!(rates[&MemoryFamily::GlobalLoad], HitRates::new(0.9, 0.5));
    }

    #[test]
    fn modifiers_are_preserved_verbatim() {
        let csv = "opcode,count\nSTG.E.EF.64,7\n";
        let meta = r#"{"kernel_label":"k","t_exec_s":1.0}"#;
        let p = parse_instruction_profile(csv.as_bytes(), meta.as_bytes()).unwrap();
        assert_eq!(p.raw[0].opcode, "STG.E.EF.64");
    }

    #[test]
    fn duplicate_rows_are_summed_with_warning() {
        let csv = "opcode,count\nMOV,10\nIADD3,1\nMOV,5";
        let meta = r#"{"kernel_label":"k","t_exec_s":1.0}"#;
        let p = parse_instruction_profile(csv.as_bytes(), meta.as_bytes()).unwrap();
        assert_eq!(p.raw.len(), 2);
        assert_eq!(p.raw[0], RawOpcodeCount { opcode: "MOV".into(), count: 15.0 });
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn out_of_range_hit_rate_rejected() {
        let meta = r#"{"kernel_label":"k","t_exec_s":1.0,"l1_load_hit_rate":1.2}"#;
        let r = parse_instruction_profile("opcode,count\n".as_bytes(), meta.as_bytes());
        assert!(matches!(r, Err(Error::Value(_))));
        let meta = r#"{"kernel_label":"k","t_exec_s":1.0,"hit_rates":{"texture":{"l2":-0.1}}}"#;
        let r = parse_instruction_profile("opcode,count\n".as_bytes(), meta.as_bytes());
        assert!(matches!(r, Err(Error::Value(_))));
    }

    #[test]
    fn missing_count_column_is_format_error() {
        let meta = r#"{"kernel_label":"k","t_exec_s":1.0}"#;
        let r = parse_instruction_profile("opcode,n\nMOV,1\n".as_bytes(), meta.as_bytes());
        assert!(matches!(r, Err(Error::Format(m)) if m.contains("count")));
    }

    #[test]
    fn eviction_hint_is_stripped() {
        assert_eq!(
            group(&[("STG.E.EF.64", 7.0), ("STG.E.64", 3.0)]),
            counts(&[("STG.E.64", 10.0)])
        );
    }

    #[test]
    fn isetp_variants_fold_to_ge_and() {
        assert_eq!(
            group(&[
                ("ISETP.GE.OR", 1.0),
                ("ISETP.LE.AND", 2.0),
                ("ISETP.LE.OR", 3.0),
                ("ISETP.GE.AND", 4.0)
            ]),
            counts(&[("ISETP.GE.AND", 10.0)])
        );
    }

    #[test]
    fn unknown_opcode_passes_through() {
        let out = apply_grouping([("FOO.BAR", 3.0)], &GroupingRules::empty());
        assert_eq!(out, counts(&[("FOO.BAR", 3.0)]));
        assert_eq!(group(&[("FOO.BAR", 3.0)]), counts(&[("FOO.BAR", 3.0)]));
    }

    #[test]
    fn hmma_steps_collapse() {
        let g = group(&[
            ("HMMA.884.F32.F32.STEP0", 100.0),
            ("HMMA.884.F32.F32.STEP1", 100.0),
            ("HMMA.884.F32.F32.STEP2", 100.0),
            ("HMMA.884.F32.F32.STEP3", 100.0),
        ]);
        assert_eq!(g.len(), 4, "grouping leaves step opcodes for collapse");
        let (c, warnings) = collapse_sequences(&g, &GroupingRules::default());
        assert_eq!(c, counts(&[("HMMA.884.F32.F32", 100.0)]));
        assert!(warnings.is_empty());
    }

    #[test]
    fn collapse_without_steps_is_identity() {
        let g = counts(&[("IADD3", 5.0), ("MOV", 2.0)]);
        let (c, w) = collapse_sequences(&g, &GroupingRules::default());
        assert_eq!(c, g);
        assert!(w.is_empty());
    }

    #[test]
    fn non_divisible_sequence_rounds_with_warning() {
        let g = counts(&[
            ("HMMA.884.F32.F32.STEP0", 100.0),
            ("HMMA.884.F32.F32.STEP1", 100.0),
            ("HMMA.884.F32.F32.STEP2", 100.0),
            ("HMMA.884.F32.F32.STEP3", 99.0),
        ]);
        let (c, w) = collapse_sequences(&g, &GroupingRules::default());
        // 399 / 4 = 99.75
        assert_eq!(c, counts(&[("HMMA.884.F32.F32", 100.0)]));
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn rule_order_decides() {
        let rules = GroupingRules::new(vec![
            GroupingRule { pattern: "IMAD.*".into(), rewrite: "IMAD.X".into(), sequence_divisor: None },
            GroupingRule { pattern: "IMAD.IADD".into(), rewrite: "NEVER".into(), sequence_divisor: None },
        ])
        .unwrap();
        assert_eq!(
            apply_grouping([("IMAD.IADD", 1.0)], &rules),
            counts(&[("IMAD.X", 1.0)])
        );
    }

    #[test]
    fn bad_rules_rejected() {
        assert!(GroupingRules::from_json(r#"[{"match":"A*","rewrite":""}]"#).is_err());
        assert!(GroupingRules::from_json(r#"[{"match":"A*","rewrite":"A","sequence_divisor":0}]"#).is_err());
        assert!(GroupingRules::from_json("{").is_err());
    }

    #[test]
    fn fingerprint_tracks_rule_content() {
        let a = GroupingRules::default();
        assert_eq!(a.fingerprint(), GroupingRules::default().fingerprint());
        assert_ne!(a.fingerprint(), GroupingRules::empty().fingerprint());
    }

    fn profile(pairs: &[(&str, f64)]) -> InstructionProfile {
        InstructionProfile {
            kernel_label: "k".into(),
            grouped_counts: counts(pairs),
            t_exec_s: 1.0,
            hit_rates: BTreeMap::new(),
            grouping_fingerprint: None,
        }
    }

    #[test]
    fn scale_counts_multiplies() {
        let p = profile(&[("X", 100.0)]);
        assert_eq!(scale_counts(&p, 10.0).unwrap().grouped_counts, counts(&[("X", 1000.0)]));
        assert_eq!(scale_counts(&p, 1.0).unwrap(), p);
        assert!(matches!(scale_counts(&p, 0.0), Err(Error::Value(_))));
        assert!(matches!(scale_counts(&p, -2.0), Err(Error::Value(_))));
    }

    #[test]
    fn from_parsed_applies_metadata_scale() {
        let csv = "opcode,count\nSTG.E.EF.64,7\nSTG.E.64,3\n";
        let meta = r#"{"kernel_label":"k","t_exec_s":2.0,"count_scale_factor":10}"#;
        let parsed = parse_instruction_profile(csv.as_bytes(), meta.as_bytes()).unwrap();
        let (p, _) = InstructionProfile::from_parsed(&parsed, &GroupingRules::default()).unwrap();
        assert_eq!(p.grouped_counts, counts(&[("STG.E.64", 100.0)]));
        assert_eq!(p.t_exec_s, 2.0);
        assert_eq!(p.grouping_fingerprint, Some(GroupingRules::default().fingerprint()));
    }
}
