//! Linking raw instrument answers to ICF qualifiers.
//!
//! A [`LinkageRule`] maps one instrument item (`odi.lifting`, `pain.back`,
//! `machine.f110`, ...) onto one or more ICF codes, translating the raw answer
//! onto the 0–4 qualifier scale and stamping the rule's reliability `r`.
//! Rules are loaded from JSON; [`RuleSet::bundled`] carries the linkages for
//! ODI, EQ-5D-5L, pain VAS and the spine rehabilitation machines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::IcfCode;

/// Bundled rule file for the four built-in instruments.
pub const BUNDLED_RULES_JSON: &str = include_str!("../data/default_rules.json");

/// Item id of the EQ-VAS self-assessment, which is kept for validation and
/// never linked.
pub const EQ_VAS_ITEM: &str = "eq5d.vas";

/// Item ids of the four pain VAS answers.
pub const PAIN_ITEMS: [&str; 4] = ["pain.back", "pain.hip_leg", "pain.neck", "pain.shoulder_arm"];

#[derive(Debug, Error)]
pub enum LinkageError {
    #[error("no linkage rule for source item(s): {}", .0.join(", "))]
    UnknownSource(Vec<String>),
    #[error("cannot translate {value} for {source_item}: {reason}")]
    Translation {
        source_item: String,
        value: f64,
        reason: String,
    },
    #[error("invalid rule {source_item}: {reason}")]
    InvalidRule { source_item: String, reason: String },
    #[error("cannot read rule file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed rule file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One row of a discrete lookup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEntry {
    pub input: i64,
    pub qualifier: f64,
}

/// One interval `(low, high]`; the first interval of a table is closed `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEntry {
    pub low: f64,
    pub high: f64,
    pub qualifier: f64,
}

/// How a raw answer becomes a qualifier value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueTranslation {
    /// Exact lookup of an integer answer.
    DiscreteMap { entries: Vec<DiscreteEntry> },
    /// Contiguous intervals covering `[first.low, last.high]`.
    IntervalMap {
        entries: Vec<IntervalEntry>,
        /// Inputs below the domain clamp to its lower bound instead of
        /// failing (machine readings better than the reference population).
        #[serde(default)]
        clamp_below: bool,
    },
    /// `scale·x + offset` on `domain`.
    Affine {
        scale: f64,
        offset: f64,
        domain: [f64; 2],
        /// Reject non-integer inputs.
        #[serde(default)]
        integral: bool,
    },
}

fn qualifier_in_range(q: f64) -> bool {
    (0.0..=4.0).contains(&q)
}

impl ValueTranslation {
    /// ODI answers 0–5; answers 3 and 4 share qualifier 3.
    pub fn odi() -> Self {
        Self::discrete(&[(0, 0.0), (1, 1.0), (2, 2.0), (3, 3.0), (4, 3.0), (5, 4.0)])
    }

    /// EQ-5D-5L levels 1–5 shift down by one.
    pub fn eq5d() -> Self {
        ValueTranslation::Affine {
            scale: 1.0,
            offset: -1.0,
            domain: [1.0, 5.0],
            integral: true,
        }
    }

    /// Pain VAS 0–10.
    pub fn pain_vas() -> Self {
        Self::discrete(&[
            (0, 0.0),
            (1, 0.0),
            (2, 1.0),
            (3, 1.0),
            (4, 2.0),
            (5, 2.0),
            (6, 2.0),
            (7, 3.0),
            (8, 3.0),
            (9, 4.0),
            (10, 4.0),
        ])
    }

    /// Relative strength/mobility deficit in percent against the reference
    /// population.
    pub fn machine() -> Self {
        let bounds = [(0.0, 4.0), (4.0, 24.0), (24.0, 49.0), (49.0, 95.0), (95.0, 100.0)];
        ValueTranslation::IntervalMap {
            entries: bounds
                .iter()
                .enumerate()
                .map(|(q, &(low, high))| IntervalEntry {
                    low,
                    high,
                    qualifier: q as f64,
                })
                .collect(),
            clamp_below: true,
        }
    }

    fn discrete(pairs: &[(i64, f64)]) -> Self {
        ValueTranslation::DiscreteMap {
            entries: pairs
                .iter()
                .map(|&(input, qualifier)| DiscreteEntry { input, qualifier })
                .collect(),
        }
    }

    /// Checks the table invariants: outputs on the qualifier scale, discrete
    /// inputs unique, intervals contiguous and non-empty.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ValueTranslation::DiscreteMap { entries } => {
                if entries.is_empty() {
                    return Err("discrete map has no entries".into());
                }
                let mut seen = BTreeSet::new();
                for e in entries {
                    if !seen.insert(e.input) {
                        return Err(format!("input {} listed twice", e.input));
                    }
                    if !qualifier_in_range(e.qualifier) {
                        return Err(format!("qualifier {} outside [0, 4]", e.qualifier));
                    }
                }
            }
            ValueTranslation::IntervalMap { entries, .. } => {
                if entries.is_empty() {
                    return Err("interval map has no entries".into());
                }
                for (i, e) in entries.iter().enumerate() {
                    if !(e.low < e.high) {
                        return Err(format!("empty interval ({}, {}]", e.low, e.high));
                    }
                    if !qualifier_in_range(e.qualifier) {
                        return Err(format!("qualifier {} outside [0, 4]", e.qualifier));
                    }
                    if i > 0 && entries[i - 1].high != e.low {
                        return Err(format!(
                            "intervals must be contiguous: {} then {}",
                            entries[i - 1].high,
                            e.low
                        ));
                    }
                }
            }
            ValueTranslation::Affine {
                scale,
                offset,
                domain,
                ..
            } => {
                if !(domain[0] <= domain[1]) {
                    return Err(format!("empty domain [{}, {}]", domain[0], domain[1]));
                }
                let ends = [scale * domain[0] + offset, scale * domain[1] + offset];
                if !ends.iter().all(|&q| qualifier_in_range(q)) {
                    return Err(format!(
                        "affine image [{}, {}] leaves [0, 4]",
                        ends[0].min(ends[1]),
                        ends[0].max(ends[1])
                    ));
                }
            }
        }
        Ok(())
    }

    /// Translates one raw answer.
    pub fn translate(&self, value: f64) -> Result<f64, String> {
        if !value.is_finite() {
            return Err("answer is not a finite number".into());
        }
        match self {
            ValueTranslation::DiscreteMap { entries } => {
                if value.fract() != 0.0 {
                    return Err("answer must be an integer".into());
                }
                entries
                    .iter()
                    .find(|e| e.input as f64 == value)
                    .map(|e| e.qualifier)
                    .ok_or_else(|| "answer not in the translation table".into())
            }
            ValueTranslation::IntervalMap {
                entries,
                clamp_below,
            } => {
                let (first, last) = (&entries[0], &entries[entries.len() - 1]);
                let value = if *clamp_below && value < first.low {
                    first.low
                } else {
                    value
                };
                if value < first.low || value > last.high {
                    return Err(format!("answer outside [{}, {}]", first.low, last.high));
                }
                if value <= first.high {
                    return Ok(first.qualifier);
                }
                entries[1..]
                    .iter()
                    .find(|e| value > e.low && value <= e.high)
                    .map(|e| e.qualifier)
                    .ok_or_else(|| "answer not covered by any interval".into())
            }
            ValueTranslation::Affine {
                scale,
                offset,
                domain,
                integral,
            } => {
                if value < domain[0] || value > domain[1] {
                    return Err(format!("answer outside [{}, {}]", domain[0], domain[1]));
                }
                if *integral && value.fract() != 0.0 {
                    return Err("answer must be an integer".into());
                }
                Ok((scale * value + offset).clamp(0.0, 4.0))
            }
        }
    }
}

fn translate_with(translation: &ValueTranslation, item: &str, value: f64) -> Result<u8, LinkageError> {
    translation
        .translate(value)
        .map(|q| q as u8)
        .map_err(|reason| LinkageError::Translation {
            source_item: item.to_string(),
            value,
            reason,
        })
}

/// ODI answer (0–5) to qualifier.
pub fn translate_odi(answer: i64) -> Result<u8, LinkageError> {
    translate_with(&ValueTranslation::odi(), "odi", answer as f64)
}

/// EQ-5D-5L level (1–5) to qualifier.
pub fn translate_eq5d(answer: i64) -> Result<u8, LinkageError> {
    translate_with(&ValueTranslation::eq5d(), "eq5d", answer as f64)
}

/// Pain VAS (0–10) to qualifier.
pub fn translate_pain_vas(answer: i64) -> Result<u8, LinkageError> {
    translate_with(&ValueTranslation::pain_vas(), "pain", answer as f64)
}

/// Machine relative deficit (0–100 %) to qualifier. Readings better than the
/// reference must already be clamped to 0 %.
pub fn translate_machine(relative_change_pct: f64) -> Result<u8, LinkageError> {
    if relative_change_pct < 0.0 {
        return Err(LinkageError::Translation {
            source_item: "machine".into(),
            value: relative_change_pct,
            reason: "answer outside [0, 100]".into(),
        });
    }
    translate_with(&ValueTranslation::machine(), "machine", relative_change_pct)
}

/// An expert-defined linkage of one instrument item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageRule {
    /// `instrument.item`, e.g. `odi.lifting`.
    pub source_item_id: String,
    pub targets: Vec<IcfCode>,
    pub translation: ValueTranslation,
    pub reliability: f64,
}

impl LinkageRule {
    pub fn validate(&self) -> Result<(), LinkageError> {
        let invalid = |reason: String| LinkageError::InvalidRule {
            source_item: self.source_item_id.clone(),
            reason,
        };
        if self.targets.is_empty() {
            return Err(invalid("rule has no target codes".into()));
        }
        if !(0.0..=1.0).contains(&self.reliability) {
            return Err(invalid(format!("reliability {} outside [0, 1]", self.reliability)));
        }
        self.translation.validate().map_err(invalid)
    }
}

/// A validated collection of rules keyed by source item.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    rules: BTreeMap<String, LinkageRule>,
    validation_only: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct RuleFile {
    #[serde(default)]
    validation_only: Vec<String>,
    rules: Vec<LinkageRule>,
}

impl RuleSet {
    pub fn new(
        rules: impl IntoIterator<Item = LinkageRule>,
        validation_only: impl IntoIterator<Item = String>,
    ) -> Result<Self, LinkageError> {
        let mut map = BTreeMap::new();
        for rule in rules {
            rule.validate()?;
            let id = rule.source_item_id.clone();
            if map.insert(id.clone(), rule).is_some() {
                return Err(LinkageError::InvalidRule {
                    source_item: id,
                    reason: "defined twice".into(),
                });
            }
        }
        let validation_only: BTreeSet<String> = validation_only.into_iter().collect();
        if let Some(id) = validation_only.iter().find(|id| map.contains_key(*id)) {
            return Err(LinkageError::InvalidRule {
                source_item: id.clone(),
                reason: "both linked and validation-only".into(),
            });
        }
        Ok(Self {
            rules: map,
            validation_only,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, LinkageError> {
        let file: RuleFile = serde_json::from_str(text)?;
        Self::new(file.rules, file.validation_only)
    }

    pub fn load(path: &Path) -> Result<Self, LinkageError> {
        let text = std::fs::read_to_string(path).map_err(|source| LinkageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = RuleFile {
            validation_only: self.validation_only.iter().cloned().collect(),
            rules: self.rules.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("rule set serializes")
    }

    /// ODI, EQ-5D-5L, pain VAS and machine linkages with reliability 1.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_RULES_JSON).expect("bundled rules are valid")
    }

    pub fn get(&self, source_item_id: &str) -> Option<&LinkageRule> {
        self.rules.get(source_item_id)
    }

    pub fn rules(&self) -> impl Iterator<Item = &LinkageRule> {
        self.rules.values()
    }

    pub fn is_validation_only(&self, source_item_id: &str) -> bool {
        self.validation_only.contains(source_item_id)
    }

    /// Reliability per source item, for run reports.
    pub fn reliabilities(&self) -> BTreeMap<&str, f64> {
        self.rules
            .iter()
            .map(|(id, rule)| (id.as_str(), rule.reliability))
            .collect()
    }
}

/// One raw answer as ingested: a person's value for an instrument item on a
/// day offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub person_id: String,
    pub day: u32,
    pub instrument: String,
    pub item: String,
    pub value: f64,
}

impl RawAnswer {
    pub fn source_item_id(&self) -> String {
        format!("{}.{}", self.instrument, self.item)
    }

    /// Identity of this particular answer; every record linked from it shares
    /// this id.
    pub fn source_id(&self) -> SourceId {
        SourceId(format!("{}.{}@{}", self.instrument, self.item, self.day))
    }
}

/// Identifies the measurement a qualifier came from. Records sharing a source
/// id are copies of one answer linked to several codes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceId(pub String);

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SourceId {
    fn from(s: &str) -> Self {
        SourceId(s.to_string())
    }
}

/// A single linked qualifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualifierRecord {
    pub person_id: String,
    pub day: u32,
    pub source_id: SourceId,
    pub code: IcfCode,
    pub value: f64,
    pub reliability: f64,
}

/// Links every answer through its rule. Validation-only items are skipped.
pub fn apply_rules(answers: &[RawAnswer], rules: &RuleSet) -> Result<Vec<QualifierRecord>, LinkageError> {
    let unknown: BTreeSet<String> = answers
        .iter()
        .map(RawAnswer::source_item_id)
        .filter(|id| rules.get(id).is_none() && !rules.is_validation_only(id))
        .collect();
    if !unknown.is_empty() {
        return Err(LinkageError::UnknownSource(unknown.into_iter().collect()));
    }

    let mut records = Vec::new();
    for answer in answers {
        let id = answer.source_item_id();
        let Some(rule) = rules.get(&id) else {
            continue;
        };
        let value = rule
            .translation
            .translate(answer.value)
            .map_err(|reason| LinkageError::Translation {
                source_item: id.clone(),
                value: answer.value,
                reason,
            })?;
        let source_id = answer.source_id();
        records.extend(rule.targets.iter().map(|code| QualifierRecord {
            person_id: answer.person_id.clone(),
            day: answer.day,
            source_id: source_id.clone(),
            code: code.clone(),
            value,
            reliability: rule.reliability,
        }));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(instrument: &str, item: &str, day: u32, value: f64) -> RawAnswer {
        RawAnswer {
            person_id: "p1".into(),
            day,
            instrument: instrument.into(),
            item: item.into(),
            value,
        }
    }

    fn codes(records: &[QualifierRecord]) -> Vec<&str> {
        records.iter().map(|r| r.code.as_str()).collect()
    }

    #[test]
    fn odi_table() {
        let expected = [0, 1, 2, 3, 3, 4];
        for (answer, q) in expected.iter().enumerate() {
            assert_eq!(translate_odi(answer as i64).unwrap(), *q);
        }
        assert!(translate_odi(6).is_err());
        assert!(translate_odi(-1).is_err());
    }

    #[test]
    fn eq5d_shift() {
        for answer in 1..=5 {
            assert_eq!(translate_eq5d(answer).unwrap(), (answer - 1) as u8);
        }
        assert!(translate_eq5d(0).is_err());
        assert!(translate_eq5d(6).is_err());
        assert!(ValueTranslation::eq5d().translate(2.5).is_err());
    }

    #[test]
    fn pain_table() {
        let expected = [0, 0, 1, 1, 2, 2, 2, 3, 3, 4, 4];
        for (answer, q) in expected.iter().enumerate() {
            assert_eq!(translate_pain_vas(answer as i64).unwrap(), *q, "answer {answer}");
        }
        assert!(translate_pain_vas(11).is_err());
    }

    #[test]
    fn machine_intervals() {
        let cases = [
            (0.0, 0),
            (4.0, 0),
            (4.000_001, 1),
            (20.0, 1),
            (24.0, 1),
            (24.5, 2),
            (49.0, 2),
            (49.5, 3),
            (95.0, 3),
            (95.5, 4),
            (100.0, 4),
        ];
        for (pct, q) in cases {
            assert_eq!(translate_machine(pct).unwrap(), q, "{pct}%");
        }
        assert!(translate_machine(100.5).is_err());
        assert!(translate_machine(-3.0).is_err());
        // the rule path clamps better-than-reference readings
        assert_eq!(ValueTranslation::machine().translate(-12.0).unwrap(), 0.0);
    }

    #[test]
    fn bundled_rules_use_reference_translations() {
        let rules = RuleSet::bundled();
        for rule in rules.rules() {
            let expected = match rule.source_item_id.split('.').next().unwrap() {
                "odi" => ValueTranslation::odi(),
                "eq5d" => ValueTranslation::eq5d(),
                "pain" => ValueTranslation::pain_vas(),
                "machine" => ValueTranslation::machine(),
                other => panic!("unexpected instrument {other}"),
            };
            assert_eq!(rule.translation, expected, "{}", rule.source_item_id);
            assert_eq!(rule.reliability, 1.0);
        }
        assert!(rules.is_validation_only(EQ_VAS_ITEM));
        assert_eq!(rules.rules().count(), 10 + 5 + 4 + 6);
        let reparsed = RuleSet::from_json(&rules.to_json()).unwrap();
        assert_eq!(reparsed, rules);
    }

    #[test]
    fn odi_lifting_links_two_codes() {
        let records = apply_rules(&[answer("odi", "lifting", 3, 2.0)], &RuleSet::bundled()).unwrap();
        assert_eq!(codes(&records), ["b280", "d430"]);
        assert!(records.iter().all(|r| r.value == 2.0 && r.day == 3));
        assert_eq!(records[0].source_id, records[1].source_id);
    }

    #[test]
    fn back_pain_links_b28013() {
        let records = apply_rules(&[answer("pain", "back", 0, 3.0)], &RuleSet::bundled()).unwrap();
        assert_eq!(codes(&records), ["b28013"]);
        assert_eq!(records[0].value, 1.0);
    }

    #[test]
    fn machine_fan_out() {
        let records = apply_rules(&[answer("machine", "f110", 7, 30.0)], &RuleSet::bundled()).unwrap();
        assert_eq!(codes(&records), ["b7305", "b7355", "b7401", "b780"]);
        assert!(records.iter().all(|r| r.value == 2.0));
        let records = apply_rules(&[answer("machine", "f140", 7, 30.0)], &RuleSet::bundled()).unwrap();
        assert_eq!(codes(&records), ["b7300", "b7302", "b7350", "b7400", "b780"]);
    }

    #[test]
    fn eq_vas_is_not_linked() {
        let answers = [answer("eq5d", "vas", 0, 70.0), answer("eq5d", "mobility", 0, 2.0)];
        let records = apply_rules(&answers, &RuleSet::bundled()).unwrap();
        assert_eq!(codes(&records), ["d450", "d455"]);
    }

    #[test]
    fn unknown_items_are_listed() {
        let answers = [answer("odi", "juggling", 0, 1.0), answer("xyz", "a", 0, 1.0)];
        let err = apply_rules(&answers, &RuleSet::bundled()).unwrap_err();
        assert_eq!(err.to_string(), "no linkage rule for source item(s): odi.juggling, xyz.a");
    }

    #[test]
    fn translation_errors_name_the_item() {
        let err = apply_rules(&[answer("odi", "walking", 0, 9.0)], &RuleSet::bundled()).unwrap_err();
        assert!(err.to_string().contains("odi.walking"), "{err}");
    }

    #[test]
    fn invalid_rules_rejected() {
        let rule = |translation, reliability, targets: Vec<IcfCode>| LinkageRule {
            source_item_id: "x.y".into(),
            targets,
            translation,
            reliability,
        };
        let b280 = vec!["b280".parse().unwrap()];
        assert!(rule(ValueTranslation::odi(), 1.5, b280.clone()).validate().is_err());
        assert!(rule(ValueTranslation::odi(), 1.0, vec![]).validate().is_err());
        let gap = ValueTranslation::IntervalMap {
            entries: vec![
                IntervalEntry { low: 0.0, high: 1.0, qualifier: 0.0 },
                IntervalEntry { low: 2.0, high: 3.0, qualifier: 1.0 },
            ],
            clamp_below: false,
        };
        assert!(rule(gap, 1.0, b280.clone()).validate().is_err());
        let steep = ValueTranslation::Affine {
            scale: 2.0,
            offset: 0.0,
            domain: [0.0, 4.0],
            integral: false,
        };
        assert!(rule(steep, 1.0, b280.clone()).validate().is_err());
        let dup = ValueTranslation::DiscreteMap {
            entries: vec![
                DiscreteEntry { input: 1, qualifier: 0.0 },
                DiscreteEntry { input: 1, qualifier: 1.0 },
            ],
        };
        assert!(rule(dup, 1.0, b280).validate().is_err());
        assert!(RuleSet::from_json(r#"{"rules": [{"source_item_id": "a.b", "targets": ["b28"], "translation": {"kind": "discrete_map", "entries": []}, "reliability": 1}]}"#).is_err());
    }
}
