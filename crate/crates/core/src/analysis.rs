//! Validation statistics: how well the index tracks self-reported health.
//!
//! Two checks run on groups of persons selected by treatment duration and
//! sequence length:
//!
//! * every EQ-VAS answer in a group is paired with the index evaluated on the
//!   same day, and one pooled Pearson correlation is computed;
//! * per person, the daily maximum pain trajectory is correlated with the
//!   index trajectory on the same days. Significance uses a Bonferroni
//!   corrected level `α/n`; persons whose trajectories are constant are
//!   omitted and counted.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::cohort::{CohortStore, Person};
use crate::engine::{attach, evaluate_trajectory, EngineError, Scaling};
use crate::linkage::{apply_rules, LinkageError, QualifierRecord, RuleSet};
use crate::taxonomy::{IcfTree, TaxonomyError};
use crate::weighting::{Gamma, WeightingError, WeightingSpec};

/// Family-wise significance level.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 paired observations, got {0}")]
    TooFewPairs(usize),
    #[error("correlation undefined: a series has zero variance")]
    ZeroVariance,
    #[error("no person in the group has at least 3 days of pain and index data")]
    NoEligiblePersons,
    #[error("cannot split {persons} persons into {bins} bins")]
    TooFewForBins { persons: usize, bins: usize },
    #[error("invalid group spec: {0}")]
    InvalidGroup(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Linkage(#[from] LinkageError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
}

/// Inclusion thresholds for a validation group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupSpec {
    pub min_duration: u32,
    pub min_sequence_length: u32,
}

impl GroupSpec {
    pub fn new(min_duration: u32, min_sequence_length: u32) -> Result<Self, AnalysisError> {
        if min_duration == 0 || min_sequence_length == 0 {
            return Err(AnalysisError::InvalidGroup(format!(
                "{min_duration}/{min_sequence_length}: both thresholds must be positive"
            )));
        }
        Ok(Self {
            min_duration,
            min_sequence_length,
        })
    }

    /// At least 90 days and 10 measurement days.
    pub const LONG: GroupSpec = GroupSpec {
        min_duration: 90,
        min_sequence_length: 10,
    };
    /// At least 30 days and 5 measurement days.
    pub const SHORT: GroupSpec = GroupSpec {
        min_duration: 30,
        min_sequence_length: 5,
    };

    pub fn contains(&self, person: &Person) -> bool {
        let stats = person.stats();
        stats.duration >= self.min_duration && stats.sequence_length >= self.min_sequence_length
    }

    /// `"90/10"`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.min_duration, self.min_sequence_length)
    }
}

impl std::str::FromStr for GroupSpec {
    type Err = AnalysisError;

    /// Parses `DURATION/SEQUENCE`, e.g. `90/10`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AnalysisError::InvalidGroup(format!("{s:?}: expected DURATION/SEQUENCE such as 90/10"));
        let (d, n) = s.split_once('/').ok_or_else(bad)?;
        Self::new(d.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?)
    }
}

/// Persons of `cohort` in each group; a person may be in several.
pub fn form_groups<'c>(cohort: &'c CohortStore, specs: &[GroupSpec]) -> Vec<Vec<&'c Person>> {
    specs
        .iter()
        .map(|spec| cohort.persons().iter().filter(|p| spec.contains(p)).collect())
        .collect()
}

/// Pearson coefficient with its two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub n: usize,
    pub coefficient: f64,
    pub p_value: f64,
}

/// Product-moment correlation; the p-value comes from the t distribution
/// with `n − 2` degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPairs(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation {
        n,
        coefficient: r,
        p_value,
    })
}

/// Linked records of a cohort together with the shared tree skeleton.
///
/// The skeleton holds every code linked anywhere in the cohort, so one
/// person's missing codes are empty nodes rather than absent ones.
#[derive(Debug, Clone)]
pub struct LinkedCohort<'c> {
    pub cohort: &'c CohortStore,
    pub tree: IcfTree,
    records: BTreeMap<&'c str, Vec<QualifierRecord>>,
}

impl<'c> LinkedCohort<'c> {
    pub fn new(cohort: &'c CohortStore, rules: &RuleSet) -> Result<Self, AnalysisError> {
        let linked: Vec<(&str, Vec<QualifierRecord>)> = cohort
            .persons()
            .par_iter()
            .map(|p| Ok((p.id.as_str(), apply_rules(&p.answers, rules)?)))
            .collect::<Result<_, LinkageError>>()?;
        let tree = IcfTree::build(linked.iter().flat_map(|(_, r)| r.iter().map(|q| &q.code)))?;
        Ok(Self {
            cohort,
            tree,
            records: linked.into_iter().collect(),
        })
    }

    pub fn records(&self, person_id: &str) -> &[QualifierRecord] {
        self.records.get(person_id).map_or(&[], Vec::as_slice)
    }
}

/// Pooled EQ-VAS correlation for one group and weighting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub persons: usize,
    pub coefficient: f64,
    pub p_value: f64,
    /// `p < α`; a single test needs no correction.
    pub significant: bool,
    /// EQ-VAS answers given before any linked data existed.
    pub skipped_answers: usize,
}

/// Pairs every EQ-VAS answer of the group with the index on that day.
pub fn eqvas_vs_hi(
    linked: &LinkedCohort<'_>,
    group: &[&Person],
    spec: &WeightingSpec,
    scaling: Scaling,
) -> Result<CorrelationReport, AnalysisError> {
    let per_person: Vec<(Vec<(f64, f64)>, usize)> = group
        .par_iter()
        .map(|person| {
            let records = linked.records(&person.id);
            let mut pairs = Vec::new();
            let mut skipped = 0;
            for (&day, &vas) in &person.eqvas {
                let visible: Vec<QualifierRecord> = records.iter().filter(|r| r.day <= day).cloned().collect();
                match attach(&linked.tree, &visible, day, spec)?.evaluate(spec, scaling) {
                    Ok(hi) => pairs.push((vas, f64::from(hi.value))),
                    Err(EngineError::NoQualifiers) => skipped += 1,
                    Err(e) => return Err(AnalysisError::from(e)),
                }
            }
            Ok((pairs, skipped))
        })
        .collect::<Result<_, AnalysisError>>()?;

    let persons = per_person.iter().filter(|(p, _)| !p.is_empty()).count();
    let skipped_answers = per_person.iter().map(|(_, s)| s).sum();
    let (vas, hi): (Vec<f64>, Vec<f64>) = per_person.into_iter().flat_map(|(p, _)| p).unzip();
    let corr = pearson(&vas, &hi)?;
    Ok(CorrelationReport {
        n: corr.n,
        persons,
        coefficient: corr.coefficient,
        p_value: corr.p_value,
        significant: corr.p_value < DEFAULT_ALPHA,
        skipped_answers,
    })
}

/// One person's max-pain vs index correlation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonCorrelation {
    pub person_id: String,
    pub sequence_length: u32,
    /// Days in the paired trajectories.
    pub points: usize,
    pub coefficient: f64,
    pub p_value: f64,
    /// Significant at the uncorrected level.
    pub significant_uncorrected: bool,
    /// Significant at the Bonferroni-corrected level.
    pub significant: bool,
}

/// Quartiles and Tukey whiskers (1.5 IQR) of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxplotStats {
    pub n: usize,
    pub min: f64,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(quantile_sorted(&sorted, 0.5))
}

impl BoxplotStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&sorted, 0.25);
        let q3 = quantile_sorted(&sorted, 0.75);
        let reach = 1.5 * (q3 - q1);
        let whisker_low = sorted.iter().copied().find(|&v| v >= q1 - reach).unwrap_or(q1);
        let whisker_high = sorted.iter().rev().copied().find(|&v| v <= q3 + reach).unwrap_or(q3);
        Some(Self {
            n: sorted.len(),
            min: sorted[0],
            whisker_low,
            q1,
            median: quantile_sorted(&sorted, 0.5),
            q3,
            whisker_high,
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Per-person correlations of one group with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxPainReport {
    pub persons: Vec<PersonCorrelation>,
    /// Eligible persons whose index or max-pain trajectory was constant.
    pub omitted_constant: Vec<String>,
    /// Group members with fewer than 3 days of pain data.
    pub ineligible: usize,
    /// Per-test significance threshold `α/n`.
    pub threshold: f64,
    pub median: f64,
    pub significant_portion: f64,
    pub boxplot: BoxplotStats,
}

impl MaxPainReport {
    pub fn n(&self) -> usize {
        self.persons.len()
    }
}

/// Correlates each person's max-pain trajectory with their index trajectory.
pub fn maxpain_vs_hi(
    linked: &LinkedCohort<'_>,
    group: &[&Person],
    spec: &WeightingSpec,
    scaling: Scaling,
    alpha: f64,
) -> Result<MaxPainReport, AnalysisError> {
    enum Outcome {
        Ineligible,
        Constant(String),
        Defined(String, u32, Correlation),
    }

    let outcomes: Vec<Outcome> = group
        .par_iter()
        .map(|person| {
            let pain = person.max_pain();
            if pain.len() < 3 {
                return Ok(Outcome::Ineligible);
            }
            let days: Vec<u32> = pain.keys().copied().collect();
            let points = evaluate_trajectory(&linked.tree, linked.records(&person.id), &days, spec)?;
            let hi: Vec<f64> = points
                .iter()
                .map(|p| f64::from(p.outcome.health_index(scaling).value))
                .collect();
            let pain: Vec<f64> = pain.into_values().collect();
            match pearson(&pain, &hi) {
                Ok(c) => Ok(Outcome::Defined(person.id.clone(), person.stats().sequence_length, c)),
                Err(AnalysisError::ZeroVariance) => Ok(Outcome::Constant(person.id.clone())),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, AnalysisError>>()?;

    let mut defined = Vec::new();
    let mut omitted_constant = Vec::new();
    let mut ineligible = 0;
    for outcome in outcomes {
        match outcome {
            Outcome::Ineligible => ineligible += 1,
            Outcome::Constant(id) => omitted_constant.push(id),
            Outcome::Defined(id, len, c) => defined.push((id, len, c)),
        }
    }
    if defined.is_empty() {
        return Err(AnalysisError::NoEligiblePersons);
    }
    let threshold = alpha / defined.len() as f64;
    let persons: Vec<PersonCorrelation> = defined
        .into_iter()
        .map(|(person_id, sequence_length, c)| PersonCorrelation {
            person_id,
            sequence_length,
            points: c.n,
            coefficient: c.coefficient,
            p_value: c.p_value,
            significant_uncorrected: c.p_value < alpha,
            significant: c.p_value < threshold,
        })
        .collect();
    let coefficients: Vec<f64> = persons.iter().map(|p| p.coefficient).collect();
    let boxplot = BoxplotStats::from_values(&coefficients).expect("nonempty");
    let significant = persons.iter().filter(|p| p.significant).count();
    Ok(MaxPainReport {
        significant_portion: significant as f64 / persons.len() as f64,
        median: boxplot.median,
        threshold,
        boxplot,
        omitted_constant,
        ineligible,
        persons,
    })
}

/// Summary of one sequence-length bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinSummary {
    pub bin: usize,
    pub min_sequence_length: u32,
    pub max_sequence_length: u32,
    pub size: usize,
    pub significant_portion: f64,
    pub median: f64,
}

/// Splits persons into `k` near-equal bins by sequence length (ties broken by
/// person id) and summarizes each bin.
pub fn bin_by_sequence_length(results: &[PersonCorrelation], k: usize) -> Result<Vec<BinSummary>, AnalysisError> {
    if k == 0 || results.len() < k {
        return Err(AnalysisError::TooFewForBins {
            persons: results.len(),
            bins: k,
        });
    }
    let mut ordered: Vec<&PersonCorrelation> = results.iter().collect();
    ordered.sort_by(|a, b| {
        a.sequence_length
            .cmp(&b.sequence_length)
            .then_with(|| a.person_id.cmp(&b.person_id))
    });
    let (base, extra) = (ordered.len() / k, ordered.len() % k);
    let mut bins = Vec::with_capacity(k);
    let mut start = 0;
    for bin in 0..k {
        let size = base + usize::from(bin < extra);
        let members = &ordered[start..start + size];
        start += size;
        let coefficients: Vec<f64> = members.iter().map(|p| p.coefficient).collect();
        bins.push(BinSummary {
            bin: bin + 1,
            min_sequence_length: members[0].sequence_length,
            max_sequence_length: members[size - 1].sequence_length,
            size,
            significant_portion: members.iter().filter(|p| p.significant).count() as f64 / size as f64,
            median: median(&coefficients).expect("nonempty bin"),
        });
    }
    Ok(bins)
}

/// One cell of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub group: String,
    pub gamma: f64,
    pub y: f64,
    pub eqvas_coefficient: Option<f64>,
    pub eqvas_n: usize,
    pub maxpain_median: Option<f64>,
    pub maxpain_n: usize,
}

/// Evaluates both correlations for every `(γ, y)` pair of the grid on one group.
/// Cells where a correlation cannot be formed carry `None`.
pub fn sweep(
    linked: &LinkedCohort<'_>,
    group_spec: GroupSpec,
    group: &[&Person],
    gammas: &[Gamma],
    ys: &[f64],
    scaling: Scaling,
) -> Result<Vec<SweepRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(gammas.len() * ys.len());
    for &gamma in gammas {
        for &y in ys {
            let spec = WeightingSpec::new(y, gamma)?;
            let eqvas = match eqvas_vs_hi(linked, group, &spec, scaling) {
                Ok(r) => Some(r),
                Err(AnalysisError::TooFewPairs(_) | AnalysisError::ZeroVariance) => None,
                Err(e) => return Err(e),
            };
            let pain = match maxpain_vs_hi(linked, group, &spec, scaling, DEFAULT_ALPHA) {
                Ok(r) => Some(r),
                Err(AnalysisError::NoEligiblePersons) => None,
                Err(e) => return Err(e),
            };
            rows.push(SweepRow {
                group: group_spec.label(),
                gamma: gamma.value(),
                y,
                eqvas_coefficient: eqvas.as_ref().map(|r| r.coefficient),
                eqvas_n: eqvas.as_ref().map_or(0, |r| r.n),
                maxpain_median: pain.as_ref().map(|r| r.median),
                maxpain_n: pain.as_ref().map_or(0, MaxPainReport::n),
            });
        }
    }
    Ok(rows)
}

/// `y` values `start, start+step, …` up to `end` inclusive, rounded to 1e-9
/// so decimal steps land on clean values.
pub fn y_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || end < start {
        return Vec::new();
    }
    let count = ((end - start) / step + 1e-9).floor() as usize;
    (0..=count)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect()
}

/// The three decay constants compared in validation: heavy, moderate, none.
pub fn default_gammas() -> Vec<Gamma> {
    vec![Gamma::heavy(), Gamma::moderate(), Gamma::NONE]
}

/// 31 values `0.2, 0.32, …, 3.8`: 15 on each side of the linear case.
pub fn default_y_grid() -> Vec<f64> {
    y_grid(0.2, 3.8, 0.12)
}
