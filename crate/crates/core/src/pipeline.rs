//! Batch commands over files: link, index, profile, validate, synth.
//!
//! Every command writes CSV into an output directory. Rows are ordered by
//! person and day whatever the worker count, and numbers are printed in
//! their shortest round-trip form, so reruns are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    bin_by_sequence_length, default_gammas, eqvas_vs_hi, form_groups, maxpain_vs_hi, sweep, y_grid, AnalysisError,
    GroupSpec, LinkedCohort, DEFAULT_ALPHA,
};
use crate::cohort::{ingest, synthesize, write_dir, CohortError, CohortStore, SynthConfig};
use crate::engine::{evaluate_trajectory, EngineError, Scaling};
use crate::linkage::{apply_rules, LinkageError, QualifierRecord, RuleSet};
use crate::taxonomy::{Component, IcfTree, TaxonomyError};
use crate::weighting::{fit_curve, CurveKind, Gamma, WeightingError, WeightingSpec};

pub const RECORDS_FILE: &str = "records.csv";
pub const CODE_COUNTS_FILE: &str = "code_counts.csv";
pub const INDEX_FILE: &str = "index.csv";
pub const PROFILE_FILE: &str = "profile.csv";
pub const TABLE1_FILE: &str = "table1.csv";
pub const PERSON_CORRELATIONS_FILE: &str = "maxpain_persons.csv";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const TABLE2_FILE: &str = "table2.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const RELIABILITIES_FILE: &str = "reliabilities.csv";

/// Which class of problem stopped a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config file, rule file or missing input path.
    Config,
    /// Input data that cannot be processed.
    Data,
    /// Writing output failed.
    Output,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Config(_) => ErrorKind::Config,
            PipelineError::Data(_) => ErrorKind::Data,
            PipelineError::Output { .. } => ErrorKind::Output,
        }
    }

    fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<LinkageError> for PipelineError {
    fn from(e: LinkageError) -> Self {
        match e {
            LinkageError::Io { .. } | LinkageError::Parse(_) | LinkageError::InvalidRule { .. } => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<CohortError> for PipelineError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Config(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<WeightingError> for PipelineError {
    fn from(e: WeightingError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<EngineError> for PipelineError {
    fn from(e: EngineError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<TaxonomyError> for PipelineError {
    fn from(e: TaxonomyError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<AnalysisError> for PipelineError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::InvalidGroup(_) | AnalysisError::Weighting(_) => PipelineError::Config(e.to_string()),
            AnalysisError::Linkage(e) => e.into(),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Raw bounds 0 and 4.
    #[default]
    Theoretical,
    /// Raw bounds observed over all evaluated person-days.
    Empirical,
}

impl std::str::FromStr for ScalingMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "theoretical" => Ok(ScalingMode::Theoretical),
            "empirical" => Ok(ScalingMode::Empirical),
            _ => Err(PipelineError::Config(format!(
                "unknown scaling mode {s:?}: expected theoretical or empirical"
            ))),
        }
    }
}

/// Everything a run needs, as read from a JSON config file. Command-line
/// flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Rule file; the bundled rules when absent.
    pub rules: Option<PathBuf>,
    /// Cohort directories, answer files or record files.
    pub data: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    /// Decay constant for index and profile, e.g. `1/3@30` or `0.964`.
    pub gamma: String,
    /// Decay constants compared in validation.
    pub gammas: Vec<String>,
    pub y: f64,
    /// `START:END:STEP` range of `y` for the validation sweep.
    pub grid: Option<String>,
    /// Validation groups as `DURATION/SEQUENCE`.
    pub groups: Vec<String>,
    pub scaling: ScalingMode,
    /// Overrides the synthesis seed.
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rules: None,
            data: Vec::new(),
            out: None,
            gamma: "1/3@30".into(),
            gammas: vec!["heavy".into(), "moderate".into(), "none".into()],
            y: 2.0,
            grid: None,
            groups: vec!["90/10".into(), "30/5".into()],
            scaling: ScalingMode::Theoretical,
            seed: None,
            workers: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("malformed config {}: {e}", path.display())))
    }

    /// Parses and checks every field.
    pub fn resolve(&self) -> Result<Settings, PipelineError> {
        let rules = match &self.rules {
            Some(path) => RuleSet::load(path)?,
            None => RuleSet::bundled(),
        };
        for path in &self.data {
            if !path.exists() {
                return Err(PipelineError::Config(format!("data path {} does not exist", path.display())));
            }
        }
        if !(self.y > 0.0 && self.y < 4.0) {
            return Err(PipelineError::Config(format!("y must lie in (0, 4), got {}", self.y)));
        }
        let gamma: Gamma = self.gamma.parse()?;
        let gammas = if self.gammas.is_empty() {
            default_gammas()
        } else {
            self.gammas.iter().map(|g| g.parse()).collect::<Result<_, _>>()?
        };
        let grid = self.grid.as_deref().map(parse_grid).transpose()?;
        let groups = self
            .groups
            .iter()
            .map(|g| g.parse::<GroupSpec>())
            .collect::<Result<Vec<_>, _>>()?;
        if self.workers == Some(0) {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        let mut synth = self.synth.clone();
        if let Some(seed) = self.seed {
            synth.seed = seed;
        }
        synth.validate()?;
        Ok(Settings {
            rules,
            data: self.data.clone(),
            spec: WeightingSpec::new(self.y, gamma)?,
            gammas,
            grid,
            groups,
            scaling: self.scaling,
            workers: self.workers,
            synth,
        })
    }
}

/// A checked [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Settings {
    pub rules: RuleSet,
    pub data: Vec<PathBuf>,
    pub spec: WeightingSpec,
    pub gammas: Vec<Gamma>,
    pub grid: Option<Vec<f64>>,
    pub groups: Vec<GroupSpec>,
    pub scaling: ScalingMode,
    pub workers: Option<usize>,
    pub synth: SynthConfig,
}

/// Parses `START:END:STEP` into the `y` values of a sweep.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, PipelineError> {
    let bad = |why: &str| PipelineError::Config(format!("grid {text:?}: {why}"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("expected START:END:STEP"))?;
    let [start, end, step] = parts[..] else {
        return Err(bad("expected START:END:STEP"));
    };
    let ys = y_grid(start, end, step);
    if ys.is_empty() {
        return Err(bad("empty range"));
    }
    if let Some(y) = ys.iter().find(|&&y| !(y > 0.0 && y < 4.0)) {
        return Err(bad(&format!("y = {y} outside (0, 4)")));
    }
    Ok(ys)
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T, PipelineError> + Send,
) -> Result<T, PipelineError> {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PipelineError::Config(format!("cannot start {n} workers: {e}")))?
            .install(f),
    }
}

fn num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-4 {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvOut {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::output(dir, e))?;
        let path = dir.join(name);
        let writer = csv::Writer::from_path(&path).map_err(|e| PipelineError::output(&path, e))?;
        let mut out = Self { path, writer };
        out.row(header.iter().map(|s| s.to_string()))?;
        Ok(out)
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<(), PipelineError> {
        self.writer
            .write_record(fields)
            .map_err(|e| PipelineError::output(&self.path, e))
    }

    fn finish(mut self) -> Result<(), PipelineError> {
        self.writer.flush().map_err(|e| PipelineError::output(&self.path, e))
    }
}

/// Occurrence counts of one code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CodeCount {
    pub code: String,
    pub records: usize,
    pub persons: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkOutput {
    pub records: Vec<QualifierRecord>,
    pub code_counts: Vec<CodeCount>,
}

/// Links every person's answers, keeping person order.
pub fn link_cohort(cohort: &CohortStore, rules: &RuleSet) -> Result<LinkOutput, PipelineError> {
    let per_person: Vec<Vec<QualifierRecord>> = cohort
        .persons()
        .par_iter()
        .map(|p| apply_rules(&p.answers, rules))
        .collect::<Result<_, _>>()?;
    let records: Vec<QualifierRecord> = per_person.into_iter().flatten().collect();
    let mut counts: BTreeMap<String, (usize, BTreeSet<&str>)> = BTreeMap::new();
    for r in &records {
        let entry = counts.entry(r.code.to_string()).or_default();
        entry.0 += 1;
        entry.1.insert(&r.person_id);
    }
    let code_counts = counts
        .into_iter()
        .map(|(code, (records, persons))| CodeCount {
            code,
            records,
            persons: persons.len(),
        })
        .collect();
    Ok(LinkOutput { records, code_counts })
}

pub fn write_records(records: &[QualifierRecord], path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::output(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::output(path, e))?;
    if records.is_empty() {
        w.write_record(["person_id", "day", "source_id", "code", "value", "reliability"])
            .map_err(|e| PipelineError::output(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| PipelineError::output(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::output(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<QualifierRecord>, PipelineError> {
    let file = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(format!("{file}: {e}")))?;
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<QualifierRecord>().enumerate() {
        let record = row.map_err(|e| PipelineError::Data(format!("{file}:{}: {e}", i + 2)))?;
        records.push(record);
    }
    Ok(records)
}

/// True when the first line of `path` is a record-file header.
fn is_records_file(path: &Path) -> bool {
    let Ok(file) = fs::File::open(path) else {
        return false;
    };
    let mut header = String::new();
    if BufReader::new(file).read_line(&mut header).is_err() {
        return false;
    }
    let columns: BTreeSet<&str> = header.trim().split(',').collect();
    columns.contains("source_id") && columns.contains("code")
}

/// Records from `paths`: record files are read as they are, anything else is
/// ingested as cohort input and linked with `rules`.
pub fn load_records(paths: &[PathBuf], rules: &RuleSet) -> Result<Vec<QualifierRecord>, PipelineError> {
    let (record_files, cohort_inputs): (Vec<&PathBuf>, Vec<&PathBuf>) =
        paths.iter().partition(|p| p.is_file() && is_records_file(p));
    let mut records = Vec::new();
    for path in record_files {
        records.extend(read_records(path)?);
    }
    if !cohort_inputs.is_empty() {
        let cohort = ingest(&cohort_inputs)?;
        records.extend(link_cohort(&cohort, rules)?.records);
    }
    Ok(records)
}

/// `link`: writes the record file and per-code occurrence counts.
pub fn cmd_link(cohort: &CohortStore, rules: &RuleSet, out: &Path) -> Result<LinkOutput, PipelineError> {
    let linked = link_cohort(cohort, rules)?;
    if linked.records.is_empty() {
        warn!("no qualifier records were produced");
    }
    write_records(&linked.records, &out.join(RECORDS_FILE))?;
    let mut counts = CsvOut::create(out, CODE_COUNTS_FILE, &["code", "records", "persons"])?;
    for c in &linked.code_counts {
        counts.row([c.code.clone(), c.records.to_string(), c.persons.to_string()])?;
    }
    counts.finish()?;
    info!(
        "linked {} records over {} codes",
        linked.records.len(),
        linked.code_counts.len()
    );
    Ok(linked)
}

fn by_person(records: &[QualifierRecord]) -> BTreeMap<&str, Vec<QualifierRecord>> {
    let mut map: BTreeMap<&str, Vec<QualifierRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.person_id.as_str()).or_default().push(r.clone());
    }
    map
}

/// One evaluated person-day.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRow {
    pub person_id: String,
    pub day: u32,
    pub raw: f64,
    pub hi: i32,
    pub alpha_root: f64,
    pub r_root: f64,
    /// Raw value and score per component with data.
    pub components: BTreeMap<Component, (f64, i32)>,
}

/// A person whose evaluation failed; the rest of the run continues.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonFailure {
    pub person_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexReport {
    pub rows: Vec<IndexRow>,
    pub failures: Vec<PersonFailure>,
    pub scaling: Scaling,
}

struct RawRow {
    day: u32,
    raw: f64,
    alpha: f64,
    reliability: f64,
    components: BTreeMap<Component, f64>,
}

/// Evaluates every person on each day they have records, up to `until`.
fn raw_rows(
    tree: &IcfTree,
    records: &[QualifierRecord],
    spec: &WeightingSpec,
    until: Option<u32>,
    last_only: bool,
) -> Vec<(String, Result<Vec<RawRow>, EngineError>)> {
    let persons: Vec<(&str, Vec<QualifierRecord>)> = by_person(records).into_iter().collect();
    persons
        .par_iter()
        .map(|(id, recs)| {
            let mut days: Vec<u32> = recs
                .iter()
                .map(|r| r.day)
                .filter(|&d| until.map_or(true, |u| d <= u))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if last_only {
                days = days.split_off(days.len().saturating_sub(1));
                if let (Some(u), Some(d)) = (until, days.first_mut()) {
                    *d = u;
                }
            }
            let rows = evaluate_trajectory(tree, recs, &days, spec).map(|points| {
                points
                    .into_iter()
                    .map(|p| RawRow {
                        day: p.day,
                        raw: p.outcome.root.x,
                        alpha: p.outcome.root.alpha,
                        reliability: p.outcome.root.reliability,
                        components: Component::ALL
                            .iter()
                            .filter_map(|&c| p.outcome.component(c).map(|r| (c, r.x)))
                            .collect(),
                    })
                    .collect()
            });
            (id.to_string(), rows)
        })
        .collect()
}

fn scaled(
    evaluated: Vec<(String, Result<Vec<RawRow>, EngineError>)>,
    mode: ScalingMode,
) -> Result<IndexReport, PipelineError> {
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (person_id, result) in evaluated {
        match result {
            Ok(rows) => ok.push((person_id, rows)),
            Err(e) => {
                warn!("{person_id}: {e}");
                failures.push(PersonFailure {
                    person_id,
                    message: e.to_string(),
                });
            }
        }
    }
    let scaling = match mode {
        ScalingMode::Theoretical => Scaling::Theoretical,
        ScalingMode::Empirical => Scaling::empirical(ok.iter().flat_map(|(_, rows)| rows.iter().map(|r| r.raw)))?,
    };
    let rows = ok
        .into_iter()
        .flat_map(|(person_id, rows)| {
            rows.into_iter().map(move |r| IndexRow {
                person_id: person_id.clone(),
                day: r.day,
                raw: r.raw,
                hi: scaling.scale(r.raw),
                alpha_root: r.alpha,
                r_root: r.reliability,
                components: r.components.into_iter().map(|(c, x)| (c, (x, scaling.scale(x)))).collect(),
            })
        })
        .collect();
    Ok(IndexReport {
        rows,
        failures,
        scaling,
    })
}

/// Index and component scores for every person-day with records.
///
/// All persons share one tree built from every record's code.
pub fn index_records(
    records: &[QualifierRecord],
    spec: &WeightingSpec,
    mode: ScalingMode,
) -> Result<IndexReport, PipelineError> {
    let tree = IcfTree::build(records.iter().map(|r| &r.code))?;
    scaled(raw_rows(&tree, records, spec, None, false), mode)
}

/// `index`: writes one row per person-day.
pub fn cmd_index(
    records: &[QualifierRecord],
    spec: &WeightingSpec,
    mode: ScalingMode,
    out: &Path,
) -> Result<IndexReport, PipelineError> {
    let report = if records.is_empty() {
        warn!("no records to index");
        IndexReport {
            rows: Vec::new(),
            failures: Vec::new(),
            scaling: Scaling::Theoretical,
        }
    } else {
        index_records(records, spec, mode)?
    };
    let mut header = vec!["person_id", "day", "hi", "raw", "alpha_root", "r_root"];
    header.extend(["b", "d", "e", "s"]);
    let mut w = CsvOut::create(out, INDEX_FILE, &header)?;
    for r in &report.rows {
        let mut fields = vec![
            r.person_id.clone(),
            r.day.to_string(),
            r.hi.to_string(),
            num(r.raw),
            num(r.alpha_root),
            num(r.r_root),
        ];
        fields.extend(
            Component::ALL
                .iter()
                .map(|c| r.components.get(c).map(|(_, s)| s.to_string()).unwrap_or_default()),
        );
        w.row(fields)?;
    }
    w.finish()?;
    Ok(report)
}

/// `profile`: each person's component scores on their last record day, or
/// on `day` using records up to it.
pub fn cmd_profile(
    records: &[QualifierRecord],
    spec: &WeightingSpec,
    mode: ScalingMode,
    day: Option<u32>,
    out: &Path,
) -> Result<IndexReport, PipelineError> {
    let report = if records.is_empty() {
        warn!("no records to profile");
        IndexReport {
            rows: Vec::new(),
            failures: Vec::new(),
            scaling: Scaling::Theoretical,
        }
    } else {
        let tree = IcfTree::build(records.iter().map(|r| &r.code))?;
        let visible: Vec<QualifierRecord> = records
            .iter()
            .filter(|r| day.map_or(true, |d| r.day <= d))
            .cloned()
            .collect();
        scaled(raw_rows(&tree, &visible, spec, day, true), mode)?
    };
    let mut w = CsvOut::create(out, PROFILE_FILE, &["person_id", "day", "component", "raw", "score"])?;
    for r in &report.rows {
        w.row([r.person_id.clone(), r.day.to_string(), "all".into(), num(r.raw), r.hi.to_string()])?;
        for (c, (raw, score)) in &r.components {
            w.row([r.person_id.clone(), r.day.to_string(), c.to_string(), num(*raw), score.to_string()])?;
        }
    }
    w.finish()?;
    Ok(report)
}

fn cohort_scaling(linked: &LinkedCohort<'_>, spec: &WeightingSpec, mode: ScalingMode) -> Result<Scaling, PipelineError> {
    match mode {
        ScalingMode::Theoretical => Ok(Scaling::Theoretical),
        ScalingMode::Empirical => {
            let all: Vec<QualifierRecord> = linked
                .cohort
                .persons()
                .iter()
                .flat_map(|p| linked.records(&p.id).iter().cloned())
                .collect();
            Ok(scaled(raw_rows(&linked.tree, &all, spec, None, false), mode)?.scaling)
        }
    }
}

/// Short name of a decay constant in output tables.
pub fn gamma_label(gamma: Gamma) -> String {
    if gamma == Gamma::heavy() {
        "heavy".into()
    } else if gamma == Gamma::moderate() {
        "moderate".into()
    } else if gamma == Gamma::NONE {
        "none".into()
    } else {
        num(gamma.value())
    }
}

/// Headline numbers of a validation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub group: String,
    pub gamma: String,
    pub eqvas_coefficient: Option<f64>,
    pub maxpain_median: Option<f64>,
    pub significant_portion: Option<f64>,
    pub tertile_portions: Vec<f64>,
}

/// `validate`: EQ-VAS correlations, per-person max-pain correlations with
/// boxplot statistics, sequence-length tertiles and the optional sweep, for
/// every group and decay constant at the configured `y`. Also writes the
/// reliabilities in use.
pub fn cmd_validate(cohort: &CohortStore, settings: &Settings, out: &Path) -> Result<Vec<ValidationSummary>, PipelineError> {
    let linked = LinkedCohort::new(cohort, &settings.rules)?;
    let groups = form_groups(cohort, &settings.groups);
    let y = settings.spec.y();

    let mut reliabilities = CsvOut::create(out, RELIABILITIES_FILE, &["source_item_id", "reliability"])?;
    for (item, r) in settings.rules.reliabilities() {
        reliabilities.row([item.to_string(), num(r)])?;
    }
    reliabilities.finish()?;

    let mut table1 = CsvOut::create(
        out,
        TABLE1_FILE,
        &["group", "gamma", "y", "n", "persons", "coefficient", "p_value", "significant"],
    )?;
    let mut persons_out = CsvOut::create(
        out,
        PERSON_CORRELATIONS_FILE,
        &[
            "group",
            "gamma",
            "person_id",
            "sequence_length",
            "points",
            "coefficient",
            "p_value",
            "significant_uncorrected",
            "significant",
        ],
    )?;
    let mut boxplot = CsvOut::create(
        out,
        BOXPLOT_FILE,
        &[
            "group",
            "gamma",
            "n",
            "omitted_constant",
            "ineligible",
            "threshold",
            "significant_portion",
            "min",
            "whisker_low",
            "q1",
            "median",
            "q3",
            "whisker_high",
            "max",
        ],
    )?;
    let mut table2 = CsvOut::create(
        out,
        TABLE2_FILE,
        &[
            "group",
            "gamma",
            "bin",
            "min_sequence_length",
            "max_sequence_length",
            "size",
            "significant_portion",
            "median",
        ],
    )?;

    let mut summaries = Vec::new();
    for (spec_group, members) in settings.groups.iter().zip(&groups) {
        let group = spec_group.label();
        info!("group {group}: {} persons", members.len());
        for &gamma in &settings.gammas {
            let label = gamma_label(gamma);
            let spec = WeightingSpec::new(y, gamma)?;
            let scaling = cohort_scaling(&linked, &spec, settings.scaling)?;
            let mut summary = ValidationSummary {
                group: group.clone(),
                gamma: label.clone(),
                eqvas_coefficient: None,
                maxpain_median: None,
                significant_portion: None,
                tertile_portions: Vec::new(),
            };

            match eqvas_vs_hi(&linked, members, &spec, scaling) {
                Ok(r) => {
                    summary.eqvas_coefficient = Some(r.coefficient);
                    table1.row([
                        group.clone(),
                        label.clone(),
                        num(y),
                        r.n.to_string(),
                        r.persons.to_string(),
                        num(r.coefficient),
                        num(r.p_value),
                        r.significant.to_string(),
                    ])?;
                }
                Err(e @ (AnalysisError::TooFewPairs(_) | AnalysisError::ZeroVariance)) => {
                    warn!("group {group}, gamma {label}: EQ-VAS correlation undefined: {e}");
                    table1.row([group.clone(), label.clone(), num(y), "0".into(), "0".into(), String::new(), String::new(), String::new()])?;
                }
                Err(e) => return Err(e.into()),
            }

            match maxpain_vs_hi(&linked, members, &spec, scaling, DEFAULT_ALPHA) {
                Ok(r) => {
                    summary.maxpain_median = Some(r.median);
                    summary.significant_portion = Some(r.significant_portion);
                    for p in &r.persons {
                        persons_out.row([
                            group.clone(),
                            label.clone(),
                            p.person_id.clone(),
                            p.sequence_length.to_string(),
                            p.points.to_string(),
                            num(p.coefficient),
                            num(p.p_value),
                            p.significant_uncorrected.to_string(),
                            p.significant.to_string(),
                        ])?;
                    }
                    let b = r.boxplot;
                    boxplot.row([
                        group.clone(),
                        label.clone(),
                        r.n().to_string(),
                        r.omitted_constant.len().to_string(),
                        r.ineligible.to_string(),
                        num(r.threshold),
                        num(r.significant_portion),
                        num(b.min),
                        num(b.whisker_low),
                        num(b.q1),
                        num(b.median),
                        num(b.q3),
                        num(b.whisker_high),
                        num(b.max),
                    ])?;
                    match bin_by_sequence_length(&r.persons, 3) {
                        Ok(bins) => {
                            for bin in bins {
                                summary.tertile_portions.push(bin.significant_portion);
                                table2.row([
                                    group.clone(),
                                    label.clone(),
                                    bin.bin.to_string(),
                                    bin.min_sequence_length.to_string(),
                                    bin.max_sequence_length.to_string(),
                                    bin.size.to_string(),
                                    num(bin.significant_portion),
                                    num(bin.median),
                                ])?;
                            }
                        }
                        Err(e) => warn!("group {group}, gamma {label}: {e}"),
                    }
                }
                Err(AnalysisError::NoEligiblePersons) => {
                    warn!("group {group}, gamma {label}: no person has 3 or more days of pain data");
                }
                Err(e) => return Err(e.into()),
            }
            summaries.push(summary);
        }
    }
    table1.finish()?;
    persons_out.finish()?;
    boxplot.finish()?;
    table2.finish()?;

    if let Some(ys) = &settings.grid {
        let mut w = CsvOut::create(out, SWEEP_FILE, &["group", "gamma", "y", "metric", "value", "n"])?;
        for (spec_group, members) in settings.groups.iter().zip(&groups) {
            // Empirical bounds depend on (γ, y), so the sweep uses one
            // scaling per cell only in theoretical mode.
            let rows = match settings.scaling {
                ScalingMode::Theoretical => sweep(&linked, *spec_group, members, &settings.gammas, ys, Scaling::Theoretical)?,
                ScalingMode::Empirical => {
                    let mut rows = Vec::new();
                    for &gamma in &settings.gammas {
                        for &y in ys {
                            let scaling = cohort_scaling(&linked, &WeightingSpec::new(y, gamma)?, ScalingMode::Empirical)?;
                            rows.extend(sweep(&linked, *spec_group, members, &[gamma], &[y], scaling)?);
                        }
                    }
                    rows
                }
            };
            for row in rows {
                let gamma = gamma_label(Gamma::new(row.gamma)?);
                w.row([
                    row.group.clone(),
                    gamma.clone(),
                    num(row.y),
                    "eqvas_coefficient".into(),
                    opt_num(row.eqvas_coefficient),
                    row.eqvas_n.to_string(),
                ])?;
                w.row([
                    row.group,
                    gamma,
                    num(row.y),
                    "maxpain_median".into(),
                    opt_num(row.maxpain_median),
                    row.maxpain_n.to_string(),
                ])?;
            }
        }
        w.finish()?;
    }
    Ok(summaries)
}

/// `synth`: writes a generated cohort directory.
pub fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<CohortStore, PipelineError> {
    let cohort = synthesize(config)?;
    write_dir(&cohort, out)?;
    info!("wrote {} synthetic persons to {}", cohort.len(), out.display());
    Ok(cohort)
}

/// `fit-weights`: fitted value-curve parameters for `y` as `key = value` lines.
pub fn fit_weights_report(y: f64) -> Result<String, PipelineError> {
    if !(y > 0.0 && y < 4.0) {
        return Err(PipelineError::Config(format!("y must lie in (0, 4), got {y}")));
    }
    let curve = fit_curve(y)?;
    let (a, b, c) = curve.params();
    let kind = match curve.kind() {
        CurveKind::Exponential => "exponential",
        CurveKind::Linear => "linear",
        CurveKind::Logarithmic => "logarithmic",
    };
    let formula = match curve.kind() {
        CurveKind::Exponential => "a*exp(b*x) + c",
        CurveKind::Linear => "x",
        CurveKind::Logarithmic => "a*ln(b*x + 1)",
    };
    let mut out = String::new();
    let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    line("y", num(y));
    line("kind", kind.into());
    line("formula", formula.into());
    line("a", num(a));
    line("b", num(b));
    line("c", num(c));
    for x in [1.0, 2.0, 3.0] {
        line(&format!("f({x})"), num(curve.eval(x)));
    }
    Ok(out)
}

/// Full run into `out`: synthesize, link, index and validate.
///
/// Subdirectories `cohort`, `link`, `index` and `validate` hold each
/// command's output.
pub fn run_all(settings: &Settings, out: &Path) -> Result<(), PipelineError> {
    with_workers(settings.workers, || {
        let cohort_dir = out.join("cohort");
        cmd_synth(&settings.synth, &cohort_dir)?;
        let cohort = ingest(&[&cohort_dir])?;
        let linked = cmd_link(&cohort, &settings.rules, &out.join("link"))?;
        cmd_index(&linked.records, &settings.spec, settings.scaling, &out.join("index"))?;
        cmd_validate(&cohort, settings, &out.join("validate"))?;
        Ok(())
    })
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::output(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| PipelineError::output(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| PipelineError::output(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkage::RawAnswer;

    fn answer(person: &str, day: u32, instrument: &str, item: &str, value: f64) -> RawAnswer {
        RawAnswer {
            person_id: person.into(),
            day,
            instrument: instrument.into(),
            item: item.into(),
            value,
        }
    }

    #[test]
    fn config_defaults_resolve() {
        let s = RunConfig::default().resolve().unwrap();
        assert_eq!(s.gammas.len(), 3);
        assert_eq!(s.groups, [GroupSpec::LONG, GroupSpec::SHORT]);
        assert!((s.spec.gamma().value() - Gamma::moderate().value()).abs() < 1e-15);
    }

    #[test]
    fn config_errors_are_config_kind() {
        let cases = [
            RunConfig { y: 4.0, ..RunConfig::default() },
            RunConfig { gamma: "1.5".into(), ..RunConfig::default() },
            RunConfig { groups: vec!["ninety".into()], ..RunConfig::default() },
            RunConfig { grid: Some("1:2".into()), ..RunConfig::default() },
            RunConfig { rules: Some("/nonexistent/rules.json".into()), ..RunConfig::default() },
            RunConfig { data: vec!["/nonexistent/data".into()], ..RunConfig::default() },
            RunConfig { workers: Some(0), ..RunConfig::default() },
        ];
        for c in cases {
            let e = c.resolve().unwrap_err();
            assert_eq!(e.kind(), ErrorKind::Config, "{e}");
        }
        let e = RunConfig { rules: Some("/nonexistent/rules.json".into()), ..RunConfig::default() }
            .resolve()
            .unwrap_err();
        assert!(e.to_string().contains("/nonexistent/rules.json"));
    }

    #[test]
    fn config_json_round_trip() {
        let c = RunConfig {
            grid: Some("0.5:3.5:0.5".into()),
            seed: Some(7),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"gama": "1"}"#).is_err());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1:2:0.5").unwrap(), [1.0, 1.5, 2.0]);
        assert!(parse_grid("0:2:0.5").is_err());
        assert!(parse_grid("2:1:0.5").is_err());
        assert!(parse_grid("a:b:c").is_err());
    }

    #[test]
    fn gamma_text_forms_agree() {
        let a: Gamma = "1/3@30".parse().unwrap();
        let b = Gamma::new((1.0f64 / 3.0).powf(1.0 / 30.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(gamma_label(a), "moderate");
        assert_eq!(gamma_label("heavy".parse().unwrap()), "heavy");
    }

    #[test]
    fn empirical_scaling_spans_cohort() {
        let cohort = CohortStore::new(vec![
            crate::cohort::Person {
                id: "a".into(),
                days: vec![0],
                answers: vec![answer("a", 0, "pain", "back", 2.0)],
                ..Default::default()
            },
            crate::cohort::Person {
                id: "b".into(),
                days: vec![0],
                answers: vec![answer("b", 0, "pain", "back", 9.0)],
                ..Default::default()
            },
        ]);
        let linked = link_cohort(&cohort, &RuleSet::bundled()).unwrap();
        let spec = WeightingSpec::linear(Gamma::NONE);
        let report = index_records(&linked.records, &spec, ScalingMode::Empirical).unwrap();
        // pain 2 → qualifier 1, pain 9 → qualifier 4
        assert_eq!(report.scaling, Scaling::Empirical { min: 1.0, max: 4.0 });
        let his: Vec<i32> = report.rows.iter().map(|r| r.hi).collect();
        assert_eq!(his, [100, 0]);
        let theoretical = index_records(&linked.records, &spec, ScalingMode::Theoretical).unwrap();
        let his: Vec<i32> = theoretical.rows.iter().map(|r| r.hi).collect();
        assert_eq!(his, [75, 0]);
    }

    #[test]
    fn records_round_trip_and_sniffing() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = synthesize(&SynthConfig {
            persons: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let linked = cmd_link(&cohort, &RuleSet::bundled(), dir.path()).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        assert!(is_records_file(&path));
        assert_eq!(read_records(&path).unwrap(), linked.records);
        let loaded = load_records(&[path], &RuleSet::bundled()).unwrap();
        assert_eq!(loaded, linked.records);
    }

    #[test]
    fn fit_report_lines() {
        let text = fit_weights_report(0.75).unwrap();
        assert!(text.contains("kind = exponential"));
        assert!(text.contains("a = 0.225"));
        assert!(text.contains("f(2) = 0.75"));
        assert_eq!(fit_weights_report(4.0).unwrap_err().kind(), ErrorKind::Config);
    }
}
