//! Persons, visits and raw answers; CSV ingestion and synthetic cohorts.
//!
//! Every input row carries `person_id, day_or_date, instrument, item, value`.
//! `day_or_date` is either an integer day or an ISO date (`2017-03-21`). At
//! ingestion each person's rows are shifted so the first day is 0; the rest
//! of the crate only sees day offsets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linkage::{RawAnswer, EQ_VAS_ITEM, PAIN_ITEMS};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// File names inside a serialized cohort directory.
pub const PERSONS_FILE: &str = "persons.csv";
pub const ANSWERS_FILE: &str = "answers.csv";
pub const EQVAS_FILE: &str = "eqvas.csv";

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{file}:{line}: {message}")]
    Row {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}:{line}: duplicate answer for {key} (first seen on line {first_line})")]
    Duplicate {
        file: String,
        line: u64,
        first_line: u64,
        key: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("invalid synthesis config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CohortError + '_ {
    move |source| CohortError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One person's measurement history.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Person {
    pub id: String,
    /// Distinct measurement days, ascending, starting at 0.
    pub days: Vec<u32>,
    /// Answers other than EQ-VAS, ordered by (day, instrument, item).
    pub answers: Vec<RawAnswer>,
    /// EQ-VAS (0–100) by day.
    pub eqvas: BTreeMap<u32, f64>,
    /// Calendar date of day 0 when the input was dated.
    pub start_date: Option<NaiveDate>,
}

impl Person {
    pub fn stats(&self) -> TreatmentStats {
        stats(self)
    }

    /// Per-day maximum over the four pain VAS answers, on days with at least one.
    pub fn max_pain(&self) -> BTreeMap<u32, f64> {
        let mut out: BTreeMap<u32, f64> = BTreeMap::new();
        for a in &self.answers {
            if PAIN_ITEMS.contains(&a.source_item_id().as_str()) {
                let slot = out.entry(a.day).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(a.value);
            }
        }
        out
    }
}

/// Treatment duration and sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentStats {
    /// Last day minus first day.
    pub duration: u32,
    /// Number of distinct measurement days.
    pub sequence_length: u32,
}

pub fn stats(person: &Person) -> TreatmentStats {
    let first = person.days.first().copied().unwrap_or(0);
    let last = person.days.last().copied().unwrap_or(0);
    TreatmentStats {
        duration: last - first,
        sequence_length: person.days.len() as u32,
    }
}

/// An immutable collection of persons sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortStore {
    persons: Vec<Person>,
}

impl CohortStore {
    pub fn new(mut persons: Vec<Person>) -> Self {
        persons.sort_by(|a, b| a.id.cmp(&b.id));
        Self { persons }
    }

    pub fn persons(&self) -> &[Person] {
        &self.persons
    }

    pub fn person(&self, id: &str) -> Option<&Person> {
        self.persons
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.persons[i])
    }

    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }

    /// All non-EQ-VAS answers, person by person.
    pub fn answers(&self) -> impl Iterator<Item = &RawAnswer> {
        self.persons.iter().flat_map(|p| p.answers.iter())
    }
}

#[derive(Debug, Deserialize)]
struct InputRow {
    person_id: String,
    day_or_date: String,
    instrument: String,
    item: String,
    value: f64,
}

enum Stamp {
    Day(i64),
    Date(NaiveDate),
}

struct PendingRow {
    file: String,
    line: u64,
    stamp: Stamp,
    row: InputRow,
}

/// Accumulates rows from one or more files, then normalizes days per person.
#[derive(Default)]
pub struct Ingest {
    rows: Vec<PendingRow>,
}

impl Ingest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_reader<R: Read>(&mut self, name: &str, reader: R) -> Result<(), CohortError> {
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut count = 0;
        for result in csv.deserialize::<InputRow>() {
            let row = result.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                CohortError::Row {
                    file: name.to_string(),
                    line,
                    message: e.to_string(),
                }
            })?;
            // header is line 1
            let line = count + 2;
            count += 1;
            let stamp = parse_stamp(&row.day_or_date).ok_or_else(|| CohortError::Row {
                file: name.to_string(),
                line,
                message: format!("unparseable day or date {:?}", row.day_or_date),
            })?;
            if !row.value.is_finite() {
                return Err(CohortError::Row {
                    file: name.to_string(),
                    line,
                    message: "value is not a finite number".into(),
                });
            }
            self.rows.push(PendingRow {
                file: name.to_string(),
                line,
                stamp,
                row,
            });
        }
        if count == 0 {
            log::warn!("{name}: no data rows");
        }
        Ok(())
    }

    pub fn add_path(&mut self, path: &Path) -> Result<(), CohortError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        self.add_reader(&path.display().to_string(), file)
    }

    pub fn finish(self) -> Result<CohortStore, CohortError> {
        let mut by_person: BTreeMap<String, Vec<PendingRow>> = BTreeMap::new();
        for row in self.rows {
            by_person.entry(row.row.person_id.clone()).or_default().push(row);
        }
        let persons = by_person
            .into_iter()
            .map(|(id, rows)| build_person(id, rows))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CohortStore::new(persons))
    }
}

fn parse_stamp(text: &str) -> Option<Stamp> {
    if let Ok(day) = text.parse::<i64>() {
        return Some(Stamp::Day(day));
    }
    NaiveDate::parse_from_str(text, DATE_FORMAT).ok().map(Stamp::Date)
}

fn build_person(id: String, rows: Vec<PendingRow>) -> Result<Person, CohortError> {
    let dated = matches!(rows[0].stamp, Stamp::Date(_));
    let mut ordinals = Vec::with_capacity(rows.len());
    for r in &rows {
        let ordinal = match (&r.stamp, dated) {
            (Stamp::Date(d), true) => d.signed_duration_since(NaiveDate::MIN).num_days(),
            (Stamp::Day(d), false) => *d,
            _ => {
                return Err(CohortError::Row {
                    file: r.file.clone(),
                    line: r.line,
                    message: format!("person {id} mixes day numbers and calendar dates"),
                })
            }
        };
        ordinals.push(ordinal);
    }
    let origin = *ordinals.iter().min().expect("person has rows");
    let start_date = match rows.iter().zip(&ordinals).find(|(_, &o)| o == origin) {
        Some((PendingRow { stamp: Stamp::Date(d), .. }, _)) => Some(*d),
        _ => None,
    };

    let mut person = Person {
        id: id.clone(),
        start_date,
        ..Person::default()
    };
    let mut seen: HashMap<(u32, String, String), u64> = HashMap::new();
    let mut days = BTreeSet::new();
    for (r, ordinal) in rows.into_iter().zip(ordinals) {
        let day = u32::try_from(ordinal - origin).map_err(|_| CohortError::Row {
            file: r.file.clone(),
            line: r.line,
            message: "day offset out of range".into(),
        })?;
        let key = (day, r.row.instrument.clone(), r.row.item.clone());
        if let Some(&first_line) = seen.get(&key) {
            return Err(CohortError::Duplicate {
                file: r.file,
                line: r.line,
                first_line,
                key: format!("{id} day {day} {}.{}", key.1, key.2),
            });
        }
        seen.insert(key, r.line);
        days.insert(day);
        let answer = RawAnswer {
            person_id: id.clone(),
            day,
            instrument: r.row.instrument,
            item: r.row.item,
            value: r.row.value,
        };
        if answer.source_item_id() == EQ_VAS_ITEM {
            if !(0.0..=100.0).contains(&answer.value) {
                return Err(CohortError::Row {
                    file: r.file,
                    line: r.line,
                    message: format!("EQ-VAS {} outside [0, 100]", answer.value),
                });
            }
            person.eqvas.insert(day, answer.value);
        } else {
            person.answers.push(answer);
        }
    }
    person
        .answers
        .sort_by(|a, b| (a.day, &a.instrument, &a.item).cmp(&(b.day, &b.instrument, &b.item)));
    person.days = days.into_iter().collect();
    Ok(person)
}

/// Reads one or more answer files, or cohort directories, into a store.
pub fn ingest<P: AsRef<Path>>(paths: &[P]) -> Result<CohortStore, CohortError> {
    let mut ingest = Ingest::new();
    for path in paths {
        let path = path.as_ref();
        if path.is_dir() {
            for name in [ANSWERS_FILE, EQVAS_FILE] {
                let file = path.join(name);
                if file.exists() {
                    ingest.add_path(&file)?;
                }
            }
        } else {
            ingest.add_path(path)?;
        }
    }
    ingest.finish()
}

fn stamp_text(person: &Person, day: u32) -> String {
    match person.start_date {
        Some(start) => (start + Duration::days(i64::from(day))).format(DATE_FORMAT).to_string(),
        None => day.to_string(),
    }
}

fn write_rows<W: Write>(out: W, rows: impl Iterator<Item = (String, String, String, String, f64)>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["person_id", "day_or_date", "instrument", "item", "value"])?;
    for (person, stamp, instrument, item, value) in rows {
        w.write_record([person, stamp, instrument, item, value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `persons.csv`, `answers.csv` and `eqvas.csv` into `dir`.
pub fn write_dir(store: &CohortStore, dir: &Path) -> Result<(), CohortError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_err = |file: &Path| {
        let file = file.display().to_string();
        move |source| CohortError::Csv { file, source }
    };

    let path = dir.join(PERSONS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["person_id", "start_date", "duration", "sequence_length", "eqvas_answers"])
        .map_err(csv_err(&path))?;
    for p in store.persons() {
        let s = p.stats();
        let start = p.start_date.map(|d| d.format(DATE_FORMAT).to_string()).unwrap_or_default();
        w.write_record([
            p.id.clone(),
            start,
            s.duration.to_string(),
            s.sequence_length.to_string(),
            p.eqvas.len().to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(ANSWERS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_rows(
        file,
        store.persons().iter().flat_map(|p| {
            p.answers.iter().map(move |a| {
                (p.id.clone(), stamp_text(p, a.day), a.instrument.clone(), a.item.clone(), a.value)
            })
        }),
    )
    .map_err(csv_err(&path))?;

    let path = dir.join(EQVAS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let (instrument, item) = EQ_VAS_ITEM.split_once('.').expect("dotted id");
    write_rows(
        file,
        store.persons().iter().flat_map(|p| {
            p.eqvas
                .iter()
                .map(move |(&day, &v)| (p.id.clone(), stamp_text(p, day), instrument.into(), item.into(), v))
        }),
    )
    .map_err(csv_err(&path))?;
    Ok(())
}

/// Direction of each synthetic person's latent severity over treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Improving,
    Stable,
    Worsening,
    /// Each person draws one of the three.
    Mixed,
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub persons: usize,
    pub trend: Trend,
    /// Relative drop (or rise) of latent severity over the treatment period.
    pub trend_strength: f64,
    /// Share of persons seen only once.
    pub single_visit_share: f64,
    /// Mean number of visits beyond the second for multi-visit persons.
    pub mean_extra_visits: f64,
    pub max_visits: u32,
    /// Mean gap between visits in days (at least one day).
    pub mean_gap_days: f64,
    /// Day-to-day standard deviation of latent severity.
    pub latent_noise: f64,
    /// Standard deviation of pain VAS answers around their latent value.
    pub pain_noise: f64,
    pub eqvas_noise: f64,
    /// Per-person probabilities of having each data source.
    pub pain_share: f64,
    pub machine_share: f64,
    pub odi_share: f64,
    pub eq5d_share: f64,
    pub eqvas_share: f64,
    /// Probability of a machine session on a visit for persons with machine data.
    pub machine_visit_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            persons: 300,
            trend: Trend::Improving,
            trend_strength: 0.6,
            single_visit_share: 0.25,
            mean_extra_visits: 12.0,
            max_visits: 80,
            mean_gap_days: 5.0,
            latent_noise: 0.08,
            pain_noise: 0.8,
            eqvas_noise: 8.0,
            pain_share: 0.7,
            machine_share: 0.83,
            odi_share: 0.3,
            eq5d_share: 0.25,
            eqvas_share: 0.6,
            machine_visit_rate: 0.5,
        }
    }
}

impl SynthConfig {
    /// Cohort size matching the clinical data set the method was developed on.
    pub fn clinical_size() -> Self {
        Self {
            persons: 505,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: &str| Err(CohortError::Config(m.to_string()));
        if self.persons == 0 {
            return bad("persons must be positive");
        }
        let shares = [
            ("single_visit_share", self.single_visit_share),
            ("pain_share", self.pain_share),
            ("machine_share", self.machine_share),
            ("odi_share", self.odi_share),
            ("eq5d_share", self.eq5d_share),
            ("eqvas_share", self.eqvas_share),
            ("machine_visit_rate", self.machine_visit_rate),
            ("trend_strength", self.trend_strength),
        ];
        for (name, v) in shares {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.max_visits < 2 {
            return bad("max_visits must be at least 2");
        }
        for (name, v) in [
            ("mean_extra_visits", self.mean_extra_visits),
            ("mean_gap_days", self.mean_gap_days),
            ("latent_noise", self.latent_noise),
            ("pain_noise", self.pain_noise),
            ("eqvas_noise", self.eqvas_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| CohortError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

const MACHINE_ITEMS: [&str; 6] = ["f110", "f120", "f130", "f140", "f150", "f160"];
const ODI_ITEMS: [&str; 10] = [
    "lifting",
    "pain_intensity",
    "personal_care",
    "sex_life",
    "sitting",
    "sleeping",
    "social_life",
    "standing",
    "travelling",
    "walking",
];
const EQ5D_ITEMS: [&str; 5] = [
    "anxiety_depression",
    "mobility",
    "pain_discomfort",
    "self_care",
    "usual_activities",
];

/// Generates a reproducible cohort. Each person has a latent severity in
/// `[0, 1]` following the configured trend with day-level noise; every
/// instrument answer is a noisy discretization of it, and EQ-VAS is
/// `100·(1 − severity)` plus noise.
pub fn synthesize(config: &SynthConfig) -> Result<CohortStore, CohortError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let extra_visits = Exp::new(1.0 / config.mean_extra_visits.max(1e-9)).expect("positive rate");
    let gap = Exp::new(1.0 / config.mean_gap_days.max(1e-9)).expect("positive rate");
    let base_date = NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date");
    let width = config.persons.to_string().len().max(4);

    let mut persons = Vec::with_capacity(config.persons);
    for index in 0..config.persons {
        let id = format!("P{:0width$}", index + 1);
        let start_date = base_date + Duration::days(rng.random_range(0..6 * 365));

        let visits = if rng.random::<f64>() < config.single_visit_share {
            1
        } else {
            (2 + extra_visits.sample(&mut rng).floor() as u32).min(config.max_visits)
        };
        let mut days = vec![0u32];
        for _ in 1..visits {
            let step = 1 + gap.sample(&mut rng).floor() as u32;
            days.push(days.last().unwrap() + step);
        }
        let horizon = f64::from(*days.last().unwrap()).max(1.0);

        let baseline: f64 = rng.random_range(0.25..0.85);
        let direction = match config.trend {
            Trend::Improving => -1.0,
            Trend::Stable => 0.0,
            Trend::Worsening => 1.0,
            Trend::Mixed => [-1.0, 0.0, 1.0][rng.random_range(0..3)],
        };
        let area_factor: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.5..1.2));
        let areas: Vec<usize> = (0..4).filter(|_| rng.random::<f64>() < 0.6).collect();
        let areas = if areas.is_empty() { vec![0] } else { areas };
        let machine_items: Vec<&str> = MACHINE_ITEMS
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < 0.5)
            .collect();
        let machine_items = if machine_items.is_empty() { vec!["f110"] } else { machine_items };
        let has_pain = rng.random::<f64>() < config.pain_share;
        let has_machine = rng.random::<f64>() < config.machine_share;
        let has_odi = rng.random::<f64>() < config.odi_share;
        let has_eq5d = rng.random::<f64>() < config.eq5d_share;
        let has_eqvas = rng.random::<f64>() < config.eqvas_share;

        let mut person = Person {
            id: id.clone(),
            start_date: Some(start_date),
            ..Person::default()
        };
        let last_visit = days.len() - 1;
        let push = |person: &mut Person, day: u32, instrument: &str, item: &str, value: f64| {
            person.answers.push(RawAnswer {
                person_id: id.clone(),
                day,
                instrument: instrument.to_string(),
                item: item.to_string(),
                value,
            });
        };
        for (visit, &day) in days.iter().enumerate() {
            let progress = f64::from(day) / horizon;
            let trend = 1.0 + direction * config.trend_strength * progress;
            let severity =
                (baseline * trend + config.latent_noise * std_normal.sample(&mut rng)).clamp(0.0, 1.0);
            let questionnaire_day = visit == 0 || visit == last_visit || rng.random::<f64>() < 0.1;

            if has_pain || (!has_machine && !has_odi && !has_eq5d) {
                for &area in &areas {
                    let latent = 10.0 * (severity * area_factor[area]).min(1.0);
                    let answer = (latent + config.pain_noise * std_normal.sample(&mut rng)).round();
                    push(&mut person, day, "pain", PAIN_ITEMS[area].split_once('.').unwrap().1, answer.clamp(0.0, 10.0));
                }
            }
            if has_machine && (visit == 0 || rng.random::<f64>() < config.machine_visit_rate) {
                for item in &machine_items {
                    let deficit = 100.0 * severity + 8.0 * std_normal.sample(&mut rng) - 10.0;
                    let deficit = (deficit * 10.0).round() / 10.0;
                    push(&mut person, day, "machine", item, deficit.min(100.0));
                }
            }
            if has_odi && questionnaire_day {
                for item in ODI_ITEMS {
                    let answer = (5.0 * severity + 0.6 * std_normal.sample(&mut rng)).round();
                    push(&mut person, day, "odi", item, answer.clamp(0.0, 5.0));
                }
            }
            if has_eq5d && questionnaire_day {
                for item in EQ5D_ITEMS {
                    let answer = (1.0 + 4.0 * severity + 0.6 * std_normal.sample(&mut rng)).round();
                    push(&mut person, day, "eq5d", item, answer.clamp(1.0, 5.0));
                }
            }
            if has_eqvas && questionnaire_day {
                let vas = 100.0 * (1.0 - severity).powf(1.2) + config.eqvas_noise * std_normal.sample(&mut rng);
                person.eqvas.insert(day, vas.round().clamp(0.0, 100.0));
            }
        }
        // measurement days are the days that actually carry data
        let used: BTreeSet<u32> = person.answers.iter().map(|a| a.day).chain(person.eqvas.keys().copied()).collect();
        person.days = used.into_iter().collect();
        debug_assert_eq!(person.days.first(), Some(&0));
        person
            .answers
            .sort_by(|a, b| (a.day, &a.instrument, &a.item).cmp(&(b.day, &b.instrument, &b.item)));
        persons.push(person);
    }
    Ok(CohortStore::new(persons))
}
