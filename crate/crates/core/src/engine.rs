//! Bottom-up health index aggregation over an [`IcfTree`].
//!
//! Qualifiers are attached to their codes with a time weight `α = γ^TE` and
//! the linkage reliability `r`. Levels are then processed from the deepest to
//! the root, alphabetically inside a level. A node with children takes three
//! kinds of contributions:
//!
//! * its own (direct) qualifiers, weighted `α·r`,
//! * qualifiers still sitting on its children (indirect), weighted `α·r·u`
//!   where `u = 1/z` and `z` counts the sibling children fed by the same
//!   source measurement,
//! * the computed values of its children, weighted `α_k·r_k`.
//!
//! Weights are normalized to sum to one; the node value is the value curve
//! applied to the weighted mean, and `α_q`, `r_q` are the same weighted means
//! of the contributing `α` and `r`. Once a node is computed, the qualifiers of
//! its children and its own direct qualifiers are consumed, so every record
//! reaches the root along exactly one path.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::linkage::{QualifierRecord, SourceId};
use crate::taxonomy::{Component, IcfCode, IcfTree, NodeId, NodeKey, ROOT_LEVEL};
use crate::weighting::{normalize_weights, time_elapsed, WeightingError, WeightingSpec};

/// Lower and upper end of the qualifier scale.
pub const QUALIFIER_MIN: f64 = 0.0;
pub const QUALIFIER_MAX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("record for {0} does not belong to the tree")]
    UnknownCode(IcfCode),
    #[error("record on day {day} is newer than the reference day {reference_day}")]
    FutureRecord { day: u32, reference_day: u32 },
    #[error("qualifier value {0} outside [0, 4]")]
    ValueOutOfRange(f64),
    #[error("reliability {0} outside [0, 1]")]
    ReliabilityOutOfRange(f64),
    #[error("no qualifiers to evaluate")]
    NoQualifiers,
    #[error("every contribution reaching the root has zero weight")]
    ZeroWeightRoot,
    #[error("empirical scaling needs max > min, got [{min}, {max}]")]
    DegenerateScale { min: f64, max: f64 },
    #[error(transparent)]
    Weighting(#[from] WeightingError),
}

/// A qualifier attached to its node for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachedQualifier {
    pub value: f64,
    /// Time weight `γ^TE`.
    pub alpha: f64,
    pub reliability: f64,
    pub source_id: SourceId,
    /// `1/z` with respect to this node's parent.
    pub uniqueness: f64,
}

/// Computed value of a node with the weights that travel with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeResult {
    pub x: f64,
    pub alpha: f64,
    pub reliability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ContributionKind {
    Direct,
    Indirect,
    ChildValue,
}

/// One term of a node's weighted mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contribution {
    pub kind: ContributionKind,
    pub value: f64,
    pub alpha: f64,
    pub reliability: f64,
    /// 1 for direct qualifiers and child values.
    pub uniqueness: f64,
}

impl Contribution {
    pub fn direct(q: &AttachedQualifier) -> Self {
        Self {
            kind: ContributionKind::Direct,
            value: q.value,
            alpha: q.alpha,
            reliability: q.reliability,
            uniqueness: 1.0,
        }
    }

    pub fn indirect(q: &AttachedQualifier) -> Self {
        Self {
            kind: ContributionKind::Indirect,
            value: q.value,
            alpha: q.alpha,
            reliability: q.reliability,
            uniqueness: q.uniqueness,
        }
    }

    pub fn child(result: &NodeResult) -> Self {
        Self {
            kind: ContributionKind::ChildValue,
            value: result.x,
            alpha: result.alpha,
            reliability: result.reliability,
            uniqueness: 1.0,
        }
    }

    /// Un-normalized weight `β = α·r·u`.
    pub fn raw_weight(&self) -> f64 {
        self.alpha * self.reliability * self.uniqueness
    }
}

/// Value of a node from its contributions. `Ok(None)` marks an empty node:
/// no contributions, or only zero-weight ones.
pub fn node_value(
    contributions: &[Contribution],
    spec: &WeightingSpec,
) -> Result<Option<(NodeResult, Vec<f64>)>, EngineError> {
    let raw: Vec<f64> = contributions.iter().map(Contribution::raw_weight).collect();
    let weights = match normalize_weights(&raw) {
        Ok(w) => w,
        Err(WeightingError::ZeroWeights) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut mean = 0.0;
    let mut alpha = 0.0;
    let mut reliability = 0.0;
    for (c, w) in contributions.iter().zip(&weights) {
        mean += w * c.value;
        alpha += w * c.alpha;
        reliability += w * c.reliability;
    }
    let x = spec.apply_curve(mean.clamp(QUALIFIER_MIN, QUALIFIER_MAX))?;
    let result = NodeResult {
        x,
        alpha: alpha.clamp(0.0, 1.0),
        reliability: reliability.clamp(0.0, 1.0),
    };
    Ok(Some((result, weights)))
}

/// Per-node record of one computation, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeTrace {
    pub node: NodeId,
    pub key: String,
    pub contributions: Vec<Contribution>,
    pub normalized_weights: Vec<f64>,
    pub result: NodeResult,
}

/// Maps a raw root value onto the 0–100 index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    /// `min = 0`, `max = 4`.
    Theoretical,
    /// Bounds observed in a population of raw values.
    Empirical { min: f64, max: f64 },
}

impl Scaling {
    /// Empirical bounds from a set of raw values.
    pub fn empirical<I: IntoIterator<Item = f64>>(raws: I) -> Result<Self, EngineError> {
        let (min, max) = raws
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(max > min) {
            return Err(EngineError::DegenerateScale { min, max });
        }
        Ok(Scaling::Empirical { min, max })
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Scaling::Theoretical => (QUALIFIER_MIN, QUALIFIER_MAX),
            Scaling::Empirical { min, max } => (min, max),
        }
    }

    /// `nint(100 − 100·(raw − min)/(max − min))`, rounding half away from
    /// zero and clamped to 0–100.
    pub fn scale(&self, raw: f64) -> i32 {
        let (min, max) = self.bounds();
        let scaled = 100.0 - 100.0 * (raw - min) / (max - min);
        (scaled.round() as i32).clamp(0, 100)
    }
}

/// The scaled index; 100 is best health.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HealthIndex {
    pub value: i32,
    pub raw: f64,
    pub evaluated_at: u32,
}

impl HealthIndex {
    pub fn from_raw(raw: f64, evaluated_at: u32, scaling: Scaling) -> Self {
        Self {
            value: scaling.scale(raw),
            raw,
            evaluated_at,
        }
    }
}

/// Per-component scores on the 0–100 scale; components without data are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct HealthProfile {
    pub scores: BTreeMap<Component, i32>,
    pub raw: BTreeMap<Component, f64>,
}

impl HealthProfile {
    pub fn score(&self, component: Component) -> Option<i32> {
        self.scores.get(&component).copied()
    }
}

/// Output of one full roll-up.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub root: NodeResult,
    /// Results of every computed node, by node id.
    pub results: BTreeMap<NodeId, NodeResult>,
    pub trace: Vec<NodeTrace>,
    pub reference_day: u32,
    components: BTreeMap<Component, NodeResult>,
}

impl Outcome {
    pub fn health_index(&self, scaling: Scaling) -> HealthIndex {
        HealthIndex::from_raw(self.root.x, self.reference_day, scaling)
    }

    pub fn profile(&self, scaling: Scaling) -> HealthProfile {
        let mut profile = HealthProfile::default();
        for (&component, result) in &self.components {
            profile.scores.insert(component, scaling.scale(result.x));
            profile.raw.insert(component, result.x);
        }
        profile
    }

    pub fn component(&self, component: Component) -> Option<&NodeResult> {
        self.components.get(&component)
    }
}

/// A tree with qualifiers attached for one reference day.
#[derive(Debug, Clone)]
pub struct Evaluation<'t> {
    tree: &'t IcfTree,
    reference_day: u32,
    attached: Vec<Vec<AttachedQualifier>>,
}

/// Attaches records to their nodes with time weights relative to
/// `reference_day` and computes source uniqueness among siblings.
pub fn attach<'t>(
    tree: &'t IcfTree,
    records: &[QualifierRecord],
    reference_day: u32,
    spec: &WeightingSpec,
) -> Result<Evaluation<'t>, EngineError> {
    let mut attached: Vec<Vec<AttachedQualifier>> = vec![Vec::new(); tree.len()];
    for record in records {
        let node = tree
            .id_of_code(&record.code)
            .ok_or_else(|| EngineError::UnknownCode(record.code.clone()))?;
        let elapsed = time_elapsed(record.day, reference_day).map_err(|_| EngineError::FutureRecord {
            day: record.day,
            reference_day,
        })?;
        if !(QUALIFIER_MIN..=QUALIFIER_MAX).contains(&record.value) {
            return Err(EngineError::ValueOutOfRange(record.value));
        }
        if !(0.0..=1.0).contains(&record.reliability) {
            return Err(EngineError::ReliabilityOutOfRange(record.reliability));
        }
        attached[node].push(AttachedQualifier {
            value: record.value,
            alpha: spec.time_weight(elapsed),
            reliability: record.reliability,
            source_id: record.source_id.clone(),
            uniqueness: 1.0,
        });
    }

    // z = number of sibling children holding a qualifier from the same source
    for parent in tree.nodes() {
        if parent.children.len() < 2 {
            continue;
        }
        let mut fan_out: HashMap<&SourceId, usize> = HashMap::new();
        for &child in &parent.children {
            let mut seen: Vec<&SourceId> = attached[child].iter().map(|q| &q.source_id).collect();
            seen.sort();
            seen.dedup();
            for source in seen {
                *fan_out.entry(source).or_default() += 1;
            }
        }
        let z: HashMap<SourceId, usize> = fan_out
            .into_iter()
            .filter(|&(_, n)| n > 1)
            .map(|(s, n)| (s.clone(), n))
            .collect();
        if z.is_empty() {
            continue;
        }
        for &child in &parent.children {
            for q in &mut attached[child] {
                if let Some(&n) = z.get(&q.source_id) {
                    q.uniqueness = 1.0 / n as f64;
                }
            }
        }
    }

    Ok(Evaluation {
        tree,
        reference_day,
        attached,
    })
}

impl<'t> Evaluation<'t> {
    pub fn tree(&self) -> &IcfTree {
        self.tree
    }

    pub fn reference_day(&self) -> u32 {
        self.reference_day
    }

    pub fn attached(&self, node: NodeId) -> &[AttachedQualifier] {
        &self.attached[node]
    }

    pub fn qualifier_count(&self) -> usize {
        self.attached.iter().map(Vec::len).sum()
    }

    /// Runs the roll-up. Works on a private copy of the attachments, so the
    /// evaluation itself is left untouched and can be run again.
    pub fn run(&self, spec: &WeightingSpec) -> Result<Outcome, EngineError> {
        self.run_inner(spec, true)
    }

    fn run_inner(&self, spec: &WeightingSpec, record_trace: bool) -> Result<Outcome, EngineError> {
        if self.qualifier_count() == 0 {
            return Err(EngineError::NoQualifiers);
        }
        let tree = self.tree;
        let mut live: Vec<&[AttachedQualifier]> = self.attached.iter().map(Vec::as_slice).collect();
        let mut calculated: Vec<Option<NodeResult>> = vec![None; tree.len()];
        let mut trace = Vec::new();

        let mut level = tree.deepest_level();
        while level >= ROOT_LEVEL {
            for &id in tree.level(level) {
                let node = tree.node(id);
                if node.is_leaf() {
                    continue;
                }
                let mut contributions: Vec<Contribution> =
                    live[id].iter().map(Contribution::direct).collect();
                for &child in &node.children {
                    contributions.extend(live[child].iter().map(Contribution::indirect));
                    if let Some(result) = &calculated[child] {
                        contributions.push(Contribution::child(result));
                    }
                }
                if let Some((result, weights)) = node_value(&contributions, spec)? {
                    calculated[id] = Some(result);
                    if record_trace {
                        trace.push(NodeTrace {
                            node: id,
                            key: node.key.to_string(),
                            contributions,
                            normalized_weights: weights,
                            result,
                        });
                    }
                }
                for &child in &node.children {
                    live[child] = &[];
                }
                live[id] = &[];
            }
            level -= 1;
        }

        let root = calculated[tree.root()].ok_or(EngineError::ZeroWeightRoot)?;
        let mut components = BTreeMap::new();
        for &id in tree.level(0) {
            let node = tree.node(id);
            let Some(component) = node.key.code().map(IcfCode::component) else {
                continue;
            };
            let result = match calculated[id] {
                Some(result) => Some(result),
                // a bare component code with data and no children
                None if node.is_leaf() && !self.attached[id].is_empty() => {
                    let own: Vec<Contribution> = self.attached[id].iter().map(Contribution::direct).collect();
                    node_value(&own, spec)?.map(|(r, _)| r)
                }
                None => None,
            };
            if let Some(result) = result {
                components.insert(component, result);
            }
        }
        let results = calculated
            .into_iter()
            .enumerate()
            .filter_map(|(id, r)| r.map(|r| (id, r)))
            .collect();
        Ok(Outcome {
            root,
            results,
            trace,
            reference_day: self.reference_day,
            components,
        })
    }

    /// Health index of this evaluation.
    pub fn evaluate(&self, spec: &WeightingSpec, scaling: Scaling) -> Result<HealthIndex, EngineError> {
        Ok(self.run_inner(spec, false)?.health_index(scaling))
    }

    /// Per-component scores of this evaluation.
    pub fn evaluate_profile(&self, spec: &WeightingSpec, scaling: Scaling) -> Result<HealthProfile, EngineError> {
        Ok(self.run_inner(spec, false)?.profile(scaling))
    }
}

/// Index with theoretical scaling.
pub fn evaluate(evaluation: &Evaluation<'_>, spec: &WeightingSpec) -> Result<HealthIndex, EngineError> {
    evaluation.evaluate(spec, Scaling::Theoretical)
}

/// Profile with theoretical scaling.
pub fn evaluate_profile(evaluation: &Evaluation<'_>, spec: &WeightingSpec) -> Result<HealthProfile, EngineError> {
    evaluation.evaluate_profile(spec, Scaling::Theoretical)
}

/// One day of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub day: u32,
    pub outcome: Outcome,
}

/// Evaluates a person on each of `days` using only records up to that day.
///
/// `tree` is the shared skeleton; it must contain every record's code.
pub fn evaluate_trajectory(
    tree: &IcfTree,
    records: &[QualifierRecord],
    days: &[u32],
    spec: &WeightingSpec,
) -> Result<Vec<TrajectoryPoint>, EngineError> {
    let mut sorted: Vec<&QualifierRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.day);
    let mut points = Vec::with_capacity(days.len());
    let mut visible: Vec<QualifierRecord> = Vec::new();
    let mut next = 0;
    for &day in days {
        while next < sorted.len() && sorted[next].day <= day {
            visible.push(sorted[next].clone());
            next += 1;
        }
        let outcome = attach(tree, &visible, day, spec)?.run_inner(spec, false)?;
        points.push(TrajectoryPoint { day, outcome });
    }
    Ok(points)
}

/// Builds the skeleton for a set of records.
pub fn tree_for_records(records: &[QualifierRecord]) -> Result<IcfTree, crate::taxonomy::TaxonomyError> {
    IcfTree::build(records.iter().map(|r| &r.code))
}

/// Key for a node in human-readable output.
pub fn node_label(tree: &IcfTree, id: NodeId) -> String {
    match &tree.node(id).key {
        NodeKey::Root => "root".to_string(),
        NodeKey::Code(code) => code.to_string(),
    }
}
