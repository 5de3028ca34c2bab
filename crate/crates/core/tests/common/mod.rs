//! Random tree fixtures and a brute-force recursive evaluator written
//! straight from the roll-up definition, sharing no code with the engine.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};

use icf_index::linkage::{QualifierRecord, SourceId};

#[derive(Debug, Clone, PartialEq)]
pub struct Rec {
    pub code: String,
    pub day: u32,
    pub value: f64,
    pub reliability: f64,
    pub source: String,
}

impl Rec {
    pub fn to_record(&self) -> QualifierRecord {
        QualifierRecord {
            person_id: "p".into(),
            day: self.day,
            source_id: SourceId(self.source.clone()),
            code: self.code.parse().expect("generated codes are valid"),
            value: self.value,
            reliability: self.reliability,
        }
    }
}

pub fn to_records(recs: &[Rec]) -> Vec<QualifierRecord> {
    recs.iter().map(Rec::to_record).collect()
}

/// Parent by digit count: 1 → letter, 3 → one digit, 4 → three, 5 → four.
/// The root is the empty string.
pub fn parent(code: &str) -> String {
    let keep = match code.len() - 1 {
        0 => 0,
        1 => 1,
        3 => 2,
        4 => 4,
        5 => 5,
        n => panic!("bad digit count {n} in {code}"),
    };
    code[..keep].to_string()
}

fn closure(codes: impl IntoIterator<Item = String>) -> BTreeSet<String> {
    let mut all = BTreeSet::from([String::new()]);
    for code in codes {
        let mut c = code;
        while !c.is_empty() {
            all.insert(c.clone());
            c = parent(&c);
        }
    }
    all
}

fn random_child(rng: &mut impl Rng, node: &str) -> Option<String> {
    let digit = |rng: &mut dyn RngCore| char::from(b'0' + (rng.next_u32() % 10) as u8);
    match node.len() {
        0 => Some(["b", "d", "e", "s"].choose(rng).unwrap().to_string()),
        1 => Some(format!("{node}{}", char::from(b'1' + (rng.random_range(0..9u8))))),
        2 => Some(format!("{node}{}{}", digit(rng), digit(rng))),
        4 | 5 => Some(format!("{node}{}", digit(rng))),
        _ => None,
    }
}

/// A random prefix-closed code set with at most `max_nodes` nodes including
/// the root, and up to `max_qualifiers` qualifiers on non-root nodes.
///
/// Sources come from a small pool so that one source often lands on several
/// siblings.
pub fn random_case(rng: &mut impl Rng, max_nodes: usize, max_qualifiers: usize, reference_day: u32) -> Vec<Rec> {
    let target = rng.random_range(2..=max_nodes);
    let mut nodes = BTreeSet::from([String::new()]);
    for _ in 0..200 {
        if nodes.len() >= target {
            break;
        }
        let list: Vec<&String> = nodes.iter().collect();
        let at = (*list.choose(rng).unwrap()).clone();
        if let Some(child) = random_child(rng, &at) {
            let grown = closure(nodes.iter().cloned().chain([child.clone()]));
            if grown.len() <= max_nodes {
                nodes = grown;
            }
        }
    }
    let codes: Vec<String> = nodes.into_iter().filter(|c| !c.is_empty()).collect();
    let n = rng.random_range(1..=max_qualifiers);
    let pool = rng.random_range(1..=6);
    (0..n)
        .map(|_| Rec {
            code: codes.choose(rng).unwrap().clone(),
            day: rng.random_range(0..=reference_day),
            value: if rng.random_bool(0.5) {
                f64::from(rng.random_range(0..=4u8))
            } else {
                rng.random_range(0.0..=4.0)
            },
            reliability: if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..=1.0) },
            source: format!("src{}", rng.random_range(0..pool)),
        })
        .collect()
}

/// `(x, α, r)` of a node.
pub type Triple = (f64, f64, f64);

pub struct Oracle<'a> {
    recs: &'a [Rec],
    nodes: BTreeSet<String>,
    reference_day: u32,
    gamma: f64,
    f: &'a dyn Fn(f64) -> f64,
    /// Sum of normalized weights of every computed node.
    pub weight_sums: Vec<f64>,
}

impl<'a> Oracle<'a> {
    pub fn new(recs: &'a [Rec], reference_day: u32, gamma: f64, f: &'a dyn Fn(f64) -> f64) -> Self {
        Self {
            recs,
            nodes: closure(recs.iter().map(|r| r.code.clone())),
            reference_day,
            gamma,
            f,
            weight_sums: Vec::new(),
        }
    }

    fn children(&self, node: &str) -> Vec<&String> {
        self.nodes.iter().filter(|c| !c.is_empty() && parent(c) == node).collect()
    }

    fn at<'s>(&'s self, node: &'s str) -> impl Iterator<Item = &'a Rec> + 's {
        self.recs.iter().filter(move |r| r.code == node)
    }

    fn alpha(&self, r: &Rec) -> f64 {
        self.gamma.powi((self.reference_day - r.day) as i32)
    }

    /// 1 / number of siblings (children of the same parent) holding the source.
    fn uniqueness(&self, r: &Rec) -> f64 {
        let siblings = self.children(&parent(&r.code));
        let z = siblings
            .iter()
            .filter(|c| self.at(c).any(|q| q.source == r.source))
            .count();
        1.0 / z as f64
    }

    pub fn eval(&mut self, node: &str) -> Option<Triple> {
        let children: Vec<String> = self.children(node).into_iter().cloned().collect();
        if children.is_empty() {
            return None;
        }
        // (value, α, r, u)
        let mut items: Vec<(f64, f64, f64, f64)> = Vec::new();
        for q in self.at(node) {
            items.push((q.value, self.alpha(q), q.reliability, 1.0));
        }
        for c in &children {
            if self.children(c).is_empty() {
                for q in self.at(c) {
                    items.push((q.value, self.alpha(q), q.reliability, self.uniqueness(q)));
                }
            } else if let Some((x, a, r)) = self.eval(c) {
                items.push((x, a, r, 1.0));
            }
        }
        let total: f64 = items.iter().map(|(_, a, r, u)| a * r * u).sum();
        if total == 0.0 {
            return None;
        }
        let mut mean = 0.0;
        let mut alpha = 0.0;
        let mut rel = 0.0;
        let mut sum = 0.0;
        for (v, a, r, u) in &items {
            let w = a * r * u / total;
            sum += w;
            mean += w * v;
            alpha += w * a;
            rel += w * r;
        }
        self.weight_sums.push(sum);
        Some(((self.f)(mean), alpha, rel))
    }

    pub fn root(&mut self) -> Option<Triple> {
        self.eval("")
    }
}

pub fn linear(x: f64) -> f64 {
    x
}

/// Distinct codes per parent, for fixtures.
pub fn children_map(recs: &[Rec]) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in closure(recs.iter().map(|r| r.code.clone())) {
        if !c.is_empty() {
            map.entry(parent(&c)).or_default().push(c);
        }
    }
    map
}
