//! ICF code grammar and the tree of available codes.
//!
//! An ICF code is a component letter (`b`, `s`, `d`, `e`) followed by 0, 1,
//! 3, 4 or 5 digits. The digit count fixes the level in the hierarchy:
//!
//! | text     | level | name            |
//! |----------|-------|-----------------|
//! | (root)   | -1    | synthetic root  |
//! | `b`      | 0     | component       |
//! | `b2`     | 1     | chapter         |
//! | `b280`   | 2     | second level    |
//! | `b2801`  | 3     | third level     |
//! | `b28013` | 4     | fourth level    |
//!
//! The parent of a code is obtained by prefix truncation, so the tree is fully
//! determined by the set of codes that carry data. [`IcfTree`] holds exactly
//! those codes plus every ancestor up to the root.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Deepest level an ICF code can sit on.
pub const MAX_LEVEL: i8 = 4;
/// Level of the synthetic root node.
pub const ROOT_LEVEL: i8 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("malformed ICF code {text:?}: {reason}")]
    Malformed { text: String, reason: &'static str },
    #[error("cannot build a tree from an empty code set")]
    EmptyCodeSet,
}

/// The four classifiable ICF components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    /// Body functions.
    B,
    /// Activities and participation.
    D,
    /// Environmental factors (barriers only).
    E,
    /// Body structures.
    S,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::B, Component::D, Component::E, Component::S];

    pub fn letter(self) -> char {
        match self {
            Component::B => 'b',
            Component::D => 'd',
            Component::E => 'e',
            Component::S => 's',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'b' => Some(Component::B),
            'd' => Some(Component::D),
            'e' => Some(Component::E),
            's' => Some(Component::S),
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// A parsed ICF code such as `b28013`.
///
/// Ordering is alphabetical by code text, which is the per-level processing
/// order used during aggregation.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct IcfCode {
    text: String,
}

impl IcfCode {
    /// Parses a bare ICF code. Qualifier suffixes (`b280.1`, `e145+2`) are
    /// rejected; they belong in the record's value field.
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let malformed = |reason| TaxonomyError::Malformed {
            text: text.to_string(),
            reason,
        };
        let mut chars = text.chars();
        let first = chars.next().ok_or_else(|| malformed("empty code"))?;
        if Component::from_letter(first).is_none() {
            return Err(malformed("component letter must be one of b, s, d, e"));
        }
        let digits = chars.as_str();
        if let Some(bad) = digits.chars().find(|c| !c.is_ascii_digit()) {
            return Err(if bad == '.' || bad == '+' {
                malformed("qualifier suffixes are not part of a code")
            } else {
                malformed("code must be a letter followed by decimal digits")
            });
        }
        match digits.len() {
            0 | 1 | 3 | 4 | 5 => Ok(Self {
                text: text.to_string(),
            }),
            2 => Err(malformed("two-digit codes do not exist in the ICF")),
            _ => Err(malformed("codes have at most five digits")),
        }
    }

    pub fn component(&self) -> Component {
        // validated at construction
        Component::from_letter(self.text.as_bytes()[0] as char).expect("validated component")
    }

    pub fn digits(&self) -> &str {
        &self.text[1..]
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Hierarchy level: 0 for a bare component up to 4 for five digits.
    pub fn level(&self) -> i8 {
        match self.digits().len() {
            0 => 0,
            1 => 1,
            3 => 2,
            4 => 3,
            5 => 4,
            _ => unreachable!("digit count validated at construction"),
        }
    }

    pub fn component_code(component: Component) -> Self {
        Self {
            text: component.letter().to_string(),
        }
    }

    /// The parent node under prefix truncation; components hang off the root.
    pub fn parent(&self) -> NodeKey {
        let keep = match self.digits().len() {
            0 => return NodeKey::Root,
            1 => 0,
            3 => 1,
            4 => 3,
            5 => 4,
            _ => unreachable!("digit count validated at construction"),
        };
        NodeKey::Code(Self {
            text: self.text[..1 + keep].to_string(),
        })
    }

    /// All ancestors from the parent upward, ending with the root.
    pub fn ancestors(&self) -> impl Iterator<Item = NodeKey> {
        std::iter::successors(Some(self.parent()), |key| match key {
            NodeKey::Root => None,
            NodeKey::Code(code) => Some(code.parent()),
        })
    }
}

/// Prefix truncation on a free-standing code.
pub fn parent_of(code: &IcfCode) -> NodeKey {
    code.parent()
}

/// Parses a code; equivalent to [`IcfCode::parse`].
pub fn parse_code(text: &str) -> Result<IcfCode, TaxonomyError> {
    IcfCode::parse(text)
}

impl PartialOrd for IcfCode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for IcfCode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.text.cmp(&other.text)
    }
}

impl fmt::Display for IcfCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for IcfCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IcfCode({})", self.text)
    }
}

impl FromStr for IcfCode {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for IcfCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for IcfCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Self::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Identifies a node: the synthetic root or an ICF code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKey {
    Root,
    Code(IcfCode),
}

impl NodeKey {
    pub fn level(&self) -> i8 {
        match self {
            NodeKey::Root => ROOT_LEVEL,
            NodeKey::Code(code) => code.level(),
        }
    }

    pub fn code(&self) -> Option<&IcfCode> {
        match self {
            NodeKey::Root => None,
            NodeKey::Code(code) => Some(code),
        }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKey::Root => f.write_str("root"),
            NodeKey::Code(code) => code.fmt(f),
        }
    }
}

impl From<IcfCode> for NodeKey {
    fn from(code: IcfCode) -> Self {
        NodeKey::Code(code)
    }
}

/// Index of a node inside an [`IcfTree`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub key: NodeKey,
    pub parent: Option<NodeId>,
    /// Children in alphabetical order.
    pub children: Vec<NodeId>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn level(&self) -> i8 {
        self.key.level()
    }
}

/// The hierarchy of available codes for one evaluation.
///
/// Node 0 is always the root. Nodes are stored in level order with
/// alphabetical order inside each level, so iterating a level yields the
/// running `level.index` numbering.
#[derive(Debug, Clone)]
pub struct IcfTree {
    nodes: Vec<TreeNode>,
    index: BTreeMap<NodeKey, NodeId>,
    /// `levels[l + 1]` lists the node ids on level `l`.
    levels: Vec<Vec<NodeId>>,
}

impl IcfTree {
    /// Builds the prefix closure of `codes` plus the root.
    pub fn build<'a, I>(codes: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = &'a IcfCode>,
    {
        let mut keys: BTreeSet<NodeKey> = BTreeSet::new();
        for code in codes {
            if keys.insert(NodeKey::Code(code.clone())) {
                keys.extend(code.ancestors());
            }
        }
        if keys.is_empty() {
            return Err(TaxonomyError::EmptyCodeSet);
        }

        // Level-major, alphabetical-minor order.
        let mut ordered: Vec<NodeKey> = keys.into_iter().collect();
        ordered.sort_by(|a, b| a.level().cmp(&b.level()).then_with(|| a.cmp(b)));

        let index: BTreeMap<NodeKey, NodeId> = ordered
            .iter()
            .enumerate()
            .map(|(id, key)| (key.clone(), id))
            .collect();

        let mut nodes: Vec<TreeNode> = ordered
            .into_iter()
            .map(|key| TreeNode {
                key,
                parent: None,
                children: Vec::new(),
            })
            .collect();
        let mut levels = vec![Vec::new(); (MAX_LEVEL - ROOT_LEVEL + 1) as usize];
        for id in 0..nodes.len() {
            levels[(nodes[id].level() - ROOT_LEVEL) as usize].push(id);
            if let NodeKey::Code(code) = &nodes[id].key {
                let parent = index[&code.parent()];
                nodes[id].parent = Some(parent);
                // ids ascend alphabetically within a level, so pushes stay sorted
                nodes[parent].children.push(id);
            }
        }
        while levels.last().is_some_and(Vec::is_empty) {
            levels.pop();
        }

        Ok(Self {
            nodes,
            index,
            levels,
        })
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn id_of(&self, key: &NodeKey) -> Option<NodeId> {
        self.index.get(key).copied()
    }

    pub fn id_of_code(&self, code: &IcfCode) -> Option<NodeId> {
        self.index.get(&NodeKey::Code(code.clone())).copied()
    }

    pub fn contains(&self, code: &IcfCode) -> bool {
        self.id_of_code(code).is_some()
    }

    /// Deepest level holding any node (−1 for a root-only tree, which cannot
    /// be built from a nonempty code set).
    pub fn deepest_level(&self) -> i8 {
        self.levels.len() as i8 + ROOT_LEVEL - 1
    }

    /// Node ids on `level`, alphabetical.
    pub fn level(&self, level: i8) -> &[NodeId] {
        let slot = (level - ROOT_LEVEL) as usize;
        self.levels.get(slot).map_or(&[], Vec::as_slice)
    }

    /// All codes in the tree (root excluded), level-major.
    pub fn codes(&self) -> impl Iterator<Item = &IcfCode> {
        self.nodes.iter().filter_map(|node| node.key.code())
    }
}

/// Builds the tree for a code set; see [`IcfTree::build`].
pub fn build_tree<'a, I>(codes: I) -> Result<IcfTree, TaxonomyError>
where
    I: IntoIterator<Item = &'a IcfCode>,
{
    IcfTree::build(codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(text: &str) -> IcfCode {
        IcfCode::parse(text).unwrap()
    }

    #[test]
    fn parses_levels() {
        let b280 = code("b280");
        assert_eq!(b280.component(), Component::B);
        assert_eq!(b280.digits(), "280");
        assert_eq!(b280.level(), 2);
        assert_eq!(code("b").level(), 0);
        assert_eq!(code("d5").level(), 1);
        assert_eq!(code("b1528").level(), 3);
        let back = code("b28013");
        assert_eq!(back.level(), 4);
        assert_eq!(back.parent(), NodeKey::Code(code("b2801")));
    }

    #[test]
    fn rejects_bad_codes() {
        for bad in ["", "x280", "B280", "b28", "b280131", "b280.1", "e145+2", "b2 80", "b28a"] {
            let err = IcfCode::parse(bad).unwrap_err();
            assert!(err.to_string().contains(&format!("{bad:?}")), "{err}");
        }
    }

    #[test]
    fn parent_chain() {
        assert_eq!(parent_of(&code("b2801")), NodeKey::Code(code("b280")));
        assert_eq!(parent_of(&code("b280")), NodeKey::Code(code("b2")));
        assert_eq!(parent_of(&code("b2")), NodeKey::Code(code("b")));
        assert_eq!(parent_of(&code("e")), NodeKey::Root);
        let chain: Vec<String> = code("s73021").ancestors().map(|k| k.to_string()).collect();
        assert_eq!(chain, ["s7302", "s730", "s7", "s", "root"]);
    }

    #[test]
    fn tree_prefix_closure() {
        let codes = [code("b28010"), code("b28013")];
        let tree = build_tree(&codes).unwrap();
        let names: Vec<String> = tree.nodes().iter().map(|n| n.key.to_string()).collect();
        assert_eq!(names, ["root", "b", "b2", "b280", "b2801", "b28010", "b28013"]);
        assert_eq!(tree.deepest_level(), 4);
        let b2801 = tree.id_of_code(&code("b2801")).unwrap();
        let kids: Vec<String> = tree
            .node(b2801)
            .children
            .iter()
            .map(|&c| tree.node(c).key.to_string())
            .collect();
        assert_eq!(kids, ["b28010", "b28013"]);
    }

    #[test]
    fn tree_chain_and_empty() {
        let tree = build_tree(&[code("b780")]).unwrap();
        let names: Vec<String> = tree.nodes().iter().map(|n| n.key.to_string()).collect();
        assert_eq!(names, ["root", "b", "b7", "b780"]);
        assert_eq!(build_tree(&[]).unwrap_err(), TaxonomyError::EmptyCodeSet);
    }

    #[test]
    fn levels_are_alphabetical() {
        let codes: Vec<IcfCode> = ["d450", "b780", "s7", "b280", "d4103", "e"]
            .iter()
            .map(|t| code(t))
            .collect();
        let tree = build_tree(&codes).unwrap();
        let level0: Vec<String> = tree.level(0).iter().map(|&id| tree.node(id).key.to_string()).collect();
        assert_eq!(level0, ["b", "d", "e", "s"]);
        let level2: Vec<String> = tree.level(2).iter().map(|&id| tree.node(id).key.to_string()).collect();
        assert_eq!(level2, ["b280", "b780", "d410", "d450"]);
        assert_eq!(tree.level(-1), &[0]);
        assert!(tree.level(4).is_empty());
    }
}
