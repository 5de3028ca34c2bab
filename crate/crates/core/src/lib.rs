//! Personal health index built on the ICF hierarchy.
//!
//! Heterogeneous measurements (questionnaires, pain scales, machine tests)
//! are linked to ICF codes as qualifiers on the 0–4 scale, attached to the
//! tree of available codes, and rolled up level by level into a single raw
//! value that is scaled to a 0–100 index. The crate also carries the cohort
//! model, a synthetic cohort generator and the correlation-based validation
//! protocol used to check the index against self-reported health.
//!
//! ```
//! use icf_index::engine::{attach, Scaling};
//! use icf_index::linkage::{apply_rules, RawAnswer, RuleSet};
//! use icf_index::taxonomy::IcfTree;
//! use icf_index::weighting::{Gamma, WeightingSpec};
//!
//! let answers = vec![
//!     RawAnswer { person_id: "p1".into(), day: 0, instrument: "pain".into(), item: "back".into(), value: 7.0 },
//!     RawAnswer { person_id: "p1".into(), day: 14, instrument: "pain".into(), item: "back".into(), value: 3.0 },
//! ];
//! let records = apply_rules(&answers, &RuleSet::bundled())?;
//! let tree = IcfTree::build(records.iter().map(|r| &r.code))?;
//! let spec = WeightingSpec::linear(Gamma::moderate());
//! let hi = attach(&tree, &records, 14, &spec)?.evaluate(&spec, Scaling::Theoretical)?;
//! assert_eq!(hi.value, 56);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod analysis;
pub mod cohort;
pub mod engine;
pub mod linkage;
pub mod pipeline;
pub mod taxonomy;
pub mod weighting;

pub use engine::{HealthIndex, HealthProfile, Scaling};
pub use linkage::{QualifierRecord, RawAnswer, RuleSet};
pub use taxonomy::{IcfCode, IcfTree};
pub use weighting::{Gamma, WeightingSpec};
