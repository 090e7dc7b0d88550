//! Committed inventory of the 47 dependency relation labels used for
//! question graphs, mapped to stable ids 1..=47 in alphabetical order.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Universal Dependencies labels plus the English subtypes emitted by common
/// neural parsers. The set is fixed; unknown labels in parse files are
/// rejected rather than silently binned.
pub const DEPENDENCY_RELATIONS: [&str; 47] = [
    "acl",
    "acl:relcl",
    "advcl",
    "advmod",
    "amod",
    "appos",
    "aux",
    "aux:pass",
    "case",
    "cc",
    "cc:preconj",
    "ccomp",
    "compound",
    "compound:prt",
    "conj",
    "cop",
    "csubj",
    "csubj:pass",
    "dep",
    "det",
    "det:predet",
    "discourse",
    "expl",
    "fixed",
    "flat",
    "flat:foreign",
    "goeswith",
    "iobj",
    "list",
    "mark",
    "nmod",
    "nmod:npmod",
    "nmod:poss",
    "nmod:tmod",
    "nsubj",
    "nsubj:pass",
    "nummod",
    "obj",
    "obl",
    "obl:npmod",
    "obl:tmod",
    "orphan",
    "parataxis",
    "punct",
    "reparandum",
    "vocative",
    "xcomp",
];

/// Bidirectional map between relation labels and their 1-based ids.
#[derive(Debug, Clone)]
pub struct DependencyLexicon {
    ids: BTreeMap<String, u16>,
}

impl Default for DependencyLexicon {
    fn default() -> Self {
        let ids = DEPENDENCY_RELATIONS
            .iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), (i + 1) as u16))
            .collect();
        Self { ids }
    }
}

impl DependencyLexicon {
    pub fn id(&self, relation: &str) -> Result<u16> {
        self.ids
            .get(relation)
            .copied()
            .ok_or_else(|| Error::UnknownRelation(relation.to_string()))
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.ids
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
