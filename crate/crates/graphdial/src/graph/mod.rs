//! Modality graph construction from raw annotations.
//!
//! Three builders share one topology type: spatial-relation graphs over image
//! regions, dependency graphs over question tokens, and coreference graphs
//! over dialog rounds. Topology is computed once during preprocessing and is
//! immutable afterwards; every builder appends a hub node connected to all
//! other nodes in both directions with the modality's hub edge type.

mod lexicon;
mod spatial;

pub use lexicon::{DependencyLexicon, DEPENDENCY_RELATIONS};
pub use spatial::{
    center_angle, classify_spatial_relation, iou, symmetric_partner, BoundingBox, SPATIAL_COVER,
    SPATIAL_INSIDE, SPATIAL_OVERLAP,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Default cap on image regions per instance.
pub const MAX_IMAGE_REGIONS: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Question,
    History,
}

impl Modality {
    /// Number of non-hub relation classes.
    pub fn relation_class_count(&self) -> u16 {
        match self {
            Modality::Image => 11,
            Modality::Question => 47,
            Modality::History => 1,
        }
    }

    /// Edge type id reserved for hub edges; also the edge-feature dimension.
    pub fn hub_type(&self) -> u16 {
        self.relation_class_count() + 1
    }

    /// One-hot edge feature width (relation classes plus the hub type).
    pub fn edge_dim(&self) -> usize {
        self.hub_type() as usize
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Question => write!(f, "question"),
            Modality::History => write!(f, "history"),
        }
    }
}

/// Directed typed edge `(src, dst, relation id)`.
pub type Edge = (usize, usize, u16);

/// A dependency arc from a parse: `head -> dependent` labeled with a
/// relation from the committed inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub head: usize,
    pub dependent: usize,
    pub relation: String,
}

/// A coreference arc: a word in `from_round` refers back to `to_round`.
/// Round 0 is the caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreferenceLink {
    pub from_round: usize,
    pub to_round: usize,
}

/// Shared topology object for all three modalities. `num_nodes` excludes the
/// hub; when `hub_present`, node index `num_nodes` is the hub.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    pub modality: Modality,
    pub num_nodes: usize,
    pub hub_present: bool,
    pub edges: Vec<Edge>,
}

impl Graph {
    fn new(modality: Modality, num_nodes: usize, mut edges: Vec<Edge>, hub: bool) -> Self {
        if hub {
            let h = num_nodes;
            let t = modality.hub_type();
            for i in 0..num_nodes {
                edges.push((h, i, t));
                edges.push((i, h, t));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Graph {
            modality,
            num_nodes,
            hub_present: hub,
            edges,
        }
    }

    /// Node index of the hub slot.
    pub fn hub_index(&self) -> Option<usize> {
        self.hub_present.then_some(self.num_nodes)
    }

    /// Total node count including the hub slot.
    pub fn total_nodes(&self) -> usize {
        self.num_nodes + usize::from(self.hub_present)
    }

    pub fn hub_type(&self) -> u16 {
        self.modality.hub_type()
    }

    /// Edges whose type is not the hub type.
    pub fn non_hub_edges(&self) -> impl Iterator<Item = &Edge> {
        let t = self.hub_type();
        self.edges.iter().filter(move |e| e.2 != t)
    }

    /// Structural invariants: indices in range, no self-loops, unique
    /// `(src, dst, type)` triples, and hub wiring when the hub is present.
    pub fn validate(&self) -> Result<()> {
        let total = self.total_nodes();
        let mut seen = std::collections::BTreeSet::new();
        let hub = self.hub_index();
        for &(s, d, t) in &self.edges {
            if s >= total || d >= total {
                return Err(Error::IndexOutOfRange {
                    context: "graph edge",
                    index: s.max(d),
                    limit: total,
                });
            }
            if s == d {
                return Err(Error::InvalidConfig(format!("self-loop at node {s}")));
            }
            if !seen.insert((s, d, t)) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate edge ({s}, {d}, {t})"
                )));
            }
            let touches_hub = hub.is_some_and(|h| s == h || d == h);
            if touches_hub != (t == self.hub_type()) {
                return Err(Error::InvalidConfig(format!(
                    "hub typing violated on edge ({s}, {d}, {t})"
                )));
            }
        }
        if let Some(h) = hub {
            for i in 0..self.num_nodes {
                let t = self.hub_type();
                if !seen.contains(&(h, i, t)) || !seen.contains(&(i, h, t)) {
                    return Err(Error::MissingHub("hub must connect to every node"));
                }
            }
        }
        Ok(())
    }
}

/// One edge per ordered pair of distinct regions, typed by the spatial
/// classifier, plus the hub.
pub fn build_image_graph(boxes: &[BoundingBox]) -> Result<Graph> {
    build_image_graph_with_max(boxes, MAX_IMAGE_REGIONS)
}

pub fn build_image_graph_with_max(boxes: &[BoundingBox], max_regions: usize) -> Result<Graph> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("image graph needs at least one box"));
    }
    if boxes.len() > max_regions {
        return Err(Error::TooManyRegions {
            got: boxes.len(),
            max: max_regions,
        });
    }
    let mut edges = Vec::with_capacity(boxes.len() * boxes.len());
    for (i, a) in boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            if i != j {
                edges.push((i, j, classify_spatial_relation(a, b)));
            }
        }
    }
    Ok(Graph::new(Modality::Image, boxes.len(), edges, true))
}

/// Directed `head -> dependent` edges typed by relation id, plus the hub.
pub fn build_question_graph(
    parse: &[DependencyEdge],
    num_tokens: usize,
    lexicon: &DependencyLexicon,
) -> Result<Graph> {
    if num_tokens == 0 {
        return Err(Error::EmptyInput("question graph needs at least one token"));
    }
    let mut edges = Vec::with_capacity(parse.len());
    for arc in parse {
        if arc.head >= num_tokens || arc.dependent >= num_tokens {
            return Err(Error::IndexOutOfRange {
                context: "dependency edge",
                index: arc.head.max(arc.dependent),
                limit: num_tokens,
            });
        }
        if arc.head == arc.dependent {
            return Err(Error::InvalidConfig(format!(
                "dependency self-loop at token {}",
                arc.head
            )));
        }
        edges.push((arc.head, arc.dependent, lexicon.id(&arc.relation)?));
    }
    Ok(Graph::new(Modality::Question, num_tokens, edges, true))
}

/// Caption node 0 linked to every later round in both directions, explicit
/// coreference links added bidirectionally, plus the hub. Duplicates collapse.
pub fn build_history_graph(links: &[CoreferenceLink], num_rounds: usize) -> Result<Graph> {
    if num_rounds == 0 {
        return Err(Error::EmptyInput("history graph needs at least the caption"));
    }
    let coref = 1u16;
    let mut edges = Vec::new();
    for r in 1..num_rounds {
        edges.push((0, r, coref));
        edges.push((r, 0, coref));
    }
    for link in links {
        if link.from_round >= num_rounds || link.to_round >= num_rounds {
            return Err(Error::IndexOutOfRange {
                context: "coreference link",
                index: link.from_round.max(link.to_round),
                limit: num_rounds,
            });
        }
        if link.to_round >= link.from_round {
            return Err(Error::InvalidConfig(format!(
                "coreference must point backwards: {} -> {}",
                link.from_round, link.to_round
            )));
        }
        edges.push((link.from_round, link.to_round, coref));
        edges.push((link.to_round, link.from_round, coref));
    }
    Ok(Graph::new(Modality::History, num_rounds, edges, true))
}

/// Frequencies of the non-hub relation classes across a single-modality corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationHistogram {
    pub modality: Modality,
    /// `counts[i]` holds the frequency of class id `i + 1`.
    pub counts: Vec<u64>,
}

impl RelationHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn graph_stats(corpus: &[Graph], modality: Modality) -> Result<RelationHistogram> {
    let mut counts = vec![0u64; modality.relation_class_count() as usize];
    for g in corpus {
        if g.modality != modality {
            return Err(Error::MixedModalities {
                expected: modality.to_string(),
                found: g.modality.to_string(),
            });
        }
        for &(_, _, t) in g.non_hub_edges() {
            counts[(t - 1) as usize] += 1;
        }
    }
    Ok(RelationHistogram { modality, counts })
}

/// Writes one JSON object per line.
pub fn write_graphs_jsonl<W: Write>(mut w: W, graphs: &[Graph]) -> Result<()> {
    for g in graphs {
        serde_json::to_writer(&mut w, g)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_graphs_jsonl<R: BufRead>(r: R) -> Result<Vec<Graph>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
