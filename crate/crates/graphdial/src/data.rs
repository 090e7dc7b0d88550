//! Dialog instances, synthetic data generation, and dataset ingestion.
//!
//! The synthetic generator emits dialogs from a small template grammar
//! together with ground-truth dependency parses and coreference links, so the
//! graph builders have exact inputs. Region features are drawn from
//! per-(class, color) Gaussians with the box center written into the first
//! two dimensions, which keeps count/color/position questions answerable.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::ModalityGraphs;
use crate::graph::{
    build_history_graph, build_image_graph_with_max, build_question_graph, BoundingBox,
    CoreferenceLink, DependencyEdge, DependencyLexicon, Graph,
};
use crate::model::{tokenize_and_layout, ModelSpec, TokenLayout};

/// One question turn with its 100-way (configurable) candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogRound {
    pub question: String,
    pub answer: String,
    pub candidates: Vec<String>,
    pub gt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_relevance: Option<Vec<f64>>,
    /// Dependency arcs over the question tokens (parser output or fallback).
    #[serde(default)]
    pub question_parse: Vec<DependencyEdge>,
}

/// One image with its caption, rounds, regions, and coreference links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogInstance {
    pub id: String,
    pub caption: String,
    /// `N_i x region_feat_dim` detector features (artifact inputs).
    pub region_feats: Vec<Vec<f64>>,
    /// `[x1, y1, x2, y2]` per region.
    pub boxes: Vec<[f64; 4]>,
    pub rounds: Vec<DialogRound>,
    /// Links `(from_round, to_round)` with round 0 = caption.
    #[serde(default)]
    pub coref_links: Vec<CoreferenceLink>,
}

pub const MAX_ROUNDS: usize = 10;

impl DialogInstance {
    pub fn validate(&self) -> Result<()> {
        if self.rounds.len() > MAX_ROUNDS {
            return Err(Error::Dataset(format!(
                "instance {}: {} rounds exceed the maximum {MAX_ROUNDS}",
                self.id,
                self.rounds.len()
            )));
        }
        for (i, round) in self.rounds.iter().enumerate() {
            let gt = round
                .candidates
                .get(round.gt_index)
                .ok_or_else(|| Error::Dataset(format!("instance {}: gt_index out of range", self.id)))?;
            if gt != &round.answer {
                return Err(Error::Dataset(format!(
                    "instance {} round {}: candidate list does not contain the answer at gt_index",
                    self.id,
                    i + 1
                )));
            }
        }
        let feat_widths: std::collections::BTreeSet<usize> =
            self.region_feats.iter().map(Vec::len).collect();
        if feat_widths.len() > 1 {
            return Err(Error::Dataset(format!(
                "instance {}: ragged region features",
                self.id
            )));
        }
        if self.region_feats.len() != self.boxes.len() {
            return Err(Error::Dataset(format!(
                "instance {}: {} feature rows vs {} boxes",
                self.id,
                self.region_feats.len(),
                self.boxes.len()
            )));
        }
        Ok(())
    }

    pub fn has_regions(&self) -> bool {
        !self.region_feats.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<DialogInstance>,
}

impl Dataset {
    /// All texts, for vocabulary construction.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().flat_map(|inst| {
            std::iter::once(inst.caption.as_str()).chain(inst.rounds.iter().flat_map(|r| {
                std::iter::once(r.question.as_str())
                    .chain(std::iter::once(r.answer.as_str()))
                    .chain(r.candidates.iter().map(String::as_str))
            }))
        })
    }

    pub fn save_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut w, inst)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut instances = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let inst: DialogInstance = serde_json::from_str(&line)?;
            inst.validate()?;
            instances.push(inst);
        }
        Ok(Dataset { instances })
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.save_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::load_jsonl(std::io::BufReader::new(f))
    }
}

/// An instance with its immutable preprocessed topology and tensors.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub instance: DialogInstance,
    pub image_graph: Graph,
    /// One question graph per round.
    pub question_graphs: Vec<Graph>,
    pub region_feats: Array2<f64>,
    /// `[x1, y1, x2, y2, area]` per region.
    pub region_boxes: Array2<f64>,
}

impl PreparedInstance {
    pub fn prepare(
        instance: DialogInstance,
        lexicon: &DependencyLexicon,
        max_regions: usize,
    ) -> Result<Self> {
        instance.validate()?;
        if !instance.has_regions() {
            return Err(Error::Dataset(format!(
                "instance {}: no region features (sidecar missing?); text-only instances cannot train",
                instance.id
            )));
        }
        let boxes: Vec<BoundingBox> = instance
            .boxes
            .iter()
            .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
            .collect::<Result<_>>()?;
        let image_graph = build_image_graph_with_max(&boxes, max_regions)?;

        let mut question_graphs = Vec::with_capacity(instance.rounds.len());
        for round in &instance.rounds {
            let n_tokens = round.question.split_whitespace().count();
            question_graphs.push(build_question_graph(&round.question_parse, n_tokens, lexicon)?);
        }

        let n = boxes.len();
        let width = instance.region_feats[0].len();
        let mut region_feats = Array2::zeros((n, width));
        for (i, row) in instance.region_feats.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                region_feats[[i, j]] = v;
            }
        }
        let mut region_boxes = Array2::zeros((n, 5));
        for (i, b) in boxes.iter().enumerate() {
            region_boxes[[i, 0]] = b.x1;
            region_boxes[[i, 1]] = b.y1;
            region_boxes[[i, 2]] = b.x2;
            region_boxes[[i, 3]] = b.y2;
            region_boxes[[i, 4]] = b.area();
        }

        Ok(PreparedInstance {
            instance,
            image_graph,
            question_graphs,
            region_feats,
            region_boxes,
        })
    }

    /// History graph for round `t`, restricted to the rounds the token window
    /// kept. Node 0 is the caption; node `i + 1` is `kept_rounds[i]`.
    pub fn history_graph(&self, t: usize, kept_rounds: &[usize]) -> Result<Graph> {
        let mut node_of = BTreeMap::new();
        node_of.insert(0usize, 0usize);
        for (i, &r) in kept_rounds.iter().enumerate() {
            node_of.insert(r, i + 1);
        }
        let links: Vec<CoreferenceLink> = self
            .instance
            .coref_links
            .iter()
            .filter(|l| l.from_round < t)
            .filter_map(|l| {
                let from = *node_of.get(&l.from_round)?;
                let to = *node_of.get(&l.to_round)?;
                Some(CoreferenceLink {
                    from_round: from,
                    to_round: to,
                })
            })
            .collect();
        build_history_graph(&links, kept_rounds.len() + 1)
    }
}

/// Layout plus graphs for one `(round, candidate)` forward pass.
#[derive(Debug, Clone)]
pub struct CandidateEncoding {
    pub layout: TokenLayout,
    pub graphs: ModalityGraphs,
}

/// Tokenizes one candidate continuation and assembles the round's graphs.
/// `t` is 1-based.
pub fn encode_candidate(
    spec: &ModelSpec,
    prepared: &PreparedInstance,
    t: usize,
    candidate_idx: usize,
) -> Result<CandidateEncoding> {
    let inst = &prepared.instance;
    if t == 0 || t > inst.rounds.len() {
        return Err(Error::IndexOutOfRange {
            context: "round",
            index: t,
            limit: inst.rounds.len(),
        });
    }
    let round = &inst.rounds[t - 1];
    let candidate = round.candidates.get(candidate_idx).ok_or(Error::IndexOutOfRange {
        context: "candidate",
        index: candidate_idx,
        limit: round.candidates.len(),
    })?;
    let completed: Vec<(String, String)> = inst.rounds[..t - 1]
        .iter()
        .map(|r| (r.question.clone(), r.answer.clone()))
        .collect();
    let layout = tokenize_and_layout(
        &spec.vocab,
        &inst.caption,
        &completed,
        &round.question,
        candidate,
        prepared.region_feats.nrows(),
        spec.config.max_text_tokens,
    )?;
    let history = prepared.history_graph(t, &layout.kept_rounds)?;
    Ok(CandidateEncoding {
        layout,
        graphs: ModalityGraphs {
            image: prepared.image_graph.clone(),
            question: prepared.question_graphs[t - 1].clone(),
            history,
        },
    })
}

/// A dataset with all preprocessing done: graphs built, tensors assembled.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub instances: Vec<PreparedInstance>,
    /// Every `(instance index, 1-based round)` pair.
    pub items: Vec<(usize, usize)>,
}

pub fn prepare_dataset(dataset: Dataset, spec: &ModelSpec) -> Result<PreparedDataset> {
    let lexicon = DependencyLexicon::default();
    let max_regions = spec.config.max_image_regions - 1;
    let mut instances = Vec::with_capacity(dataset.instances.len());
    let mut items = Vec::new();
    for (i, inst) in dataset.instances.into_iter().enumerate() {
        let prepared = PreparedInstance::prepare(inst, &lexicon, max_regions)?;
        for t in 1..=prepared.instance.rounds.len() {
            items.push((i, t));
        }
        instances.push(prepared);
    }
    Ok(PreparedDataset { instances, items })
}

// ---------------------------------------------------------------------------
// Synthetic template grammar
// ---------------------------------------------------------------------------

const CLASSES: [&str; 6] = ["ball", "box", "tree", "cat", "dog", "star"];
const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
const COUNTS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];
const POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];
const YESNO: [&str; 2] = ["yes", "no"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dialogs: usize,
    pub rounds: usize,
    pub candidates: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub feat_dim: usize,
    pub seed: u64,
    /// Fraction of rounds that carry dense relevance annotations.
    pub dense_fraction: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dialogs: 8,
            rounds: 3,
            candidates: 6,
            min_regions: 2,
            max_regions: 5,
            feat_dim: 8,
            seed: 0,
            dense_fraction: 0.5,
        }
    }
}

struct SceneObject {
    class: usize,
    color: usize,
    bx: BoundingBox,
}

fn dep(head: usize, dependent: usize, relation: &str) -> DependencyEdge {
    DependencyEdge {
        head,
        dependent,
        relation: relation.to_string(),
    }
}

/// Feature-space mean for a (class, color) pair, derived only from the pair.
fn class_color_mean(feat_dim: usize, class: usize, color: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + (class * 16 + color) as u64);
    (0..feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn sample_scene(rng: &mut ChaCha8Rng, cfg: &ToyConfig) -> Vec<SceneObject> {
    let n = rng.gen_range(cfg.min_regions..=cfg.max_regions);
    (0..n)
        .map(|_| {
            let class = rng.gen_range(0..CLASSES.len());
            let color = rng.gen_range(0..COLORS.len());
            let x1 = rng.gen_range(0.0..0.7);
            let y1 = rng.gen_range(0.0..0.7);
            let w = rng.gen_range(0.1..0.3);
            let h = rng.gen_range(0.1..0.3);
            SceneObject {
                class,
                color,
                bx: BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
            }
        })
        .collect()
}

fn object_features(rng: &mut ChaCha8Rng, cfg: &ToyConfig, obj: &SceneObject) -> Vec<f64> {
    let mut f = class_color_mean(cfg.feat_dim, obj.class, obj.color);
    for v in f.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    let (cx, cy) = obj.bx.center();
    if cfg.feat_dim >= 2 {
        f[0] = cx;
        f[1] = cy;
    }
    f
}

/// A generated question with its answer, parse, and answer-category pool.
struct ToyQuestion {
    question: String,
    answer: String,
    parse: Vec<DependencyEdge>,
    pool: &'static [&'static str],
    mentions_class: Option<usize>,
    coref_to: Option<usize>,
}

fn position_word(bx: &BoundingBox) -> &'static str {
    let (cx, cy) = bx.center();
    if (cx - 0.5).abs() >= (cy - 0.5).abs() {
        if cx < 0.5 {
            "left"
        } else {
            "right"
        }
    } else if cy < 0.5 {
        "top"
    } else {
        "bottom"
    }
}

fn gen_question(
    rng: &mut ChaCha8Rng,
    scene: &[SceneObject],
    t: usize,
    last_mention: Option<(usize, usize)>,
) -> ToyQuestion {
    let present: Vec<usize> = {
        let mut seen = std::collections::BTreeSet::new();
        scene.iter().map(|o| o.class).filter(|&c| seen.insert(c)).collect()
    };
    let template = if last_mention.is_some() && t >= 2 && rng.gen_bool(0.25) {
        4
    } else {
        rng.gen_range(0..4)
    };
    match template {
        0 => {
            // how many <class> are there
            let class = rng.gen_range(0..CLASSES.len());
            let count = scene.iter().filter(|o| o.class == class).count();
            ToyQuestion {
                question: format!("how many {} are there", CLASSES[class]),
                answer: COUNTS[count.min(COUNTS.len() - 1)].to_string(),
                parse: vec![
                    dep(1, 0, "advmod"),
                    dep(2, 1, "amod"),
                    dep(3, 2, "nsubj"),
                    dep(3, 4, "expl"),
                ],
                pool: &COUNTS,
                mentions_class: Some(class),
                coref_to: None,
            }
        }
        1 => {
            // what color is the <class>
            let class = present[rng.gen_range(0..present.len())];
            let color = scene.iter().find(|o| o.class == class).unwrap().color;
            ToyQuestion {
                question: format!("what color is the {}", CLASSES[class]),
                answer: COLORS[color].to_string(),
                parse: vec![
                    dep(1, 0, "det"),
                    dep(1, 2, "cop"),
                    dep(4, 3, "det"),
                    dep(1, 4, "nsubj"),
                ],
                pool: &COLORS,
                mentions_class: Some(class),
                coref_to: None,
            }
        }
        2 => {
            // is there a <color> <class>
            let class = rng.gen_range(0..CLASSES.len());
            let color = rng.gen_range(0..COLORS.len());
            let exists = scene.iter().any(|o| o.class == class && o.color == color);
            ToyQuestion {
                question: format!("is there a {} {}", COLORS[color], CLASSES[class]),
                answer: YESNO[usize::from(!exists)].to_string(),
                parse: vec![
                    dep(0, 1, "expl"),
                    dep(4, 2, "det"),
                    dep(4, 3, "amod"),
                    dep(0, 4, "nsubj"),
                ],
                pool: &YESNO,
                mentions_class: Some(class),
                coref_to: None,
            }
        }
        3 => {
            // where is the <class>
            let class = present[rng.gen_range(0..present.len())];
            let obj = scene.iter().find(|o| o.class == class).unwrap();
            ToyQuestion {
                question: format!("where is the {}", CLASSES[class]),
                answer: position_word(&obj.bx).to_string(),
                parse: vec![dep(1, 0, "advmod"), dep(3, 2, "det"), dep(1, 3, "nsubj")],
                pool: &POSITIONS,
                mentions_class: Some(class),
                coref_to: None,
            }
        }
        _ => {
            // what color is it  (coreference to an earlier mention)
            let (round, class) = last_mention.unwrap();
            let color = scene
                .iter()
                .find(|o| o.class == class)
                .map(|o| o.color)
                .unwrap_or(0);
            ToyQuestion {
                question: "what color is it".to_string(),
                answer: COLORS[color].to_string(),
                parse: vec![dep(1, 0, "det"), dep(1, 2, "cop"), dep(1, 3, "nsubj")],
                pool: &COLORS,
                mentions_class: Some(class),
                coref_to: Some(round),
            }
        }
    }
}

fn build_candidates(
    rng: &mut ChaCha8Rng,
    answer: &str,
    pool: &[&str],
    n: usize,
) -> (Vec<String>, usize, Vec<bool>) {
    let mut all: Vec<&str> = Vec::new();
    all.push(answer);
    for &p in pool {
        if p != answer {
            all.push(p);
        }
    }
    for filler in COUNTS.iter().chain(&COLORS).chain(&POSITIONS).chain(&YESNO) {
        if all.len() >= n {
            break;
        }
        if !all.contains(filler) {
            all.push(filler);
        }
    }
    all.truncate(n);
    // Fisher-Yates with the shared rng keeps generation deterministic
    for i in (1..all.len()).rev() {
        let j = rng.gen_range(0..=i);
        all.swap(i, j);
    }
    let gt_index = all.iter().position(|&c| c == answer).unwrap();
    let same_pool: Vec<bool> = all.iter().map(|c| pool.contains(c)).collect();
    (all.into_iter().map(String::from).collect(), gt_index, same_pool)
}

/// Deterministic synthetic dataset from the template grammar.
pub fn generate_toy_dataset(cfg: &ToyConfig) -> Dataset {
    assert!(cfg.dialogs >= 1 && cfg.rounds >= 1 && cfg.candidates >= 2);
    assert!(cfg.rounds <= MAX_ROUNDS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.dialogs);
    for d in 0..cfg.dialogs {
        let scene = sample_scene(&mut rng, cfg);
        let caption = scene
            .iter()
            .map(|o| format!("a {} {}", COLORS[o.color], CLASSES[o.class]))
            .collect::<Vec<_>>()
            .join(" ");
        let region_feats: Vec<Vec<f64>> = scene
            .iter()
            .map(|o| object_features(&mut rng, cfg, o))
            .collect();
        let boxes: Vec<[f64; 4]> = scene
            .iter()
            .map(|o| [o.bx.x1, o.bx.y1, o.bx.x2, o.bx.y2])
            .collect();

        let mut rounds = Vec::with_capacity(cfg.rounds);
        let mut coref_links = Vec::new();
        let mut last_mention: Option<(usize, usize)> = None;
        for t in 1..=cfg.rounds {
            let q = gen_question(&mut rng, &scene, t, last_mention);
            if let Some(to_round) = q.coref_to {
                coref_links.push(CoreferenceLink {
                    from_round: t,
                    to_round,
                });
            }
            if let Some(class) = q.mentions_class {
                last_mention = Some((t, class));
            }
            let (candidates, gt_index, same_pool) =
                build_candidates(&mut rng, &q.answer, q.pool, cfg.candidates);
            let dense_relevance = if rng.gen_bool(cfg.dense_fraction) {
                Some(
                    candidates
                        .iter()
                        .enumerate()
                        .map(|(i, _)| {
                            if i == gt_index {
                                1.0
                            } else if same_pool[i] {
                                0.3
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
            } else {
                None
            };
            rounds.push(DialogRound {
                question: q.question,
                answer: q.answer,
                candidates,
                gt_index,
                dense_relevance,
                question_parse: q.parse,
            });
        }
        instances.push(DialogInstance {
            id: format!("toy-{d}"),
            caption,
            region_feats,
            boxes,
            rounds,
            coref_links,
        });
    }
    Dataset { instances }
}

// ---------------------------------------------------------------------------
// Rule-based fallbacks for missing parser/resolver outputs
// ---------------------------------------------------------------------------

/// Left-to-right chain parse: token `i` depends on token `i - 1`.
pub fn fallback_parse(num_tokens: usize) -> Vec<DependencyEdge> {
    (1..num_tokens).map(|i| dep(i - 1, i, "dep")).collect()
}

const PRONOUNS: [&str; 8] = ["it", "they", "them", "he", "she", "this", "that", "those"];

/// Links round `t` to round `t - 1` whenever its question contains a pronoun.
pub fn fallback_corefs(questions: &[&str]) -> Vec<CoreferenceLink> {
    questions
        .iter()
        .enumerate()
        .filter(|(_, q)| {
            q.split_whitespace()
                .any(|w| PRONOUNS.contains(&w.to_lowercase().as_str()))
        })
        .map(|(i, _)| CoreferenceLink {
            from_round: i + 1,
            to_round: i,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// VisDial-schema ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct VisDialFile {
    #[serde(default)]
    version: Option<String>,
    #[serde(default)]
    split: Option<String>,
    data: VisDialData,
}

#[derive(Debug, Serialize, Deserialize)]
struct VisDialData {
    dialogs: Vec<VisDialDialog>,
    questions: Vec<String>,
    answers: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VisDialDialog {
    image_id: u64,
    caption: String,
    dialog: Vec<VisDialTurn>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VisDialTurn {
    question: usize,
    answer: usize,
    answer_options: Vec<usize>,
    gt_index: usize,
}

/// Dense-annotation record, one per annotated round.
#[derive(Debug, Serialize, Deserialize)]
pub struct DenseEntry {
    pub image_id: u64,
    pub round_id: usize,
    pub gt_relevance: Vec<f64>,
}

/// Sidecar region features for one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub features: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

/// Loads a VisDial-layout JSON file, de-indexing the question/answer tables.
/// Region features come from an optional sidecar; without it the instances
/// are loadable for text-only inspection but will be rejected for training.
/// Missing parses and coreference links fall back to the rule-based forms.
pub fn load_visdial_json(
    path: &Path,
    features_path: Option<&Path>,
    dense_path: Option<&Path>,
) -> Result<Dataset> {
    let file: VisDialFile = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(path)?,
    ))?;
    let features: BTreeMap<String, FeatureEntry> = match features_path {
        Some(p) => serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(p)?))?,
        None => BTreeMap::new(),
    };
    let dense: Vec<DenseEntry> = match dense_path {
        Some(p) => serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(p)?))?,
        None => Vec::new(),
    };
    let mut dense_by_image: BTreeMap<u64, Vec<&DenseEntry>> = BTreeMap::new();
    for e in &dense {
        dense_by_image.entry(e.image_id).or_default().push(e);
    }

    let mut instances = Vec::with_capacity(file.data.dialogs.len());
    for d in &file.data.dialogs {
        let get_q = |i: usize| -> Result<&String> {
            file.data
                .questions
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("question index {i} out of range")))
        };
        let get_a = |i: usize| -> Result<&String> {
            file.data
                .answers
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("answer index {i} out of range")))
        };

        let mut rounds = Vec::with_capacity(d.dialog.len());
        let mut question_texts = Vec::new();
        for (ti, turn) in d.dialog.iter().enumerate() {
            let question = get_q(turn.question)?.clone();
            let answer = get_a(turn.answer)?.clone();
            let candidates: Vec<String> = turn
                .answer_options
                .iter()
                .map(|&i| get_a(i).cloned())
                .collect::<Result<_>>()?;
            let dense_relevance = dense_by_image
                .get(&d.image_id)
                .and_then(|entries| entries.iter().find(|e| e.round_id == ti + 1))
                .map(|e| e.gt_relevance.clone());
            let n_tokens = question.split_whitespace().count();
            question_texts.push(question.clone());
            rounds.push(DialogRound {
                question,
                answer,
                candidates,
                gt_index: turn.gt_index,
                dense_relevance,
                question_parse: fallback_parse(n_tokens),
            });
        }
        let refs: Vec<&str> = question_texts.iter().map(String::as_str).collect();
        let coref_links = fallback_corefs(&refs);

        let (region_feats, boxes) = match features.get(&d.image_id.to_string()) {
            Some(entry) => {
                let (sx, sy) = match (entry.width, entry.height) {
                    (Some(w), Some(h)) if w > 0.0 && h > 0.0 => (w, h),
                    _ => (1.0, 1.0),
                };
                let boxes = entry
                    .boxes
                    .iter()
                    .map(|b| [b[0] / sx, b[1] / sy, b[2] / sx, b[3] / sy])
                    .collect();
                (entry.features.clone(), boxes)
            }
            None => (Vec::new(), Vec::new()),
        };

        let inst = DialogInstance {
            id: d.image_id.to_string(),
            caption: d.caption.clone(),
            region_feats,
            boxes,
            rounds,
            coref_links,
        };
        inst.validate()?;
        instances.push(inst);
    }
    Ok(Dataset { instances })
}

/// Re-exports instances in the VisDial layout with fresh index tables.
pub fn export_visdial_json(dataset: &Dataset) -> serde_json::Value {
    let mut questions: Vec<String> = Vec::new();
    let mut answers: Vec<String> = Vec::new();
    let mut q_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut a_index: BTreeMap<String, usize> = BTreeMap::new();
    let intern = |table: &mut Vec<String>, index: &mut BTreeMap<String, usize>, s: &str| {
        *index.entry(s.to_string()).or_insert_with(|| {
            table.push(s.to_string());
            table.len() - 1
        })
    };

    let dialogs: Vec<VisDialDialog> = dataset
        .instances
        .iter()
        .map(|inst| VisDialDialog {
            image_id: inst.id.trim_start_matches("toy-").parse().unwrap_or(0),
            caption: inst.caption.clone(),
            dialog: inst
                .rounds
                .iter()
                .map(|r| VisDialTurn {
                    question: intern(&mut questions, &mut q_index, &r.question),
                    answer: intern(&mut answers, &mut a_index, &r.answer),
                    answer_options: r
                        .candidates
                        .iter()
                        .map(|c| intern(&mut answers, &mut a_index, c))
                        .collect(),
                    gt_index: r.gt_index,
                })
                .collect(),
        })
        .collect();

    serde_json::to_value(VisDialFile {
        version: Some("1.0".into()),
        split: Some("export".into()),
        data: VisDialData {
            dialogs,
            questions,
            answers,
        },
    })
    .expect("export serializes")
}
