//! Mask planning and the loss heads: masked language and region modeling,
//! answer prediction, graph edge masking, and the stage-specific totals.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{CascadeMask, ModalityGraphs};
use crate::model::{GemNodes, TokenLayout, MASK};
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

/// Bernoulli rates for one mask plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRates {
    pub text: f64,
    pub region: f64,
    pub edge: f64,
}

impl MaskRates {
    /// Warm-up stage rates.
    pub fn warmup() -> Self {
        MaskRates {
            text: 0.1,
            region: 0.1,
            edge: 0.15,
        }
    }

    /// Sparse fine-tuning rates (no edge masking).
    pub fn sparse() -> Self {
        MaskRates {
            text: 0.1,
            region: 0.1,
            edge: 0.0,
        }
    }

    pub fn none() -> Self {
        MaskRates {
            text: 0.0,
            region: 0.0,
            edge: 0.0,
        }
    }
}

/// A masked directed edge and its hidden ground-truth type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedEdge {
    pub src: usize,
    pub dst: usize,
    pub gt_type: u16,
}

/// The sampled token/region/edge masks driving one training step.
/// Serializable so a step can be reproduced exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub seed: u64,
    pub masked_tokens: Vec<usize>,
    pub masked_regions: Vec<usize>,
    pub masked_edges_image: Vec<MaskedEdge>,
    pub masked_edges_question: Vec<MaskedEdge>,
    pub masked_edges_history: Vec<MaskedEdge>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.masked_tokens.is_empty()
            && self.masked_regions.is_empty()
            && self.masked_edges_image.is_empty()
            && self.masked_edges_question.is_empty()
            && self.masked_edges_history.is_empty()
    }

    /// Question-graph node ids whose token was masked.
    pub fn masked_question_nodes(&self, layout: &TokenLayout) -> Vec<usize> {
        let (s, n) = layout.question_span;
        self.masked_tokens
            .iter()
            .filter(|&&p| p >= s && p < s + n)
            .map(|&p| p - s)
            .collect()
    }

    /// The directed edges hidden from the GNN forward pass.
    pub fn cascade_mask(&self) -> CascadeMask {
        let collect = |edges: &[MaskedEdge]| edges.iter().map(|e| (e.src, e.dst)).collect();
        CascadeMask {
            image: collect(&self.masked_edges_image),
            question: collect(&self.masked_edges_question),
            history: collect(&self.masked_edges_history),
        }
    }
}

/// Samples a mask plan. Only edges connecting two unmasked node features are
/// eligible for edge masking; `[CLS]`/`[SEP]` tokens and the hub are never
/// masked. Deterministic per seed.
pub fn plan_masks(
    layout: &TokenLayout,
    graphs: &ModalityGraphs,
    rates: MaskRates,
    seed: u64,
) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let masked_tokens: Vec<usize> = layout
        .maskable_positions()
        .into_iter()
        .filter(|_| rng.gen_bool(rates.text))
        .collect();
    let masked_regions: Vec<usize> = (0..layout.num_regions)
        .filter(|_| rng.gen_bool(rates.region))
        .collect();

    let masked_image_nodes: std::collections::BTreeSet<usize> =
        masked_regions.iter().copied().collect();
    let (s, n) = layout.question_span;
    let masked_question_nodes: std::collections::BTreeSet<usize> = masked_tokens
        .iter()
        .filter(|&&p| p >= s && p < s + n)
        .map(|&p| p - s)
        .collect();
    let no_nodes = std::collections::BTreeSet::new();

    let mut sample_edges = |graph: &crate::graph::Graph,
                            masked_nodes: &std::collections::BTreeSet<usize>|
     -> Vec<MaskedEdge> {
        graph
            .non_hub_edges()
            .filter(|(src, dst, _)| !masked_nodes.contains(src) && !masked_nodes.contains(dst))
            .filter(|_| rng.gen_bool(rates.edge))
            .map(|&(src, dst, gt_type)| MaskedEdge { src, dst, gt_type })
            .collect()
    };

    let masked_edges_image = sample_edges(&graphs.image, &masked_image_nodes);
    let masked_edges_question = sample_edges(&graphs.question, &masked_question_nodes);
    let masked_edges_history = sample_edges(&graphs.history, &no_nodes);

    MaskPlan {
        seed,
        masked_tokens,
        masked_regions,
        masked_edges_image,
        masked_edges_question,
        masked_edges_history,
    }
}

/// Token buffer with `[MASK]` substituted at the planned positions.
pub fn apply_token_masks(layout: &TokenLayout, plan: &MaskPlan) -> Vec<usize> {
    let mut tokens = layout.tokens.clone();
    for &p in &plan.masked_tokens {
        tokens[p] = MASK;
    }
    tokens
}

/// Region feature matrix with masked rows zeroed.
pub fn apply_region_masks(feats: &Array2<f64>, plan: &MaskPlan) -> Array2<f64> {
    let mut out = feats.clone();
    for &r in &plan.masked_regions {
        out.row_mut(r).fill(0.0);
    }
    out
}

/// Mean negative log-likelihood of the original tokens at the masked text
/// positions. Zero masked positions yield a zero loss.
pub fn mlm_loss(
    tape: &Tape,
    store: &ParamStore,
    text_states: Var,
    masked_positions: &[usize],
    targets: &[usize],
) -> Var {
    assert_eq!(masked_positions.len(), targets.len());
    if masked_positions.is_empty() {
        return tape.leaf(Array2::zeros((1, 1)));
    }
    let rows = tape.gather_rows(text_states, masked_positions);
    let w = store.var(tape, "mlm.w");
    let b = store.var(tape, "mlm.b");
    let logits = tape.add_row(tape.matmul(rows, w), b);
    tape.nll_mean(tape.log_softmax_rows(logits), targets)
}

/// Mean squared error between predicted and original region features over
/// the masked slots. Region `r` occupies image-stream row `r + 1`.
pub fn mrm_loss(
    tape: &Tape,
    store: &ParamStore,
    image_states: Var,
    masked_regions: &[usize],
    original_feats: &Array2<f64>,
) -> Var {
    if masked_regions.is_empty() {
        return tape.leaf(Array2::zeros((1, 1)));
    }
    let slots: Vec<usize> = masked_regions.iter().map(|&r| r + 1).collect();
    let rows = tape.gather_rows(image_states, &slots);
    let w = store.var(tape, "mrm.w");
    let b = store.var(tape, "mrm.b");
    let pred = tape.add_row(tape.matmul(rows, w), b);
    let mut target = Array2::zeros((masked_regions.len(), original_feats.ncols()));
    for (i, &r) in masked_regions.iter().enumerate() {
        target.row_mut(i).assign(&original_feats.row(r));
    }
    let diff = tape.sub(pred, tape.leaf(target));
    tape.mean_all(tape.mul(diff, diff))
}

/// Binary cross-entropy of the answer head, computed from the logit.
pub fn nsp_loss(tape: &Tape, nsp_logit: Var, label: bool) -> Var {
    let y = if label { 1.0 } else { 0.0 };
    let yx = tape.scale(nsp_logit, y);
    tape.mean_all(tape.sub(tape.softplus(nsp_logit), yx))
}

/// Probability that the appended candidate is the correct answer.
pub fn nsp_score(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

fn gem_loss_one(
    tape: &Tape,
    store: &ParamStore,
    tag: &str,
    nodes: Var,
    edges: &[MaskedEdge],
    masked_nodes: &std::collections::BTreeSet<usize>,
) -> Result<Var> {
    if edges.is_empty() {
        return Ok(tape.leaf(Array2::zeros((1, 1))));
    }
    for e in edges {
        if masked_nodes.contains(&e.src) || masked_nodes.contains(&e.dst) {
            return Err(Error::MaskedEndpoint {
                src: e.src,
                dst: e.dst,
            });
        }
    }
    let src: Vec<usize> = edges.iter().map(|e| e.src).collect();
    let dst: Vec<usize> = edges.iter().map(|e| e.dst).collect();
    let targets: Vec<usize> = edges.iter().map(|e| (e.gt_type - 1) as usize).collect();
    let pair = tape.concat_cols(&[tape.gather_rows(nodes, &src), tape.gather_rows(nodes, &dst)]);
    let w = store.var(tape, &format!("gem.{tag}.w"));
    let b = store.var(tape, &format!("gem.{tag}.b"));
    let logits = tape.add_row(tape.matmul(pair, w), b);
    Ok(tape.nll_mean(tape.log_softmax_rows(logits), &targets))
}

/// Per-modality mean cross-entropy of the hidden edge types, predicted from
/// the concatenated endpoint representations. Order: image, question, history.
pub fn gem_losses(
    tape: &Tape,
    store: &ParamStore,
    nodes: &GemNodes,
    plan: &MaskPlan,
    layout: &TokenLayout,
) -> Result<[Var; 3]> {
    let image_masked: std::collections::BTreeSet<usize> =
        plan.masked_regions.iter().copied().collect();
    let question_masked: std::collections::BTreeSet<usize> =
        plan.masked_question_nodes(layout).into_iter().collect();
    let none = std::collections::BTreeSet::new();
    Ok([
        gem_loss_one(tape, store, "img", nodes.image, &plan.masked_edges_image, &image_masked)?,
        gem_loss_one(
            tape,
            store,
            "qst",
            nodes.question,
            &plan.masked_edges_question,
            &question_masked,
        )?,
        gem_loss_one(tape, store, "hst", nodes.history, &plan.masked_edges_history, &none)?,
    ])
}

/// Loss coefficients of the warm-up objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 1.0,
        }
    }
}

/// `alpha1 * (mlm + mrm) + alpha2 * (gem_i + gem_q + gem_h)`
pub fn warmup_loss(tape: &Tape, mlm: Var, mrm: Var, gem: [Var; 3], weights: LossWeights) -> Var {
    let masked = tape.scale(tape.add(mlm, mrm), weights.alpha1);
    let gem_total = tape.add(tape.add(gem[0], gem[1]), gem[2]);
    tape.add(masked, tape.scale(gem_total, weights.alpha2))
}

/// `mlm + mrm + nsp`
pub fn vd_loss(tape: &Tape, mlm: Var, mrm: Var, nsp: Var) -> Var {
    tape.add(tape.add(mlm, mrm), nsp)
}

fn weighted_nll(tape: &Tape, score_logits: Var, weights: &[f64]) -> Var {
    let n = weights.len();
    let w = tape.leaf(Array2::from_shape_vec((1, n), weights.to_vec()).unwrap());
    let logp = tape.log_softmax_rows(score_logits);
    tape.scale(tape.sum_all(tape.mul(w, logp)), -1.0)
}

/// Cross-entropy against sum-normalized relevance: `-sum r^ log softmax(s)`.
/// `score_logits` is a `1 x N` row. All-zero relevance is rejected.
pub fn ce_dense_loss(tape: &Tape, score_logits: Var, relevance: &[f64]) -> Result<Var> {
    let total: f64 = relevance.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZeroRelevance);
    }
    let weights: Vec<f64> = relevance.iter().map(|&r| r / total).collect();
    Ok(weighted_nll(tape, score_logits, &weights))
}

/// Top-one-probability listwise loss: `-sum softmax(rel) log softmax(s)`.
pub fn listnet_loss(tape: &Tape, score_logits: Var, relevance: &[f64]) -> Result<Var> {
    if relevance.iter().all(|&r| r <= 0.0) {
        return Err(Error::AllZeroRelevance);
    }
    let max = relevance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = relevance.iter().map(|&r| (r - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    Ok(weighted_nll(tape, score_logits, &weights))
}

/// Training pair for the answer head: the ground-truth candidate with
/// probability 1/2, otherwise a uniformly sampled wrong candidate.
pub fn sample_nsp_pair(rng: &mut ChaCha8Rng, gt_index: usize, num_candidates: usize) -> (usize, bool) {
    assert!(num_candidates >= 2, "need at least one wrong candidate");
    if rng.gen_bool(0.5) {
        (gt_index, true)
    } else {
        let mut wrong = rng.gen_range(0..num_candidates - 1);
        if wrong >= gt_index {
            wrong += 1;
        }
        (wrong, false)
    }
}
