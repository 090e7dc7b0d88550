//! Candidate scoring, deterministic ranking, the metric suite (NDCG, MRR,
//! R@k, mean rank), per-round breakdowns, and ensemble score averaging.

use serde::{Deserialize, Serialize};

use crate::data::{encode_candidate, PreparedInstance};
use crate::error::{Error, Result};
use crate::model::{ForwardInputs, Model};
use crate::objectives::nsp_score;
use crate::tensor::Tape;

/// Scores and ranking for one evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    /// 1-based dialog round.
    pub round: usize,
    pub scores: Vec<f64>,
    /// `ranking[pos]` is the candidate at (0-based) position `pos`.
    pub ranking: Vec<usize>,
    pub gt_index: usize,
    /// 1-based rank of the ground-truth candidate.
    pub gt_rank: usize,
}

impl RankResult {
    pub fn new(round: usize, scores: Vec<f64>, gt_index: usize) -> Self {
        let ranking = rank(&scores);
        let gt_rank = ranking.iter().position(|&c| c == gt_index).unwrap() + 1;
        RankResult {
            round,
            scores,
            ranking,
            gt_index,
            gt_rank,
        }
    }
}

/// Descending by score; ties broken by lower candidate index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    order
}

/// Answer probability for every candidate of one round; one forward pass per
/// candidate. The candidate count must match `expected_n`.
pub fn score_candidates(
    model: &Model,
    prepared: &PreparedInstance,
    round: usize,
    expected_n: usize,
) -> Result<Vec<f64>> {
    let r = &prepared.instance.rounds[round - 1];
    if r.candidates.len() != expected_n {
        return Err(Error::CandidateCount {
            got: r.candidates.len(),
            expected: expected_n,
        });
    }
    let mut scores = Vec::with_capacity(expected_n);
    for c in 0..expected_n {
        let enc = encode_candidate(&model.spec, prepared, round, c)?;
        let tape = Tape::new();
        let out = model.forward(
            &tape,
            &ForwardInputs {
                tokens: &enc.layout.tokens,
                layout: &enc.layout,
                region_feats: &prepared.region_feats,
                region_boxes: &prepared.region_boxes,
                graphs: &enc.graphs,
                edge_mask: None,
            },
        )?;
        scores.push(nsp_score(tape.value(out.nsp_logit)[[0, 0]]));
    }
    Ok(scores)
}

pub fn mrr(results: &[RankResult]) -> f64 {
    assert!(!results.is_empty());
    results.iter().map(|r| 1.0 / r.gt_rank as f64).sum::<f64>() / results.len() as f64
}

pub fn recall_at_k(results: &[RankResult], k: usize) -> f64 {
    assert!(!results.is_empty());
    results.iter().filter(|r| r.gt_rank <= k).count() as f64 / results.len() as f64
}

pub fn mean_rank(results: &[RankResult]) -> f64 {
    assert!(!results.is_empty());
    results.iter().map(|r| r.gt_rank as f64).sum::<f64>() / results.len() as f64
}

/// Normalized discounted cumulative gain with the cutoff at the number of
/// positively relevant candidates. Gain is the raw relevance; the discount is
/// `1 / log2(1 + position)` with 1-based positions.
pub fn ndcg(scores: &[f64], relevance: &[f64]) -> Result<f64> {
    assert_eq!(scores.len(), relevance.len());
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Err(Error::AllZeroRelevance);
    }
    let order = rank(scores);
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &c)| relevance[c] / ((pos as f64 + 2.0).log2()))
        .sum();
    let mut ideal: Vec<f64> = relevance.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &r)| r / ((pos as f64 + 2.0).log2()))
        .sum();
    Ok(dcg / idcg)
}

/// Sparse metrics of one group of rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub count: usize,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean: f64,
}

/// Sparse metrics per round index; empty rounds are omitted.
pub fn round_wise_metrics(results: &[RankResult]) -> Vec<RoundMetrics> {
    let mut by_round: std::collections::BTreeMap<usize, Vec<RankResult>> = Default::default();
    for r in results {
        by_round.entry(r.round).or_default().push(r.clone());
    }
    by_round
        .into_iter()
        .map(|(round, group)| RoundMetrics {
            round,
            count: group.len(),
            mrr: mrr(&group),
            r1: recall_at_k(&group, 1),
            r5: recall_at_k(&group, 5),
            r10: recall_at_k(&group, 10),
            mean: mean_rank(&group),
        })
        .collect()
}

/// The full metric report emitted by an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean NDCG over rounds carrying dense annotations; absent without any.
    pub ndcg: Option<f64>,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean: f64,
    pub per_round: Vec<RoundMetrics>,
}

impl MetricReport {
    pub fn from_results(results: &[RankResult], ndcg_values: &[f64]) -> Self {
        let ndcg = if ndcg_values.is_empty() {
            None
        } else {
            Some(ndcg_values.iter().sum::<f64>() / ndcg_values.len() as f64)
        };
        MetricReport {
            ndcg,
            mrr: mrr(results),
            r1: recall_at_k(results, 1),
            r5: recall_at_k(results, 5),
            r10: recall_at_k(results, 10),
            mean: mean_rank(results),
            per_round: round_wise_metrics(results),
        }
    }
}

/// Elementwise arithmetic mean of the member models' score vectors.
pub fn ensemble_scores(score_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    if score_vectors.is_empty() {
        return Err(Error::EmptyInput("ensemble needs at least one member"));
    }
    let n = score_vectors[0].len();
    for v in score_vectors {
        if v.len() != n {
            return Err(Error::CandidateCount {
                got: v.len(),
                expected: n,
            });
        }
    }
    let m = score_vectors.len() as f64;
    Ok((0..n)
        .map(|i| score_vectors.iter().map(|v| v[i]).sum::<f64>() / m)
        .collect())
}
