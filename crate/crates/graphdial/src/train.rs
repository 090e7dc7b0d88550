//! Training stages, optimization, checkpointing, evaluation runs, and the
//! ablation harness.
//!
//! Two-stage training: a warm-up stage on masked token/region/edge prediction
//! followed by sparse fine-tuning on the dialog loss; an optional third stage
//! fine-tunes on dense relevance annotations with a listwise loss. Runs are
//! deterministic given (seed, config, data).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_candidate, PreparedDataset};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, ForwardInputs, Model, ModelSpec};
use crate::objectives::{
    apply_region_masks, apply_token_masks, ce_dense_loss, gem_losses, listnet_loss, mlm_loss,
    mrm_loss, nsp_loss, plan_masks, sample_nsp_pair, vd_loss, warmup_loss, LossWeights, MaskPlan,
    MaskRates,
};
use crate::params::{hash_json, Checkpoint, RngState};
use crate::ranking::{ndcg, score_candidates, MetricReport, RankResult};
use crate::tensor::{ParamGrads, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Sparse,
    Dense,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Stage::Warmup),
            "sparse" => Ok(Stage::Sparse),
            "dense" => Ok(Stage::Dense),
            other => Err(Error::InvalidConfig(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseLossKind {
    Ce,
    Listnet,
}

/// Everything one training stage needs. The stage constructors carry the
/// full-scale defaults; `with_toy_boost` scales the rates up tenfold for
/// randomly initialized desk-scale models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Overrides `epochs * ceil(items / batch_size)` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub backbone_lr_max: f64,
    pub backbone_lr_min: f64,
    pub gnn_lr_max: f64,
    pub gnn_lr_min: f64,
    /// Fraction of total steps spent ramping the rate up from zero.
    pub warmup_fraction: f64,
    pub loss_weights: LossWeights,
    pub mask_rates: MaskRates,
    pub dense_loss: DenseLossKind,
}

impl StageConfig {
    pub fn warmup_defaults() -> Self {
        StageConfig {
            stage: Stage::Warmup,
            epochs: 5,
            max_steps: None,
            batch_size: 64,
            seed: 0,
            backbone_lr_max: 5e-6,
            backbone_lr_min: 0.0,
            gnn_lr_max: 5e-4,
            gnn_lr_min: 0.0,
            warmup_fraction: 0.1,
            loss_weights: LossWeights::default(),
            mask_rates: MaskRates::warmup(),
            dense_loss: DenseLossKind::Ce,
        }
    }

    pub fn sparse_defaults() -> Self {
        StageConfig {
            stage: Stage::Sparse,
            epochs: 20,
            mask_rates: MaskRates::sparse(),
            ..Self::warmup_defaults()
        }
    }

    pub fn dense_defaults() -> Self {
        StageConfig {
            stage: Stage::Dense,
            epochs: 3,
            batch_size: 100,
            backbone_lr_max: 2e-5,
            backbone_lr_min: 1e-5,
            gnn_lr_max: 1e-4,
            gnn_lr_min: 1e-5,
            mask_rates: MaskRates::none(),
            ..Self::warmup_defaults()
        }
    }

    /// Ten-fold learning rates for random-init toy models.
    pub fn with_toy_boost(mut self) -> Self {
        self.backbone_lr_max *= 10.0;
        self.backbone_lr_min *= 10.0;
        self.gnn_lr_max *= 10.0;
        self.gnn_lr_min *= 10.0;
        self
    }
}

/// Linear warm-up from zero to `max`, then linear decay to `min`.
pub fn linear_schedule(step: usize, total: usize, warmup: usize, max: f64, min: f64) -> f64 {
    assert!(total > 0);
    let warmup = warmup.min(total.saturating_sub(1));
    if warmup > 0 && step < warmup {
        max * step as f64 / warmup as f64
    } else if total <= warmup + 1 {
        max
    } else {
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        max - (max - min) * progress
    }
}

/// Adam with per-tensor first/second moment state. The learning rate is
/// resolved per parameter name so backbone and GNN groups can differ.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// GNN parameter group membership, by naming convention.
pub fn is_gnn_param(name: &str) -> bool {
    name.starts_with("gnn.")
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(
        &mut self,
        store: &mut crate::params::ParamStore,
        grads: &ParamGrads,
        backbone_lr: f64,
        gnn_lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let lr = if is_gnn_param(name) { gnn_lr } else { backbone_lr };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let p = store.get_mut(name);
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Per-step loss components, written to the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub mlm: f64,
    pub mrm: f64,
    pub nsp: f64,
    pub gem_i: f64,
    pub gem_q: f64,
    pub gem_h: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub step: usize,
    pub backbone_lr: f64,
    pub gnn_lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<LossRow>,
    pub schedule: Vec<ScheduleRow>,
    /// Dense rounds skipped because every relevance entry was zero.
    pub skipped_dense: usize,
}

pub fn write_loss_csv<W: Write>(mut w: W, rows: &[LossRow]) -> Result<()> {
    writeln!(w, "step,mlm,mrm,nsp,gem_i,gem_q,gem_h,total")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step, r.mlm, r.mrm, r.nsp, r.gem_i, r.gem_q, r.gem_h, r.total
        )?;
    }
    Ok(())
}

pub fn write_schedule_csv<W: Write>(mut w: W, rows: &[ScheduleRow]) -> Result<()> {
    writeln!(w, "step,backbone_lr,gnn_lr")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.step, r.backbone_lr, r.gnn_lr)?;
    }
    Ok(())
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v)[[0, 0]]
}

struct ItemLosses {
    grads: ParamGrads,
    mlm: f64,
    mrm: f64,
    nsp: f64,
    gem: [f64; 3],
    total: f64,
    plan: Option<MaskPlan>,
}

fn masked_item_losses(
    model: &Model,
    data: &PreparedDataset,
    item: (usize, usize),
    candidate: usize,
    nsp_label: Option<bool>,
    cfg: &StageConfig,
    plan_seed: u64,
) -> Result<ItemLosses> {
    let (inst_idx, t) = item;
    let prepared = &data.instances[inst_idx];
    let enc = encode_candidate(&model.spec, prepared, t, candidate)?;
    let plan = plan_masks(&enc.layout, &enc.graphs, cfg.mask_rates, plan_seed);

    let tokens = apply_token_masks(&enc.layout, &plan);
    let feats = apply_region_masks(&prepared.region_feats, &plan);
    let edge_mask = plan.cascade_mask();

    let tape = Tape::new();
    let out = model.forward(
        &tape,
        &ForwardInputs {
            tokens: &tokens,
            layout: &enc.layout,
            region_feats: &feats,
            region_boxes: &prepared.region_boxes,
            graphs: &enc.graphs,
            edge_mask: Some(&edge_mask),
        },
    )?;

    let targets: Vec<usize> = plan
        .masked_tokens
        .iter()
        .map(|&p| enc.layout.tokens[p])
        .collect();
    let l_mlm = mlm_loss(&tape, &model.store, out.text_states, &plan.masked_tokens, &targets);
    let l_mrm = mrm_loss(
        &tape,
        &model.store,
        out.image_states,
        &plan.masked_regions,
        &prepared.region_feats,
    );

    let (total, l_nsp, gem_vals) = match cfg.stage {
        Stage::Warmup => {
            let nodes = out.gem_nodes.ok_or_else(|| {
                Error::InvalidConfig("warm-up stage needs the graph path enabled".into())
            })?;
            let gems = gem_losses(&tape, &model.store, &nodes, &plan, &enc.layout)?;
            let total = warmup_loss(&tape, l_mlm, l_mrm, gems, cfg.loss_weights);
            (
                total,
                None,
                [scalar(&tape, gems[0]), scalar(&tape, gems[1]), scalar(&tape, gems[2])],
            )
        }
        Stage::Sparse => {
            let label = nsp_label.expect("sparse stage samples an nsp label");
            let l_nsp = nsp_loss(&tape, out.nsp_logit, label);
            let total = vd_loss(&tape, l_mlm, l_mrm, l_nsp);
            (total, Some(l_nsp), [0.0; 3])
        }
        Stage::Dense => unreachable!("dense items use dense_item_losses"),
    };

    let grads = tape.backward(total);
    Ok(ItemLosses {
        grads,
        mlm: scalar(&tape, l_mlm),
        mrm: scalar(&tape, l_mrm),
        nsp: l_nsp.map_or(0.0, |v| scalar(&tape, v)),
        gem: gem_vals,
        total: scalar(&tape, total),
        plan: Some(plan),
    })
}

/// Dense step: every candidate of one round on a shared tape, listwise loss
/// over the joined logits. Returns `None` when the relevance is all zero.
fn dense_item_losses(
    model: &Model,
    data: &PreparedDataset,
    item: (usize, usize),
    cfg: &StageConfig,
) -> Result<Option<ItemLosses>> {
    let (inst_idx, t) = item;
    let prepared = &data.instances[inst_idx];
    let round = &prepared.instance.rounds[t - 1];
    let relevance = round
        .dense_relevance
        .clone()
        .ok_or_else(|| Error::Dataset("dense stage item lacks dense relevance".into()))?;
    if relevance.iter().all(|&r| r <= 0.0) {
        return Ok(None);
    }

    let tape = Tape::new();
    let mut logits = Vec::with_capacity(round.candidates.len());
    for c in 0..round.candidates.len() {
        let enc = encode_candidate(&model.spec, prepared, t, c)?;
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
        logits.push(out.nsp_logit);
    }
    let scores = tape.concat_cols(&logits);
    let total = match cfg.dense_loss {
        DenseLossKind::Ce => ce_dense_loss(&tape, scores, &relevance)?,
        DenseLossKind::Listnet => listnet_loss(&tape, scores, &relevance)?,
    };
    let grads = tape.backward(total);
    Ok(Some(ItemLosses {
        grads,
        mlm: 0.0,
        mrm: 0.0,
        nsp: 0.0,
        gem: [0.0; 3],
        total: scalar(&tape, total),
        plan: None,
    }))
}

fn accumulate(acc: &mut ParamGrads, grads: ParamGrads) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => *a += &g,
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Runs one training stage in place. Deterministic given (seed, config, data).
pub fn train(model: &mut Model, data: &PreparedDataset, cfg: &StageConfig) -> Result<TrainLog> {
    let items: Vec<(usize, usize)> = match cfg.stage {
        Stage::Dense => data
            .items
            .iter()
            .copied()
            .filter(|&(i, t)| data.instances[i].instance.rounds[t - 1].dense_relevance.is_some())
            .collect(),
        _ => data.items.clone(),
    };
    if items.is_empty() {
        return Err(Error::Dataset(match cfg.stage {
            Stage::Dense => "dense stage requires rounds with dense annotations".into(),
            _ => "no training items".into(),
        }));
    }

    let per_step = match cfg.stage {
        Stage::Dense => 1, // one round with all its candidates
        _ => cfg.batch_size.max(1),
    };
    let steps_per_epoch = items.len().div_ceil(per_step);
    let total_steps = cfg
        .max_steps
        .unwrap_or(cfg.epochs * steps_per_epoch);
    let mut log = TrainLog::default();
    if total_steps == 0 {
        return Ok(log);
    }
    let warmup_steps = (total_steps as f64 * cfg.warmup_fraction).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut queue: Vec<(usize, usize)> = Vec::new();

    for step in 0..total_steps {
        let backbone_lr = linear_schedule(
            step,
            total_steps,
            warmup_steps,
            cfg.backbone_lr_max,
            cfg.backbone_lr_min,
        );
        let gnn_lr = linear_schedule(step, total_steps, warmup_steps, cfg.gnn_lr_max, cfg.gnn_lr_min);
        log.schedule.push(ScheduleRow {
            step,
            backbone_lr,
            gnn_lr,
        });

        let mut acc = ParamGrads::new();
        let mut row = LossRow {
            step,
            mlm: 0.0,
            mrm: 0.0,
            nsp: 0.0,
            gem_i: 0.0,
            gem_q: 0.0,
            gem_h: 0.0,
            total: 0.0,
        };
        let mut batch_items = 0usize;
        let mut batch_plans: Vec<(usize, usize, Option<MaskPlan>)> = Vec::new();

        for _ in 0..per_step {
            if queue.is_empty() {
                queue = items.clone();
                queue.shuffle(&mut rng);
            }
            let item = queue.pop().unwrap();
            let losses = match cfg.stage {
                Stage::Dense => match dense_item_losses(model, data, item, cfg)? {
                    Some(l) => l,
                    None => {
                        log.skipped_dense += 1;
                        continue;
                    }
                },
                Stage::Warmup => {
                    let (inst_idx, t) = item;
                    let gt = data.instances[inst_idx].instance.rounds[t - 1].gt_index;
                    let plan_seed: u64 = rng.gen();
                    masked_item_losses(model, data, item, gt, None, cfg, plan_seed)?
                }
                Stage::Sparse => {
                    let (inst_idx, t) = item;
                    let n = data.instances[inst_idx].instance.rounds[t - 1].candidates.len();
                    let gt = data.instances[inst_idx].instance.rounds[t - 1].gt_index;
                    let (cand, label) = sample_nsp_pair(&mut rng, gt, n);
                    let plan_seed: u64 = rng.gen();
                    masked_item_losses(model, data, item, cand, Some(label), cfg, plan_seed)?
                }
            };

            if !losses.total.is_finite() {
                let dump = dump_diagnostics(step, item, &losses)?;
                return Err(Error::NonFiniteLoss { step, dump });
            }
            row.mlm += losses.mlm;
            row.mrm += losses.mrm;
            row.nsp += losses.nsp;
            row.gem_i += losses.gem[0];
            row.gem_q += losses.gem[1];
            row.gem_h += losses.gem[2];
            row.total += losses.total;
            batch_items += 1;
            batch_plans.push((item.0, item.1, losses.plan));
            accumulate(&mut acc, losses.grads);
        }

        if batch_items == 0 {
            log.losses.push(row);
            continue;
        }
        let scale = 1.0 / batch_items as f64;
        for g in acc.values_mut() {
            *g *= scale;
        }
        row.mlm *= scale;
        row.mrm *= scale;
        row.nsp *= scale;
        row.gem_i *= scale;
        row.gem_q *= scale;
        row.gem_h *= scale;
        row.total *= scale;
        log.losses.push(row);

        adam.step(&mut model.store, &acc, backbone_lr, gnn_lr);
    }

    Ok(log)
}

fn dump_diagnostics(step: usize, item: (usize, usize), losses: &ItemLosses) -> Result<String> {
    let path = std::env::temp_dir().join(format!("graphdial-nonfinite-step{step}.json"));
    let payload = serde_json::json!({
        "step": step,
        "instance": item.0,
        "round": item.1,
        "mask_plan": losses.plan,
        "components": {
            "mlm": losses.mlm,
            "mrm": losses.mrm,
            "nsp": losses.nsp,
            "gem": losses.gem,
        },
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&payload)?)?;
    Ok(path.display().to_string())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn save_model(model: &Model, rng: RngState, path: &Path) -> Result<()> {
    let ck = Checkpoint::new(model.spec.to_json(), rng, &model.store);
    let file = std::fs::File::create(path)?;
    ck.save(std::io::BufWriter::new(file))
}

pub fn load_model(path: &Path) -> Result<(Model, RngState)> {
    let file = std::fs::File::open(path)?;
    let ck = Checkpoint::load(std::io::BufReader::new(file))?;
    let (store, config, rng) = ck.into_store()?;
    let spec: ModelSpec = serde_json::from_value(config)
        .map_err(|e| Error::Checkpoint(format!("config echo does not parse: {e}")))?;
    Ok((Model { spec, store }, rng))
}

/// Rejects evaluation when the requested configuration differs from the one
/// the checkpoint was trained with.
pub fn check_config_compatibility(checkpoint: &ModelSpec, requested: &ModelSpec) -> Result<()> {
    let ckpt_hash = hash_json(&checkpoint.to_json());
    let cfg_hash = hash_json(&requested.to_json());
    if ckpt_hash != cfg_hash {
        return Err(Error::ConfigMismatch { ckpt_hash, cfg_hash });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    /// `(dialog id, result)` per evaluated round, in dataset order.
    pub results: Vec<(String, RankResult)>,
    /// Attention traces per (dialog id, round), present when requested.
    pub traces: Vec<(String, usize, Vec<AttentionTrace>)>,
    pub skipped_dense: usize,
}

pub fn write_ranks_jsonl<W: Write>(mut w: W, results: &[(String, RankResult)]) -> Result<()> {
    for (dialog, r) in results {
        let line = serde_json::json!({
            "dialog": dialog,
            "round": r.round,
            "ranking": r.ranking,
        });
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Scores every candidate of every round, ranks them, and aggregates the
/// metric suite. NDCG averages over rounds with dense annotations.
pub fn evaluate(
    model: &Model,
    data: &PreparedDataset,
    expected_n: usize,
    dump_attention: bool,
) -> Result<EvalOutcome> {
    let mut results = Vec::new();
    let mut ndcg_values = Vec::new();
    let mut traces = Vec::new();
    let mut skipped_dense = 0usize;

    for &(inst_idx, t) in &data.items {
        let prepared = &data.instances[inst_idx];
        let round = &prepared.instance.rounds[t - 1];
        let scores = score_candidates(model, prepared, t, expected_n)?;
        if let Some(rel) = &round.dense_relevance {
            match ndcg(&scores, rel) {
                Ok(v) => ndcg_values.push(v),
                Err(Error::AllZeroRelevance) => skipped_dense += 1,
                Err(e) => return Err(e),
            }
        }
        let result = RankResult::new(t, scores, round.gt_index);
        if dump_attention {
            let enc = encode_candidate(&model.spec, prepared, t, round.gt_index)?;
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
            traces.push((prepared.instance.id.clone(), t, out.traces));
        }
        results.push((prepared.instance.id.clone(), result));
    }

    let flat: Vec<RankResult> = results.iter().map(|(_, r)| r.clone()).collect();
    Ok(EvalOutcome {
        report: MetricReport::from_results(&flat, &ndcg_values),
        results,
        traces,
        skipped_dense,
    })
}

/// Evaluates the elementwise mean of several models' candidate scores.
pub fn evaluate_ensemble(
    models: &[Model],
    data: &PreparedDataset,
    expected_n: usize,
) -> Result<EvalOutcome> {
    if models.is_empty() {
        return Err(Error::EmptyInput("ensemble needs at least one model"));
    }
    let mut results = Vec::new();
    let mut ndcg_values = Vec::new();
    let mut skipped_dense = 0usize;
    for &(inst_idx, t) in &data.items {
        let prepared = &data.instances[inst_idx];
        let round = &prepared.instance.rounds[t - 1];
        let per_model: Vec<Vec<f64>> = models
            .iter()
            .map(|m| score_candidates(m, prepared, t, expected_n))
            .collect::<Result<_>>()?;
        let scores = crate::ranking::ensemble_scores(&per_model)?;
        if let Some(rel) = &round.dense_relevance {
            match ndcg(&scores, rel) {
                Ok(v) => ndcg_values.push(v),
                Err(Error::AllZeroRelevance) => skipped_dense += 1,
                Err(e) => return Err(e),
            }
        }
        results.push((prepared.instance.id.clone(), RankResult::new(t, scores, round.gt_index)));
    }
    let flat: Vec<RankResult> = results.iter().map(|(_, r)| r.clone()).collect();
    Ok(EvalOutcome {
        report: MetricReport::from_results(&flat, &ndcg_values),
        results,
        traces: Vec::new(),
        skipped_dense,
    })
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Lambda0,
    NoWarmup,
    NoSharing,
    NoHub,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda0" => Ok(AblationKind::Lambda0),
            "no_warmup" => Ok(AblationKind::NoWarmup),
            "no_sharing" => Ok(AblationKind::NoSharing),
            "no_hub" => Ok(AblationKind::NoHub),
            other => Err(Error::UnknownAblation(other.to_string())),
        }
    }
}

impl AblationKind {
    pub fn apply(self, spec: &ModelSpec) -> ModelSpec {
        let mut out = spec.clone();
        match self {
            AblationKind::Lambda0 => out.config.lambda = 0.0,
            AblationKind::NoSharing => out.config.share_gnn_weights = false,
            AblationKind::NoHub => out.config.hub_enabled = false,
            AblationKind::NoWarmup => {}
        }
        out
    }

    pub fn skips_warmup(self) -> bool {
        matches!(self, AblationKind::NoWarmup)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Lambda0 => "lambda0",
            AblationKind::NoWarmup => "no_warmup",
            AblationKind::NoSharing => "no_sharing",
            AblationKind::NoHub => "no_hub",
        }
    }
}

/// Side-by-side comparison of the full model and one ablated variant trained
/// with the same seed and evaluated on the same data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub full: MetricReport,
    pub ablated: MetricReport,
}

/// Trains full and ablated variants (warm-up stage first unless ablated
/// away, then sparse) and evaluates both on the training set.
pub fn run_ablation(
    kind: AblationKind,
    base_spec: &ModelSpec,
    data: &PreparedDataset,
    warmup_cfg: &StageConfig,
    sparse_cfg: &StageConfig,
    init_seed: u64,
    expected_n: usize,
) -> Result<AblationReport> {
    let run = |spec: ModelSpec, skip_warmup: bool| -> Result<MetricReport> {
        let mut model = Model::new(spec, init_seed)?;
        if !skip_warmup {
            train(&mut model, data, warmup_cfg)?;
        }
        train(&mut model, data, sparse_cfg)?;
        Ok(evaluate(&model, data, expected_n, false)?.report)
    };
    let full = run(base_spec.clone(), false)?;
    let ablated = run(kind.apply(base_spec), kind.skips_warmup())?;
    Ok(AblationReport {
        name: kind.name().to_string(),
        full,
        ablated,
    })
}


/// Resolves the cache directory: `GRAPHDIAL_CACHE_DIR` or `./graphdial-cache`.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("GRAPHDIAL_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("graphdial-cache"))
}

// ---------------------------------------------------------------------------
// Flat key-value config files
// ---------------------------------------------------------------------------

/// Parses `key = value` lines (with `#` comments) into model and stage
/// overrides applied over the given defaults. Unknown keys are rejected.
pub fn apply_flat_config(
    text: &str,
    model: &mut crate::model::ModelConfig,
    stage: &mut StageConfig,
) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| Error::InvalidConfig(format!("line {}: bad {what} {value:?}", lineno + 1));
        let as_usize = || value.parse::<usize>().map_err(|_| bad("integer"));
        let as_f64 = || value.parse::<f64>().map_err(|_| bad("number"));
        let as_bool = || value.parse::<bool>().map_err(|_| bad("boolean"));
        match key {
            "layers" => model.layers = as_usize()?,
            "gnn_layers" => model.gnn_layers = as_usize()?,
            "gnn_heads" => model.gnn_heads = as_usize()?,
            "bert_heads" => model.bert_heads = as_usize()?,
            "lambda" => model.lambda = as_f64()?,
            "text_dim" => model.text_dim = as_usize()?,
            "image_dim" => model.image_dim = as_usize()?,
            "region_feat_dim" => model.region_feat_dim = as_usize()?,
            "ffn_mult" => model.ffn_mult = as_usize()?,
            "max_text_tokens" => model.max_text_tokens = as_usize()?,
            "max_image_regions" => model.max_image_regions = as_usize()?,
            "share_gnn_weights" => model.share_gnn_weights = as_bool()?,
            "hub_enabled" => model.hub_enabled = as_bool()?,
            "image_hub_post" => model.image_hub_post = as_bool()?,
            "learned_edge_embeddings" => model.learned_edge_embeddings = as_bool()?,
            "co_attention" => model.co_attention = as_bool()?,
            "gnn_enabled" => model.gnn_enabled = as_bool()?,
            "leaky_slope" => model.leaky_slope = as_f64()?,
            "epochs" => stage.epochs = as_usize()?,
            "max_steps" => stage.max_steps = Some(as_usize()?),
            "batch_size" => stage.batch_size = as_usize()?,
            "seed" => stage.seed = value.parse::<u64>().map_err(|_| bad("integer"))?,
            "bert_lr_max" => stage.backbone_lr_max = as_f64()?,
            "bert_lr_min" => stage.backbone_lr_min = as_f64()?,
            "gnn_lr_max" => stage.gnn_lr_max = as_f64()?,
            "gnn_lr_min" => stage.gnn_lr_min = as_f64()?,
            "warmup_fraction" => stage.warmup_fraction = as_f64()?,
            "alpha1" => stage.loss_weights.alpha1 = as_f64()?,
            "alpha2" => stage.loss_weights.alpha2 = as_f64()?,
            "text_mask_prob" => stage.mask_rates.text = as_f64()?,
            "region_mask_prob" => stage.mask_rates.region = as_f64()?,
            "edge_mask_prob" => stage.mask_rates.edge = as_f64()?,
            "dense_loss" => {
                stage.dense_loss = match value {
                    "ce" => DenseLossKind::Ce,
                    "listnet" => DenseLossKind::Listnet,
                    _ => return Err(bad("dense loss (ce | listnet)")),
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod config_tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn flat_config_applies_and_rejects() {
        let mut model = ModelConfig::toy();
        let mut stage = StageConfig::sparse_defaults();
        let text = "\n# comment\nlambda = 0.25\ngnn_layers = 3\nbert_lr_max = 0.001 # inline\ndense_loss = listnet\nhub_enabled = false\n";
        apply_flat_config(text, &mut model, &mut stage).unwrap();
        assert_eq!(model.lambda, 0.25);
        assert_eq!(model.gnn_layers, 3);
        assert!(!model.hub_enabled);
        assert_eq!(stage.backbone_lr_max, 0.001);
        assert_eq!(stage.dense_loss, DenseLossKind::Listnet);

        assert!(apply_flat_config("nope = 1", &mut model, &mut stage).is_err());
        assert!(apply_flat_config("lambda 0.5", &mut model, &mut stage).is_err());
        assert!(apply_flat_config("lambda = fast", &mut model, &mut stage).is_err());
    }
}
