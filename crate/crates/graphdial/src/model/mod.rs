//! The backbone: token/region embeddings, stacked layers alternating a
//! multi-modal graph cascade with a dual-stream transformer layer, residual
//! fusion of graph outputs into the hidden states, and the pooled ranking
//! feature (elementwise product of the `[IMG]` and `[CLS]` representations).

mod text;
mod transformer;

pub use text::{
    tokenize_and_layout, TokenLayout, Vocabulary, CLS, FIRST_WORD, MASK, PAD, SEP, UNK,
};
pub use transformer::{dual_stream_layer, init_dual_stream_params, StreamMasks};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{
    cascade_forward, init_cascade_params, CascadeConfig, CascadeInputs, CascadeMask, GnnConfig,
    ModalityGraphs,
};
use crate::graph::Modality;
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

/// Model shape and behavior switches. The defaults are full-scale
/// (768/1024-wide streams); [`ModelConfig::toy`] shrinks everything for
/// desk-scale training and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of stacked layers (graph cascade + transformer layer each).
    pub layers: usize,
    /// GNN layers per block (K).
    pub gnn_layers: usize,
    /// GNN attention heads (H).
    pub gnn_heads: usize,
    /// Transformer attention heads.
    pub bert_heads: usize,
    /// Residual fusion coefficient; 1 disables the graph contribution.
    pub lambda: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Raw region feature width (detector features are artifact inputs).
    pub region_feat_dim: usize,
    pub ffn_mult: usize,
    pub max_text_tokens: usize,
    /// Image slots including the `[IMG]` token.
    pub max_image_regions: usize,
    /// One GNN parameter set reused by every layer when true.
    pub share_gnn_weights: bool,
    pub hub_enabled: bool,
    /// Compute the image hub from the previous layer's image block output.
    pub image_hub_post: bool,
    pub learned_edge_embeddings: bool,
    pub co_attention: bool,
    /// When false the graph path is skipped entirely (gather/cascade/fuse).
    pub gnn_enabled: bool,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            gnn_layers: 2,
            gnn_heads: 4,
            bert_heads: 4,
            lambda: 0.5,
            text_dim: 768,
            image_dim: 1024,
            region_feat_dim: 2048,
            ffn_mult: 4,
            max_text_tokens: 256,
            max_image_regions: 37,
            share_gnn_weights: true,
            hub_enabled: true,
            image_hub_post: false,
            learned_edge_embeddings: false,
            co_attention: true,
            gnn_enabled: true,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the synthetic-data workflows.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 1,
            gnn_layers: 1,
            gnn_heads: 2,
            bert_heads: 2,
            text_dim: 32,
            image_dim: 32,
            region_feat_dim: 8,
            ffn_mult: 2,
            max_text_tokens: 64,
            max_image_regions: 9,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.gnn_layers == 0 {
            return Err(Error::InvalidConfig("layers and gnn_layers must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        for (dim, heads, what) in [
            (self.text_dim, self.bert_heads, "text_dim/bert_heads"),
            (self.image_dim, self.bert_heads, "image_dim/bert_heads"),
            (self.text_dim, self.gnn_heads, "text_dim/gnn_heads"),
            (self.image_dim, self.gnn_heads, "image_dim/gnn_heads"),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::InvalidConfig(format!("{what}: {heads} must divide {dim}")));
            }
        }
        if self.max_image_regions < 2 {
            return Err(Error::InvalidConfig("need room for [IMG] plus one region".into()));
        }
        Ok(())
    }

    pub fn node_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.image_dim,
            Modality::Question | Modality::History => self.text_dim,
        }
    }

    fn gnn_config(&self, modality: Modality) -> GnnConfig {
        GnnConfig {
            node_dim: self.node_dim(modality),
            edge_dim: modality.edge_dim(),
            heads: self.gnn_heads,
            layers: self.gnn_layers,
            leaky_slope: self.leaky_slope,
            learned_edges: self.learned_edge_embeddings,
        }
    }

    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            image: self.gnn_config(Modality::Image),
            question: self.gnn_config(Modality::Question),
            history: self.gnn_config(Modality::History),
            hub_enabled: self.hub_enabled,
            image_hub_post: self.image_hub_post,
        }
    }
}

/// Edge-type classifier width per modality for the edge-masking objective.
pub fn gem_class_count(modality: Modality) -> usize {
    match modality {
        Modality::Image => 11,
        Modality::Question => 47,
        Modality::History => 2,
    }
}

/// Config plus the committed vocabulary; the unit a checkpoint echoes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
}

impl ModelSpec {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("spec serializes")
    }
}

/// Per-edge attention weights of one GNN layer, head-averaged and then
/// softmax-renormalized per target node for export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub modality: Modality,
    pub layer: usize,
    pub gnn_layer: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

/// Inputs for one forward pass over a single (instance, round, candidate).
pub struct ForwardInputs<'a> {
    /// Token ids to embed; equals `layout.tokens` unless a mask plan
    /// substituted `[MASK]` ids.
    pub tokens: &'a [usize],
    pub layout: &'a TokenLayout,
    /// `num_regions x region_feat_dim`; masked regions are zero rows.
    pub region_feats: &'a Array2<f64>,
    /// `num_regions x 5` box encoding `[x1, y1, x2, y2, area]`.
    pub region_boxes: &'a Array2<f64>,
    pub graphs: &'a ModalityGraphs,
    pub edge_mask: Option<&'a CascadeMask>,
}

/// Final cascade node features, consumed by the edge-type prediction head.
#[derive(Debug, Clone, Copy)]
pub struct GemNodes {
    pub image: Var,
    pub question: Var,
    pub history: Var,
}

pub struct ForwardOutputs {
    pub text_states: Var,
    pub image_states: Var,
    /// `[IMG]` (projected to text width) times `[CLS]`, `1 x text_dim`.
    pub pooled: Var,
    pub nsp_logit: Var,
    pub gem_nodes: Option<GemNodes>,
    pub traces: Vec<AttentionTrace>,
}

/// The full model: spec plus parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

impl Model {
    /// Deterministically initializes all parameters from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.config.validate()?;
        let cfg = &spec.config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        store.init_uniform("emb.tok", spec.vocab.len(), cfg.text_dim, &mut rng);
        store.init_uniform("emb.pos", cfg.max_text_tokens, cfg.text_dim, &mut rng);
        store.init_uniform("emb.region.w", cfg.region_feat_dim, cfg.image_dim, &mut rng);
        store.init_zeros("emb.region.b", 1, cfg.image_dim);
        store.init_uniform("emb.box.w", 5, cfg.image_dim, &mut rng);

        for l in 0..cfg.layers {
            init_dual_stream_params(
                &mut store,
                &mut rng,
                &format!("bert.l{l}"),
                cfg.text_dim,
                cfg.image_dim,
                cfg.bert_heads,
                cfg.ffn_mult,
                cfg.co_attention,
            );
        }

        if cfg.gnn_enabled {
            let cascade = cfg.cascade_config();
            if cfg.share_gnn_weights {
                init_cascade_params(&mut store, &mut rng, "gnn", &cascade);
            } else {
                for l in 0..cfg.layers {
                    init_cascade_params(&mut store, &mut rng, &format!("gnn.l{l}"), &cascade);
                }
            }
        }

        store.init_uniform("pool.w", cfg.image_dim, cfg.text_dim, &mut rng);
        store.init_zeros("pool.b", 1, cfg.text_dim);
        store.init_uniform("nsp.w", cfg.text_dim, 1, &mut rng);
        store.init_zeros("nsp.b", 1, 1);
        store.init_uniform("mlm.w", cfg.text_dim, spec.vocab.len(), &mut rng);
        store.init_zeros("mlm.b", 1, spec.vocab.len());
        store.init_uniform("mrm.w", cfg.image_dim, cfg.region_feat_dim, &mut rng);
        store.init_zeros("mrm.b", 1, cfg.region_feat_dim);
        for (tag, modality, dim) in [
            ("img", Modality::Image, cfg.image_dim),
            ("qst", Modality::Question, cfg.text_dim),
            ("hst", Modality::History, cfg.text_dim),
        ] {
            store.init_uniform(
                &format!("gem.{tag}.w"),
                2 * dim,
                gem_class_count(modality),
                &mut rng,
            );
            store.init_zeros(&format!("gem.{tag}.b"), 1, gem_class_count(modality));
        }

        Ok(Model { spec, store })
    }

    fn gnn_prefix(&self, layer: usize) -> String {
        if self.spec.config.share_gnn_weights {
            "gnn".to_string()
        } else {
            format!("gnn.l{layer}")
        }
    }

    /// Text and image stream embeddings. The `[IMG]` slot is the mean of the
    /// embedded region rows.
    pub fn embed(&self, tape: &Tape, inputs: &ForwardInputs<'_>) -> Result<(Var, Var)> {
        let cfg = &self.spec.config;
        let len = inputs.tokens.len();
        if len != inputs.layout.text_len() {
            return Err(Error::InvalidConfig(format!(
                "token buffer length {len} does not match layout {}",
                inputs.layout.text_len()
            )));
        }
        if len > cfg.max_text_tokens {
            return Err(Error::IndexOutOfRange {
                context: "text tokens",
                index: len,
                limit: cfg.max_text_tokens,
            });
        }
        let n = inputs.layout.num_regions;
        if inputs.region_feats.dim() != (n, cfg.region_feat_dim)
            || inputs.region_boxes.dim() != (n, 5)
        {
            return Err(Error::InvalidConfig("region tensors do not match the layout".into()));
        }
        if n + 1 > cfg.max_image_regions {
            return Err(Error::TooManyRegions {
                got: n,
                max: cfg.max_image_regions - 1,
            });
        }

        let tok_emb = self.store.var(tape, "emb.tok");
        let pos_emb = self.store.var(tape, "emb.pos");
        let tok = tape.gather_rows(tok_emb, inputs.tokens);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(pos_emb, &positions);
        let text = tape.add(tok, pos);

        let feats = tape.leaf(inputs.region_feats.clone());
        let boxes = tape.leaf(inputs.region_boxes.clone());
        let rw = self.store.var(tape, "emb.region.w");
        let rb = self.store.var(tape, "emb.region.b");
        let bw = self.store.var(tape, "emb.box.w");
        let regions = tape.add(
            tape.add_row(tape.matmul(feats, rw), rb),
            tape.matmul(boxes, bw),
        );
        let img_token = tape.mean_rows(regions);
        let image = tape.concat_rows(&[img_token, regions]);
        Ok((text, image))
    }

    /// Full forward pass: per layer gather -> cascade -> fuse -> transformer,
    /// then the pooled feature and answer logit.
    pub fn forward(&self, tape: &Tape, inputs: &ForwardInputs<'_>) -> Result<ForwardOutputs> {
        let cfg = &self.spec.config;
        let (mut text, mut image) = self.embed(tape, inputs)?;

        if cfg.gnn_enabled {
            if inputs.graphs.image.num_nodes != inputs.layout.num_regions {
                return Err(Error::InvalidConfig(format!(
                    "image graph has {} nodes but the layout has {} regions",
                    inputs.graphs.image.num_nodes, inputs.layout.num_regions
                )));
            }
            if inputs.graphs.question.num_nodes != inputs.layout.question_span.1 {
                return Err(Error::InvalidConfig(format!(
                    "question graph has {} nodes but the question span holds {}",
                    inputs.graphs.question.num_nodes, inputs.layout.question_span.1
                )));
            }
            if inputs.graphs.history.num_nodes != inputs.layout.idx_h().len() {
                return Err(Error::InvalidConfig(format!(
                    "history graph has {} nodes but the layout has {} round separators",
                    inputs.graphs.history.num_nodes,
                    inputs.layout.idx_h().len()
                )));
            }
        }

        let cascade_cfg = cfg.cascade_config();
        let mut traces = Vec::new();
        let mut gem_nodes = None;
        let mut prev_image_nodes: Option<Var> = None;

        for l in 0..cfg.layers {
            if cfg.gnn_enabled {
                let (g_img, g_qst, g_hst) =
                    gather_modality_features(tape, text, image, inputs.layout)?;
                let out = cascade_forward(
                    tape,
                    &self.store,
                    &self.gnn_prefix(l),
                    inputs.graphs,
                    CascadeInputs {
                        image: g_img,
                        question: g_qst,
                        history: g_hst,
                    },
                    &cascade_cfg,
                    inputs.edge_mask,
                    prev_image_nodes,
                )?;
                for (modality, attn, edges) in &out.traces {
                    traces.push(AttentionTrace {
                        modality: *modality,
                        layer: l,
                        gnn_layer: attn.gnn_layer,
                        edges: renormalize_per_target(&attn.weights, edges),
                    });
                }
                prev_image_nodes = Some(out.image);
                gem_nodes = Some(GemNodes {
                    image: out.image,
                    question: out.question,
                    history: out.history,
                });
                let fused = scatter_fuse(
                    tape,
                    text,
                    image,
                    out.image,
                    out.question,
                    out.history,
                    inputs.layout,
                    cfg.lambda,
                )?;
                text = fused.0;
                image = fused.1;
            }
            let (t_next, i_next) = dual_stream_layer(
                tape,
                &self.store,
                &format!("bert.l{l}"),
                text,
                image,
                cfg.bert_heads,
                cfg.co_attention,
                StreamMasks::default(),
            );
            text = t_next;
            image = i_next;
        }

        let cls = tape.gather_rows(text, &[inputs.layout.cls_index()]);
        let img_tok = tape.gather_rows(image, &[0]);
        let pw = self.store.var(tape, "pool.w");
        let pb = self.store.var(tape, "pool.b");
        let img_proj = tape.add_row(tape.matmul(img_tok, pw), pb);
        let pooled = tape.mul(cls, img_proj);
        let nw = self.store.var(tape, "nsp.w");
        let nb = self.store.var(tape, "nsp.b");
        let nsp_logit = tape.add_row(tape.matmul(pooled, nw), nb);

        Ok(ForwardOutputs {
            text_states: text,
            image_states: image,
            pooled,
            nsp_logit,
            gem_nodes,
            traces,
        })
    }
}

/// Extracts graph node features from the streams: image rows at `Idx_v`,
/// question rows at `Idx_q`, round-separator rows at `Idx_h`. `[IMG]` and
/// `[CLS]` never enter the graphs.
pub fn gather_modality_features(
    tape: &Tape,
    text: Var,
    image: Var,
    layout: &TokenLayout,
) -> Result<(Var, Var, Var)> {
    let text_rows = tape.value(text).nrows();
    let image_rows = tape.value(image).nrows();
    let idx_v = layout.idx_v();
    let idx_q = layout.idx_q();
    let idx_h = layout.idx_h();
    for (indices, limit, context) in [
        (&idx_v, image_rows, "Idx_v"),
        (&idx_q, text_rows, "Idx_q"),
        (&idx_h.to_vec(), text_rows, "Idx_h"),
    ] {
        if let Some(&bad) = indices.iter().find(|&&i| i >= limit) {
            return Err(Error::IndexOutOfRange {
                context: match context {
                    "Idx_v" => "image gather index",
                    "Idx_q" => "question gather index",
                    _ => "history gather index",
                },
                index: bad,
                limit,
            });
        }
    }
    Ok((
        tape.gather_rows(image, &idx_v),
        tape.gather_rows(text, &idx_q),
        tape.gather_rows(text, idx_h),
    ))
}

/// Writes graph outputs back into the streams and blends with the residual
/// coefficient: `out = lambda * states + (1 - lambda) * scattered`.
/// `lambda = 1` returns the states untouched (bitwise).
#[allow(clippy::too_many_arguments)]
pub fn scatter_fuse(
    tape: &Tape,
    text: Var,
    image: Var,
    gnn_image: Var,
    gnn_question: Var,
    gnn_history: Var,
    layout: &TokenLayout,
    lambda: f64,
) -> Result<(Var, Var)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok((text, image));
    }
    let idx_v = layout.idx_v();
    let idx_q = layout.idx_q();
    let idx_h = layout.idx_h();
    for (rows, want, what) in [
        (tape.value(gnn_image).nrows(), idx_v.len(), "image"),
        (tape.value(gnn_question).nrows(), idx_q.len(), "question"),
        (tape.value(gnn_history).nrows(), idx_h.len(), "history"),
    ] {
        if rows != want {
            return Err(Error::InvalidConfig(format!(
                "{what} scatter: {rows} rows for {want} indices"
            )));
        }
    }

    let image_tilde = tape.scatter_rows(image, gnn_image, &idx_v);
    let text_tilde = tape.scatter_rows(
        tape.scatter_rows(text, gnn_question, &idx_q),
        gnn_history,
        idx_h,
    );
    if lambda == 0.0 {
        return Ok((text_tilde, image_tilde));
    }
    let text_hat = tape.add(tape.scale(text, lambda), tape.scale(text_tilde, 1.0 - lambda));
    let image_hat = tape.add(tape.scale(image, lambda), tape.scale(image_tilde, 1.0 - lambda));
    Ok((text_hat, image_hat))
}

/// Softmax over each target node's incoming head-averaged weights, the form
/// exported for visualization.
fn renormalize_per_target(
    weights: &[f64],
    edges: &crate::gnn::EdgeArrays,
) -> Vec<(usize, usize, f64)> {
    let mut max_per_dst: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (&d, &w) in edges.dst.iter().zip(weights.iter()) {
        let e = max_per_dst.entry(d).or_insert(f64::NEG_INFINITY);
        *e = e.max(w);
    }
    let mut sum_per_dst: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (&d, &w) in edges.dst.iter().zip(weights.iter()) {
        *sum_per_dst.entry(d).or_insert(0.0) += (w - max_per_dst[&d]).exp();
    }
    edges
        .src
        .iter()
        .zip(edges.dst.iter())
        .zip(weights.iter())
        .map(|((&s, &d), &w)| (s, d, (w - max_per_dst[&d]).exp() / sum_per_dst[&d]))
        .collect()
}
