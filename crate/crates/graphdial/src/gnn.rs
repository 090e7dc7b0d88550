//! Spatial-temporal GNN core: edge-conditioned multi-head graph attention
//! layers, attention-based hub embeddings, and the three-graph cascade.
//!
//! Message passing follows a graph-attention variant: per head `h`, the
//! message from source `s` to target `t` is a linear map of the source
//! features concatenated with the edge feature, attention logits come from a
//! LeakyReLU-scored map of the target features and the message, and the
//! aggregated, softmax-weighted messages pass through a shared linear map
//! before the H-way concatenation joins the residual inside a GeLU.
//!
//! The cascade moves summary vectors between modalities through hub nodes:
//! the image hub seeds the history graph, the history output seeds the
//! question graph, and the question output seeds the image graph.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{Graph, Modality};
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

/// Shape and behavior of one modality's GNN block.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnConfig {
    pub node_dim: usize,
    pub edge_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub leaky_slope: f64,
    pub learned_edges: bool,
}

impl GnnConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.node_dim.is_multiple_of(self.heads),
            "heads ({}) must divide node_dim ({}) so the concatenation matches the residual",
            self.heads,
            self.node_dim
        );
        self.node_dim / self.heads
    }
}

/// Flat edge representation for one forward pass. Masked edges keep their
/// topology but have their type feature zeroed.
#[derive(Debug, Clone)]
pub struct EdgeArrays {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub types: Vec<u16>,
    pub masked: Vec<bool>,
}

impl EdgeArrays {
    pub fn from_parts(src: Vec<usize>, dst: Vec<usize>, types: Vec<u16>) -> Self {
        let masked = vec![false; src.len()];
        EdgeArrays {
            src,
            dst,
            types,
            masked,
        }
    }

    /// Extracts edges from a graph; hub edges are dropped when `include_hub`
    /// is false. `masked_pairs` marks directed `(src, dst)` edges whose type
    /// feature must be hidden.
    pub fn from_graph(
        graph: &Graph,
        include_hub: bool,
        masked_pairs: &BTreeSet<(usize, usize)>,
    ) -> Self {
        let hub_type = graph.hub_type();
        let mut out = EdgeArrays {
            src: Vec::new(),
            dst: Vec::new(),
            types: Vec::new(),
            masked: Vec::new(),
        };
        for &(s, d, t) in &graph.edges {
            if !include_hub && t == hub_type {
                continue;
            }
            out.src.push(s);
            out.dst.push(d);
            out.types.push(t);
            out.masked.push(masked_pairs.contains(&(s, d)));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// One-hot type features, `E x edge_dim`; masked edges get a zero row.
    pub fn one_hot(&self, edge_dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), edge_dim));
        for (i, (&t, &m)) in self.types.iter().zip(self.masked.iter()).enumerate() {
            if !m {
                out[[i, (t - 1) as usize]] = 1.0;
            }
        }
        out
    }
}

/// Head-averaged attention weights of one GNN layer, aligned with the edge
/// order of the [`EdgeArrays`] the layer ran on.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub gnn_layer: usize,
    pub weights: Vec<f64>,
}

/// Registers the parameters of one modality block under `prefix`.
pub fn init_gnn_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &GnnConfig,
) {
    let hd = cfg.head_dim();
    for k in 0..cfg.layers {
        for h in 0..cfg.heads {
            store.init_uniform(
                &format!("{prefix}.k{k}.h{h}.msg"),
                cfg.node_dim + cfg.edge_dim,
                hd,
                rng,
            );
            store.init_uniform(
                &format!("{prefix}.k{k}.h{h}.attw"),
                cfg.node_dim + hd,
                hd,
                rng,
            );
            store.init_uniform(&format!("{prefix}.k{k}.h{h}.atta"), hd, 1, rng);
        }
        store.init_uniform(&format!("{prefix}.k{k}.out"), hd, hd, rng);
    }
    if cfg.learned_edges {
        store.init_uniform(&format!("{prefix}.edge"), cfg.edge_dim, cfg.edge_dim, rng);
    }
}

/// Registers the hub scoring MLP for one modality under `prefix`.
pub fn init_hub_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) {
    store.init_uniform(&format!("{prefix}.w1"), dim, dim, rng);
    store.init_zeros(&format!("{prefix}.b1"), 1, dim);
    store.init_uniform(&format!("{prefix}.w2"), dim, 1, rng);
    store.init_zeros(&format!("{prefix}.b2"), 1, 1);
}

/// Attention-based graph embedding: per-node logits from a two-layer MLP,
/// softmax-normalized into weights, then a weighted sum of the node features.
/// `feats` must exclude any hub slot.
pub fn compute_hub(tape: &Tape, store: &ParamStore, prefix: &str, feats: Var) -> Result<Var> {
    let n = tape.value(feats).nrows();
    if n == 0 {
        return Err(Error::EmptyInput("hub embedding needs at least one node"));
    }
    let w1 = store.var(tape, &format!("{prefix}.w1"));
    let b1 = store.var(tape, &format!("{prefix}.b1"));
    let w2 = store.var(tape, &format!("{prefix}.w2"));
    let b2 = store.var(tape, &format!("{prefix}.b2"));
    let h1 = tape.gelu(tape.add_row(tape.matmul(feats, w1), b1));
    let logits = tape.add_row(tape.matmul(h1, w2), b2);
    let alpha = tape.segment_softmax(logits, &vec![0; n]);
    Ok(tape.matmul_tn(alpha, feats))
}

/// One graph-attention layer. Nodes without incoming edges receive a zero
/// aggregate and reduce to `GeLU(residual)`.
pub fn gnn_layer_forward(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    edges: &EdgeArrays,
    feats: Var,
    cfg: &GnnConfig,
) -> (Var, Vec<f64>) {
    let n_total = tape.value(feats).nrows();

    let edge_feat = if cfg.learned_edges {
        let table = store.var(tape, &format!("{prefix}.edge"));
        let idx: Vec<usize> = edges.types.iter().map(|&t| (t - 1) as usize).collect();
        let raw = tape.gather_rows(table, &idx);
        let keep: Vec<f64> = edges.masked.iter().map(|&m| f64::from(!m)).collect();
        let keep = tape.leaf(Array2::from_shape_vec((edges.len(), 1), keep).unwrap());
        tape.mul_col(raw, keep)
    } else {
        tape.leaf(edges.one_hot(cfg.edge_dim))
    };

    let v_src = tape.gather_rows(feats, &edges.src);
    let v_dst = tape.gather_rows(feats, &edges.dst);

    let mut head_outs = Vec::with_capacity(cfg.heads);
    let mut avg_alpha = vec![0.0; edges.len()];
    let out_w = store.var(tape, &format!("{prefix}.out"));
    for h in 0..cfg.heads {
        let msg_w = store.var(tape, &format!("{prefix}.h{h}.msg"));
        let msg = tape.matmul(tape.concat_cols(&[v_src, edge_feat]), msg_w);

        let att_w = store.var(tape, &format!("{prefix}.h{h}.attw"));
        let att_a = store.var(tape, &format!("{prefix}.h{h}.atta"));
        let scored = tape.leaky_relu(
            tape.matmul(tape.concat_cols(&[v_dst, msg]), att_w),
            cfg.leaky_slope,
        );
        let logits = tape.matmul(scored, att_a);
        let alpha = tape.segment_softmax(logits, &edges.dst);

        let alpha_v = tape.value(alpha);
        for (i, a) in avg_alpha.iter_mut().enumerate() {
            *a += alpha_v[[i, 0]] / cfg.heads as f64;
        }

        let weighted = tape.mul_col(msg, alpha);
        let agg = tape.segment_sum(weighted, &edges.dst, n_total);
        head_outs.push(tape.matmul(agg, out_w));
    }
    let concat = tape.concat_cols(&head_outs);
    let out = tape.gelu(tape.add(concat, feats));
    (out, avg_alpha)
}

/// `K` stacked layers; per-layer attention weights are returned for export.
pub fn gnn_block_forward(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    edges: &EdgeArrays,
    mut feats: Var,
    cfg: &GnnConfig,
) -> Result<(Var, Vec<LayerAttention>)> {
    if cfg.layers == 0 {
        return Err(Error::InvalidConfig("GNN block needs K >= 1 layers".into()));
    }
    let mut traces = Vec::with_capacity(cfg.layers);
    for k in 0..cfg.layers {
        let (out, weights) =
            gnn_layer_forward(tape, store, &format!("{prefix}.k{k}"), edges, feats, cfg);
        feats = out;
        traces.push(LayerAttention {
            gnn_layer: k,
            weights,
        });
    }
    Ok((feats, traces))
}

/// Prebuilt topology for one dialog instance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModalityGraphs {
    pub image: Graph,
    pub question: Graph,
    pub history: Graph,
}

/// Directed edges whose type feature is hidden during the forward pass.
#[derive(Debug, Clone, Default)]
pub struct CascadeMask {
    pub image: BTreeSet<(usize, usize)>,
    pub question: BTreeSet<(usize, usize)>,
    pub history: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub image: GnnConfig,
    pub question: GnnConfig,
    pub history: GnnConfig,
    /// When false, hub slots hold zero vectors and hub edges are dropped.
    pub hub_enabled: bool,
    /// Compute the image hub from the previous layer's image block output
    /// instead of the freshly gathered features.
    pub image_hub_post: bool,
}

impl CascadeConfig {
    pub fn for_modality(&self, m: Modality) -> &GnnConfig {
        match m {
            Modality::Image => &self.image,
            Modality::Question => &self.question,
            Modality::History => &self.history,
        }
    }
}

/// Registers all cascade parameters (three blocks, hub MLPs, projections).
pub fn init_cascade_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &CascadeConfig,
) {
    init_gnn_params(store, rng, &format!("{prefix}.img"), &cfg.image);
    init_gnn_params(store, rng, &format!("{prefix}.qst"), &cfg.question);
    init_gnn_params(store, rng, &format!("{prefix}.hst"), &cfg.history);
    if cfg.hub_enabled {
        let image_dim = cfg.image.node_dim;
        let text_dim = cfg.question.node_dim;
        init_hub_params(store, rng, &format!("{prefix}.hub.img"), image_dim);
        init_hub_params(store, rng, &format!("{prefix}.hub.qst"), text_dim);
        init_hub_params(store, rng, &format!("{prefix}.hub.hst"), text_dim);
        store.init_uniform(&format!("{prefix}.proj.i2h.w"), image_dim, text_dim, rng);
        store.init_zeros(&format!("{prefix}.proj.i2h.b"), 1, text_dim);
        store.init_uniform(&format!("{prefix}.proj.q2i.w"), text_dim, image_dim, rng);
        store.init_zeros(&format!("{prefix}.proj.q2i.b"), 1, image_dim);
    }
}

/// Gathered node features entering the cascade (no hub rows).
#[derive(Debug, Clone, Copy)]
pub struct CascadeInputs {
    pub image: Var,
    pub question: Var,
    pub history: Var,
}

/// Non-hub node features leaving the cascade, plus attention traces.
pub struct CascadeOutputs {
    pub image: Var,
    pub question: Var,
    pub history: Var,
    pub traces: Vec<(Modality, LayerAttention, EdgeArrays)>,
}

/// Runs the hub cascade: history sees the image hub, the question sees the
/// history hub, and the image sees the question hub. Hub output rows are
/// discarded; only non-hub rows return to the caller.
#[allow(clippy::too_many_arguments)]
pub fn cascade_forward(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    graphs: &ModalityGraphs,
    inputs: CascadeInputs,
    cfg: &CascadeConfig,
    mask: Option<&CascadeMask>,
    prev_image: Option<Var>,
) -> Result<CascadeOutputs> {
    if !graphs.image.hub_present {
        return Err(Error::MissingHub("image graph"));
    }
    if !graphs.question.hub_present {
        return Err(Error::MissingHub("question graph"));
    }
    if !graphs.history.hub_present {
        return Err(Error::MissingHub("history graph"));
    }
    let empty = CascadeMask::default();
    let mask = mask.unwrap_or(&empty);

    let img_edges = EdgeArrays::from_graph(&graphs.image, cfg.hub_enabled, &mask.image);
    let qst_edges = EdgeArrays::from_graph(&graphs.question, cfg.hub_enabled, &mask.question);
    let hst_edges = EdgeArrays::from_graph(&graphs.history, cfg.hub_enabled, &mask.history);

    let text_dim = cfg.question.node_dim;
    let image_dim = cfg.image.node_dim;
    let mut traces = Vec::new();

    // history block, seeded by the image hub
    let hst_in = if cfg.hub_enabled {
        let img_src = if cfg.image_hub_post {
            prev_image.unwrap_or(inputs.image)
        } else {
            inputs.image
        };
        let i_hub = compute_hub(tape, store, &format!("{prefix}.hub.img"), img_src)?;
        let w = store.var(tape, &format!("{prefix}.proj.i2h.w"));
        let b = store.var(tape, &format!("{prefix}.proj.i2h.b"));
        let projected = tape.add_row(tape.matmul(i_hub, w), b);
        tape.concat_rows(&[inputs.history, projected])
    } else {
        let zero = tape.leaf(Array2::zeros((1, text_dim)));
        tape.concat_rows(&[inputs.history, zero])
    };
    let (hst_full, hst_tr) = gnn_block_forward(
        tape,
        store,
        &format!("{prefix}.hst"),
        &hst_edges,
        hst_in,
        &cfg.history,
    )?;
    let hst_rows: Vec<usize> = (0..graphs.history.num_nodes).collect();
    let hst_out = tape.gather_rows(hst_full, &hst_rows);
    for tr in hst_tr {
        traces.push((Modality::History, tr, hst_edges.clone()));
    }

    // question block, seeded by the history hub
    let qst_in = if cfg.hub_enabled {
        let h_hub = compute_hub(tape, store, &format!("{prefix}.hub.hst"), hst_out)?;
        tape.concat_rows(&[inputs.question, h_hub])
    } else {
        let zero = tape.leaf(Array2::zeros((1, text_dim)));
        tape.concat_rows(&[inputs.question, zero])
    };
    let (qst_full, qst_tr) = gnn_block_forward(
        tape,
        store,
        &format!("{prefix}.qst"),
        &qst_edges,
        qst_in,
        &cfg.question,
    )?;
    let qst_rows: Vec<usize> = (0..graphs.question.num_nodes).collect();
    let qst_out = tape.gather_rows(qst_full, &qst_rows);
    for tr in qst_tr {
        traces.push((Modality::Question, tr, qst_edges.clone()));
    }

    // image block, seeded by the question hub
    let img_in = if cfg.hub_enabled {
        let q_hub = compute_hub(tape, store, &format!("{prefix}.hub.qst"), qst_out)?;
        let w = store.var(tape, &format!("{prefix}.proj.q2i.w"));
        let b = store.var(tape, &format!("{prefix}.proj.q2i.b"));
        let projected = tape.add_row(tape.matmul(q_hub, w), b);
        tape.concat_rows(&[inputs.image, projected])
    } else {
        let zero = tape.leaf(Array2::zeros((1, image_dim)));
        tape.concat_rows(&[inputs.image, zero])
    };
    let (img_full, img_tr) = gnn_block_forward(
        tape,
        store,
        &format!("{prefix}.img"),
        &img_edges,
        img_in,
        &cfg.image,
    )?;
    let img_rows: Vec<usize> = (0..graphs.image.num_nodes).collect();
    let img_out = tape.gather_rows(img_full, &img_rows);
    for tr in img_tr {
        traces.push((Modality::Image, tr, img_edges.clone()));
    }

    Ok(CascadeOutputs {
        image: img_out,
        question: qst_out,
        history: hst_out,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_history_graph, build_image_graph, BoundingBox};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};

    fn small_cfg(node_dim: usize, edge_dim: usize, heads: usize, layers: usize) -> GnnConfig {
        GnnConfig {
            node_dim,
            edge_dim,
            heads,
            layers,
            leaky_slope: 0.2,
            learned_edges: false,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
    }

    #[test]
    fn hub_of_single_node_is_that_node() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        init_hub_params(&mut store, &mut r, "hub", 4);
        let tape = Tape::new();
        let feats = tape.leaf(array![[0.3, -1.0, 0.5, 2.0]]);
        let hub = compute_hub(&tape, &store, "hub", feats).unwrap();
        let v = tape.value(hub);
        assert_eq!(v.row(0).to_vec(), vec![0.3, -1.0, 0.5, 2.0]);
    }

    #[test]
    fn hub_equal_logits_yields_mean() {
        let mut store = ParamStore::new();
        store.insert("hub.w1", Array2::zeros((3, 3)));
        store.insert("hub.b1", Array2::zeros((1, 3)));
        store.insert("hub.w2", Array2::zeros((3, 1)));
        store.insert("hub.b2", Array2::from_elem((1, 1), 0.7));
        let tape = Tape::new();
        let feats = tape.leaf(array![[1.0, 2.0, 3.0], [3.0, 4.0, 7.0]]);
        let hub = compute_hub(&tape, &store, "hub", feats).unwrap();
        let v = tape.value(hub);
        assert!((v[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((v[[0, 1]] - 3.0).abs() < 1e-12);
        assert!((v[[0, 2]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hub_is_permutation_invariant() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        init_hub_params(&mut store, &mut r, "hub", 4);
        let mut data = Array2::zeros((5, 4));
        for i in 0..5 {
            for j in 0..4 {
                data[[i, j]] = ((i * 7 + j * 3) as f64).sin();
            }
        }
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Array2::zeros((5, 4));
        for (new, &old) in perm.iter().enumerate() {
            permuted.row_mut(new).assign(&data.row(old));
        }
        let tape = Tape::new();
        let a = compute_hub(&tape, &store, "hub", tape.leaf(data)).unwrap();
        let b = compute_hub(&tape, &store, "hub", tape.leaf(permuted)).unwrap();
        let (av, bv) = (tape.value(a), tape.value(b));
        for j in 0..4 {
            assert!((av[[0, j]] - bv[[0, j]]).abs() < 1e-9);
        }
    }

    #[test]
    fn hub_rejects_zero_nodes() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        init_hub_params(&mut store, &mut r, "hub", 4);
        let tape = Tape::new();
        let feats = tape.leaf(Array2::zeros((0, 4)));
        assert!(compute_hub(&tape, &store, "hub", feats).is_err());
    }

    #[test]
    fn isolated_node_passes_through_gelu() {
        let cfg = small_cfg(4, 2, 2, 1);
        let mut store = ParamStore::new();
        let mut r = rng(4);
        init_gnn_params(&mut store, &mut r, "g", &cfg);
        let tape = Tape::new();
        let feats = tape.leaf(array![[0.5, -0.3, 1.2, 0.0]]);
        let edges = EdgeArrays::from_parts(vec![], vec![], vec![]);
        let (out, _) = gnn_layer_forward(&tape, &store, "g.k0", &edges, feats, &cfg);
        let v = tape.value(out);
        for (j, &x) in [0.5, -0.3, 1.2, 0.0].iter().enumerate() {
            assert!((v[[0, j]] - gelu(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_one_edge_matches_hand_oracle() {
        let cfg = small_cfg(2, 2, 1, 1);
        let mut store = ParamStore::new();
        let mut r = rng(5);
        init_gnn_params(&mut store, &mut r, "g", &cfg);
        let feats = array![[0.4, -0.6], [1.1, 0.3]];
        let edges = EdgeArrays::from_parts(vec![0], vec![1], vec![2]);

        let tape = Tape::new();
        let (out, alpha) =
            gnn_layer_forward(&tape, &store, "g.k0", &edges, tape.leaf(feats.clone()), &cfg);
        let got = tape.value(out);

        // direct evaluation of the update equations
        let msg_w = store.get("g.k0.h0.msg");
        let out_w = store.get("g.k0.out");
        let m_in = array![[0.4, -0.6, 0.0, 1.0]]; // v_src | one-hot(type 2)
        let m = m_in.dot(msg_w); // 1 x 2
        let agg = m.dot(out_w); // alpha = 1 on the single edge
        let expected0 = [gelu(0.4), gelu(-0.6)];
        let expected1 = [gelu(agg[[0, 0]] + 1.1), gelu(agg[[0, 1]] + 0.3)];
        assert!((alpha[0] - 1.0).abs() < 1e-12);
        for j in 0..2 {
            assert!((got[[0, j]] - expected0[j]).abs() < 1e-12);
            assert!((got[[1, j]] - expected1[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let cfg = small_cfg(4, 3, 2, 1);
        let mut store = ParamStore::new();
        let mut r = rng(6);
        init_gnn_params(&mut store, &mut r, "g", &cfg);

        let mut feats = Array2::zeros((5, 4));
        let mut fr = rng(7);
        for v in feats.iter_mut() {
            *v = fr.gen_range(-1.0..1.0);
        }
        let edges =
            EdgeArrays::from_parts(vec![0, 1, 2, 4, 3], vec![1, 2, 0, 3, 0], vec![1, 2, 3, 1, 2]);

        let perm = [2usize, 4, 0, 1, 3]; // new index of each old node
        let mut pfeats = Array2::zeros((5, 4));
        for (old, &new) in perm.iter().enumerate() {
            pfeats.row_mut(new).assign(&feats.row(old));
        }
        let pedges = EdgeArrays::from_parts(
            edges.src.iter().map(|&s| perm[s]).collect(),
            edges.dst.iter().map(|&d| perm[d]).collect(),
            edges.types.clone(),
        );

        let tape = Tape::new();
        let (a, _) = gnn_layer_forward(&tape, &store, "g.k0", &edges, tape.leaf(feats), &cfg);
        let (b, _) = gnn_layer_forward(&tape, &store, "g.k0", &pedges, tape.leaf(pfeats), &cfg);
        let (av, bv) = (tape.value(a), tape.value(b));
        for (old, &new) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((av[[old, j]] - bv[[new, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg(4, 3, 2, 1);
        let mut store = ParamStore::new();
        let mut r = rng(8);
        init_gnn_params(&mut store, &mut r, "g", &cfg);
        let mut feats = Array2::zeros((6, 4));
        let mut fr = rng(9);
        for v in feats.iter_mut() {
            *v = fr.gen_range(-1.0..1.0);
        }
        let edges = EdgeArrays::from_parts(
            vec![0, 1, 2, 3, 4, 5, 1, 2],
            vec![1, 1, 1, 4, 4, 0, 0, 0],
            vec![1, 2, 3, 1, 2, 3, 1, 2],
        );
        let tape = Tape::new();
        let (_, alpha) = gnn_layer_forward(&tape, &store, "g.k0", &edges, tape.leaf(feats), &cfg);
        for target in [0usize, 1, 4] {
            let sum: f64 = edges
                .dst
                .iter()
                .zip(alpha.iter())
                .filter(|(&d, _)| d == target)
                .map(|(_, &a)| a)
                .sum();
            assert!((sum - 1.0).abs() < 1e-6, "target {target}: sum {sum}");
        }
    }

    #[test]
    fn block_k1_equals_single_layer_and_isolated_k2_double_gelu() {
        let cfg1 = small_cfg(4, 2, 2, 1);
        let mut store = ParamStore::new();
        let mut r = rng(10);
        init_gnn_params(&mut store, &mut r, "g", &cfg1);
        let tape = Tape::new();
        let feats = tape.leaf(array![[0.5, -0.3, 1.2, 0.7]]);
        let edges = EdgeArrays::from_parts(vec![], vec![], vec![]);
        let (single, _) = gnn_layer_forward(&tape, &store, "g.k0", &edges, feats, &cfg1);
        let (block, _) = gnn_block_forward(&tape, &store, "g", &edges, feats, &cfg1).unwrap();
        assert_eq!(tape.value(single), tape.value(block));

        let cfg2 = small_cfg(4, 2, 2, 2);
        let mut store2 = ParamStore::new();
        let mut r2 = rng(11);
        init_gnn_params(&mut store2, &mut r2, "g", &cfg2);
        let (double, _) = gnn_block_forward(&tape, &store2, "g", &edges, feats, &cfg2).unwrap();
        let v = tape.value(double);
        for (j, &x) in [0.5, -0.3, 1.2, 0.7].iter().enumerate() {
            assert!((v[[0, j]] - gelu(gelu(x))).abs() < 1e-12);
        }

        let cfg0 = small_cfg(4, 2, 2, 0);
        assert!(gnn_block_forward(&tape, &store, "g", &edges, feats, &cfg0).is_err());
    }

    fn toy_graphs() -> ModalityGraphs {
        let boxes = [
            BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            BoundingBox::new(6.0, 1.0, 9.0, 4.0).unwrap(),
            BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap(),
        ];
        let image = build_image_graph(&boxes).unwrap();
        let lex = crate::graph::DependencyLexicon::default();
        let parse = vec![
            crate::graph::DependencyEdge {
                head: 1,
                dependent: 0,
                relation: "det".into(),
            },
            crate::graph::DependencyEdge {
                head: 1,
                dependent: 2,
                relation: "amod".into(),
            },
        ];
        let question = crate::graph::build_question_graph(&parse, 3, &lex).unwrap();
        let history = build_history_graph(&[], 2).unwrap();
        ModalityGraphs {
            image,
            question,
            history,
        }
    }

    fn toy_cascade_cfg(hub: bool) -> CascadeConfig {
        CascadeConfig {
            image: small_cfg(6, 12, 2, 1),
            question: small_cfg(4, 48, 2, 1),
            history: small_cfg(4, 2, 2, 1),
            hub_enabled: hub,
            image_hub_post: false,
        }
    }

    fn rand_feats(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        let mut out = Array2::zeros((rows, cols));
        for v in out.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        out
    }

    #[test]
    fn cascade_runs_and_preserves_shapes() {
        let graphs = toy_graphs();
        let cfg = toy_cascade_cfg(true);
        let mut store = ParamStore::new();
        let mut r = rng(12);
        init_cascade_params(&mut store, &mut r, "gnn", &cfg);
        let tape = Tape::new();
        let inputs = CascadeInputs {
            image: tape.leaf(rand_feats(3, 6, 20)),
            question: tape.leaf(rand_feats(3, 4, 21)),
            history: tape.leaf(rand_feats(2, 4, 22)),
        };
        let out = cascade_forward(&tape, &store, "gnn", &graphs, inputs, &cfg, None, None).unwrap();
        assert_eq!(tape.value(out.image).dim(), (3, 6));
        assert_eq!(tape.value(out.question).dim(), (3, 4));
        assert_eq!(tape.value(out.history).dim(), (2, 4));
        // one trace per (modality, gnn layer)
        assert_eq!(out.traces.len(), 3);
    }

    #[test]
    fn cascade_rejects_missing_hub() {
        let mut graphs = toy_graphs();
        graphs.image.hub_present = false;
        let cfg = toy_cascade_cfg(true);
        let mut store = ParamStore::new();
        let mut r = rng(13);
        init_cascade_params(&mut store, &mut r, "gnn", &cfg);
        let tape = Tape::new();
        let inputs = CascadeInputs {
            image: tape.leaf(rand_feats(3, 6, 23)),
            question: tape.leaf(rand_feats(3, 4, 24)),
            history: tape.leaf(rand_feats(2, 4, 25)),
        };
        assert!(cascade_forward(&tape, &store, "gnn", &graphs, inputs, &cfg, None, None).is_err());
    }

    #[test]
    fn hub_disabled_ignores_other_modalities() {
        // with hubs off, permuting question features must leave image output
        // untouched, and no hub parameters are required at all
        let graphs = toy_graphs();
        let cfg = toy_cascade_cfg(false);
        let mut store = ParamStore::new();
        let mut r = rng(14);
        init_cascade_params(&mut store, &mut r, "gnn", &cfg);
        assert!(!store.contains("gnn.hub.img.w1"));

        let tape = Tape::new();
        let img = rand_feats(3, 6, 26);
        let q1 = rand_feats(3, 4, 27);
        let mut q2 = q1.clone();
        q2.row_mut(0).assign(&q1.row(1));
        q2.row_mut(1).assign(&q1.row(0));
        let hst = rand_feats(2, 4, 28);

        let out1 = cascade_forward(
            &tape,
            &store,
            "gnn",
            &graphs,
            CascadeInputs {
                image: tape.leaf(img.clone()),
                question: tape.leaf(q1),
                history: tape.leaf(hst.clone()),
            },
            &cfg,
            None,
            None,
        )
        .unwrap();
        let out2 = cascade_forward(
            &tape,
            &store,
            "gnn",
            &graphs,
            CascadeInputs {
                image: tape.leaf(img),
                question: tape.leaf(q2),
                history: tape.leaf(hst),
            },
            &cfg,
            None,
            None,
        )
        .unwrap();
        assert_eq!(tape.value(out1.image), tape.value(out2.image));
    }

    #[test]
    fn permuting_question_nodes_permutes_q_and_leaves_image_invariant() {
        // the question hub reaches the image graph only through the
        // permutation-invariant hub embedding
        let graphs = toy_graphs();
        let cfg = toy_cascade_cfg(true);
        let mut store = ParamStore::new();
        let mut r = rng(60);
        init_cascade_params(&mut store, &mut r, "gnn", &cfg);

        let img = rand_feats(3, 6, 61);
        let qst = rand_feats(3, 4, 62);
        let hst = rand_feats(2, 4, 63);

        let perm = [2usize, 0, 1]; // new index of each old question node
        let mut pqst = Array2::zeros((3, 4));
        for (old, &new) in perm.iter().enumerate() {
            pqst.row_mut(new).assign(&qst.row(old));
        }
        let mut pgraphs = graphs.clone();
        let hub = graphs.question.num_nodes;
        pgraphs.question.edges = graphs
            .question
            .edges
            .iter()
            .map(|&(s, d, t)| {
                let map = |n: usize| if n == hub { hub } else { perm[n] };
                (map(s), map(d), t)
            })
            .collect();
        pgraphs.question.edges.sort_unstable();

        let tape = Tape::new();
        let base = cascade_forward(
            &tape,
            &store,
            "gnn",
            &graphs,
            CascadeInputs {
                image: tape.leaf(img.clone()),
                question: tape.leaf(qst),
                history: tape.leaf(hst.clone()),
            },
            &cfg,
            None,
            None,
        )
        .unwrap();
        let permuted = cascade_forward(
            &tape,
            &store,
            "gnn",
            &pgraphs,
            CascadeInputs {
                image: tape.leaf(img),
                question: tape.leaf(pqst),
                history: tape.leaf(hst),
            },
            &cfg,
            None,
            None,
        )
        .unwrap();

        let (q_a, q_b) = (tape.value(base.question), tape.value(permuted.question));
        for (old, &new) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((q_a[[old, j]] - q_b[[new, j]]).abs() < 1e-9);
            }
        }
        let (i_a, i_b) = (tape.value(base.image), tape.value(permuted.image));
        for r in 0..3 {
            for j in 0..6 {
                assert!((i_a[[r, j]] - i_b[[r, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_node_cascade_matches_composed_oracle() {
        // one node per modality: the hub of a single node is the node itself,
        // so the cascade reduces to compositions we can replay step by step
        let boxes = [BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap()];
        let graphs = ModalityGraphs {
            image: build_image_graph(&boxes).unwrap(),
            question: crate::graph::build_question_graph(
                &[],
                1,
                &crate::graph::DependencyLexicon::default(),
            )
            .unwrap(),
            history: build_history_graph(&[], 1).unwrap(),
        };
        let cfg = toy_cascade_cfg(true);
        let mut store = ParamStore::new();
        let mut r = rng(15);
        init_cascade_params(&mut store, &mut r, "gnn", &cfg);

        let img = rand_feats(1, 6, 30);
        let qst = rand_feats(1, 4, 31);
        let hst = rand_feats(1, 4, 32);

        let tape = Tape::new();
        let out = cascade_forward(
            &tape,
            &store,
            "gnn",
            &graphs,
            CascadeInputs {
                image: tape.leaf(img.clone()),
                question: tape.leaf(qst.clone()),
                history: tape.leaf(hst.clone()),
            },
            &cfg,
            None,
            None,
        )
        .unwrap();

        // oracle: hub of one node is the node, then project, then run the
        // block on the 2-row graph (node + hub)
        let oracle = Tape::new();
        let i_hub = img.dot(store.get("gnn.proj.i2h.w")) + store.get("gnn.proj.i2h.b");
        let hst_in = oracle.leaf(ndarray::concatenate![ndarray::Axis(0), hst, i_hub]);
        let hst_edges = EdgeArrays::from_graph(&graphs.history, true, &BTreeSet::new());
        let (hst_full, _) =
            gnn_block_forward(&oracle, &store, "gnn.hst", &hst_edges, hst_in, &cfg.history)
                .unwrap();
        let hst_out = oracle.value(oracle.gather_rows(hst_full, &[0]));

        let qst_in = oracle.leaf(ndarray::concatenate![
            ndarray::Axis(0),
            qst,
            hst_out.as_ref().clone()
        ]);
        let qst_edges = EdgeArrays::from_graph(&graphs.question, true, &BTreeSet::new());
        let (qst_full, _) =
            gnn_block_forward(&oracle, &store, "gnn.qst", &qst_edges, qst_in, &cfg.question)
                .unwrap();
        let qst_out = oracle.value(oracle.gather_rows(qst_full, &[0]));

        let q_hub =
            qst_out.as_ref().clone().dot(store.get("gnn.proj.q2i.w")) + store.get("gnn.proj.q2i.b");
        let img_in = oracle.leaf(ndarray::concatenate![ndarray::Axis(0), img, q_hub]);
        let img_edges = EdgeArrays::from_graph(&graphs.image, true, &BTreeSet::new());
        let (img_full, _) =
            gnn_block_forward(&oracle, &store, "gnn.img", &img_edges, img_in, &cfg.image).unwrap();
        let img_out = oracle.value(oracle.gather_rows(img_full, &[0]));

        let got = tape.value(out.image);
        for j in 0..6 {
            assert!((got[[0, j]] - img_out[[0, j]]).abs() < 1e-9);
        }
        let got_q = tape.value(out.question);
        for j in 0..4 {
            assert!((got_q[[0, j]] - qst_out[[0, j]]).abs() < 1e-9);
        }
    }

    #[test]
    fn gnn_parameter_gradients_match_finite_differences() {
        let cfg = toy_cascade_cfg(true);
        let graphs = toy_graphs();
        let img = rand_feats(3, 6, 40);
        let qst = rand_feats(3, 4, 41);
        let hst = rand_feats(2, 4, 42);

        let forward_loss = |tape: &Tape, store: &ParamStore| -> Var {
            let out = cascade_forward(
                tape,
                store,
                "gnn",
                &graphs,
                CascadeInputs {
                    image: tape.leaf(img.clone()),
                    question: tape.leaf(qst.clone()),
                    history: tape.leaf(hst.clone()),
                },
                &cfg,
                None,
                None,
            )
            .unwrap();
            let sq_i = tape.mul(out.image, out.image);
            let sq_q = tape.mul(out.question, out.question);
            let sq_h = tape.mul(out.history, out.history);
            tape.add(
                tape.add(tape.mean_all(sq_i), tape.mean_all(sq_q)),
                tape.mean_all(sq_h),
            )
        };

        let mut store = ParamStore::new();
        let mut r = rng(16);
        init_cascade_params(&mut store, &mut r, "gnn", &cfg);

        let tape = Tape::new();
        let loss = forward_loss(&tape, &store);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let shape = store.get(&name).dim();
            let analytic = grads
                .get(&name)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(shape));
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = store.clone();
                    plus.get_mut(&name)[[i, j]] += eps;
                    let mut minus = store.clone();
                    minus.get_mut(&name)[[i, j]] -= eps;
                    let t_plus = Tape::new();
                    let t_minus = Tape::new();
                    let lp = forward_loss(&t_plus, &plus);
                    let lm = forward_loss(&t_minus, &minus);
                    let numeric =
                        (t_plus.value(lp)[[0, 0]] - t_minus.value(lm)[[0, 0]]) / (2.0 * eps);
                    let a = analytic[[i, j]];
                    let denom = a.abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "{name}[{i},{j}]: analytic={a} numeric={numeric}"
                    );
                }
            }
        }
    }
}
