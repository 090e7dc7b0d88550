//! Dual-stream transformer layer: per-stream self-attention, a co-attention
//! sub-block that exchanges keys/values between the text and image streams,
//! and a feed-forward block, each with residual + layer norm.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

const LN_EPS: f64 = 1e-6;
const NEG_INF: f64 = -1e30;

/// Validity masks per stream; `true` marks a real (non-padding) position.
#[derive(Debug, Clone, Copy, Default)]
pub struct StreamMasks<'a> {
    pub text: Option<&'a [bool]>,
    pub image: Option<&'a [bool]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn init_attention_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    query_dim: usize,
    key_dim: usize,
    heads: usize,
) {
    let hd = query_dim / heads;
    for h in 0..heads {
        store.init_uniform(&format!("{prefix}.h{h}.q"), query_dim, hd, rng);
        store.init_uniform(&format!("{prefix}.h{h}.k"), key_dim, hd, rng);
        store.init_uniform(&format!("{prefix}.h{h}.v"), key_dim, hd, rng);
    }
    store.init_uniform(&format!("{prefix}.o.w"), query_dim, query_dim, rng);
    store.init_zeros(&format!("{prefix}.o.b"), 1, query_dim);
    store.init_ones(&format!("{prefix}.ln.g"), 1, query_dim);
    store.init_zeros(&format!("{prefix}.ln.b"), 1, query_dim);
}

fn init_ffn_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, mult: usize) {
    store.init_uniform(&format!("{prefix}.w1"), dim, dim * mult, rng);
    store.init_zeros(&format!("{prefix}.b1"), 1, dim * mult);
    store.init_uniform(&format!("{prefix}.w2"), dim * mult, dim, rng);
    store.init_zeros(&format!("{prefix}.b2"), 1, dim);
    store.init_ones(&format!("{prefix}.ln.g"), 1, dim);
    store.init_zeros(&format!("{prefix}.ln.b"), 1, dim);
}

/// Registers one dual-stream layer under `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn init_dual_stream_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    text_dim: usize,
    image_dim: usize,
    heads: usize,
    ffn_mult: usize,
    co_attention: bool,
) {
    assert!(text_dim.is_multiple_of(heads) && image_dim.is_multiple_of(heads));
    init_attention_params(store, rng, &format!("{prefix}.txt.self"), text_dim, text_dim, heads);
    init_attention_params(store, rng, &format!("{prefix}.img.self"), image_dim, image_dim, heads);
    if co_attention {
        init_attention_params(store, rng, &format!("{prefix}.txt.co"), text_dim, image_dim, heads);
        init_attention_params(store, rng, &format!("{prefix}.img.co"), image_dim, text_dim, heads);
    }
    init_ffn_params(store, rng, &format!("{prefix}.txt.ffn"), text_dim, ffn_mult);
    init_ffn_params(store, rng, &format!("{prefix}.img.ffn"), image_dim, ffn_mult);
}

fn key_mask_leaf(tape: &Tape, rows: usize, mask: Option<&[bool]>, cols: usize) -> Option<Var> {
    let mask = mask?;
    assert_eq!(mask.len(), cols, "mask length must match key count");
    let mut m = Array2::zeros((rows, cols));
    for (j, &valid) in mask.iter().enumerate() {
        if !valid {
            for i in 0..rows {
                m[[i, j]] = NEG_INF;
            }
        }
    }
    Some(tape.leaf(m))
}

/// Multi-head scaled dot-product attention followed by the output projection.
/// `key_mask` hides padded key positions from every query.
fn attention(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    queries: Var,
    keys: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Var {
    let n = tape.value(queries).nrows();
    let m = tape.value(keys).nrows();
    let mask = key_mask_leaf(tape, n, key_mask, m);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = store.var(tape, &format!("{prefix}.h{h}.q"));
        let wk = store.var(tape, &format!("{prefix}.h{h}.k"));
        let wv = store.var(tape, &format!("{prefix}.h{h}.v"));
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(keys, wk);
        let v = tape.matmul(keys, wv);
        let hd = tape.value(q).ncols() as f64;
        let mut logits = tape.scale(tape.matmul_nt(q, k), 1.0 / hd.sqrt());
        if let Some(mask) = mask {
            logits = tape.add(logits, mask);
        }
        let alpha = tape.softmax_rows(logits);
        head_outs.push(tape.matmul(alpha, v));
    }
    let concat = tape.concat_cols(&head_outs);
    let wo = store.var(tape, &format!("{prefix}.o.w"));
    let bo = store.var(tape, &format!("{prefix}.o.b"));
    tape.add_row(tape.matmul(concat, wo), bo)
}

fn residual_norm(tape: &Tape, store: &ParamStore, prefix: &str, x: Var, delta: Var) -> Var {
    let g = store.var(tape, &format!("{prefix}.ln.g"));
    let b = store.var(tape, &format!("{prefix}.ln.b"));
    tape.layer_norm(tape.add(x, delta), g, b, LN_EPS)
}

fn ffn(tape: &Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w1 = store.var(tape, &format!("{prefix}.w1"));
    let b1 = store.var(tape, &format!("{prefix}.b1"));
    let w2 = store.var(tape, &format!("{prefix}.w2"));
    let b2 = store.var(tape, &format!("{prefix}.b2"));
    let hidden = tape.gelu(tape.add_row(tape.matmul(x, w1), b1));
    let out = tape.add_row(tape.matmul(hidden, w2), b2);
    residual_norm(tape, store, prefix, x, out)
}

/// One dual-stream layer. Both co-attention sub-blocks read the other
/// stream's post-self-attention states, so the exchange is symmetric.
#[allow(clippy::too_many_arguments)]
pub fn dual_stream_layer(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    text: Var,
    image: Var,
    heads: usize,
    co_attention: bool,
    masks: StreamMasks<'_>,
) -> (Var, Var) {
    let t_self = attention(
        tape,
        store,
        &format!("{prefix}.txt.self"),
        text,
        text,
        heads,
        masks.text,
    );
    let t1 = residual_norm(tape, store, &format!("{prefix}.txt.self"), text, t_self);
    let i_self = attention(
        tape,
        store,
        &format!("{prefix}.img.self"),
        image,
        image,
        heads,
        masks.image,
    );
    let i1 = residual_norm(tape, store, &format!("{prefix}.img.self"), image, i_self);

    let (t2, i2) = if co_attention {
        let t_co = attention(
            tape,
            store,
            &format!("{prefix}.txt.co"),
            t1,
            i1,
            heads,
            masks.image,
        );
        let i_co = attention(
            tape,
            store,
            &format!("{prefix}.img.co"),
            i1,
            t1,
            heads,
            masks.text,
        );
        (
            residual_norm(tape, store, &format!("{prefix}.txt.co"), t1, t_co),
            residual_norm(tape, store, &format!("{prefix}.img.co"), i1, i_co),
        )
    } else {
        (t1, i1)
    };

    let t3 = ffn(tape, store, &format!("{prefix}.txt.ffn"), t2);
    let i3 = ffn(tape, store, &format!("{prefix}.img.ffn"), i2);
    (t3, i3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((rows, cols));
        for v in out.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        out
    }

    fn setup(co: bool, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_dual_stream_params(&mut store, &mut rng, "bert.l0", 8, 6, 2, 2, co);
        store
    }

    #[test]
    fn output_shapes_match_input_shapes() {
        let store = setup(true, 1);
        let tape = Tape::new();
        let t = tape.leaf(rand_mat(5, 8, 2));
        let i = tape.leaf(rand_mat(4, 6, 3));
        let (t_out, i_out) = dual_stream_layer(
            &tape,
            &store,
            "bert.l0",
            t,
            i,
            2,
            true,
            StreamMasks::default(),
        );
        assert_eq!(tape.value(t_out).dim(), (5, 8));
        assert_eq!(tape.value(i_out).dim(), (4, 6));
    }

    #[test]
    fn padding_positions_do_not_influence_valid_outputs() {
        let store = setup(true, 4);
        let tape = Tape::new();
        let t_base = rand_mat(4, 8, 5);
        let i_base = rand_mat(3, 6, 6);

        // pad one extra position on each stream with very different garbage
        let pad_with = |base: &Array2<f64>, fill: f64| {
            let mut padded = Array2::from_elem((base.nrows() + 1, base.ncols()), fill);
            padded
                .slice_mut(ndarray::s![..base.nrows(), ..])
                .assign(base);
            padded
        };
        let masks_t = [true, true, true, true, false];
        let masks_i = [true, true, true, false];

        let run = |t_fill: f64, i_fill: f64| {
            let t = tape.leaf(pad_with(&t_base, t_fill));
            let i = tape.leaf(pad_with(&i_base, i_fill));
            let (t_out, i_out) = dual_stream_layer(
                &tape,
                &store,
                "bert.l0",
                t,
                i,
                2,
                true,
                StreamMasks {
                    text: Some(&masks_t),
                    image: Some(&masks_i),
                },
            );
            (tape.value(t_out), tape.value(i_out))
        };

        let (t1, i1) = run(7.0, -9.0);
        let (t2, i2) = run(-123.0, 55.0);
        for r in 0..4 {
            for c in 0..8 {
                assert!((t1[[r, c]] - t2[[r, c]]).abs() < 1e-12);
            }
        }
        for r in 0..3 {
            for c in 0..6 {
                assert!((i1[[r, c]] - i2[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn without_co_attention_text_ignores_image() {
        let store = setup(false, 7);
        let tape = Tape::new();
        let t = rand_mat(4, 8, 8);
        let (t_out1, _) = dual_stream_layer(
            &tape,
            &store,
            "bert.l0",
            tape.leaf(t.clone()),
            tape.leaf(rand_mat(3, 6, 9)),
            2,
            false,
            StreamMasks::default(),
        );
        let (t_out2, _) = dual_stream_layer(
            &tape,
            &store,
            "bert.l0",
            tape.leaf(t),
            tape.leaf(rand_mat(3, 6, 10)),
            2,
            false,
            StreamMasks::default(),
        );
        assert_eq!(tape.value(t_out1), tape.value(t_out2));
    }

    #[test]
    fn deterministic_given_inputs_and_params() {
        let store = setup(true, 11);
        let tape = Tape::new();
        let t = rand_mat(4, 8, 12);
        let i = rand_mat(3, 6, 13);
        let run = || {
            let (t_out, i_out) = dual_stream_layer(
                &tape,
                &store,
                "bert.l0",
                tape.leaf(t.clone()),
                tape.leaf(i.clone()),
                2,
                true,
                StreamMasks::default(),
            );
            (tape.value(t_out), tape.value(i_out))
        };
        let (a, b) = run();
        let (c, d) = run();
        assert_eq!(a, c);
        assert_eq!(b, d);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let store = setup(true, 14);
        let t = rand_mat(3, 8, 15);
        let i = rand_mat(2, 6, 16);

        let loss_of = |s: &ParamStore| -> f64 {
            let tape = Tape::new();
            let (t_out, i_out) = dual_stream_layer(
                &tape,
                &s.clone(),
                "bert.l0",
                tape.leaf(t.clone()),
                tape.leaf(i.clone()),
                2,
                true,
                StreamMasks::default(),
            );
            let sq_t = tape.mul(t_out, t_out);
            let sq_i = tape.mul(i_out, i_out);
            let l = tape.add(tape.mean_all(sq_t), tape.mean_all(sq_i));
            tape.value(l)[[0, 0]]
        };

        let tape = Tape::new();
        let (t_out, i_out) = dual_stream_layer(
            &tape,
            &store,
            "bert.l0",
            tape.leaf(t.clone()),
            tape.leaf(i.clone()),
            2,
            true,
            StreamMasks::default(),
        );
        let sq_t = tape.mul(t_out, t_out);
        let sq_i = tape.mul(i_out, i_out);
        let loss = tape.add(tape.mean_all(sq_t), tape.mean_all(sq_i));
        let grads = tape.backward(loss);

        // spot-check a few entries of every tensor kind
        let eps = 1e-6;
        for name in [
            "bert.l0.txt.self.h0.q",
            "bert.l0.txt.co.h1.k",
            "bert.l0.img.self.o.w",
            "bert.l0.img.co.ln.g",
            "bert.l0.txt.ffn.w2",
            "bert.l0.img.ffn.b1",
        ] {
            let analytic = &grads[name];
            let (rows, cols) = analytic.dim();
            for &(r, c) in &[(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 2)] {
                let mut plus = store.clone();
                plus.get_mut(name)[[r, c]] += eps;
                let mut minus = store.clone();
                minus.get_mut(name)[[r, c]] -= eps;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let a = analytic[[r, c]];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() < 1e-8 || (a - numeric).abs() / denom < 1e-4,
                    "{name}[{r},{c}]: analytic={a} numeric={numeric}"
                );
            }
        }
    }
}
