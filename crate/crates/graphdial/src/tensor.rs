//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for registered parameters.
//! All values are `Array2<f64>`; row vectors are `1 x d` matrices. The tape is
//! single-threaded and deterministic: identical inputs produce bitwise
//! identical outputs and gradients.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array2, Axis};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: usize,
}

type BackwardFn = Box<dyn Fn(&Array2<f64>, &mut dyn FnMut(usize, Array2<f64>))>;

struct Node {
    value: Rc<Array2<f64>>,
    backward: Option<BackwardFn>,
}

/// Gradients of a scalar loss with respect to named parameters.
pub type ParamGrads = BTreeMap<String, Array2<f64>>;

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, String)>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Array2<f64>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            backward,
        });
        Var {
            idx: nodes.len() - 1,
        }
    }

    /// Value of a node (cheaply cloneable).
    pub fn value(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[v.idx].value)
    }

    /// Constant input; no gradient is tracked past it.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    /// Leaf registered under `name`; its gradient is collected by [`backward`](Self::backward).
    pub fn param(&self, name: &str, value: Array2<f64>) -> Var {
        let v = self.push(value, None);
        self.params.borrow_mut().push((v.idx, name.to_string()));
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.dot(&*bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g.dot(&bv.t()));
                sink(b.idx, av.t().dot(g));
            })),
        )
    }

    /// `a * b^T`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.dot(&bv.t());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g.dot(&*bv));
                sink(b.idx, g.t().dot(&*av));
            })),
        )
    }

    /// `a^T * b`
    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.t().dot(&*bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, bv.dot(&g.t()));
                sink(b.idx, av.dot(g));
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.dim(), bv.dim(), "add: shape mismatch");
        let out = &*av + &*bv;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g.clone());
                sink(b.idx, g.clone());
            })),
        )
    }

    /// Adds a `1 x d` row vector to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.nrows(), 1, "add_row: bias must be 1 x d");
        assert_eq!(av.ncols(), rv.ncols(), "add_row: width mismatch");
        let out = &*av + &rv.row(0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                sink(row.idx, summed);
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.dim(), bv.dim(), "sub: shape mismatch");
        let out = &*av - &*bv;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g.clone());
                sink(b.idx, -g);
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.dim(), bv.dim(), "mul: shape mismatch");
        let out = &*av * &*bv;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g * &*bv);
                sink(b.idx, g * &*av);
            })),
        )
    }

    /// Scales row `i` of `a` by scalar `s[i]`; `s` is `n x 1`.
    pub fn mul_col(&self, a: Var, s: Var) -> Var {
        let av = self.value(a);
        let sv = self.value(s);
        assert_eq!(sv.ncols(), 1, "mul_col: scale must be n x 1");
        assert_eq!(av.nrows(), sv.nrows(), "mul_col: row mismatch");
        let out = &*av * &sv.broadcast((av.nrows(), av.ncols())).unwrap();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let ga = g * &sv.broadcast((av.nrows(), av.ncols())).unwrap();
                sink(a.idx, ga);
                let gs = (g * &*av).sum_axis(Axis(1)).insert_axis(Axis(1));
                sink(s.idx, gs);
            })),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = &*av * c;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g * c);
            })),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(gelu_scalar);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g * &av.mapv(gelu_grad_scalar));
            })),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = av.mapv(|x| if x > 0.0 { 1.0 } else { slope });
                sink(a.idx, g * &d);
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(sigmoid_scalar);
        let outc = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = outc.mapv(|s| s * (1.0 - s));
                sink(a.idx, g * &d);
            })),
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(softplus_scalar);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.idx, g * &av.mapv(sigmoid_scalar));
            })),
        )
    }

    /// Softmax along each row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros(av.dim());
        for (i, row) in av.axis_iter(Axis(0)).enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out[[i, j]] = e / z;
            }
        }
        let s = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros(s.dim());
                for i in 0..s.nrows() {
                    let dot: f64 = (0..s.ncols()).map(|j| g[[i, j]] * s[[i, j]]).sum();
                    for j in 0..s.ncols() {
                        ga[[i, j]] = s[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                sink(a.idx, ga);
            })),
        )
    }

    /// Log-softmax along each row.
    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros(av.dim());
        for (i, row) in av.axis_iter(Axis(0)).enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (j, &x) in row.iter().enumerate() {
                out[[i, j]] = x - lse;
            }
        }
        let logp = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros(logp.dim());
                for i in 0..logp.nrows() {
                    let gsum: f64 = (0..logp.ncols()).map(|j| g[[i, j]]).sum();
                    for j in 0..logp.ncols() {
                        ga[[i, j]] = g[[i, j]] - logp[[i, j]].exp() * gsum;
                    }
                }
                sink(a.idx, ga);
            })),
        )
    }

    /// Per-row layer normalization with learnable gain and bias (`1 x d` each).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let (n, d) = xv.dim();
        let mut xnorm = Array2::zeros((n, d));
        let mut inv_sigma = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma.push(is);
            for j in 0..d {
                xnorm[[i, j]] = (xv[[i, j]] - mu) * is;
            }
        }
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                out[[i, j]] = xnorm[[i, j]] * gv[[0, j]] + bv[[0, j]];
            }
        }
        let xn = xnorm;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (n, d) = g.dim();
                let mut gx = Array2::zeros((n, d));
                let mut ggain = Array2::zeros((1, d));
                let mut gbias = Array2::zeros((1, d));
                for i in 0..n {
                    let mut mean_g1 = 0.0;
                    let mut mean_g1x = 0.0;
                    for j in 0..d {
                        let g1 = g[[i, j]] * gv[[0, j]];
                        mean_g1 += g1;
                        mean_g1x += g1 * xn[[i, j]];
                        ggain[[0, j]] += g[[i, j]] * xn[[i, j]];
                        gbias[[0, j]] += g[[i, j]];
                    }
                    mean_g1 /= d as f64;
                    mean_g1x /= d as f64;
                    for j in 0..d {
                        let g1 = g[[i, j]] * gv[[0, j]];
                        gx[[i, j]] = (g1 - mean_g1 - xn[[i, j]] * mean_g1x) * inv_sigma[i];
                    }
                }
                sink(x.idx, gx);
                sink(gain.idx, ggain);
                sink(bias.idx, gbias);
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let n = values[0].nrows();
        let total: usize = values.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut off = 0;
        for v in &values {
            assert_eq!(v.nrows(), n, "concat_cols: row mismatch");
            out.slice_mut(ndarray::s![.., off..off + v.ncols()])
                .assign(v);
            off += v.ncols();
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (&pi, &w) in idxs.iter().zip(widths.iter()) {
                    let part = g.slice(ndarray::s![.., off..off + w]).to_owned();
                    sink(pi, part);
                    off += w;
                }
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let d = values[0].ncols();
        let total: usize = values.iter().map(|v| v.nrows()).sum();
        let mut out = Array2::zeros((total, d));
        let mut off = 0;
        for v in &values {
            assert_eq!(v.ncols(), d, "concat_rows: width mismatch");
            out.slice_mut(ndarray::s![off..off + v.nrows(), ..])
                .assign(v);
            off += v.nrows();
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (&pi, &h) in idxs.iter().zip(heights.iter()) {
                    let part = g.slice(ndarray::s![off..off + h, ..]).to_owned();
                    sink(pi, part);
                    off += h;
                }
            })),
        )
    }

    /// Row `i` of the output is row `indices[i]` of `a`. Repeats allowed.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros((indices.len(), av.ncols()));
        for (i, &src) in indices.iter().enumerate() {
            out.row_mut(i).assign(&av.row(src));
        }
        let idx: Vec<usize> = indices.to_vec();
        let shape = av.dim();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros(shape);
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(src);
                    row += &g.row(i);
                }
                sink(a.idx, ga);
            })),
        )
    }

    /// Copy of `base` with row `indices[i]` replaced by row `i` of `src`.
    /// Indices must be unique.
    pub fn scatter_rows(&self, base: Var, src: Var, indices: &[usize]) -> Var {
        let bv = self.value(base);
        let sv = self.value(src);
        assert_eq!(sv.nrows(), indices.len(), "scatter_rows: row mismatch");
        assert_eq!(sv.ncols(), bv.ncols(), "scatter_rows: width mismatch");
        let mut out = bv.as_ref().clone();
        for (i, &dst) in indices.iter().enumerate() {
            out.row_mut(dst).assign(&sv.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gb = g.clone();
                let mut gs = Array2::zeros((idx.len(), g.ncols()));
                for (i, &dst) in idx.iter().enumerate() {
                    gs.row_mut(i).assign(&g.row(dst));
                    gb.row_mut(dst).fill(0.0);
                }
                sink(base.idx, gb);
                sink(src.idx, gs);
            })),
        )
    }

    /// Softmax over groups of rows sharing a segment id; `a` is `n x 1`.
    pub fn segment_softmax(&self, a: Var, segments: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1, "segment_softmax: expects n x 1");
        assert_eq!(av.nrows(), segments.len());
        let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut maxes = vec![f64::NEG_INFINITY; nseg];
        for (i, &s) in segments.iter().enumerate() {
            maxes[s] = maxes[s].max(av[[i, 0]]);
        }
        let mut sums = vec![0.0; nseg];
        let mut out = Array2::zeros(av.dim());
        for (i, &s) in segments.iter().enumerate() {
            out[[i, 0]] = (av[[i, 0]] - maxes[s]).exp();
            sums[s] += out[[i, 0]];
        }
        for (i, &s) in segments.iter().enumerate() {
            out[[i, 0]] /= sums[s];
        }
        let sm = out.clone();
        let segs: Vec<usize> = segments.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let nseg = segs.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; nseg];
                for (i, &s) in segs.iter().enumerate() {
                    dots[s] += g[[i, 0]] * sm[[i, 0]];
                }
                let mut ga = Array2::zeros(sm.dim());
                for (i, &s) in segs.iter().enumerate() {
                    ga[[i, 0]] = sm[[i, 0]] * (g[[i, 0]] - dots[s]);
                }
                sink(a.idx, ga);
            })),
        )
    }

    /// Sums rows of `a` into `num_segments` output rows keyed by segment id.
    /// Segments with no rows yield zero rows.
    pub fn segment_sum(&self, a: Var, segments: &[usize], num_segments: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), segments.len());
        let mut out = Array2::zeros((num_segments, av.ncols()));
        for (i, &s) in segments.iter().enumerate() {
            let mut row = out.row_mut(s);
            row += &av.row(i);
        }
        let segs: Vec<usize> = segments.to_vec();
        let width = av.ncols();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((segs.len(), width));
                for (i, &s) in segs.iter().enumerate() {
                    ga.row_mut(i).assign(&g.row(s));
                }
                sink(a.idx, ga);
            })),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum();
        let shape = av.dim();
        self.push(
            Array2::from_elem((1, 1), s),
            Some(Box::new(move |g, sink| {
                sink(a.idx, Array2::from_elem(shape, g[[0, 0]]));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = (av.nrows() * av.ncols()) as f64;
        let s = av.sum() / n;
        let shape = av.dim();
        self.push(
            Array2::from_elem((1, 1), s),
            Some(Box::new(move |g, sink| {
                sink(a.idx, Array2::from_elem(shape, g[[0, 0]] / n));
            })),
        )
    }

    /// Mean over rows: `n x d` -> `1 x d`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.nrows() as f64;
        let out = (av.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        let rows = av.nrows();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, g.ncols()));
                for i in 0..rows {
                    ga.row_mut(i).assign(&(&g.row(0) / n));
                }
                sink(a.idx, ga);
            })),
        )
    }

    /// Mean negative log-likelihood: `-(1/n) sum_i logp[i, targets[i]]`.
    pub fn nll_mean(&self, log_probs: Var, targets: &[usize]) -> Var {
        let lv = self.value(log_probs);
        assert_eq!(lv.nrows(), targets.len());
        let n = targets.len() as f64;
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| lv[[i, t]])
            .sum::<f64>()
            / n;
        let tg: Vec<usize> = targets.to_vec();
        let shape = lv.dim();
        self.push(
            Array2::from_elem((1, 1), loss),
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros(shape);
                for (i, &t) in tg.iter().enumerate() {
                    ga[[i, t]] = -g[[0, 0]] / n;
                }
                sink(log_probs.idx, ga);
            })),
        )
    }

    /// Runs the backward pass from a `1 x 1` root and returns gradients of
    /// every registered parameter. Parameters the root does not depend on are
    /// absent from the result.
    pub fn backward(&self, root: Var) -> ParamGrads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.idx].value.dim(),
            (1, 1),
            "backward: root must be a scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.idx] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &nodes[i].backward {
                back(&g, &mut |parent, contrib| match &mut grads[parent] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                });
            } else {
                grads[i] = Some(g); // keep leaf grads for parameter harvest
            }
        }

        let mut out = ParamGrads::new();
        for (idx, name) in self.params.borrow().iter() {
            if let Some(g) = grads[*idx].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
