//! A small reverse-mode tape over dense row-major `f64` matrices.
//!
//! Every value is an `Array2<f64>`; vectors are `1 × d` rows. Operations are
//! recorded in execution order on a [`Graph`] and differentiated by walking the
//! tape backwards once. The op set is exactly what the generator and the
//! classifier need, with the heavier pieces (masked attention, layer norm,
//! token negative log-likelihood) fused into single nodes.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackwardFault {
    #[default]
    None,
    /// Scales the Gelu derivative by 1.1.
    GeluDerivative,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SelectRows(Var, Vec<usize>),
    ReplaceRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<Array2<f64>>,
    },
    Nll {
        logits: Var,
        targets: Vec<usize>,
        groups: Vec<usize>,
        probs: Array2<f64>,
    },
    KlStdNormal {
        mu: Var,
        log_var: Var,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar with respect to every parameter that took part in
/// the forward pass. Untouched parameters have no entry.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Dense view: zero matrices for parameters the loss does not depend on.
    pub fn dense(&self, store: &ParamStore) -> Vec<Array2<f64>> {
        store
            .ids()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(store.value(id).raw_dim()))
            })
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

/// Recording tape. Parameters are pulled from a borrowed [`ParamStore`] the
/// first time they are used and reused afterwards, so gradients from shared
/// weights accumulate on a single leaf.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    fault: BackwardFault,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Row-wise log-softmax of a single row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            fault: BackwardFault::None,
        }
    }

    pub fn with_fault(store: &'a ParamStore, fault: BackwardFault) -> Self {
        let mut g = Self::new(store);
        g.fault = fault;
        g
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Leaf);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + b` with the single row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let out = self.value(a) + &self.value(b).row(0);
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers `rows` of `a` (repeats allowed). Doubles as embedding lookup.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.push(out, Op::SelectRows(a, rows.to_vec()))
    }

    /// Copy of `base` with row `rows[i]` overwritten by row `i` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Var {
        let mut out = self.value(base).clone();
        let sv = self.value(src);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).assign(&sv.row(i));
        }
        self.push(
            out,
            Op::ReplaceRows {
                base,
                src,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts differ");
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Multi-head scaled dot-product attention over a batch of `masks.len()`
    /// sequences, each `seq_len` rows long and stacked vertically in `q`, `k`
    /// and `v`. Head `h` owns columns `h·d_k .. (h+1)·d_k`. Each mask is an
    /// additive `seq_len × seq_len` matrix. Returns the concatenated heads
    /// (before the output projection).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        masks: &[&Array2<f64>],
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d_h = qv.ncols();
        let d_k = d_h / heads;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut out = Array2::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(masks.len() * heads);
        for (b, mask) in masks.iter().enumerate() {
            let rows = b * seq_len..(b + 1) * seq_len;
            for h in 0..heads {
                let cols = h * d_k..(h + 1) * d_k;
                let qb = qv.slice(s![rows.clone(), cols.clone()]);
                let kb = kv.slice(s![rows.clone(), cols.clone()]);
                let vb = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qb.dot(&kb.t()) * scale + *mask;
                softmax_rows(&mut p);
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
        )
    }

    /// Attention probabilities recorded by an attention node, indexed
    /// `[batch · heads + head]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per-group summed negative log-likelihood. Row `r` of `logits` scores
    /// `targets[r]` and contributes to output row `groups[r]`. Output is
    /// `n_groups × 1`.
    pub fn nll(&mut self, logits: Var, targets: &[usize], groups: &[usize], n_groups: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = lv.clone();
        let mut out = Array2::zeros((n_groups, 1));
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out[[groups[r], 0]] += lse - row[targets[r]];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        self.push(
            out,
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                groups: groups.to_vec(),
                probs,
            },
        )
    }

    /// Row-wise `½ Σ (μ² + e^{lv} − lv − 1)`, the KL divergence of a diagonal
    /// Gaussian from the standard normal. Output is `rows × 1`.
    pub fn kl_std_normal(&mut self, mu: Var, log_var: Var) -> Var {
        let (m, lv) = (self.value(mu), self.value(log_var));
        let mut out = Array2::zeros((m.nrows(), 1));
        Zip::from(m.rows())
            .and(lv.rows())
            .and(out.rows_mut())
            .for_each(|mr, lr, mut o| {
                o[0] = 0.5
                    * mr.iter()
                        .zip(lr.iter())
                        .map(|(&mu, &l)| mu * mu + l.exp() - l - 1.0)
                        .sum::<f64>();
            });
        self.push(out, Op::KlStdNormal { mu, log_var })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => {
                    let ga = g * &node.value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let fault = if self.fault == BackwardFault::GeluDerivative {
                        1.1
                    } else {
                        1.0
                    };
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= gelu_grad(x) * fault);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        if x <= *lo || x >= *hi {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_row = self.value(*gamma).row(0).to_owned();
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let d = g.ncols() as f64;
                    let mut gx = &g * &gamma_row;
                    for ((mut row, xh), &inv) in gx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let sum_g: f64 = row.sum();
                        let sum_gx: f64 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut row).and(&xh).for_each(|gv, &xv| {
                            *gv = inv / d * (d * *gv - sum_g - xv * sum_gx);
                        });
                    }
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ReplaceRows { base, src, rows } => {
                    let mut gsrc = Array2::zeros(self.value(*src).raw_dim());
                    let mut gbase = g;
                    for (i, &r) in rows.iter().enumerate() {
                        gsrc.row_mut(i).assign(&gbase.row(r));
                        gbase.row_mut(r).fill(0.0);
                    }
                    accumulate(&mut grads, *src, gsrc);
                    accumulate(&mut grads, *base, gbase);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    let ga = g.slice(s![.., ..na]).to_owned();
                    let gb = g.slice(s![.., na..]).to_owned();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    seq_len,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        self.value(*q).view(),
                        self.value(*k).view(),
                        self.value(*v).view(),
                        *heads,
                        *seq_len,
                        probs,
                    );
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Nll {
                    logits,
                    targets,
                    groups,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    for (r, mut row) in gl.rows_mut().into_iter().enumerate() {
                        row[targets[r]] -= 1.0;
                        let scale = g[[groups[r], 0]];
                        row.mapv_inplace(|x| x * scale);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::KlStdNormal { mu, log_var } => {
                    let col = g.column(0);
                    let mut gmu = self.value(*mu).clone();
                    let mut glv = self.value(*log_var).mapv(|l| 0.5 * (l.exp() - 1.0));
                    for (r, &c) in col.iter().enumerate() {
                        gmu.row_mut(r).mapv_inplace(|x| x * c);
                        glv.row_mut(r).mapv_inplace(|x| x * c);
                    }
                    accumulate(&mut grads, *mu, gmu);
                    accumulate(&mut grads, *log_var, glv);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]] / n);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        let mut by_param: Vec<Option<Array2<f64>>> = vec![None; self.store.len()];
        for (id, var) in &self.param_leaves {
            if var.0 < grads.len() {
                by_param[id.index()] = grads[var.0].take();
            }
        }
        Gradients { grads: by_param }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn attention_backward(
    g: &Array2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    seq_len: usize,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d_k = q.ncols() / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut gq = Array2::zeros(q.raw_dim());
    let mut gk = Array2::zeros(k.raw_dim());
    let mut gv = Array2::zeros(v.raw_dim());
    let batches = probs.len() / heads;
    for b in 0..batches {
        let rows = b * seq_len..(b + 1) * seq_len;
        for h in 0..heads {
            let cols = h * d_k..(h + 1) * d_k;
            let p = &probs[b * heads + h];
            let go = g.slice(s![rows.clone(), cols.clone()]);
            let qb = q.slice(s![rows.clone(), cols.clone()]);
            let kb = k.slice(s![rows.clone(), cols.clone()]);
            let vb = v.slice(s![rows.clone(), cols.clone()]);
            gv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
            let gp = go.dot(&vb.t());
            let mut gs = p * &gp;
            for (mut row, (pr, gpr)) in gs.rows_mut().into_iter().zip(p.rows().into_iter().zip(gp.rows())) {
                let dot: f64 = pr.iter().zip(gpr.iter()).map(|(a, b)| a * b).sum();
                Zip::from(&mut row).and(&pr).for_each(|x, &pv| *x -= pv * dot);
            }
            gs.mapv_inplace(|x| x * scale);
            gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&gs.dot(&kb));
            gk.slice_mut(s![rows.clone(), cols]).assign(&gs.t().dot(&qb));
        }
    }
    (gq, gk, gv)
}
