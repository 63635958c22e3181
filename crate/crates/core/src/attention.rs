//! Attention masks and masked multi-head transformer layers.
//!
//! Masks are additive: `0` lets a query attend to a key, [`MASK_SENTINEL`]
//! stands in for `−∞`. Two layouts exist. The encoder mask only stops the
//! domain and action tokens from seeing each other. The decoder mask isolates
//! the latent slot at position 0, keeps the intent tokens among themselves,
//! and lets each utterance token see the intent plus everything to its left.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::corpus::RoleLayout;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Finite stand-in for `−∞`; `exp` of it underflows to exactly zero.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    values: Array2<f64>,
}

impl MaskMatrix {
    /// All-zero `n × n` mask.
    pub fn open(n: usize) -> Self {
        Self {
            values: Array2::zeros((n, n)),
        }
    }

    /// Wraps raw values. Every entry must be `0` or the sentinel, and every
    /// row must allow at least one column.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Config(format!("mask must be square, got {:?}", values.dim())));
        }
        if let Some(x) = values.iter().find(|&&x| x != 0.0 && x != MASK_SENTINEL) {
            return Err(Error::Config(format!("mask entry {x} is neither 0 nor the sentinel")));
        }
        let m = Self { values };
        m.check_rows()?;
        Ok(m)
    }

    fn check_rows(&self) -> Result<()> {
        match self.values.rows().into_iter().position(|r| r.iter().all(|&x| x != 0.0)) {
            Some(i) => Err(Error::DeadMaskRow(i)),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_blocked(&self, query: usize, key: usize) -> bool {
        self.values[[query, key]] != 0.0
    }

    /// Keys visible from `query`.
    pub fn allowed(&self, query: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| !self.is_blocked(query, k)).collect()
    }

    pub fn blocked_count(&self) -> usize {
        self.values.iter().filter(|&&x| x != 0.0).count()
    }

    fn block(&mut self, query: usize, key: usize) {
        self.values[[query, key]] = MASK_SENTINEL;
    }

    /// Blocks every key at or past `real_len` for all queries.
    fn block_padding(&mut self, real_len: usize) {
        for q in 0..self.len() {
            for k in real_len..self.len() {
                self.block(q, k);
            }
        }
    }
}

fn check_len(layout: &RoleLayout, n: usize) -> Result<()> {
    if n < 5 {
        return Err(Error::LayoutTooShort(n));
    }
    if n < layout.len() {
        return Err(Error::Config(format!(
            "mask length {n} is shorter than the {} positions of the layout",
            layout.len()
        )));
    }
    Ok(())
}

/// Encoder mask over `n ≥ layout.len()` positions; positions past the layout
/// are padding and hidden from every query.
pub fn build_encoder_mask(layout: &RoleLayout, n: usize) -> Result<MaskMatrix> {
    check_len(layout, n)?;
    let mut m = MaskMatrix::open(n);
    m.block(RoleLayout::DOMAIN, RoleLayout::ACTION);
    m.block(RoleLayout::ACTION, RoleLayout::DOMAIN);
    m.block_padding(layout.len());
    m.check_rows()?;
    Ok(m)
}

pub fn build_decoder_mask(layout: &RoleLayout, n: usize) -> Result<MaskMatrix> {
    check_len(layout, n)?;
    Ok(decoder_mask(layout.len(), n))
}

/// Full visibility among the first `real_len` positions; the rest are padding.
pub fn padding_mask(real_len: usize, n: usize) -> Result<MaskMatrix> {
    if real_len == 0 || real_len > n {
        return Err(Error::Config(format!("real length {real_len} does not fit in {n} positions")));
    }
    let mut m = MaskMatrix::open(n);
    m.block_padding(real_len);
    Ok(m)
}

/// Decoder rule for a sequence whose first `real_len ≥ 4` positions are
/// `z, y_d, y_a, [SEP], w…`. Also used for generation prefixes that do not
/// end in `[SEP]` yet.
pub(crate) fn decoder_mask(real_len: usize, n: usize) -> MaskMatrix {
    debug_assert!(real_len >= 4 && n >= real_len);
    let mut m = MaskMatrix {
        values: Array2::from_elem((n, n), MASK_SENTINEL),
    };
    m.values[[0, 0]] = 0.0;
    for q in 1..RoleLayout::UTTERANCE_START {
        for k in 1..RoleLayout::UTTERANCE_START {
            m.values[[q, k]] = 0.0;
        }
    }
    for q in RoleLayout::UTTERANCE_START..n {
        for k in 0..=q.min(real_len - 1) {
            m.values[[q, k]] = 0.0;
        }
    }
    m
}

/// Weights of one post-norm transformer block. Query/key/value projections
/// hold all heads side by side (`d_h × d_h`, head `h` owning columns
/// `h·d_k..(h+1)·d_k`). Keys carry no bias: it would add the same amount to
/// every logit of a query row, which the softmax cancels.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl LayerParams {
    /// Registers a block under `prefix`; feed-forward inner width is `4·d_h`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_h: usize, std: f64, rng: &mut R) -> Self {
        let ff = 4 * d_h;
        let mut w = |name: &str, r, c| store.normal(format!("{prefix}.{name}"), r, c, std, rng);
        let (wq, wk, wv, wo) = (w("wq", d_h, d_h), w("wk", d_h, d_h), w("wv", d_h, d_h), w("wo", d_h, d_h));
        let (ff_w1, ff_w2) = (w("ff_w1", d_h, ff), w("ff_w2", ff, d_h));
        Self {
            wq,
            wk,
            wv,
            wo,
            ff_w1,
            ff_w2,
            bq: store.zeros(format!("{prefix}.bq"), 1, d_h),
            bv: store.zeros(format!("{prefix}.bv"), 1, d_h),
            bo: store.zeros(format!("{prefix}.bo"), 1, d_h),
            ln1_gamma: store.ones(format!("{prefix}.ln1_gamma"), 1, d_h),
            ln1_beta: store.zeros(format!("{prefix}.ln1_beta"), 1, d_h),
            ff_b1: store.zeros(format!("{prefix}.ff_b1"), 1, ff),
            ff_b2: store.zeros(format!("{prefix}.ff_b2"), 1, d_h),
            ln2_gamma: store.ones(format!("{prefix}.ln2_gamma"), 1, d_h),
            ln2_beta: store.zeros(format!("{prefix}.ln2_beta"), 1, d_h),
        }
    }
}

/// Tape handles produced by one layer, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// The fused attention node (its probabilities are on the graph).
    pub attention: Var,
    /// Attention sublayer output after the output projection.
    pub attention_output: Var,
    pub output: Var,
}

/// `softmax(QKᵀ/√d_k + M)V` per head, heads concatenated then projected.
/// `x` stacks `masks.len()` sequences of `masks[0].len()` rows each.
pub fn masked_attention(g: &mut Graph, x: Var, p: &LayerParams, masks: &[MaskMatrix], heads: usize) -> (Var, Var) {
    let seq_len = masks[0].len();
    debug_assert_eq!(g.value(x).nrows(), seq_len * masks.len());
    let (wq, bq) = (g.param(p.wq), g.param(p.bq));
    let wk = g.param(p.wk);
    let (wv, bv) = (g.param(p.wv), g.param(p.bv));
    let q = g.linear(x, wq, bq);
    let k = g.matmul(x, wk);
    let v = g.linear(x, wv, bv);
    let mask_values: Vec<&Array2<f64>> = masks.iter().map(|m| m.values()).collect();
    let attn = g.attention(q, k, v, heads, seq_len, &mask_values);
    let (wo, bo) = (g.param(p.wo), g.param(p.bo));
    (attn, g.linear(attn, wo, bo))
}

/// Attention → add & norm → Gelu feed-forward → add & norm.
pub fn transformer_layer(g: &mut Graph, x: Var, p: &LayerParams, masks: &[MaskMatrix], heads: usize) -> LayerTrace {
    let (attention, attention_output) = masked_attention(g, x, p, masks, heads);
    let res1 = g.add(x, attention_output);
    let (g1, b1) = (g.param(p.ln1_gamma), g.param(p.ln1_beta));
    let h = g.layer_norm(res1, g1, b1);
    let (w1, fb1) = (g.param(p.ff_w1), g.param(p.ff_b1));
    let inner = g.linear(h, w1, fb1);
    let inner = g.gelu(inner);
    let (w2, fb2) = (g.param(p.ff_w2), g.param(p.ff_b2));
    let ff = g.linear(inner, w2, fb2);
    let res2 = g.add(h, ff);
    let (g2, b2) = (g.param(p.ln2_gamma), g.param(p.ln2_beta));
    let output = g.layer_norm(res2, g2, b2);
    LayerTrace {
        attention,
        attention_output,
        output,
    }
}
