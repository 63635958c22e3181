//! Training objective and negative mining.
//!
//! The objective is `KL + reconstruction + contrastive`. KL and reconstruction
//! are driven by the in-class example; the contrastive hinge compares its
//! likelihood with that of an out-of-class utterance mined by n-gram overlap.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{EncodedSequence, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{Batch, ClangModel, GaussianParams};

/// Margin used in the experiments.
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(kl: f64, reconstruction: f64, contrastive: f64) -> Self {
        Self {
            kl,
            reconstruction,
            contrastive,
            total: kl + reconstruction + contrastive,
        }
    }
}

/// `Σ ½(μ² + σ² − log σ² − 1)` over both latents, averaged over the batch.
pub fn kl_loss(posteriors: &[(GaussianParams, GaussianParams)]) -> f64 {
    let one = |g: &GaussianParams| -> f64 {
        g.mu.iter()
            .zip(g.log_var.iter())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
            .sum()
    };
    posteriors.iter().map(|(d, a)| one(d) + one(a)).sum::<f64>() / posteriors.len() as f64
}

/// Summed next-token NLL of `target` under teacher-forced `logits`
/// (`N × |V|`, row `i` predicting token `i + 1`).
pub fn reconstruction_loss(logits: &Array2<f64>, target: &EncodedSequence) -> f64 {
    let store = crate::params::ParamStore::new();
    let mut g = Graph::new(&store);
    let rows: Vec<usize> = target.layout.predicting_positions().collect();
    let targets: Vec<usize> = rows.iter().map(|&p| target.token_ids[p + 1]).collect();
    let l = g.constant(logits.clone());
    let picked = g.select_rows(l, &rows);
    let nll = g.nll(picked, &targets, &vec![0; rows.len()], 1);
    g.scalar(nll)
}

/// `max{0, λ − log p(x⁺) + log p(x⁻)}`
pub fn contrastive_loss(logp_pos: f64, logp_neg: f64, margin: f64) -> f64 {
    (margin - logp_pos + logp_neg).max(0.0)
}

/// Shared unigrams, bigrams, and intent-name unigrams between two examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Similarity {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
}

impl Similarity {
    pub fn total(&self) -> usize {
        self.s1 + self.s2 + self.s3
    }
}

fn unigrams(ex: &LabeledExample) -> HashSet<&str> {
    ex.tokens().collect()
}

fn bigrams(ex: &LabeledExample) -> HashSet<(&str, &str)> {
    let t: Vec<&str> = ex.tokens().collect();
    t.windows(2).map(|w| (w[0], w[1])).collect()
}

fn intent_words(ex: &LabeledExample) -> HashSet<&str> {
    [ex.intent.domain(), ex.intent.action()].into_iter().collect()
}

pub fn similarity(a: &LabeledExample, b: &LabeledExample) -> Similarity {
    Similarity {
        s1: unigrams(a).intersection(&unigrams(b)).count(),
        s2: bigrams(a).intersection(&bigrams(b)).count(),
        s3: intent_words(a).intersection(&intent_words(b)).count(),
    }
}

/// Picks the most similar pool member with a different intent; ties are
/// broken uniformly at random. Returns its pool index.
pub fn mine_negative<R: Rng + ?Sized>(
    positive: &LabeledExample,
    pool: &[LabeledExample],
    rng: &mut R,
) -> Result<(usize, Similarity)> {
    let (uni, bi, names) = (unigrams(positive), bigrams(positive), intent_words(positive));
    let mut best = Vec::new();
    let mut best_s = 0;
    for (i, c) in pool.iter().enumerate() {
        if c.intent == positive.intent {
            continue;
        }
        let s = Similarity {
            s1: uni.intersection(&unigrams(c)).count(),
            s2: bi.intersection(&bigrams(c)).count(),
            s3: names.intersection(&intent_words(c)).count(),
        };
        if best.is_empty() || s.total() > best_s {
            best_s = s.total();
            best.clear();
        }
        if s.total() == best_s {
            best.push((i, s));
        }
    }
    if best.is_empty() {
        return Err(Error::NoNegativeCandidate);
    }
    Ok(best[rng.random_range(0..best.len())])
}

/// One mined pair, stored by index into the training examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativePair {
    pub positive_idx: usize,
    pub negative_idx: usize,
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
}

impl NegativePair {
    pub fn similarity(&self) -> usize {
        self.s1 + self.s2 + self.s3
    }
}

/// Mines a negative from `pool` for every index in `positives`.
pub fn mine_pairs<R: Rng + ?Sized>(positives: &[usize], pool: &[LabeledExample], rng: &mut R) -> Result<Vec<NegativePair>> {
    positives
        .iter()
        .map(|&p| {
            let (n, s) = mine_negative(&pool[p], pool, rng)?;
            Ok(NegativePair {
                positive_idx: p,
                negative_idx: n,
                s1: s.s1,
                s2: s.s2,
                s3: s.s3,
            })
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[NegativePair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<NegativePair>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Standard-normal draws for every item of a batch, one matrix per latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub d: Array2<f64>,
    pub a: Array2<f64>,
}

impl LatentNoise {
    pub fn sample<R: Rng + ?Sized>(rows: usize, d_h: usize, rng: &mut R) -> Self {
        let mut draw = || Array2::from_shape_fn((rows, d_h), |_| StandardNormal.sample(&mut *rng));
        let d = draw();
        Self { d, a: draw() }
    }

    pub fn zeros(rows: usize, d_h: usize) -> Self {
        Self {
            d: Array2::zeros((rows, d_h)),
            a: Array2::zeros((rows, d_h)),
        }
    }
}

/// Scalar graph nodes of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub kl: Var,
    pub reconstruction: Var,
    pub contrastive: Var,
    /// `kl_weight · kl + reconstruction + contrastive`
    pub objective: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown::new(g.scalar(self.kl), g.scalar(self.reconstruction), g.scalar(self.contrastive))
    }
}

/// Builds the objective for `pairs` of (positive, negative) sequences. Both
/// halves go through one forward pass: rows `0..B` are positives, rows
/// `B..2B` negatives, each with its own posterior and noise (`2B × d_h`).
pub fn total_loss_graph(
    model: &ClangModel,
    g: &mut Graph,
    pairs: &[(EncodedSequence, EncodedSequence)],
    noise: &LatentNoise,
    margin: f64,
    kl_weight: f64,
) -> Result<LossVars> {
    let b = pairs.len();
    let seqs: Vec<EncodedSequence> = pairs
        .iter()
        .map(|p| p.0.clone())
        .chain(pairs.iter().map(|p| p.1.clone()))
        .collect();
    let batch = Batch::new(&seqs)?;
    let fwd = model.forward(g, &batch, noise.d.clone(), noise.a.clone());
    let pos: Vec<usize> = (0..b).collect();
    let neg: Vec<usize> = (b..2 * b).collect();

    let kl_rows = |g: &mut Graph, p: crate::model::GaussianVars| {
        let mu = g.select_rows(p.mu, &pos);
        let lv = g.select_rows(p.log_var, &pos);
        g.kl_std_normal(mu, lv)
    };
    let kd = kl_rows(g, fwd.post_d);
    let ka = kl_rows(g, fwd.post_a);
    let kl_items = g.add(kd, ka);
    let kl = g.mean(kl_items);

    let nll_pos = g.select_rows(fwd.nll, &pos);
    let nll_neg = g.select_rows(fwd.nll, &neg);
    let reconstruction = g.mean(nll_pos);
    // λ − log p⁺ + log p⁻ = λ + nll⁺ − nll⁻
    let gap = g.sub(nll_pos, nll_neg);
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    let contrastive = g.mean(hinge);

    let weighted_kl = g.scale(kl, kl_weight);
    let objective = g.add(weighted_kl, reconstruction);
    let objective = g.add(objective, contrastive);
    Ok(LossVars {
        kl,
        reconstruction,
        contrastive,
        objective,
    })
}

pub fn total_loss(
    model: &ClangModel,
    pairs: &[(EncodedSequence, EncodedSequence)],
    noise: &LatentNoise,
    margin: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(&model.store);
    let vars = total_loss_graph(model, &mut g, pairs, noise, margin, 1.0)?;
    let out = vars.breakdown(&g);
    if !out.total.is_finite() {
        return Err(Error::NonFinite {
            context: "total loss".into(),
        });
    }
    Ok(out)
}
