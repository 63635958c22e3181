//! Utterance generation for few-shot intents: both latents are drawn from the
//! standard-normal prior, composed, and decoded with beam search.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_records, DatasetRecord, IntentLabel, LabeledExample, Shot, ShotClass, Split, TokenId, CLS_ID, PAD_ID, SEP_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::model::{ClangModel, LatentPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Prior-sampling rounds per intent.
    pub s: usize,
    /// Beam width and number of hypotheses kept per round.
    pub k: usize,
    /// Generated tokens per utterance, counting the closing `[SEP]`.
    /// `0` means the model's maximum utterance length plus one.
    pub max_len: usize,
    pub seed: u64,
    /// Keep beams that hit `max_len` without `[SEP]`.
    pub include_truncated: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            s: 10,
            k: 30,
            max_len: 0,
            seed: 0,
            include_truncated: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.k == 0 {
            return Err(Error::Config("s and k must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_max_len(&self, model: &ClangModel) -> Result<usize> {
        let cap = model.config.max_len + 1;
        match self.max_len {
            0 => Ok(cap),
            n if n <= cap => Ok(n),
            n => Err(Error::Config(format!("max_len {n} exceeds the model's limit of {cap}"))),
        }
    }
}

/// `count` pairs of independent `N(0, I)` vectors.
pub fn sample_prior_latents<R: Rng + ?Sized>(count: usize, d_h: usize, rng: &mut R) -> Vec<LatentPair> {
    let mut draw = || Array1::from_shape_fn(d_h, |_| StandardNormal.sample(&mut *rng));
    (0..count)
        .map(|_| {
            let z_d = draw();
            LatentPair { z_d, z_a: draw() }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Utterance tokens, without the closing `[SEP]`.
    pub tokens: Vec<TokenId>,
    /// Summed log-probability of every generated token.
    pub score: f64,
    /// Stopped at `max_len` without producing `[SEP]`.
    pub truncated: bool,
}

/// Every id except `[PAD]`, `[UNK]` and `[CLS]`.
pub fn default_candidates(model: &ClangModel) -> Vec<TokenId> {
    (0..model.vocab.len()).filter(|&t| ![PAD_ID, UNK_ID, CLS_ID].contains(&t)).collect()
}

pub fn beam_search(model: &ClangModel, z: &LatentPair, intent: &IntentLabel, k: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    beam_search_over(model, z, intent, k, max_len, &default_candidates(model))
}

/// Length-synchronous beam search restricted to `candidates`. Each step keeps
/// the `k` best one-token expansions of the live beams; an expansion ending
/// in `[SEP]` or reaching `max_len` becomes a finished hypothesis. Scores are
/// raw sums of log-probabilities, so the search can stop as soon as `k`
/// hypotheses are finished and no live beam beats the worst of them.
pub fn beam_search_over(
    model: &ClangModel,
    z: &LatentPair,
    intent: &IntentLabel,
    k: usize,
    max_len: usize,
    candidates: &[TokenId],
) -> Result<Vec<Hypothesis>> {
    if k == 0 || max_len == 0 {
        return Err(Error::Config("beam width and max_len must be positive".into()));
    }
    if max_len > model.config.max_len + 1 {
        return Err(Error::Config(format!("max_len {max_len} exceeds the model's limit")));
    }
    let d = model.vocab.label_id(intent.domain())?;
    let a = model.vocab.label_id(intent.action())?;
    let z_comp = model.compose(z);

    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<TokenId>> = live.iter().map(|(p, _)| p.clone()).collect();
        let lp = model.next_token_log_probs(&z_comp, d, a, &prefixes)?;
        let mut expansions: Vec<(f64, usize, TokenId)> = Vec::with_capacity(live.len() * candidates.len());
        for (b, (_, score)) in live.iter().enumerate() {
            for &t in candidates {
                expansions.push((score + lp[[b, t]], b, t));
            }
        }
        expansions.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        expansions.truncate(k);

        let mut next = Vec::with_capacity(k);
        for (score, b, t) in expansions {
            let mut tokens = live[b].0.clone();
            if t == SEP_ID {
                finished.push(Hypothesis {
                    tokens,
                    score,
                    truncated: false,
                });
                continue;
            }
            tokens.push(t);
            if step + 1 == max_len {
                finished.push(Hypothesis {
                    tokens,
                    score,
                    truncated: true,
                });
            } else {
                next.push((tokens, score));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= k {
            finished.sort_by(|x, y| y.score.total_cmp(&x.score));
            let best_live = live.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
            if best_live <= finished[k - 1].score {
                break;
            }
        }
    }
    finished.sort_by(|x, y| y.score.total_cmp(&x.score));
    finished.truncate(k);
    Ok(finished)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedUtterance {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub round: usize,
    pub rank: usize,
}

/// Unique generated utterances for one intent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSet {
    pub intent: IntentLabel,
    pub utterances: Vec<GeneratedUtterance>,
    /// Eligible beam outputs seen before deduplication.
    pub candidates: usize,
    /// Beam outputs skipped for being truncated or empty.
    pub skipped: usize,
}

impl GeneratedSet {
    pub fn new(intent: IntentLabel) -> Self {
        Self {
            intent,
            utterances: Vec::new(),
            candidates: 0,
            skipped: 0,
        }
    }

    /// Adds the candidates whose text is not present yet; returns how many
    /// were added.
    pub fn merge(&mut self, candidates: impl IntoIterator<Item = GeneratedUtterance>) -> usize {
        let mut seen: HashSet<String> = self.utterances.iter().map(|u| u.text.clone()).collect();
        let before = self.utterances.len();
        for c in candidates {
            self.candidates += 1;
            if seen.insert(c.text.clone()) {
                self.utterances.push(c);
            }
        }
        self.utterances.len() - before
    }

    pub fn uniqueness_rate(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.utterances.len() as f64 / self.candidates as f64
        }
    }

    pub fn examples(&self) -> Result<Vec<LabeledExample>> {
        self.utterances
            .iter()
            .map(|u| LabeledExample::new(&u.text, self.intent.clone(), ShotClass::FewShot))
            .collect()
    }
}

/// Beam search from each given latent, pooled then deduplicated by text.
pub fn generate_from_latents(
    model: &ClangModel,
    intent: &IntentLabel,
    latents: &[LatentPair],
    cfg: &GenConfig,
) -> Result<GeneratedSet> {
    let max_len = cfg.effective_max_len(model)?;
    let mut set = GeneratedSet::new(intent.clone());
    for (round, z) in latents.iter().enumerate() {
        let hyps = beam_search(model, z, intent, cfg.k, max_len)?;
        let mut batch = Vec::with_capacity(hyps.len());
        for (rank, h) in hyps.into_iter().enumerate() {
            if h.tokens.is_empty() || (h.truncated && !cfg.include_truncated) {
                set.skipped += 1;
                continue;
            }
            batch.push(GeneratedUtterance {
                text: model.vocab.detokenize(&h.tokens),
                tokens: h.tokens,
                score: h.score,
                round,
                rank,
            });
        }
        set.merge(batch);
    }
    Ok(set)
}

/// `s` prior rounds of top-`k` beam search per intent. Intents run in
/// parallel; each owns a random stream keyed by its position, so results
/// do not depend on scheduling.
pub fn augment(model: &ClangModel, intents: &[IntentLabel], cfg: &GenConfig) -> Result<Vec<GeneratedSet>> {
    cfg.validate()?;
    intents
        .par_iter()
        .enumerate()
        .map(|(i, intent)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let latents = sample_prior_latents(cfg.s, model.d_h(), &mut rng);
            generate_from_latents(model, intent, &latents, cfg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessSummary {
    pub intents: usize,
    pub candidates: usize,
    pub unique: usize,
    pub rate: f64,
}

pub fn uniqueness_summary(sets: &[GeneratedSet]) -> UniquenessSummary {
    let candidates = sets.iter().map(|s| s.candidates).sum();
    let unique = sets.iter().map(|s| s.utterances.len()).sum();
    UniquenessSummary {
        intents: sets.len(),
        candidates,
        unique,
        rate: if candidates == 0 { 0.0 } else { unique as f64 / candidates as f64 },
    }
}

/// Corpus-format lines tagged `"source": "generated"`.
pub fn generated_records(sets: &[GeneratedSet]) -> Vec<DatasetRecord> {
    sets.iter()
        .flat_map(|s| {
            s.utterances.iter().map(move |u| DatasetRecord {
                utterance: u.text.clone(),
                domain: s.intent.domain().to_string(),
                action: s.intent.action().to_string(),
                split: Split::Train,
                shot: Shot::Few,
                source: Some("generated".into()),
            })
        })
        .collect()
}

pub fn write_generated(path: &Path, sets: &[GeneratedSet]) -> Result<()> {
    write_records(path, &generated_records(sets))
}
