//! Optimisation loop, validation-based epoch selection and gradient checking.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardFault, Gradients, Graph};
use crate::corpus::{build_vocabulary, EncodedSequence, IntentLabel, LabeledExample, ShotClass};
use crate::error::{Error, Result};
use crate::losses::{mine_pairs, total_loss_graph, LatentNoise, LossBreakdown, NegativePair, DEFAULT_MARGIN};
use crate::model::{Batch, ClangModel, ModelConfig};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Candidate epoch counts; training runs to the largest and keeps the
    /// grid point with the lowest validation reconstruction error.
    pub epoch_grid: Vec<usize>,
    pub margin: f64,
    pub seed: u64,
    pub validation_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Linear KL warm-up length in steps; 0 disables annealing.
    pub kl_anneal_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            steps_per_epoch: 1000,
            epoch_grid: vec![50, 75, 100],
            margin: DEFAULT_MARGIN,
            seed: 0,
            validation_size: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            kl_anneal_steps: 0,
        }
    }
}

impl TrainConfig {
    /// Budget sized for the synthetic grammar on a laptop. The grid has a
    /// single point: on the grammar, many-shot validation error bottoms out
    /// well before the few-shot intents are learned.
    pub fn desk() -> Self {
        Self {
            steps_per_epoch: 100,
            epoch_grid: vec![20],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.steps_per_epoch > 0
            && self.margin >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epoch_grid.iter().copied().max().unwrap_or(0)
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.ids().map(|id| Array2::zeros(store.value(id).raw_dim())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            clip: cfg.grad_clip,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Clips, then applies one bias-corrected update. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Gradients) -> f64 {
        let norm = grads.global_norm();
        if norm > self.clip {
            grads.scale(self.clip / norm);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match grads.get(id) {
                Some(g) => {
                    m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| self.beta1 * m);
                    v.mapv_inplace(|v| self.beta2 * v);
                }
            }
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(store.value_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Train,
    Validation,
}

/// One CSV row. Validation rows only fill `reconstruction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub kind: RowKind,
    pub step: usize,
    pub epoch: usize,
    pub kl: Option<f64>,
    pub reconstruction: f64,
    pub contrastive: Option<f64>,
    pub total: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    pub fn train_totals(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.kind == RowKind::Train).filter_map(|r| r.total).collect()
    }

    pub fn validation(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.kind == RowKind::Validation)
            .map(|r| (r.epoch, r.reconstruction))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Mean of `values[i-window+1..=i]` (shorter at the start).
pub fn smoothed(values: &[f64], window: usize, i: usize) -> f64 {
    let lo = (i + 1).saturating_sub(window);
    values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
}

pub struct TrainOutcome {
    pub model: ClangModel,
    pub history: LossHistory,
    /// Epoch count of the returned snapshot.
    pub selected_epoch: usize,
    pub validation_indices: Vec<usize>,
}

/// Deterministic choice of many-shot training examples held out for
/// validation. They stay available as negatives.
pub fn validation_split(examples: &[LabeledExample], size: usize, seed: u64) -> Vec<usize> {
    let mut many: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].shot == ShotClass::ManyShot).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    many.shuffle(&mut rng);
    many.truncate(size);
    many.sort_unstable();
    many
}

/// Encodes every example against the model's vocabulary.
pub fn encode_examples(model: &ClangModel, examples: &[LabeledExample]) -> Result<Vec<EncodedSequence>> {
    examples
        .iter()
        .map(|e| crate::corpus::encode_input(&e.intent, e.utterance(), &model.vocab, model.config.max_len))
        .collect()
}

/// Mean reconstruction error with the posterior mean as the latent.
pub fn validation_loss(model: &ClangModel, seqs: &[EncodedSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus("validation set"));
    }
    let mut total = 0.0;
    for chunk in seqs.chunks(32) {
        let batch = Batch::new(chunk)?;
        let mut g = Graph::new(&model.store);
        let zeros = LatentNoise::zeros(chunk.len(), model.d_h());
        let fwd = model.forward(&mut g, &batch, zeros.d, zeros.a);
        total += g.value(fwd.nll).sum();
    }
    let mean = total / seqs.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            context: "validation loss".into(),
        });
    }
    Ok(mean)
}

pub fn train(model: ClangModel, examples: &[LabeledExample], pairs: &[NegativePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model;
    let seqs = encode_examples(&model, examples)?;
    let val_idx = validation_split(examples, cfg.validation_size, cfg.seed);
    let held: HashSet<usize> = val_idx.iter().copied().collect();
    let pairs: Vec<NegativePair> = pairs.iter().filter(|p| !held.contains(&p.positive_idx)).copied().collect();
    let val_seqs: Vec<EncodedSequence> = val_idx.iter().map(|&i| seqs[i].clone()).collect();
    let epochs = cfg.total_epochs();
    if epochs > 0 && pairs.is_empty() {
        return Err(Error::EmptyCorpus("training pairs"));
    }

    let mut history = LossHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.store, cfg);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut last_finite = None;

    let grid: HashSet<usize> = cfg.epoch_grid.iter().copied().collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut consider = |epoch: usize, model: &ClangModel, history: &mut LossHistory, step: usize| -> Result<()> {
        if val_seqs.is_empty() {
            if grid.contains(&epoch) {
                best = Some((f64::NAN, epoch, model.store.clone()));
            }
            return Ok(());
        }
        let v = validation_loss(model, &val_seqs)?;
        history.rows.push(HistoryRow {
            kind: RowKind::Validation,
            step,
            epoch,
            kl: None,
            reconstruction: v,
            contrastive: None,
            total: None,
        });
        if grid.contains(&epoch) && best.as_ref().is_none_or(|b| v < b.0) {
            best = Some((v, epoch, model.store.clone()));
        }
        Ok(())
    };
    if grid.contains(&0) {
        consider(0, &model, &mut history, 0)?;
    }

    let mut step = 0;
    for epoch in 1..=epochs {
        for _ in 0..cfg.steps_per_epoch {
            let mut items = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let p = pairs[order[cursor]];
                items.push((seqs[p.positive_idx].clone(), seqs[p.negative_idx].clone()));
                cursor += 1;
            }
            let noise = LatentNoise::sample(2 * items.len(), model.d_h(), &mut rng);
            let kl_weight = if cfg.kl_anneal_steps == 0 {
                1.0
            } else {
                ((step + 1) as f64 / cfg.kl_anneal_steps as f64).min(1.0)
            };
            let (breakdown, grads) = {
                let mut g = Graph::new(&model.store);
                let vars = total_loss_graph(&model, &mut g, &items, &noise, cfg.margin, kl_weight)?;
                let b = vars.breakdown(&g);
                if !g.scalar(vars.objective).is_finite() {
                    return Err(Error::Diverged { step, last_finite });
                }
                (b, g.backward(vars.objective))
            };
            adam.step(&mut model.store, grads);
            if !model.store.all_finite() {
                return Err(Error::Diverged { step, last_finite });
            }
            last_finite = Some(breakdown.total);
            history.rows.push(train_row(step, epoch, &breakdown));
            step += 1;
        }
        consider(epoch, &model, &mut history, step)?;
    }

    let selected_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => epochs,
    };
    Ok(TrainOutcome {
        model,
        history,
        selected_epoch,
        validation_indices: val_idx,
    })
}

/// Builds a vocabulary from `examples`, mines one negative per example and
/// trains a fresh model. `model_cfg.vocab_size` is overwritten.
pub fn fit_generator(
    examples: &[LabeledExample],
    mut model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, Vec<NegativePair>)> {
    let vocab = build_vocabulary(examples, 1)?;
    model_cfg.vocab_size = vocab.len();
    let model = ClangModel::new(model_cfg, vocab)?;
    let pairs = mine_training_pairs(examples, cfg.seed)?;
    Ok((train(model, examples, &pairs, cfg)?, pairs))
}

/// One mined negative for every example, drawn from the examples themselves.
pub fn mine_training_pairs(examples: &[LabeledExample], seed: u64) -> Result<Vec<NegativePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let all: Vec<usize> = (0..examples.len()).collect();
    mine_pairs(&all, examples, &mut rng)
}

fn train_row(step: usize, epoch: usize, b: &LossBreakdown) -> HistoryRow {
    HistoryRow {
        kind: RowKind::Train,
        step,
        epoch,
        kl: Some(b.kl),
        reconstruction: b.reconstruction,
        contrastive: Some(b.contrastive),
        total: Some(b.total),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| t.max_rel_error >= self.tolerance).collect()
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_COORDS: usize = 20;

/// Inputs for a gradient check: a model plus one batch of pairs and noise.
pub struct GradCheckCase {
    pub model: ClangModel,
    pub pairs: Vec<(EncodedSequence, EncodedSequence)>,
    pub noise: LatentNoise,
    pub margin: f64,
}

impl GradCheckCase {
    /// `d_h = 8`, one layer each side, a 20-token vocabulary and two pairs.
    /// Weights are drawn wider than the training init so that every gradient
    /// sits well above finite-difference round-off.
    pub fn tiny(seed: u64) -> Result<Self> {
        let alarm = IntentLabel::new("alarm", "set")?;
        let weather = IntentLabel::new("weather", "query")?;
        let texts = [
            ("wake me at seven", &alarm),
            ("set my morning alarm", &alarm),
            ("will it rain", &weather),
            ("is it cold today", &weather),
        ];
        let examples: Vec<LabeledExample> = texts
            .iter()
            .map(|(t, i)| LabeledExample::new(t, (*i).clone(), ShotClass::ManyShot))
            .collect::<Result<_>>()?;
        let vocab = build_vocabulary(&examples, 1)?;
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.seed = seed;
        cfg.init_std = 0.5;
        let model = ClangModel::new(cfg, vocab)?;
        let seqs = encode_examples(&model, &examples)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = LatentNoise::sample(4, model.d_h(), &mut rng);
        Ok(Self {
            pairs: vec![(seqs[0].clone(), seqs[2].clone()), (seqs[3].clone(), seqs[1].clone())],
            model,
            noise,
            margin: 5.0,
        })
    }

    fn loss(&self) -> Result<f64> {
        let mut g = Graph::new(&self.model.store);
        let v = total_loss_graph(&self.model, &mut g, &self.pairs, &self.noise, self.margin, 1.0)?;
        Ok(g.scalar(v.objective))
    }
}

/// Central differences on sampled coordinates of every tensor, compared with
/// the tape's gradient. `fault` corrupts the backward pass for negative
/// controls.
pub fn grad_check(case: &mut GradCheckCase, tolerance: f64, fault: BackwardFault, seed: u64) -> Result<GradCheckReport> {
    let grads = {
        let mut g = Graph::with_fault(&case.model.store, fault);
        let v = total_loss_graph(&case.model, &mut g, &case.pairs, &case.noise, case.margin, 1.0)?;
        g.backward(v.objective).dense(&case.model.store)
    };
    let mut store = case.model.store.clone();
    let report = check_gradients(
        &mut store,
        |s| {
            case.model.store = s.clone();
            case.loss()
        },
        &grads,
        tolerance,
        seed,
    );
    case.model.store = store;
    report
}

/// Compares `analytic` (one array per tensor of `store`) against central
/// differences of `loss` on up to [`GRAD_CHECK_COORDS`] random coordinates
/// per tensor. `store` is restored before returning.
pub fn check_gradients(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    analytic: &[Array2<f64>],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let (rows, cols) = store.value(id).dim();
        let n = rows * cols;
        let picks = index::sample(&mut rng, n, n.min(GRAD_CHECK_COORDS));
        let mut check = TensorCheck {
            name: store.name(id).to_string(),
            coordinates: picks.len(),
            max_rel_error: 0.0,
            worst_index: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for flat in picks {
            let at = (flat / cols, flat % cols);
            let orig = store.value(id)[at];
            store.value_mut(id)[at] = orig + GRAD_CHECK_STEP;
            let up = loss(store);
            store.value_mut(id)[at] = orig - GRAD_CHECK_STEP;
            let down = loss(store);
            store.value_mut(id)[at] = orig;
            let numeric = (up? - down?) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[id.index()][at];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > check.max_rel_error || (rel == check.max_rel_error && check.analytic == 0.0) {
                check.max_rel_error = rel;
                check.worst_index = at;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tolerance, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::losses::mine_pairs;

    fn toy_examples() -> Vec<LabeledExample> {
        let a = IntentLabel::new("alarm", "set").unwrap();
        let w = IntentLabel::new("weather", "query").unwrap();
        vec![
            LabeledExample::new("wake me up at seven", a.clone(), ShotClass::ManyShot).unwrap(),
            LabeledExample::new("is it going to rain", w.clone(), ShotClass::ManyShot).unwrap(),
            LabeledExample::new("set an alarm for six", a, ShotClass::FewShot).unwrap(),
            LabeledExample::new("will it be sunny", w, ShotClass::ManyShot).unwrap(),
        ]
    }

    fn model_for(ex: &[LabeledExample], d_h: usize, seed: u64) -> ClangModel {
        let vocab: Vocabulary = build_vocabulary(ex, 1).unwrap();
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.d_h = d_h;
        cfg.d_k = d_h / 2;
        cfg.seed = seed;
        ClangModel::new(cfg, vocab).unwrap()
    }

    fn all_pairs(ex: &[LabeledExample]) -> Vec<NegativePair> {
        let idx: Vec<usize> = (0..ex.len()).collect();
        mine_pairs(&idx, ex, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn small_cfg(epochs: usize, steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps_per_epoch: steps,
            epoch_grid: vec![epochs],
            validation_size: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let ex = toy_examples();
        let m = model_for(&ex, 8, 1);
        let out = train(m.clone(), &ex, &all_pairs(&ex), &small_cfg(0, 10)).unwrap();
        assert_eq!(out.model, m);
        assert!(out.history.rows.is_empty());
        assert_eq!(out.selected_epoch, 0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let ex = toy_examples();
        let mut m = model_for(&ex, 8, 2);
        let before = m.store.clone();
        let mut adam = Adam::new(&m.store, &TrainConfig::default());
        let zero = Gradients::default();
        adam.step(&mut m.store, zero);
        assert_eq!(m.store, before);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        // the first Adam step moves each coordinate by at most lr
        let ex = toy_examples();
        let mut m = model_for(&ex, 8, 3);
        let before = m.store.clone();
        let case_pairs = vec![(
            encode_examples(&m, &ex[..1]).unwrap()[0].clone(),
            encode_examples(&m, &ex[1..2]).unwrap()[0].clone(),
        )];
        let noise = LatentNoise::zeros(2, 8);
        let grads = {
            let mut g = Graph::new(&m.store);
            let v = total_loss_graph(&m, &mut g, &case_pairs, &noise, 0.5, 1.0).unwrap();
            g.backward(v.objective)
        };
        let mut adam = Adam::new(&m.store, &TrainConfig::default());
        adam.step(&mut m.store, grads);
        for id in m.store.ids() {
            let d = m.store.value(id) - before.value(id);
            assert!(d.iter().all(|x| x.abs() <= 1e-3 + 1e-12));
        }
    }

    #[test]
    fn memorises_a_single_example() {
        let ex = vec![toy_examples()[0].clone(), toy_examples()[1].clone()];
        let m = model_for(&ex, 16, 4);
        let pairs = vec![NegativePair {
            positive_idx: 0,
            negative_idx: 1,
            s1: 0,
            s2: 0,
            s3: 0,
        }];
        let mut cfg = small_cfg(1, 200);
        cfg.batch_size = 1;
        let out = train(m, &ex, &pairs, &cfg).unwrap();
        let rec: Vec<f64> = out.history.rows.iter().map(|r| r.reconstruction).collect();
        assert_eq!(rec.len(), 200);
        assert!(rec[199] < 0.1 * rec[0], "{} -> {}", rec[0], rec[199]);
    }

    #[test]
    fn training_is_deterministic() {
        let ex = toy_examples();
        let run = || {
            let m = model_for(&ex, 8, 5);
            let mut cfg = small_cfg(2, 5);
            cfg.epoch_grid = vec![1, 2];
            cfg.validation_size = 1;
            train(m, &ex, &all_pairs(&ex), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.validation().len(), 2);
    }

    #[test]
    fn selects_the_best_grid_epoch() {
        let ex = toy_examples();
        let m = model_for(&ex, 8, 6);
        let mut cfg = small_cfg(3, 4);
        cfg.epoch_grid = vec![0, 1, 3];
        cfg.validation_size = 2;
        let out = train(m, &ex, &all_pairs(&ex), &cfg).unwrap();
        let val = out.history.validation();
        let best = val
            .iter()
            .filter(|(e, _)| cfg.epoch_grid.contains(e))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(out.selected_epoch, best.0);
        let seqs = encode_examples(&out.model, &ex).unwrap();
        let vs: Vec<_> = out.validation_indices.iter().map(|&i| seqs[i].clone()).collect();
        assert!((validation_loss(&out.model, &vs).unwrap() - best.1).abs() < 1e-12);
    }

    #[test]
    fn validation_only_draws_many_shot() {
        let ex = toy_examples();
        let v = validation_split(&ex, 10, 0);
        assert_eq!(v, vec![0, 1, 3]);
    }

    #[test]
    fn history_csv_round_trip() {
        let ex = toy_examples();
        let mut cfg = small_cfg(1, 3);
        cfg.validation_size = 1;
        let out = train(model_for(&ex, 8, 7), &ex, &all_pairs(&ex), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        out.history.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("kind,step,epoch,kl,reconstruction,contrastive,total\n"));
        assert!(text.lines().last().unwrap().starts_with("validation,3,1,,"));
        let back = LossHistory::read_csv(&p).unwrap();
        assert_eq!(back.rows.len(), out.history.rows.len());
    }

    #[test]
    fn divergence_is_reported() {
        let ex = toy_examples();
        let mut m = model_for(&ex, 8, 8);
        let id = m.store.find("head.lm_bias").unwrap();
        m.store.value_mut(id)[[0, 5]] = f64::NAN;
        match train(m, &ex, &all_pairs(&ex), &small_cfg(1, 3)) {
            Err(Error::Diverged { step: 0, last_finite: None }) => {}
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn smoothing_window() {
        let v = [4.0, 2.0, 6.0, 8.0];
        assert_eq!(smoothed(&v, 2, 0), 4.0);
        assert_eq!(smoothed(&v, 2, 3), 7.0);
        assert_eq!(smoothed(&v, 10, 3), 5.0);
    }

    #[test]
    fn tiny_case_geometry() {
        let case = GradCheckCase::tiny(0).unwrap();
        assert_eq!(case.model.vocab.len(), 20);
        assert_eq!(case.model.d_h(), 8);
        assert_eq!(case.model.config.encoder_layers, 1);
    }

    #[test]
    fn gradients_pass_and_fault_is_caught() {
        let mut case = GradCheckCase::tiny(1).unwrap();
        let report = grad_check(&mut case, 1e-4, BackwardFault::None, 0).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        assert!(report.tensors.iter().all(|t| t.coordinates >= 20.min(case.model.store.value(case.model.store.find(&t.name).unwrap()).len())));
        let bad = grad_check(&mut case, 1e-4, BackwardFault::GeluDerivative, 0).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn unused_rows_have_zero_gradient_both_ways() {
        let mut case = GradCheckCase::tiny(2).unwrap();
        let report = grad_check(&mut case, 1e-4, BackwardFault::None, 3).unwrap();
        // position rows past the longest sequence never enter the loss
        let pos = case.model.store.find("emb.position").unwrap();
        let last = case.model.store.value(pos).nrows() - 1;
        let orig = case.loss().unwrap();
        case.model.store.value_mut(pos)[[last, 0]] += 1.0;
        assert_eq!(case.loss().unwrap(), orig);
        assert!(report.passed());
    }
}
