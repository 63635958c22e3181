//! Generalized few-shot intent detection: a small transformer classifier
//! over the joint label space, the oversampling baseline, and the
//! many-shot / few-shot / harmonic-mean report.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{padding_mask, transformer_layer, LayerParams};
use crate::autograd::{Graph, Var};
use crate::corpus::{tokenize, Dataset, IntentLabel, IntentType, LabeledExample, TokenId, Vocabulary, CLS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::generation::{augment, uniqueness_summary, GenConfig, GeneratedSet, UniquenessSummary};
use crate::model::{ClangModel, Embeddings};
use crate::params::{ParamId, ParamStore};
use crate::training::{Adam, TrainConfig};

/// Existing (many-shot) and novel (few-shot) intents; joint index order is
/// existing first, then novel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    existing: Vec<IntentLabel>,
    novel: Vec<IntentLabel>,
}

impl LabelSpace {
    pub fn new(existing: Vec<IntentLabel>, novel: Vec<IntentLabel>) -> Result<Self> {
        let ex: HashSet<&IntentLabel> = existing.iter().collect();
        if let Some(dup) = novel.iter().find(|n| ex.contains(n)) {
            return Err(Error::Config(format!("intent {dup} is both existing and novel")));
        }
        if ex.len() != existing.len() || novel.iter().collect::<HashSet<_>>().len() != novel.len() {
            return Err(Error::Config("label space lists an intent twice".into()));
        }
        Ok(Self { existing, novel })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::new(ds.many_shot_intents(), ds.few_shot_intents())
    }

    pub fn existing(&self) -> &[IntentLabel] {
        &self.existing
    }

    pub fn novel(&self) -> &[IntentLabel] {
        &self.novel
    }

    pub fn len(&self) -> usize {
        self.existing.len() + self.novel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> &IntentLabel {
        if i < self.existing.len() {
            &self.existing[i]
        } else {
            &self.novel[i - self.existing.len()]
        }
    }

    pub fn index_of(&self, intent: &IntentLabel) -> Option<usize> {
        self.existing
            .iter()
            .position(|l| l == intent)
            .or_else(|| self.novel.iter().position(|l| l == intent).map(|i| i + self.existing.len()))
    }

    pub fn is_novel(&self, i: usize) -> bool {
        i >= self.existing.len()
    }

    /// Type of a novel intent relative to the existing domains and actions.
    pub fn intent_type(&self, intent: &IntentLabel) -> IntentType {
        IntentType::classify(intent, &self.existing)
    }
}

/// `2ab / (a + b)`, defined as 0 when either input is 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub d_h: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    /// Passes over the training set; each pass is `ceil(n / batch_size)` steps.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            heads: 2,
            layers: 1,
            max_len: crate::corpus::DEFAULT_MAX_UTTERANCE_LEN,
            epochs: 50,
            batch_size: 32,
            learning_rate: 2e-3,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_h.is_multiple_of(self.heads) || self.layers == 0 || self.max_len == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid classifier configuration {self:?}")));
        }
        Ok(())
    }
}

/// Transformer encoder over `[CLS] w… [SEP]` with a linear head on the
/// final `[CLS]` row.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSpace,
    pub store: ParamStore,
    emb: Embeddings,
    layers: Vec<LayerParams>,
    out_w: ParamId,
    out_b: ParamId,
}

struct Inputs {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    segments: Vec<usize>,
    masks: Vec<crate::attention::MaskMatrix>,
    n: usize,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Classifier {
    pub fn new(config: ClassifierConfig, vocab: Vocabulary, labels: LabelSpace) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(Error::EmptyCorpus("label space"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, std) = (config.d_h, config.init_std);
        let mut store = ParamStore::new();
        let emb = Embeddings::init(&mut store, "clf.emb", vocab.len(), config.max_len + 2, d, std, &mut rng);
        let layers = (0..config.layers)
            .map(|i| LayerParams::init(&mut store, &format!("clf.layer.{i}"), d, std, &mut rng))
            .collect();
        let out_w = store.normal("clf.out.w", d, labels.len(), std, &mut rng);
        let out_b = store.zeros("clf.out.b", 1, labels.len());
        Ok(Self {
            config,
            vocab,
            labels,
            store,
            emb,
            layers,
            out_w,
            out_b,
        })
    }

    fn inputs(&self, utterances: &[&str]) -> Result<Inputs> {
        let ids: Vec<Vec<TokenId>> = utterances
            .iter()
            .map(|u| {
                let mut t = vec![CLS_ID];
                t.extend(tokenize(u).iter().take(self.config.max_len).map(|w| self.vocab.id(w)));
                t.push(SEP_ID);
                t
            })
            .collect();
        let n = ids.iter().map(Vec::len).max().unwrap_or(2);
        let mut inp = Inputs {
            tokens: Vec::with_capacity(n * ids.len()),
            positions: Vec::with_capacity(n * ids.len()),
            segments: vec![0; n * ids.len()],
            masks: Vec::with_capacity(ids.len()),
            n,
        };
        for mut t in ids {
            inp.masks.push(padding_mask(t.len(), n)?);
            t.resize(n, crate::corpus::PAD_ID);
            inp.tokens.extend(t);
            inp.positions.extend(0..n);
        }
        Ok(inp)
    }

    fn logits_graph(&self, g: &mut Graph, inp: &Inputs) -> Var {
        let mut x = self.emb.forward(g, &inp.tokens, &inp.positions, &inp.segments, None);
        for lp in &self.layers {
            x = transformer_layer(g, x, lp, &inp.masks, self.config.heads).output;
        }
        let cls: Vec<usize> = (0..inp.masks.len()).map(|b| b * inp.n).collect();
        let h = g.select_rows(x, &cls);
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        g.linear(h, w, b)
    }

    /// `B × |Y_joint|` logits.
    pub fn logits(&self, utterances: &[&str]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((0, self.labels.len()));
        for chunk in utterances.chunks(64) {
            let inp = self.inputs(chunk)?;
            let mut g = Graph::new(&self.store);
            let l = self.logits_graph(&mut g, &inp);
            out.append(Axis(0), g.value(l).view()).expect("column counts agree");
        }
        Ok(out)
    }

    pub fn classify(&self, utterance: &str) -> Result<IntentLabel> {
        let l = self.logits(&[utterance])?;
        Ok(self.labels.label(argmax_lowest(l.row(0).as_slice().unwrap())).clone())
    }

    fn target_indices(&self, examples: &[&LabeledExample]) -> Result<Vec<usize>> {
        examples
            .iter()
            .map(|e| self.labels.index_of(&e.intent).ok_or_else(|| Error::UnknownLabel(e.intent.to_string())))
            .collect()
    }

    /// Mean cross-entropy over `examples`, with the graph for backprop.
    pub fn loss_graph(&self, g: &mut Graph, examples: &[&LabeledExample]) -> Result<Var> {
        let targets = self.target_indices(examples)?;
        let texts: Vec<&str> = examples.iter().map(|e| e.utterance()).collect();
        let inp = self.inputs(&texts)?;
        let logits = self.logits_graph(g, &inp);
        let groups: Vec<usize> = (0..examples.len()).collect();
        let nll = g.nll(logits, &targets, &groups, examples.len());
        Ok(g.mean(nll))
    }

    /// A fixed number of epochs of Adam on shuffled mini-batches. Returns the
    /// per-step training loss.
    pub fn fit(&mut self, examples: &[LabeledExample]) -> Result<Vec<f64>> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus("classifier training set"));
        }
        self.target_indices(&examples.iter().collect::<Vec<_>>())?;
        let opt_cfg = TrainConfig {
            learning_rate: self.config.learning_rate,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&self.store, &opt_cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut cursor = order.len();
        let steps = self.config.epochs * examples.len().div_ceil(self.config.batch_size);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&examples[order[cursor]]);
                cursor += 1;
            }
            let (loss, grads) = {
                let mut g = Graph::new(&self.store);
                let l = self.loss_graph(&mut g, &batch)?;
                (g.scalar(l), g.backward(l))
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_finite: losses.last().copied(),
                });
            }
            adam.step(&mut self.store, grads);
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_b
    }

    pub fn out_weight(&self) -> ParamId {
        self.out_w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub intent_type: IntentType,
    pub intents: usize,
    pub total: usize,
    pub correct: usize,
    /// `None` when no test example has this type.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfsidReport {
    pub acc_m: f64,
    pub acc_f: f64,
    pub h: f64,
    pub many_total: usize,
    pub many_correct: usize,
    pub few_total: usize,
    pub few_correct: usize,
    pub per_type: Vec<TypeAccuracy>,
    /// Joint label names, in index order.
    pub labels: Vec<String>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores predicted joint indices against true ones.
pub fn report_from_predictions(truth: &[usize], predicted: &[usize], labels: &LabelSpace) -> Result<GfsidReport> {
    let k = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut mt, mut mc, mut ft, mut fc) = (0, 0, 0, 0);
    let mut by_type: BTreeMap<IntentType, (HashSet<usize>, usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
        let hit = usize::from(t == p);
        if labels.is_novel(t) {
            ft += 1;
            fc += hit;
            let e = by_type.entry(labels.intent_type(labels.label(t))).or_default();
            e.0.insert(t);
            e.1 += 1;
            e.2 += hit;
        } else {
            mt += 1;
            mc += hit;
        }
    }
    if mt == 0 {
        return Err(Error::EmptyPartition("many-shot"));
    }
    if ft == 0 {
        return Err(Error::EmptyPartition("few-shot"));
    }
    let (acc_m, acc_f) = (mc as f64 / mt as f64, fc as f64 / ft as f64);
    let per_type = IntentType::ALL
        .iter()
        .map(|&ty| {
            let (intents, total, correct) = by_type.get(&ty).map(|(s, t, c)| (s.len(), *t, *c)).unwrap_or_default();
            TypeAccuracy {
                intent_type: ty,
                intents,
                total,
                correct,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect();
    Ok(GfsidReport {
        acc_m,
        acc_f,
        h: harmonic_mean(acc_m, acc_f),
        many_total: mt,
        many_correct: mc,
        few_total: ft,
        few_correct: fc,
        per_type,
        labels: (0..k).map(|i| labels.label(i).to_string()).collect(),
        confusion,
    })
}

pub fn evaluate(clf: &Classifier, test: &[LabeledExample]) -> Result<GfsidReport> {
    let truth = clf.target_indices(&test.iter().collect::<Vec<_>>())?;
    let texts: Vec<&str> = test.iter().map(|e| e.utterance()).collect();
    let logits = clf.logits(&texts)?;
    let predicted: Vec<usize> = logits.rows().into_iter().map(|r| argmax_lowest(r.as_slice().unwrap())).collect();
    report_from_predictions(&truth, &predicted, &clf.labels)
}

/// Duplicates every under-represented intent's examples (cycling through
/// them in order) until all intents match the largest count.
pub fn oversample(train: &[LabeledExample]) -> Vec<LabeledExample> {
    let mut by_intent: BTreeMap<&IntentLabel, Vec<&LabeledExample>> = BTreeMap::new();
    for e in train {
        by_intent.entry(&e.intent).or_default().push(e);
    }
    let max = by_intent.values().map(Vec::len).max().unwrap_or(0);
    let mut out = train.to_vec();
    for group in by_intent.values() {
        out.extend(group.iter().cycle().take(max - group.len()).map(|e| (*e).clone()));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub baseline: GfsidReport,
    pub augmented: GfsidReport,
    pub baseline_train_size: usize,
    pub augmented_train_size: usize,
    pub generated: usize,
    pub uniqueness: UniquenessSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (0 for a single value).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc_m: MeanStd,
    pub acc_f: MeanStd,
    /// Mean over runs of each run's harmonic mean.
    pub h_mean_of_runs: MeanStd,
    /// Harmonic mean of the mean accuracies.
    pub h_of_means: f64,
}

impl Aggregate {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a GfsidReport>) -> Self {
        let (mut m, mut f, mut h) = (Vec::new(), Vec::new(), Vec::new());
        for r in reports {
            m.push(r.acc_m);
            f.push(r.acc_f);
            h.push(r.h);
        }
        let (acc_m, acc_f) = (MeanStd::of(&m), MeanStd::of(&f));
        Self {
            h_of_means: harmonic_mean(acc_m.mean, acc_f.mean),
            acc_m,
            acc_f,
            h_mean_of_runs: MeanStd::of(&h),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub gen_config: GenConfig,
    pub classifier_config: ClassifierConfig,
    pub runs: Vec<SeedRun>,
    pub baseline: Aggregate,
    pub augmented: Aggregate,
}

impl PipelineReport {
    /// Runs where the augmented classifier beats the baseline on both the
    /// few-shot accuracy and the harmonic mean.
    pub fn improved_runs(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.augmented.acc_f > r.baseline.acc_f && r.augmented.h > r.baseline.h)
            .count()
    }

    /// Many-shot / few-shot / H-mean columns as `mean ± std` percentages.
    pub fn table(&self) -> String {
        let pct = |m: &MeanStd| format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.std);
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>17}{:>17}{:>17}{:>12}", "Method", "Many-shot", "Few-shot", "H-Mean", "H(means)");
        for (name, a) in [("Oversampled baseline", &self.baseline), ("Generator-augmented", &self.augmented)] {
            let _ = writeln!(
                s,
                "{:<22}{:>17}{:>17}{:>17}{:>12.2}",
                name,
                pct(&a.acc_m),
                pct(&a.acc_f),
                pct(&a.h_mean_of_runs),
                100.0 * a.h_of_means
            );
        }
        let _ = writeln!(s, "\nPer-type few-shot accuracy (mean over runs)");
        for (i, ty) in IntentType::ALL.iter().enumerate() {
            let mean = |pick: fn(&SeedRun) -> &GfsidReport| {
                let xs: Vec<f64> = self.runs.iter().filter_map(|r| pick(r).per_type[i].accuracy).collect();
                (!xs.is_empty()).then(|| 100.0 * xs.iter().sum::<f64>() / xs.len() as f64)
            };
            if let (Some(b), Some(a)) = (mean(|r| &r.baseline), mean(|r| &r.augmented)) {
                let _ = writeln!(s, "  {:<8} baseline {:6.2}   augmented {:6.2}", ty.name(), b, a);
            }
        }
        s
    }
}

/// For each seed: train the classifier on the oversampled data and on the
/// data plus generated utterances for every few-shot intent, then evaluate
/// both on the test split. Seeds run in parallel.
pub fn run_pipeline(
    dataset: &Dataset,
    generator: &ClangModel,
    gen: &GenConfig,
    clf: &ClassifierConfig,
    seeds: &[u64],
) -> Result<PipelineReport> {
    let labels = LabelSpace::from_dataset(dataset)?;
    let vocab = crate::corpus::build_vocabulary(&dataset.train, 1)?;
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let gen_cfg = GenConfig { seed, ..gen.clone() };
            let sets = augment(generator, labels.novel(), &gen_cfg)?;
            let mut augmented = dataset.train.clone();
            for s in &sets {
                augmented.extend(s.examples()?);
            }
            let baseline_data = oversample(&dataset.train);
            let cfg = ClassifierConfig { seed, ..clf.clone() };
            let fit_eval = |data: &[LabeledExample]| -> Result<GfsidReport> {
                let mut c = Classifier::new(cfg.clone(), vocab.clone(), labels.clone())?;
                c.fit(data)?;
                evaluate(&c, &dataset.test)
            };
            Ok(SeedRun {
                seed,
                baseline: fit_eval(&baseline_data)?,
                augmented: fit_eval(&augmented)?,
                baseline_train_size: baseline_data.len(),
                augmented_train_size: augmented.len(),
                generated: sets.iter().map(|s| s.utterances.len()).sum(),
                uniqueness: uniqueness_summary(&sets),
            })
        })
        .collect::<Result<Vec<SeedRun>>>()?;
    Ok(PipelineReport {
        gen_config: gen.clone(),
        classifier_config: clf.clone(),
        baseline: Aggregate::of(runs.iter().map(|r| &r.baseline)),
        augmented: Aggregate::of(runs.iter().map(|r| &r.augmented)),
        runs,
    })
}

/// Generated sets for one seed, as used by [`run_pipeline`].
pub fn generated_for_seed(generator: &ClangModel, labels: &LabelSpace, gen: &GenConfig, seed: u64) -> Result<Vec<GeneratedSet>> {
    augment(generator, labels.novel(), &GenConfig { seed, ..gen.clone() })
}
