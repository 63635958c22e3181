//! Acceptance criteria 1–9. One PASS/FAIL line each; exits non-zero if any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::process::ExitCode;
use std::time::Instant;

use clang_nlg::autograd::{BackwardFault, Graph};
use clang_nlg::corpus::{
    build_vocabulary, generate_synthetic_grammar, Dataset, GrammarSpec, IntentLabel, LabeledExample, ShotClass, TokenId,
    SEP_ID,
};
use clang_nlg::generation::{augment, beam_search_over, uniqueness_summary, GenConfig};
use clang_nlg::gfsid::{harmonic_mean, run_pipeline, ClassifierConfig};
use clang_nlg::losses::{contrastive_loss, kl_loss, mine_negative, reconstruction_loss, NegativePair, DEFAULT_MARGIN};
use clang_nlg::model::{Batch, ClangModel, GaussianParams, LatentPair, LogitRows, ModelConfig};
use clang_nlg::training::{fit_generator, grad_check, GradCheckCase, TrainConfig};
use common::{deeper_model, label, log_softmax, word_ids};
use ndarray::{array, Array1, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H_TOL: f64 = 0.01; // percentage points
const GRAD_TOL: f64 = 1e-4;
const BLOCK_FLOOR: f64 = 1e-30;
const ACT_TOL: f64 = 1e-12;
const KL_TOL: f64 = 1e-6;
const RECON_TOL: f64 = 1e-9;
const BEAM_TOL: f64 = 1e-9;
const TIE_TOL: f64 = 0.05; // relative to the uniform frequency
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MIN_IMPROVED: usize = 4;
const PAIR_WIN_FRACTION: f64 = 0.8;
const MAX_GENERATED_S1: usize = 480;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Desk {
    dataset: Dataset,
    model: ClangModel,
    initial: ClangModel,
    pairs: Vec<NegativePair>,
    train_secs: f64,
}

fn desk() -> Desk {
    let t = Instant::now();
    let spec = GrammarSpec::desk();
    let dataset = generate_synthetic_grammar(&spec, spec.seed).expect("desk grammar").dataset;
    let cfg = TrainConfig::desk();
    let (out, pairs) = fit_generator(&dataset.train, ModelConfig::desk(0), &cfg).expect("desk training");
    let initial = ClangModel::new(out.model.config.clone(), out.model.vocab.clone()).expect("same init");
    Desk {
        dataset,
        model: out.model,
        initial,
        pairs,
        train_secs: t.elapsed().as_secs_f64(),
    }
}

// 1 ------------------------------------------------------------------------

fn metric_exactness() -> Outcome {
    let h = 100.0 * harmonic_mean(0.9834, 0.8804);
    let mut grid_ok = true;
    for i in 1..=100 {
        for j in 1..=100 {
            let (a, b) = (i as f64 / 100.0, j as f64 / 100.0);
            let v = harmonic_mean(a, b);
            grid_ok &= a.min(b) <= v + 1e-15 && v <= a.max(b) + 1e-15;
        }
    }
    let zero_ok = harmonic_mean(0.0, 0.7) == 0.0 && harmonic_mean(0.7, 0.0) == 0.0 && harmonic_mean(0.0, 0.0) == 0.0;
    outcome(
        (h - 92.90).abs() <= H_TOL && grid_ok && zero_ok,
        format!("H(98.34, 88.04) = {h:.4} (target 92.90 ± {H_TOL}); 100x100 bounds {grid_ok}; zero convention {zero_ok}"),
    )
}

// 2 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let mut case = GradCheckCase::tiny(0).expect("fixture");
    let v = case.model.vocab.len();
    let report = grad_check(&mut case, GRAD_TOL, BackwardFault::None, 0).expect("grad check");
    let worst = report
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|t| t.name.clone())
        .unwrap_or_default();
    outcome(
        report.passed() && v == 20,
        format!(
            "max rel error {:.2e} over {} tensors (worst {worst}), |V| = {v}, tolerance {GRAD_TOL:.0e}",
            report.max_rel_error(),
            report.tensors.len()
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn decoder_acts(model: &ClangModel, intent: &IntentLabel, utt: &[TokenId], z: &Array1<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let seq = model.sequence(intent, utt).unwrap();
    let batch = Batch::new(std::slice::from_ref(&seq)).unwrap();
    let mut g = Graph::new(&model.store);
    let zv = g.constant(z.clone().insert_axis(ndarray::Axis(0)));
    let out = model.decode(&mut g, zv, &batch, LogitRows::All);
    let mut all = vec![g.value(out.logits).clone()];
    let mut attn = Vec::new();
    for t in &out.layers {
        attn.push(g.value(t.attention_output).clone());
        all.push(g.value(t.attention_output).clone());
        all.push(g.value(t.output).clone());
    }
    (all, attn)
}

fn random_utterance(model: &ClangModel, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let words = word_ids(model);
    let n = rng.random_range(2..=8);
    (0..n).map(|_| words[rng.random_range(0..words.len())]).collect()
}

fn mask_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let intents = [label("alarm:set"), label("weather:query"), label("music:play")];

    let mut max_block = 0.0f64;
    for draw in 0..100u64 {
        let model = deeper_model(draw, rng.random_range(0.02..2.0));
        let utt = random_utterance(&model, &mut rng);
        let seq = model.sequence(&intents[draw as usize % 3], &utt).unwrap();
        let batch = Batch::new(std::slice::from_ref(&seq)).unwrap();
        let mut g = Graph::new(&model.store);
        let enc = model.encode(&mut g, &batch);
        for t in &enc.layers {
            for p in g.attention_probs(t.attention).unwrap() {
                max_block = max_block.max(p[[1, 2]]).max(p[[2, 1]]);
            }
        }
    }

    let mut causal = 0.0f64;
    let mut isolation = 0.0f64;
    for trial in 0..100u64 {
        let model = deeper_model(1000 + trial, 0.5);
        let z = Array1::from_shape_fn(model.d_h(), |_| rng.random_range(-2.0..2.0));
        let intent = &intents[trial as usize % 3];
        let utt = random_utterance(&model, &mut rng);
        let words = word_ids(&model);

        let j = rng.random_range(0..utt.len());
        let mut other = utt.clone();
        while other[j] == utt[j] {
            other[j] = words[rng.random_range(0..words.len())];
        }
        let (a, _) = decoder_acts(&model, intent, &utt, &z);
        let (b, _) = decoder_acts(&model, intent, &other, &z);
        for (x, y) in a.iter().zip(&b) {
            for r in 0..4 + j {
                for (u, v) in x.row(r).iter().zip(y.row(r)) {
                    causal = causal.max((u - v).abs());
                }
            }
        }

        // change an intent token or an utterance token
        let (intent_b, utt_b) = if trial % 3 == 0 {
            (&intents[(trial as usize + 1) % 3], utt.clone())
        } else {
            (intent, other)
        };
        let (a_all, a_attn) = decoder_acts(&model, intent, &utt, &z);
        let (b_all, b_attn) = decoder_acts(&model, intent_b, &utt_b, &z);
        for (x, y) in a_attn.iter().zip(&b_attn).chain(a_all.iter().zip(&b_all).skip(1)) {
            for (u, v) in x.row(0).iter().zip(y.row(0)) {
                isolation = isolation.max((u - v).abs());
            }
        }
    }
    outcome(
        max_block < BLOCK_FLOOR && causal <= ACT_TOL && isolation <= ACT_TOL,
        format!(
            "(a) max domain<->action weight {max_block:.1e} < {BLOCK_FLOOR:.0e}; (b) max earlier-position change {causal:.1e}; (c) max z-row change {isolation:.1e} (tol {ACT_TOL:.0e})"
        ),
    )
}

// 4 ------------------------------------------------------------------------

/// KL(N(mu, var) || N(0, 1)) by composite Simpson quadrature.
fn kl_quadrature(mu: f64, var: f64) -> f64 {
    let (lo, hi, n) = (mu - 40.0, mu + 40.0, 200_000);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let lq = -0.5 * (x - mu).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let lp = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        lq.exp() * (lq - lp)
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn gp(mu: f64, log_var: f64) -> GaussianParams {
    GaussianParams {
        mu: array![mu],
        log_var: array![log_var],
    }
}

fn loss_oracles() -> Outcome {
    let std1 = gp(0.0, 0.0);
    let k0 = kl_loss(&[(std1.clone(), std1.clone())]);
    let k1 = kl_loss(&[(gp(1.0, 0.0), std1.clone())]);
    let k2 = kl_loss(&[(gp(0.5, 2f64.ln()), std1.clone())]);
    let q2 = kl_quadrature(0.5, 2.0);
    let kl_ok = (k0 - 0.0).abs() <= KL_TOL && (k1 - 0.5).abs() <= KL_TOL && (k2 - q2).abs() <= KL_TOL && (k2 - 0.2784).abs() < 5e-5;

    // |V| = 8: four specials, two labels, two words; three predicted positions
    let intent = label("alarm:set");
    let ex = [LabeledExample::new("hi there", intent.clone(), ShotClass::ManyShot).unwrap()];
    let vocab = build_vocabulary(&ex, 1).unwrap();
    let v = vocab.len();
    let mut m = ClangModel::new(ModelConfig::tiny(v), vocab).unwrap();
    m.store.map_inplace(|x| *x = 0.0);
    let utt: Vec<TokenId> = ["hi", "there"].iter().map(|w| m.vocab.id(w)).collect();
    let seq = m.sequence(&intent, &utt).unwrap();
    let logits = m.decode_logits(&Array1::zeros(m.d_h()), &seq).unwrap();
    let rec = reconstruction_loss(&logits, &seq);
    let rec_expected = 3.0 * (v as f64).ln();
    let rec_ok = v == 8 && (rec - rec_expected).abs() <= RECON_TOL;

    let table = [
        (contrastive_loss(-10.0, -12.0, 0.5), 0.0),
        (contrastive_loss(-12.0, -10.0, 0.5), 2.5),
        (contrastive_loss(-7.25, -7.25, 0.5), 0.5),
    ];
    let hinge_ok = table.iter().all(|(got, want)| got == want);
    outcome(
        kl_ok && rec_ok && hinge_ok,
        format!(
            "KL {k0:.1e} / {k1:.8} / {k2:.8} (quadrature {q2:.8}); reconstruction {rec:.10} vs 3 ln {v} = {rec_expected:.10}; hinge table {:?}",
            table.map(|t| t.0)
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn beam_oracle() -> Outcome {
    let texts = [
        ("wake me", "alarm:set"),
        ("me wake", "alarm:set"),
        ("wake wake", "alarm:set"),
        ("rain", "weather:query"),
        ("rain today", "weather:query"),
    ];
    let examples: Vec<LabeledExample> = texts
        .iter()
        .map(|(t, l)| LabeledExample::new(t, label(l), ShotClass::ManyShot).unwrap())
        .collect();
    let cfg = TrainConfig {
        steps_per_epoch: 60,
        epoch_grid: vec![1],
        batch_size: 4,
        validation_size: 0,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (out, _) = fit_generator(&examples, ModelConfig::tiny(0), &cfg).expect("toy training");
    let m = out.model;
    let intent = label("alarm:set");
    let (w1, w2) = (m.vocab.id("wake"), m.vocab.id("me"));
    let cands = [w1, w2, SEP_ID];

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut order_ok = true;
    for _ in 0..5 {
        let z = LatentPair {
            z_d: Array1::from_shape_fn(m.d_h(), |_| rng.random_range(-1.5..1.5)),
            z_a: Array1::from_shape_fn(m.d_h(), |_| rng.random_range(-1.5..1.5)),
        };
        let got = beam_search_over(&m, &z, &intent, 9, 2, &cands).expect("beam");

        // every sequence over {w1, w2, SEP} of at most two generated tokens
        let mut all: Vec<(Vec<TokenId>, bool)> = vec![(vec![], false)];
        for &a in &[w1, w2] {
            all.push((vec![a], false));
            for &b in &[w1, w2] {
                all.push((vec![a, b], true));
            }
        }
        let zc = m.compose(&z);
        let mut oracle: Vec<(f64, Vec<TokenId>, bool)> = all
            .into_iter()
            .map(|(toks, truncated)| {
                let seq = m.sequence(&intent, &toks).unwrap();
                let logits = m.decode_logits(&zc, &seq).unwrap();
                let mut s = 0.0;
                for (i, &t) in toks.iter().enumerate() {
                    s += log_softmax(logits.row(3 + i).as_slice().unwrap())[t];
                }
                if !truncated {
                    s += log_softmax(logits.row(3 + toks.len()).as_slice().unwrap())[SEP_ID];
                }
                (s, toks, truncated)
            })
            .collect();
        oracle.sort_by(|x, y| y.0.total_cmp(&x.0));
        order_ok &= got.len() == oracle.len();
        for (h, o) in got.iter().zip(&oracle) {
            order_ok &= h.tokens == o.1 && h.truncated == o.2;
            worst = worst.max((h.score - o.0).abs());
        }
    }
    outcome(
        order_ok && worst <= BEAM_TOL,
        format!("5 latents x 7 hypotheses: ranking matches enumeration {order_ok}; max score gap {worst:.1e} (tol {BEAM_TOL:.0e})"),
    )
}

// 6 ------------------------------------------------------------------------

fn brute_similarity(a: &LabeledExample, b: &LabeledExample) -> usize {
    let uni = |e: &LabeledExample| e.tokens().map(str::to_owned).collect::<BTreeSet<_>>();
    let bi = |e: &LabeledExample| {
        let t: Vec<&str> = e.tokens().collect();
        t.windows(2).map(|w| format!("{} {}", w[0], w[1])).collect::<BTreeSet<_>>()
    };
    let names = |e: &LabeledExample| [e.intent.domain().to_owned(), e.intent.action().to_owned()].into_iter().collect::<BTreeSet<_>>();
    uni(a).intersection(&uni(b)).count() + bi(a).intersection(&bi(b)).count() + names(a).intersection(&names(b)).count()
}

fn miner_oracle() -> Outcome {
    let words = ["set", "an", "alarm", "for", "seven", "am", "play", "jazz", "what", "is", "the", "weather"];
    let intents = ["alarm:set", "alarm:query", "music:play", "weather:query", "timer:set"];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut checks = 0;
    for _ in 0..50 {
        let size = rng.random_range(2..=30);
        let mut pool: Vec<LabeledExample> = (0..size)
            .map(|_| {
                let n = rng.random_range(1..=6);
                let text: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
                LabeledExample::new(&text.join(" "), label(intents[rng.random_range(0..intents.len())]), ShotClass::ManyShot).unwrap()
            })
            .collect();
        if pool.iter().all(|e| e.intent == pool[0].intent) {
            let mut e = pool[0].clone();
            e.intent = label(if pool[0].intent == label("timer:set") { "alarm:set" } else { "timer:set" });
            pool.push(e);
        }
        for p in 0..pool.len() {
            let (idx, s) = mine_negative(&pool[p], &pool, &mut rng).expect("a negative exists");
            let best = pool
                .iter()
                .filter(|c| c.intent != pool[p].intent)
                .map(|c| brute_similarity(&pool[p], c))
                .max()
                .unwrap();
            checks += 1;
            if s.total() != best || brute_similarity(&pool[p], &pool[idx]) != best || pool[idx].intent == pool[p].intent {
                mismatches += 1;
            }
        }
    }

    let pos = LabeledExample::new("alpha beta", label("red:go"), ShotClass::ManyShot).unwrap();
    let pool: Vec<LabeledExample> = ["one two", "three four", "five six", "seven eight"]
        .iter()
        .map(|t| LabeledExample::new(t, label("blue:stop"), ShotClass::ManyShot).unwrap())
        .collect();
    let draws = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[mine_negative(&pos, &pool, &mut rng).unwrap().0] += 1;
    }
    let uniform = draws as f64 / 4.0;
    let worst_dev = counts.iter().map(|&c| (c as f64 - uniform).abs() / uniform).fold(0.0, f64::max);
    outcome(
        mismatches == 0 && worst_dev <= TIE_TOL,
        format!("{checks} positives over 50 corpora, {mismatches} argmax mismatches; tie counts {counts:?}, max deviation {:.2}% (tol {:.0}%)", 100.0 * worst_dev, 100.0 * TIE_TOL),
    )
}

// 7 ------------------------------------------------------------------------

fn desk_experiment(d: &Desk) -> Outcome {
    let gen = GenConfig::default();
    let report = run_pipeline(&d.dataset, &d.model, &gen, &ClassifierConfig::default(), &SEEDS).expect("pipeline");
    let (b, a) = (&report.baseline, &report.augmented);
    let improved = report.improved_runs();
    let pass = a.acc_f.mean > b.acc_f.mean && a.h_mean_of_runs.mean > b.h_mean_of_runs.mean && improved >= MIN_IMPROVED;
    outcome(
        pass,
        format!(
            "s={} k={}: few-shot {:.2} -> {:.2}, H {:.2} -> {:.2} (many-shot {:.2} -> {:.2}); improved in {improved}/{} seeds (need {MIN_IMPROVED})",
            gen.s,
            gen.k,
            100.0 * b.acc_f.mean,
            100.0 * a.acc_f.mean,
            100.0 * b.h_mean_of_runs.mean,
            100.0 * a.h_mean_of_runs.mean,
            100.0 * b.acc_m.mean,
            100.0 * a.acc_m.mean,
            SEEDS.len()
        ),
    )
}

// 8 ------------------------------------------------------------------------

/// `log p(x | y⁺)` under the posterior mean, with `x` encoded under `y⁺`.
fn pair_scores(model: &ClangModel, examples: &[LabeledExample], p: &NegativePair) -> (f64, f64) {
    let pos = &examples[p.positive_idx];
    let score = |e: &LabeledExample| {
        let toks: Vec<TokenId> = e.tokens().map(|t| model.vocab.id(t)).collect();
        let seq = model.sequence(&pos.intent, &toks).unwrap();
        let (qd, qa) = model.posterior(&seq).unwrap();
        model
            .log_likelihood(&pos.intent, &toks, &LatentPair { z_d: qd.mu, z_a: qa.mu })
            .unwrap()
    };
    (score(pos), score(&examples[p.negative_idx]))
}

fn contrastive_effect(d: &Desk) -> Outcome {
    let stats = |m: &ClangModel| {
        let scores: Vec<(f64, f64)> = d.pairs.iter().map(|p| pair_scores(m, &d.dataset.train, p)).collect();
        let mean = scores.iter().map(|&(lp, ln)| contrastive_loss(lp, ln, DEFAULT_MARGIN)).sum::<f64>() / scores.len() as f64;
        let wins = scores.iter().filter(|(lp, ln)| lp > ln).count() as f64 / scores.len() as f64;
        (mean, wins)
    };
    let (init_mean, init_wins) = stats(&d.initial);
    let (final_mean, final_wins) = stats(&d.model);
    outcome(
        final_mean < init_mean && final_wins > PAIR_WIN_FRACTION,
        format!(
            "{} pairs: mean hinge {init_mean:.4} -> {final_mean:.4}; log p(x+) > log p(x-) in {:.1}% -> {:.1}% (need > {:.0}%)",
            d.pairs.len(),
            100.0 * init_wins,
            100.0 * final_wins,
            100.0 * PAIR_WIN_FRACTION
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn uniqueness_reporting(d: &Desk) -> Outcome {
    let spec = GrammarSpec::desk();
    let intents: Vec<IntentLabel> = spec
        .domains
        .iter()
        .flat_map(|dom| spec.actions.iter().map(move |act| IntentLabel::new(&dom.name, &act.name).unwrap()))
        .collect();
    let cfg = GenConfig {
        s: 1,
        k: 30,
        seed: 9,
        ..GenConfig::default()
    };
    let sets = augment(&d.model, &intents, &cfg).expect("augment");
    let summary = uniqueness_summary(&sets);
    let emitted: usize = sets.iter().map(|s| s.utterances.len()).sum();
    let mut readded = 0;
    for s in &sets {
        let mut again = s.clone();
        readded += again.merge(s.utterances.clone());
    }
    let texts: HashSet<(String, String)> = sets
        .iter()
        .flat_map(|s| s.utterances.iter().map(move |u| (s.intent.to_string(), u.text.clone())))
        .collect();
    outcome(
        intents.len() == 16 && emitted <= MAX_GENERATED_S1 && readded == 0 && texts.len() == emitted,
        format!(
            "{} intents: {emitted} unique of {} beam outputs (cap {MAX_GENERATED_S1}), uniqueness rate {:.4}; re-merge added {readded}",
            intents.len(),
            summary.candidates,
            summary.rate
        ),
    )
}

fn main() -> ExitCode {
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=9).contains(n)).collect();
    let wanted = |n: u8| only.is_empty() || only.contains(&n);

    let mut failed = 0;
    let mut report = |n: u8, name: &str, limit_secs: f64, f: &mut dyn FnMut() -> Outcome, extra_secs: f64| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64() + extra_secs;
        let pass = o.pass && secs < limit_secs;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {n} {name}: {} [{secs:.2}s of {limit_secs:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };

    report(1, "metric exactness", 1.0, &mut metric_exactness, 0.0);
    report(2, "gradient correctness", 120.0, &mut gradient_correctness, 0.0);
    report(3, "mask invariants", 60.0, &mut mask_invariants, 0.0);
    report(4, "closed-form loss oracles", 1.0, &mut loss_oracles, 0.0);
    report(5, "beam-search oracle", 10.0, &mut beam_oracle, 0.0);
    report(6, "negative-miner oracle", 30.0, &mut miner_oracle, 0.0);
    if wanted(7) || wanted(8) || wanted(9) {
        let d = desk();
        println!("     desk generator trained in {:.1}s", d.train_secs);
        report(7, "desk-scale GFSID", 900.0, &mut || desk_experiment(&d), d.train_secs);
        report(8, "contrastive effect", 60.0, &mut || contrastive_effect(&d), 0.0);
        report(9, "uniqueness reporting", 120.0, &mut || uniqueness_reporting(&d), 0.0);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
