#![allow(dead_code)]

use clang_nlg::corpus::{build_vocabulary, IntentLabel, LabeledExample, ShotClass, TokenId};
use clang_nlg::model::{ClangModel, ModelConfig};

pub fn label(s: &str) -> IntentLabel {
    IntentLabel::parse(s).unwrap()
}

pub fn corpus() -> Vec<LabeledExample> {
    [
        ("wake me up at seven", "alarm:set"),
        ("set an alarm for tomorrow morning", "alarm:set"),
        ("is it going to rain today", "weather:query"),
        ("what is the weather like", "weather:query"),
        ("play some jazz music", "music:play"),
    ]
    .iter()
    .map(|(t, l)| LabeledExample::new(t, label(l), ShotClass::ManyShot).unwrap())
    .collect()
}

/// One layer each side, `d_h = 8`, utterances up to 8 tokens.
pub fn tiny_model(seed: u64, init_std: f64) -> ClangModel {
    let vocab = build_vocabulary(&corpus(), 1).unwrap();
    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.seed = seed;
    cfg.init_std = init_std;
    ClangModel::new(cfg, vocab).unwrap()
}

/// Two layers each side.
pub fn deeper_model(seed: u64, init_std: f64) -> ClangModel {
    let vocab = build_vocabulary(&corpus(), 1).unwrap();
    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    cfg.seed = seed;
    cfg.init_std = init_std;
    ClangModel::new(cfg, vocab).unwrap()
}

/// Ordinary word ids (everything after the four specials).
pub fn word_ids(model: &ClangModel) -> Vec<TokenId> {
    (4..model.vocab.len()).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}
