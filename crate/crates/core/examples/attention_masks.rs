//! Prints the encoder and decoder masks for a short utterance and shows the
//! attention the encoder actually pays from the domain and action rows.

use clang_nlg::attention::{build_decoder_mask, build_encoder_mask, MaskMatrix};
use clang_nlg::autograd::Graph;
use clang_nlg::corpus::{build_vocabulary, IntentLabel, LabeledExample, RoleLayout, ShotClass};
use clang_nlg::model::{Batch, ClangModel, ModelConfig};

fn show(name: &str, m: &MaskMatrix, labels: &[&str]) {
    println!("{name} (· = visible, x = blocked)");
    print!("{:>8}", "");
    for l in labels {
        print!("{l:>7}");
    }
    println!();
    for (q, l) in labels.iter().enumerate() {
        print!("{l:>8}");
        for k in 0..m.len() {
            print!("{:>7}", if m.is_blocked(q, k) { "x" } else { "·" });
        }
        println!();
    }
    println!();
}

fn main() -> clang_nlg::Result<()> {
    let intent = IntentLabel::parse("alarm:set")?;
    let ex = LabeledExample::new("wake me up", intent.clone(), ShotClass::ManyShot)?;
    let layout = RoleLayout::new(3);
    let labels = ["[CLS]", "alarm", "set", "[SEP]", "wake", "me", "up", "[SEP]"];
    show("encoder", &build_encoder_mask(&layout, layout.len())?, &labels);
    let mut dec_labels = labels;
    dec_labels[0] = "z";
    show("decoder", &build_decoder_mask(&layout, layout.len())?, &dec_labels);

    let vocab = build_vocabulary(std::slice::from_ref(&ex), 1)?;
    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.init_std = 1.0;
    let model = ClangModel::new(cfg, vocab)?;
    let ids: Vec<_> = ex.tokens().map(|t| model.vocab.id(t)).collect();
    let seq = model.sequence(&intent, &ids)?;
    let batch = Batch::new(std::slice::from_ref(&seq))?;
    let mut g = Graph::new(&model.store);
    let enc = model.encode(&mut g, &batch);
    let probs = g.attention_probs(enc.layers[0].attention).expect("attention node");
    for (h, p) in probs.iter().enumerate() {
        println!("head {h}: domain row {:.3?}", p.row(RoleLayout::DOMAIN).to_vec());
        println!("head {h}: action row {:.3?}", p.row(RoleLayout::ACTION).to_vec());
    }
    Ok(())
}
