//! Loads a checkpoint and prints beam-search output for a few intents.
//!
//! `cargo run --release --example generate_utterances -- <checkpoint> [domain:action ...]`

use std::path::PathBuf;

use clang_nlg::corpus::IntentLabel;
use clang_nlg::generation::{augment, uniqueness_summary, GenConfig};
use clang_nlg::model::ClangModel;

fn main() -> clang_nlg::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/desk-clang".into()));
    let model = ClangModel::load(&dir)?;
    let mut intents = args.map(|a| IntentLabel::parse(&a)).collect::<clang_nlg::Result<Vec<_>>>()?;
    if intents.is_empty() {
        intents = ["music:query", "alarm:update", "calendar:set"]
            .iter()
            .map(|s| IntentLabel::parse(s))
            .collect::<clang_nlg::Result<_>>()?;
    }
    let sets = augment(&model, &intents, &GenConfig::default())?;
    for set in &sets {
        println!("{} ({} unique of {} candidates)", set.intent, set.utterances.len(), set.candidates);
        for u in set.utterances.iter().take(12) {
            println!("  {:8.3}  {}", u.score, u.text);
        }
    }
    let summary = uniqueness_summary(&sets);
    println!("uniqueness {:.3} ({} / {})", summary.rate, summary.unique, summary.candidates);
    Ok(())
}
