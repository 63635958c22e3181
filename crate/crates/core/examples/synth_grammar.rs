//! Samples the desk grammar and prints a few examples per cell.
//!
//! `cargo run --example synth_grammar -- [grammar.toml] [out.jsonl]`

use std::collections::BTreeMap;
use std::path::Path;

use clang_nlg::corpus::{generate_synthetic_grammar, write_dataset, GrammarSpec};

fn main() -> clang_nlg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let spec = match args.first() {
        Some(p) => GrammarSpec::from_path(Path::new(p))?,
        None => GrammarSpec::desk(),
    };
    let synth = generate_synthetic_grammar(&spec, spec.seed)?;
    let ds = &synth.dataset;

    let mut by_intent: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for e in &ds.train {
        by_intent.entry(e.intent.to_string()).or_default().push(e.utterance());
    }
    for (intent, utts) in &by_intent {
        println!("{intent} ({} training examples)", utts.len());
        for u in utts.iter().take(3) {
            println!("    {u}");
        }
    }
    println!("\nmany-shot: {:?}", ds.many_shot_intents().iter().map(ToString::to_string).collect::<Vec<_>>());
    for (label, ty) in &synth.cell_types {
        println!("few-shot {label}: {ty}");
    }
    if let Some(out) = args.get(1) {
        write_dataset(Path::new(out), ds)?;
        println!("wrote {} records to {out}", ds.train.len() + ds.test.len());
    }
    Ok(())
}
