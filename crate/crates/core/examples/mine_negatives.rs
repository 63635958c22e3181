//! Mines a negative for a handful of desk-grammar utterances and shows the
//! n-gram overlap behind each choice.

use clang_nlg::corpus::{generate_synthetic_grammar, GrammarSpec};
use clang_nlg::training::mine_training_pairs;

fn main() -> clang_nlg::Result<()> {
    let spec = GrammarSpec::desk();
    let train = generate_synthetic_grammar(&spec, spec.seed)?.dataset.train;
    let pairs = mine_training_pairs(&train, 0)?;
    for p in pairs.iter().step_by(40) {
        let (pos, neg) = (&train[p.positive_idx], &train[p.negative_idx]);
        println!("{:<16} {}", pos.intent.to_string(), pos.utterance());
        println!("{:<16} {}", neg.intent.to_string(), neg.utterance());
        println!("    s1={} s2={} s3={} total={}\n", p.s1, p.s2, p.s3, p.similarity());
    }
    let mean = pairs.iter().map(|p| p.similarity() as f64).sum::<f64>() / pairs.len() as f64;
    println!("{} pairs, mean similarity {mean:.2}", pairs.len());
    Ok(())
}
