//! Trains the generator on the desk grammar and saves a checkpoint.
//!
//! `cargo run --release --example train_clang -- [out_dir]`

use std::path::PathBuf;

use clang_nlg::corpus::{generate_synthetic_grammar, GrammarSpec};
use clang_nlg::model::ModelConfig;
use clang_nlg::training::{fit_generator, smoothed, TrainConfig};

fn main() -> clang_nlg::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/desk-clang".into()));
    let spec = GrammarSpec::desk();
    let ds = generate_synthetic_grammar(&spec, spec.seed)?.dataset;
    let cfg = TrainConfig::desk();
    let (outcome, pairs) = fit_generator(&ds.train, ModelConfig::desk(0), &cfg)?;
    println!("{} training pairs, vocabulary of {}", pairs.len(), outcome.model.vocab.len());

    let totals = outcome.history.train_totals();
    for i in (0..totals.len()).step_by(cfg.steps_per_epoch.max(1)) {
        println!("step {i:5}  smoothed loss {:.4}", smoothed(&totals, 20, i));
    }
    for (epoch, v) in outcome.history.validation() {
        println!("epoch {epoch:3}  validation reconstruction {v:.4}");
    }
    println!("selected epoch {}", outcome.selected_epoch);
    outcome.model.save(&out)?;
    outcome.history.write_csv(&out.join("loss_history.csv"))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
