//! Command-line front end. Every artifact-producing command writes a
//! `RunManifest` next to its output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::BackwardFault;
use crate::corpus::{generate_synthetic_grammar, read_dataset, write_dataset, GrammarSpec, IntentLabel};
use crate::error::{Error, Result};
use crate::generation::{augment, uniqueness_summary, write_generated, GenConfig};
use crate::gfsid::{run_pipeline, ClassifierConfig};
use crate::losses::{read_pairs, write_pairs};
use crate::model::{ClangModel, ModelConfig};
use crate::training::{grad_check, mine_training_pairs, train, GradCheckCase, TrainConfig};

/// Effective configuration: built-in defaults, overlaid by a TOML file,
/// overlaid by command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenConfig,
    pub classifier: ClassifierConfig,
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::desk()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str::<PartialRunConfig>(&text)?.over(Self::desk())
            }
        }
    }
}

/// File layer: only the keys present override the defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialRunConfig {
    model: Option<toml::Table>,
    train: Option<toml::Table>,
    generation: Option<toml::Table>,
    classifier: Option<toml::Table>,
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: T, table: Option<toml::Table>) -> Result<T> {
    let Some(table) = table else { return Ok(base) };
    let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    merged.extend(table);
    Ok(toml::Value::Table(merged).try_into()?)
}

impl PartialRunConfig {
    fn over(self, base: RunConfig) -> Result<RunConfig> {
        Ok(RunConfig {
            model: overlay(base.model, self.model)?,
            train: overlay(base.train, self.train)?,
            generation: overlay(base.generation, self.generation)?,
            classifier: overlay(base.classifier, self.classifier)?,
        })
    }
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of a file, or of every file under a directory in path order.
pub fn path_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(content_hash(&fs::read(path)?));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(content_hash(&fs::read(&f)?).as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST_NAME) {
            out.push(p);
        }
    }
    Ok(())
}

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    /// Hash over all input hashes.
    pub input_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    fn start(command: &str, config: &impl Serialize, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let inputs: Vec<InputRecord> = inputs
            .iter()
            .map(|p| Ok(InputRecord { path: p.to_path_buf(), hash: path_hash(p)? }))
            .collect::<Result<_>>()?;
        let joined: String = inputs.iter().map(|i| i.hash.as_str()).collect();
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            input_hash: content_hash(joined.as_bytes()),
            inputs,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
        })
    }

    /// Writes the manifest to `<dir>/run_manifest.json` for directory
    /// outputs and `<file>.manifest.json` otherwise.
    fn finish(mut self, primary: &Path, outputs: &[&Path]) -> Result<PathBuf> {
        self.outputs = outputs.iter().map(|p| p.to_path_buf()).collect();
        self.finished_unix = now();
        let path = manifest_path(primary);
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join(MANIFEST_NAME)
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "clang-nlg", version, about = "Composed variational utterance generator and GFSID harness")]
pub struct Cli {
    /// Worker threads for seed runs and per-intent generation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a labelled dataset from a compositional grammar.
    SynthData(SynthArgs),
    /// Mine one out-of-intent negative per training example.
    MineNegatives(MineArgs),
    /// Train the generator and write a checkpoint directory.
    Train(TrainArgs),
    /// Generate utterances for intents from a checkpoint.
    Generate(GenerateArgs),
    /// Oversampling baseline vs generator augmentation over several seeds.
    EvalGfsid(EvalArgs),
    /// Compare analytic gradients of the full loss with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Grammar TOML; the bundled desk grammar when omitted.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pre-mined pairs; mined from the training split when omitted.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Comma-separated epoch grid.
    #[arg(long, value_delimiter = ',')]
    pub epochs: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated `domain:action` labels.
    #[arg(long, value_delimiter = ',', required = true)]
    pub intents: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt one backward rule; the check is then expected to fail.
    #[arg(long)]
    pub corrupt: bool,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Outcome of a successfully executed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    CheckFailed,
}

pub fn run(cli: Cli) -> Result<Status> {
    if let Some(j) = cli.jobs {
        // ignored if a pool already exists, e.g. when called twice in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::MineNegatives(a) => mine_negatives(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::EvalGfsid(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `std::env::args`, runs, and maps the result to an exit code:
/// 0 success, 1 check failure or runtime error, 2 usage or configuration error.
pub fn main_exit() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn synth_data(a: SynthArgs) -> Result<Status> {
    let spec = match &a.grammar {
        Some(p) => GrammarSpec::from_path(p)?,
        None => GrammarSpec::desk(),
    };
    let seed = a.seed.unwrap_or(spec.seed);
    let inputs: Vec<&Path> = a.grammar.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest::start("synth-data", &spec, seed, &inputs)?;
    let synth = generate_synthetic_grammar(&spec, seed)?;
    ensure_parent(&a.out)?;
    write_dataset(&a.out, &synth.dataset)?;
    println!(
        "{} train / {} test examples written to {}",
        synth.dataset.train.len(),
        synth.dataset.test.len(),
        a.out.display()
    );
    for (label, ty) in &synth.cell_types {
        println!("held out {label}: {}", ty.name());
    }
    manifest.finish(&a.out, &[&a.out])?;
    Ok(Status::Ok)
}

fn mine_negatives(a: MineArgs) -> Result<Status> {
    let manifest = RunManifest::start("mine-negatives", &serde_json::json!({}), a.seed, &[&a.data])?;
    let ds = read_dataset(&a.data)?;
    let pairs = mine_training_pairs(&ds.train, a.seed)?;
    ensure_parent(&a.out)?;
    write_pairs(&a.out, &pairs)?;
    let mean = pairs.iter().map(|p| p.similarity() as f64).sum::<f64>() / pairs.len().max(1) as f64;
    println!("{} pairs, mean similarity {mean:.2}", pairs.len());
    manifest.finish(&a.out, &[&a.out])?;
    Ok(Status::Ok)
}

fn cmd_train(a: TrainArgs) -> Result<Status> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.train.steps_per_epoch = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epoch_grid = v;
    }
    cfg.train.validate()?;

    let mut inputs: Vec<&Path> = vec![&a.data];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.pairs.as_deref());
    let ds = read_dataset(&a.data)?;
    let vocab = crate::corpus::build_vocabulary(&ds.train, 1)?;
    cfg.model.vocab_size = vocab.len();
    let manifest = RunManifest::start("train", &cfg, cfg.train.seed, &inputs)?;

    let pairs = match &a.pairs {
        Some(p) => read_pairs(p)?,
        None => mine_training_pairs(&ds.train, cfg.train.seed)?,
    };
    if let Some(bad) = pairs.iter().find(|p| p.positive_idx.max(p.negative_idx) >= ds.train.len()) {
        return Err(Error::Config(format!("pair {bad:?} indexes past the training split")));
    }
    let model = ClangModel::new(cfg.model.clone(), vocab)?;
    let outcome = train(model, &ds.train, &pairs, &cfg.train)?;

    fs::create_dir_all(&a.out)?;
    outcome.model.save(&a.out)?;
    let history = a.out.join("loss_history.csv");
    outcome.history.write_csv(&history)?;
    let pairs_out = a.out.join("pairs.jsonl");
    write_pairs(&pairs_out, &pairs)?;
    println!(
        "trained {} epochs, selected epoch {}; checkpoint at {}",
        cfg.train.total_epochs(),
        outcome.selected_epoch,
        a.out.display()
    );
    manifest.finish(&a.out, &[&a.out, &history, &pairs_out])?;
    Ok(Status::Ok)
}

fn cmd_generate(a: GenerateArgs) -> Result<Status> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.s {
        cfg.generation.s = v;
    }
    if let Some(v) = a.k {
        cfg.generation.k = v;
    }
    if let Some(v) = a.max_len {
        cfg.generation.max_len = v;
    }
    if let Some(v) = a.seed {
        cfg.generation.seed = v;
    }
    cfg.generation.validate()?;
    let intents = a
        .intents
        .iter()
        .map(|s| IntentLabel::parse(s).map_err(|e| Error::Config(format!("--intents: {e}"))))
        .collect::<Result<Vec<_>>>()?;

    let mut inputs: Vec<&Path> = vec![&a.checkpoint];
    inputs.extend(a.config.as_deref());
    let manifest = RunManifest::start("generate", &cfg.generation, cfg.generation.seed, &inputs)?;
    let model = ClangModel::load(&a.checkpoint)?;
    let sets = augment(&model, &intents, &cfg.generation)?;
    ensure_parent(&a.out)?;
    write_generated(&a.out, &sets)?;
    for set in &sets {
        println!("{}: {} unique of {} candidates", set.intent, set.utterances.len(), set.candidates);
    }
    let u = uniqueness_summary(&sets);
    println!("uniqueness rate {:.4} ({} / {})", u.rate, u.unique, u.candidates);
    manifest.finish(&a.out, &[&a.out])?;
    Ok(Status::Ok)
}

fn cmd_eval(a: EvalArgs) -> Result<Status> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.s {
        cfg.generation.s = v;
    }
    if let Some(v) = a.k {
        cfg.generation.k = v;
    }
    cfg.generation.validate()?;
    cfg.classifier.validate()?;
    if a.seeds.is_empty() {
        return Err(Error::Config("--seeds is empty".into()));
    }
    let mut inputs: Vec<&Path> = vec![&a.data, &a.checkpoint];
    inputs.extend(a.config.as_deref());
    let manifest = RunManifest::start(
        "eval-gfsid",
        &serde_json::json!({ "generation": cfg.generation, "classifier": cfg.classifier, "seeds": a.seeds }),
        a.seeds[0],
        &inputs,
    )?;
    let ds = read_dataset(&a.data)?;
    let model = ClangModel::load(&a.checkpoint)?;
    let report = run_pipeline(&ds, &model, &cfg.generation, &cfg.classifier, &a.seeds)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", report.table());
    println!("augmentation improved few-shot accuracy and H in {} of {} seeds", report.improved_runs(), report.runs.len());
    manifest.finish(&a.out, &[&a.out])?;
    Ok(Status::Ok)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<Status> {
    let fault = if a.corrupt { BackwardFault::GeluDerivative } else { BackwardFault::None };
    let mut case = GradCheckCase::tiny(a.seed)?;
    let report = grad_check(&mut case, a.tolerance, fault, a.seed)?;
    for t in &report.tensors {
        let flag = if t.max_rel_error < report.tolerance { "ok  " } else { "FAIL" };
        println!("{flag} {:<24} max rel error {:.3e}", t.name, t.max_rel_error);
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance);
    if let Some(out) = &a.out {
        let manifest = RunManifest::start("gradcheck", &serde_json::json!({ "tolerance": a.tolerance, "corrupt": a.corrupt }), a.seed, &[])?;
        ensure_parent(out)?;
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
        manifest.finish(out, &[out])?;
    }
    Ok(if report.passed() { Status::Ok } else { Status::CheckFailed })
}
