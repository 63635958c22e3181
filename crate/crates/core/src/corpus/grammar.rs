//! Template grammar that composes utterances from a domain-phrase pool and an
//! action-phrase pool, with selected (domain, action) cells held out as
//! few-shot intents.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_label, Dataset, IntentLabel, IntentType, LabeledExample, ShotClass};
use crate::error::{Error, Result};

const DESK_GRAMMAR: &str = include_str!("../../data/desk_grammar.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhrasePool {
    pub name: String,
    pub phrases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub domain: String,
    pub action: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutCell {
    pub domain: String,
    pub action: String,
    /// Expected taxonomy; required when both halves are unseen.
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub intent_type: Option<IntentType>,
}

/// Declarative grammar config. Templates use `{domain}`, `{action}` and
/// optionally `{slot}` placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    #[serde(default)]
    pub seed: u64,
    /// Training examples per held-out cell.
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
    pub examples_per_cell: usize,
    #[serde(default = "default_test_per_cell")]
    pub test_examples_per_cell: usize,
    pub templates: Vec<String>,
    #[serde(default)]
    pub slots: Vec<String>,
    pub domains: Vec<PhrasePool>,
    pub actions: Vec<PhrasePool>,
    /// Populated cells; the full domain × action grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<CellSpec>>,
    pub held_out_cells: Vec<HeldOutCell>,
}

fn default_test_per_cell() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Type of every held-out cell, in declaration order.
    pub cell_types: Vec<(IntentLabel, IntentType)>,
}

impl GrammarSpec {
    /// The 4 × 4 grammar used by the desk-scale experiment: eight many-shot
    /// cells and three held-out cells, one each of Novel_d, Novel_a and
    /// Dual_s.
    pub fn desk() -> Self {
        Self::from_toml_str(DESK_GRAMMAR).expect("bundled grammar parses")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("grammar serializes")
    }

    fn cell_list(&self) -> Vec<CellSpec> {
        match &self.cells {
            Some(c) => c.clone(),
            None => self
                .domains
                .iter()
                .flat_map(|d| {
                    self.actions.iter().map(|a| CellSpec {
                        domain: d.name.clone(),
                        action: a.name.clone(),
                    })
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Grammar(m));
        if self.domains.len() < 2 || self.actions.len() < 2 {
            return bad("need at least two domains and two actions".into());
        }
        if self.k == 0 || self.examples_per_cell == 0 {
            return bad("K and examples_per_cell must be positive".into());
        }
        if self.templates.is_empty() {
            return bad("no templates".into());
        }
        for t in &self.templates {
            if !t.contains("{domain}") || !t.contains("{action}") {
                return bad(format!("template `{t}` lacks a {{domain}} or {{action}} slot"));
            }
            if t.contains("{slot}") && self.slots.is_empty() {
                return bad(format!("template `{t}` uses {{slot}} but no slots are defined"));
            }
        }
        for p in self.domains.iter().chain(&self.actions) {
            // names must already be atomic label tokens
            if normalize_label(&p.name)? != p.name {
                return bad(format!("label `{}` is not in normalized form", p.name));
            }
            if p.phrases.is_empty() {
                return bad(format!("`{}` has no phrases", p.name));
            }
        }
        let domains: BTreeSet<_> = self.domains.iter().map(|d| d.name.as_str()).collect();
        let actions: BTreeSet<_> = self.actions.iter().map(|a| a.name.as_str()).collect();
        if domains.len() != self.domains.len() || actions.len() != self.actions.len() {
            return bad("duplicate domain or action name".into());
        }
        let cells = self.cell_list();
        for c in &cells {
            if !domains.contains(c.domain.as_str()) || !actions.contains(c.action.as_str()) {
                return bad(format!("cell ({}, {}) names an undeclared domain or action", c.domain, c.action));
            }
        }
        for h in &self.held_out_cells {
            if !cells.iter().any(|c| c.domain == h.domain && c.action == h.action) {
                return bad(format!("held-out cell ({}, {}) is not a populated cell", h.domain, h.action));
            }
        }
        Ok(())
    }
}

fn is_held_out(spec: &GrammarSpec, c: &CellSpec) -> bool {
    spec.held_out_cells
        .iter()
        .any(|h| h.domain == c.domain && h.action == c.action)
}

/// Fills `template` with one phrase from each pool.
fn sample_utterance(spec: &GrammarSpec, template: &str, d: &PhrasePool, a: &PhrasePool, rng: &mut ChaCha8Rng) -> String {
    let mut s = template
        .replace("{domain}", d.phrases.choose(rng).unwrap())
        .replace("{action}", a.phrases.choose(rng).unwrap());
    if s.contains("{slot}") {
        s = s.replace("{slot}", spec.slots.choose(rng).unwrap());
    }
    s
}

/// Draws train and test examples for every populated cell. Each cell owns an
/// independent random stream keyed by its position, so the output depends
/// only on `(spec, seed)`.
pub fn generate_synthetic_grammar(spec: &GrammarSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let cells = spec.cell_list();
    let many: Vec<IntentLabel> = cells
        .iter()
        .filter(|c| !is_held_out(spec, c))
        .map(|c| IntentLabel::new(&c.domain, &c.action))
        .collect::<Result<_>>()?;

    let mut cell_types = Vec::new();
    for h in &spec.held_out_cells {
        let label = IntentLabel::new(&h.domain, &h.action)?;
        let computed = IntentType::classify(&label, &many);
        match h.intent_type {
            Some(declared) if declared != computed => {
                return Err(Error::Grammar(format!(
                    "held-out cell {label} declared {declared} but the many-shot cells make it {computed}"
                )))
            }
            None if computed == IntentType::DualUnseen => {
                return Err(Error::Grammar(format!(
                    "held-out cell {label} has an unseen domain and action; flag it as dual_u explicitly"
                )))
            }
            _ => {}
        }
        cell_types.push((label, computed));
    }

    let mut ds = Dataset::default();
    for (i, c) in cells.iter().enumerate() {
        let d = spec.domains.iter().find(|p| p.name == c.domain).unwrap();
        let a = spec.actions.iter().find(|p| p.name == c.action).unwrap();
        let intent = IntentLabel::new(&c.domain, &c.action)?;
        let (shot, n_train) = if is_held_out(spec, c) {
            (ShotClass::FewShot, spec.k)
        } else {
            (ShotClass::ManyShot, spec.examples_per_cell)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let draw = |rng: &mut ChaCha8Rng| -> Result<LabeledExample> {
            let template = spec.templates.choose(rng).unwrap();
            LabeledExample::new(&sample_utterance(spec, template, d, a, rng), intent.clone(), shot)
        };
        for _ in 0..n_train {
            ds.train.push(draw(&mut rng)?);
        }
        for _ in 0..spec.test_examples_per_cell {
            ds.test.push(draw(&mut rng)?);
        }
    }
    Ok(SyntheticDataset { dataset: ds, cell_types })
}
