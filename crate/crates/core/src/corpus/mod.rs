//! Dataset types, vocabulary, and the `[CLS] y_d y_a [SEP] w… [SEP]` input
//! layout.

mod grammar;
mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grammar::{
    generate_synthetic_grammar, CellSpec, GrammarSpec, HeldOutCell, PhrasePool, SyntheticDataset,
};
pub use io::{read_dataset, write_dataset, write_records, DatasetRecord, Shot, Split};

pub type TokenId = usize;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;

pub const DEFAULT_MAX_UTTERANCE_LEN: usize = 24;

/// Lowercases, drops apostrophes, and splits on whitespace and any other
/// non-alphanumeric character. `_` is kept so label tokens survive.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else if ch == '\'' || ch == '\u{2019}' {
            continue;
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Collapses a possibly multi-word label name into one atomic token,
/// e.g. `"Recommendation Movies"` becomes `recommendation_movies`.
pub fn normalize_label(name: &str) -> Result<String> {
    let parts = tokenize(name);
    if parts.is_empty() {
        return Err(Error::InvalidLabel(format!("`{name}` has no word characters")));
    }
    Ok(parts.join("_"))
}

/// An intent as a (domain, action) pair. Both halves are stored normalized.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntentLabel {
    domain: String,
    action: String,
}

impl IntentLabel {
    pub fn new(domain: &str, action: &str) -> Result<Self> {
        Ok(Self {
            domain: normalize_label(domain)?,
            action: normalize_label(action)?,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn action(&self) -> &str {
        &self.action
    }

    /// Parses `domain:action`.
    pub fn parse(s: &str) -> Result<Self> {
        let (d, a) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidLabel(format!("`{s}` is not of the form domain:action")))?;
        Self::new(d, a)
    }
}

impl fmt::Display for IntentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.domain, self.action)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotClass {
    ManyShot,
    FewShot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    utterance: String,
    pub intent: IntentLabel,
    pub shot: ShotClass,
}

impl LabeledExample {
    /// Tokenizes `text`; rejects utterances with no tokens.
    pub fn new(text: &str, intent: IntentLabel, shot: ShotClass) -> Result<Self> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus("utterance has no tokens"));
        }
        Ok(Self {
            utterance: tokens.join(" "),
            intent,
            shot,
        })
    }

    /// The normalized utterance, tokens joined by single spaces.
    pub fn utterance(&self) -> &str {
        &self.utterance
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.utterance.split(' ')
    }
}

/// Train/test partition of a labelled corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Dataset {
    /// Intents with many-shot training data, sorted.
    pub fn many_shot_intents(&self) -> Vec<IntentLabel> {
        self.intents_with(ShotClass::ManyShot)
    }

    pub fn few_shot_intents(&self) -> Vec<IntentLabel> {
        self.intents_with(ShotClass::FewShot)
    }

    fn intents_with(&self, shot: ShotClass) -> Vec<IntentLabel> {
        let set: BTreeSet<_> = self
            .train
            .iter()
            .chain(&self.test)
            .filter(|e| e.shot == shot)
            .map(|e| e.intent.clone())
            .collect();
        set.into_iter().collect()
    }
}

/// Token ↔ id map. Ids are dense: the four specials, then every domain and
/// action label (sorted), then corpus tokens by descending count with ties
/// broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    labels: BTreeSet<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    labels: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;
    fn try_from(f: VocabularyFile) -> Result<Self> {
        if f.tokens.len() < 4 || f.tokens[..4] != [PAD, UNK, CLS, SEP] {
            return Err(Error::Config("vocabulary must start with the four special tokens".into()));
        }
        let index: HashMap<_, _> = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != f.tokens.len() {
            return Err(Error::Config("vocabulary has duplicate tokens".into()));
        }
        if let Some(l) = f.labels.iter().find(|l| !index.contains_key(*l)) {
            return Err(Error::UnknownLabel(l.clone()));
        }
        Ok(Self {
            tokens: f.tokens,
            labels: f.labels.into_iter().collect(),
            index,
        })
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            labels: v.labels.into_iter().collect(),
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `[UNK]`'s id.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_label(&self, token: &str) -> bool {
        self.labels.contains(token)
    }

    pub fn label_id(&self, label: &str) -> Result<TokenId> {
        if !self.labels.contains(label) {
            return Err(Error::UnknownLabel(label.to_string()));
        }
        Ok(self.index[label])
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Joins decoded utterance tokens, dropping specials.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i > SEP_ID)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn build_vocabulary(examples: &[LabeledExample], min_count: usize) -> Result<Vocabulary> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus("no examples to build a vocabulary from"));
    }
    let mut labels = BTreeSet::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in examples {
        labels.insert(ex.intent.domain.clone());
        labels.insert(ex.intent.action.clone());
        for t in ex.tokens() {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    tokens.extend(labels.iter().cloned());
    let mut corpus: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !labels.contains(*t))
        .collect();
    corpus.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    tokens.extend(corpus.into_iter().map(|(t, _)| t.to_string()));
    let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(Vocabulary { tokens, labels, index })
}

/// Positions of each role inside an encoded sequence holding an utterance of
/// `utterance_len` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoleLayout {
    utterance_len: usize,
}

impl RoleLayout {
    pub const CLS: usize = 0;
    pub const DOMAIN: usize = 1;
    pub const ACTION: usize = 2;
    pub const FIRST_SEP: usize = 3;
    pub const UTTERANCE_START: usize = 4;

    pub fn new(utterance_len: usize) -> Self {
        Self { utterance_len }
    }

    pub fn utterance_len(&self) -> usize {
        self.utterance_len
    }

    /// `N = n + 5`
    pub fn len(&self) -> usize {
        self.utterance_len + 5
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn utterance(&self) -> std::ops::Range<usize> {
        Self::UTTERANCE_START..Self::UTTERANCE_START + self.utterance_len
    }

    pub fn final_sep(&self) -> usize {
        self.len() - 1
    }

    /// Positions whose logits are scored during reconstruction: the first
    /// `[SEP]` through the last utterance token, each predicting its
    /// successor.
    pub fn predicting_positions(&self) -> std::ops::Range<usize> {
        Self::FIRST_SEP..self.final_sep()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
    pub layout: RoleLayout,
    /// Set when the utterance was cut at the maximum length.
    pub truncated: bool,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    pub fn utterance_ids(&self) -> &[TokenId] {
        &self.token_ids[self.layout.utterance()]
    }

    /// Same intent, different utterance ids.
    pub fn with_utterance(&self, utterance: &[TokenId]) -> Self {
        encode_ids(self.token_ids[1], self.token_ids[2], utterance, usize::MAX)
    }
}

/// Builds the input layout from already-mapped ids.
pub fn encode_ids(
    domain: TokenId,
    action: TokenId,
    utterance: &[TokenId],
    max_len: usize,
) -> EncodedSequence {
    let n = utterance.len().min(max_len);
    let mut token_ids = Vec::with_capacity(n + 5);
    token_ids.extend([CLS_ID, domain, action, SEP_ID]);
    token_ids.extend_from_slice(&utterance[..n]);
    token_ids.push(SEP_ID);
    let mut segment_ids = vec![0u8; 4];
    segment_ids.resize(n + 5, 1);
    EncodedSequence {
        token_ids,
        segment_ids,
        layout: RoleLayout::new(n),
        truncated: n < utterance.len(),
    }
}

/// Tokenizes `utterance` and lays it out after the intent. Utterances longer
/// than `max_len` are cut; the final `[SEP]` is always kept.
pub fn encode_input(
    intent: &IntentLabel,
    utterance: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedSequence> {
    let d = vocab.label_id(intent.domain())?;
    let a = vocab.label_id(intent.action())?;
    let ids: Vec<TokenId> = tokenize(utterance).iter().map(|t| vocab.id(t)).collect();
    Ok(encode_ids(d, a, &ids, max_len))
}

/// Few-shot intent taxonomy relative to the domains and actions seen in
/// many-shot intents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntentType {
    /// Novel domain, seen action.
    #[serde(rename = "novel_d", alias = "Novel_d")]
    NovelDomain,
    /// Seen domain, novel action.
    #[serde(rename = "novel_a", alias = "Novel_a")]
    NovelAction,
    /// Both seen.
    #[serde(rename = "dual_s", alias = "Dual_s")]
    DualSeen,
    /// Both novel.
    #[serde(rename = "dual_u", alias = "Dual_u")]
    DualUnseen,
}

impl IntentType {
    pub const ALL: [IntentType; 4] = [
        IntentType::NovelDomain,
        IntentType::NovelAction,
        IntentType::DualSeen,
        IntentType::DualUnseen,
    ];

    pub fn classify<'a>(intent: &IntentLabel, many_shot: impl IntoIterator<Item = &'a IntentLabel>) -> Self {
        let (mut seen_d, mut seen_a) = (false, false);
        for m in many_shot {
            seen_d |= m.domain == intent.domain;
            seen_a |= m.action == intent.action;
        }
        match (seen_d, seen_a) {
            (false, true) => IntentType::NovelDomain,
            (true, false) => IntentType::NovelAction,
            (true, true) => IntentType::DualSeen,
            (false, false) => IntentType::DualUnseen,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntentType::NovelDomain => "Novel_d",
            IntentType::NovelAction => "Novel_a",
            IntentType::DualSeen => "Dual_s",
            IntentType::DualUnseen => "Dual_u",
        }
    }
}

impl fmt::Display for IntentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
