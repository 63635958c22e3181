//! The bi-latent conditional VAE: a transformer encoder reads the intent and
//! utterance and yields one Gaussian posterior for the domain and one for the
//! action; the two samples are composed into a single latent that replaces
//! the decoder's first token.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_decoder_mask, build_encoder_mask, decoder_mask, transformer_layer, LayerParams, LayerTrace, MaskMatrix};
use crate::autograd::{log_softmax, Graph, Var};
use crate::corpus::{encode_ids, EncodedSequence, IntentLabel, RoleLayout, TokenId, Vocabulary, CLS_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
const CHECKPOINT_VERSION: u32 = 1;
const SEGMENTS: usize = 2;

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_k: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    /// Longest utterance, in tokens, the position table covers.
    pub max_len: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl ModelConfig {
    /// Desk-scale geometry: `d_h = 64`, four heads of 16, two layers each side.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_h: 64,
            d_k: 16,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_size,
            max_len: crate::corpus::DEFAULT_MAX_UTTERANCE_LEN,
            seed: 0,
            init_std: default_init_std(),
        }
    }

    /// Geometry used for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_h: 8,
            d_k: 4,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size,
            max_len: 8,
            seed: 0,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 || self.d_k == 0 || self.heads * self.d_k != self.d_h {
            return bad("d_h must equal heads × d_k with both positive");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if self.vocab_size < 5 {
            return bad("vocabulary needs the specials plus at least one token");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be finite and non-negative");
        }
        Ok(())
    }

    pub fn max_positions(&self) -> usize {
        self.max_len + 5
    }
}

/// Token, position and segment tables followed by a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl Embeddings {
    pub fn init<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        positions: usize,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            token: store.normal(format!("{prefix}.token"), vocab, d, std, rng),
            position: store.normal(format!("{prefix}.position"), positions, d, std, rng),
            segment: store.normal(format!("{prefix}.segment"), SEGMENTS, d, std, rng),
            ln_gamma: store.ones(format!("{prefix}.ln_gamma"), 1, d),
            ln_beta: store.zeros(format!("{prefix}.ln_beta"), 1, d),
        }
    }

    /// `LN(tok + pos + seg)`; when `replace` is given, the token embedding at
    /// each listed row is swapped for the matching row of the supplied var.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        positions: &[usize],
        segments: &[usize],
        replace: Option<(Var, &[usize])>,
    ) -> Var {
        let table = g.param(self.token);
        let mut x = g.select_rows(table, tokens);
        if let Some((src, rows)) = replace {
            x = g.replace_rows(x, src, rows);
        }
        let pos_table = g.param(self.position);
        let pos = g.select_rows(pos_table, positions);
        let seg_table = g.param(self.segment);
        let seg = g.select_rows(seg_table, segments);
        let x = g.add(x, pos);
        let x = g.add(x, seg);
        let (gamma, beta) = (g.param(self.ln_gamma), g.param(self.ln_beta));
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GaussianHead {
    w_mu: ParamId,
    b_mu: ParamId,
    w_sigma: ParamId,
    b_sigma: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ModelParams {
    emb: Embeddings,
    encoder: Vec<LayerParams>,
    decoder: Vec<LayerParams>,
    domain: GaussianHead,
    action: GaussianHead,
    comp_w: ParamId,
    comp_b: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
    head_ln_gamma: ParamId,
    head_ln_beta: ParamId,
    lm_bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    Domain,
    Action,
}

/// Diagonal Gaussian; `log_var` is `log σ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Array1<f64>,
    pub log_var: Array1<f64>,
}

impl GaussianParams {
    pub fn standard(d: usize) -> Self {
        Self {
            mu: Array1::zeros(d),
            log_var: Array1::zeros(d),
        }
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.log_var.mapv(|l| (l / 2.0).exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub z_d: Array1<f64>,
    pub z_a: Array1<f64>,
}

/// `z = μ + exp(log σ² / 2) · ε`
pub fn reparameterize(g: &GaussianParams, eps: &Array1<f64>) -> Array1<f64> {
    &g.mu + &(g.sigma() * eps)
}

/// Graph handles for a batch of posteriors (one row per item).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Sequences padded to a common length, with their masks.
#[derive(Clone, Debug)]
pub struct Batch {
    len: usize,
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    segments: Vec<usize>,
    real_lens: Vec<usize>,
    enc_masks: Vec<MaskMatrix>,
    dec_masks: Vec<MaskMatrix>,
}

impl Batch {
    pub fn new(seqs: &[EncodedSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus("batch"));
        }
        let n = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut b = Self::empty(n);
        for s in seqs {
            let mut tokens = s.token_ids.clone();
            tokens.resize(n, PAD_ID);
            let mut segments: Vec<usize> = s.segment_ids.iter().map(|&x| x as usize).collect();
            segments.resize(n, 1);
            b.push(tokens, segments, s.len());
            b.enc_masks.push(build_encoder_mask(&s.layout, n)?);
            b.dec_masks.push(build_decoder_mask(&s.layout, n)?);
        }
        Ok(b)
    }

    /// Decoder-only batch of generation prefixes `[CLS] y_d y_a [SEP] w…`,
    /// all the same length.
    pub(crate) fn prefixes(domain: TokenId, action: TokenId, utterances: &[Vec<TokenId>]) -> Self {
        let n = 4 + utterances[0].len();
        let mut b = Self::empty(n);
        for u in utterances {
            debug_assert_eq!(u.len() + 4, n);
            let mut tokens = vec![CLS_ID, domain, action, SEP_ID];
            tokens.extend_from_slice(u);
            let segments = (0..n).map(|i| usize::from(i >= RoleLayout::UTTERANCE_START)).collect();
            b.push(tokens, segments, n);
            b.dec_masks.push(decoder_mask(n, n));
        }
        b
    }

    fn empty(len: usize) -> Self {
        Self {
            len,
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
            real_lens: Vec::new(),
            enc_masks: Vec::new(),
            dec_masks: Vec::new(),
        }
    }

    fn push(&mut self, tokens: Vec<TokenId>, segments: Vec<usize>, real_len: usize) {
        self.tokens.extend(tokens);
        self.segments.extend(segments);
        self.positions.extend(0..self.len);
        self.real_lens.push(real_len);
    }

    pub fn size(&self) -> usize {
        self.real_lens.len()
    }

    /// Padded length `N`.
    pub fn seq_len(&self) -> usize {
        self.len
    }

    fn row(&self, item: usize, pos: usize) -> usize {
        item * self.len + pos
    }

    fn item_rows(&self, pos: usize) -> Vec<usize> {
        (0..self.size()).map(|b| self.row(b, pos)).collect()
    }
}

/// Which decoder rows get vocabulary logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitRows {
    /// First `[SEP]` through the last utterance token of every item.
    Predicting,
    /// The last real row of every item (generation).
    Last,
    /// Every row of every item.
    All,
}

pub struct EncoderOutput {
    pub e_d: Var,
    pub e_a: Var,
    pub hidden: Var,
    pub layers: Vec<LayerTrace>,
}

pub struct DecoderOutput {
    pub logits: Var,
    /// Flattened batch row behind each logits row.
    pub rows: Vec<usize>,
    /// Next-token target and owning item per logits row (`Predicting` only).
    pub targets: Vec<TokenId>,
    pub groups: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

pub struct Forward {
    pub post_d: GaussianVars,
    pub post_a: GaussianVars,
    pub z_comp: Var,
    /// Per-item reconstruction NLL, `B × 1`.
    pub nll: Var,
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClangModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    params: ModelParams,
}

impl ClangModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, std) = (config.d_h, config.init_std);
        let mut store = ParamStore::new();
        let emb = Embeddings::init(&mut store, "emb", config.vocab_size, config.max_positions(), d, std, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| LayerParams::init(&mut store, &format!("enc.{i}"), d, std, &mut rng))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| LayerParams::init(&mut store, &format!("dec.{i}"), d, std, &mut rng))
            .collect();
        let mut head = |name: &str, store: &mut ParamStore| GaussianHead {
            w_mu: store.normal(format!("{name}.w_mu"), d, d, std, &mut rng),
            b_mu: store.zeros(format!("{name}.b_mu"), 1, d),
            w_sigma: store.normal(format!("{name}.w_sigma"), d, d, std, &mut rng),
            b_sigma: store.zeros(format!("{name}.b_sigma"), 1, d),
        };
        let domain = head("post_d", &mut store);
        let action = head("post_a", &mut store);
        let params = ModelParams {
            emb,
            encoder,
            decoder,
            domain,
            action,
            comp_w: store.normal("comp.w", 2 * d, d, std, &mut rng),
            comp_b: store.zeros("comp.b", 1, d),
            head_w1: store.normal("head.w1", 2 * d, d, std, &mut rng),
            head_b1: store.zeros("head.b1", 1, d),
            head_w2: store.normal("head.w2", d, d, std, &mut rng),
            head_b2: store.zeros("head.b2", 1, d),
            head_ln_gamma: store.ones("head.ln_gamma", 1, d),
            head_ln_beta: store.zeros("head.ln_beta", 1, d),
            lm_bias: store.zeros("head.lm_bias", 1, config.vocab_size),
        };
        Ok(Self {
            config,
            vocab,
            store,
            params,
        })
    }

    pub fn d_h(&self) -> usize {
        self.config.d_h
    }

    /// Lays out an intent and token ids, rejecting utterances that would not fit.
    pub fn sequence(&self, intent: &IntentLabel, utterance: &[TokenId]) -> Result<EncodedSequence> {
        if utterance.len() > self.config.max_len {
            return Err(Error::Config(format!(
                "utterance of {} tokens exceeds max_len {}",
                utterance.len(),
                self.config.max_len
            )));
        }
        let d = self.vocab.label_id(intent.domain())?;
        let a = self.vocab.label_id(intent.action())?;
        Ok(encode_ids(d, a, utterance, self.config.max_len))
    }

    /// Runs every encoder layer; `e_d`/`e_a` are the last-layer rows at the
    /// domain and action positions.
    pub fn encode(&self, g: &mut Graph, batch: &Batch) -> EncoderOutput {
        let mut x = self.params.emb.forward(g, &batch.tokens, &batch.positions, &batch.segments, None);
        let mut layers = Vec::with_capacity(self.params.encoder.len());
        for lp in &self.params.encoder {
            let t = transformer_layer(g, x, lp, &batch.enc_masks, self.config.heads);
            x = t.output;
            layers.push(t);
        }
        EncoderOutput {
            e_d: g.select_rows(x, &batch.item_rows(RoleLayout::DOMAIN)),
            e_a: g.select_rows(x, &batch.item_rows(RoleLayout::ACTION)),
            hidden: x,
            layers,
        }
    }

    pub fn project_gaussian_graph(&self, g: &mut Graph, e: Var, which: LatentKind) -> GaussianVars {
        let h = match which {
            LatentKind::Domain => &self.params.domain,
            LatentKind::Action => &self.params.action,
        };
        let (w, b) = (g.param(h.w_mu), g.param(h.b_mu));
        let mu = g.linear(e, w, b);
        let (w, b) = (g.param(h.w_sigma), g.param(h.b_sigma));
        let raw = g.linear(e, w, b);
        GaussianVars {
            mu,
            log_var: g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX),
        }
    }

    pub fn reparameterize_graph(g: &mut Graph, p: GaussianVars, eps: Array2<f64>) -> Var {
        let half = g.scale(p.log_var, 0.5);
        let sigma = g.exp(half);
        let eps = g.constant(eps);
        let noise = g.mul(sigma, eps);
        g.add(p.mu, noise)
    }

    /// `Gelu([z_d ; z_a] W_c + b_c)`
    pub fn compose_graph(&self, g: &mut Graph, z_d: Var, z_a: Var) -> Var {
        let z = g.concat_cols(z_d, z_a);
        let (w, b) = (g.param(self.params.comp_w), g.param(self.params.comp_b));
        let lin = g.linear(z, w, b);
        g.gelu(lin)
    }

    /// Teacher-forced decoder pass; `z_comp` holds one row per batch item.
    pub fn decode(&self, g: &mut Graph, z_comp: Var, batch: &Batch, which: LogitRows) -> DecoderOutput {
        let starts = batch.item_rows(0);
        let mut x = self.params.emb.forward(
            g,
            &batch.tokens,
            &batch.positions,
            &batch.segments,
            Some((z_comp, &starts)),
        );
        let mut layers = Vec::with_capacity(self.params.decoder.len());
        for lp in &self.params.decoder {
            let t = transformer_layer(g, x, lp, &batch.dec_masks, self.config.heads);
            x = t.output;
            layers.push(t);
        }

        let (mut rows, mut targets, mut groups) = (Vec::new(), Vec::new(), Vec::new());
        for (b, &real) in batch.real_lens.iter().enumerate() {
            match which {
                LogitRows::Predicting => {
                    for p in RoleLayout::FIRST_SEP..real - 1 {
                        rows.push(batch.row(b, p));
                        targets.push(batch.tokens[batch.row(b, p + 1)]);
                        groups.push(b);
                    }
                }
                LogitRows::Last => rows.push(batch.row(b, real - 1)),
                LogitRows::All => rows.extend((0..batch.len).map(|p| batch.row(b, p))),
            }
        }
        let z_rows: Vec<usize> = rows.iter().map(|r| r - r % batch.len).collect();
        let t = g.select_rows(x, &rows);
        let z = g.select_rows(x, &z_rows);
        let logits = self.output_head(g, t, z);
        DecoderOutput {
            logits,
            rows,
            targets,
            groups,
            layers,
        }
    }

    /// FC+Gelu, FC+Gelu, layer norm, then the tied vocabulary projection.
    fn output_head(&self, g: &mut Graph, t: Var, z: Var) -> Var {
        let p = &self.params;
        let c = g.concat_cols(t, z);
        let (w1, b1) = (g.param(p.head_w1), g.param(p.head_b1));
        let h = g.linear(c, w1, b1);
        let h = g.gelu(h);
        let (w2, b2) = (g.param(p.head_w2), g.param(p.head_b2));
        let h = g.linear(h, w2, b2);
        let h = g.gelu(h);
        let (gamma, beta) = (g.param(p.head_ln_gamma), g.param(p.head_ln_beta));
        let h = g.layer_norm(h, gamma, beta);
        let table = g.param(p.emb.token);
        let logits = g.matmul_bt(h, table);
        let bias = g.param(p.lm_bias);
        g.add_row(logits, bias)
    }

    /// Encoder → posteriors → samples → composition → teacher-forced
    /// reconstruction. `eps_d`/`eps_a` are `B × d_h`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, eps_d: Array2<f64>, eps_a: Array2<f64>) -> Forward {
        let encoder = self.encode(g, batch);
        let post_d = self.project_gaussian_graph(g, encoder.e_d, LatentKind::Domain);
        let post_a = self.project_gaussian_graph(g, encoder.e_a, LatentKind::Action);
        let z_d = Self::reparameterize_graph(g, post_d, eps_d);
        let z_a = Self::reparameterize_graph(g, post_a, eps_a);
        let z_comp = self.compose_graph(g, z_d, z_a);
        let decoder = self.decode(g, z_comp, batch, LogitRows::Predicting);
        let nll = g.nll(decoder.logits, &decoder.targets, &decoder.groups, batch.size());
        Forward {
            post_d,
            post_a,
            z_comp,
            nll,
            encoder,
            decoder,
        }
    }

    pub fn posterior(&self, seq: &EncodedSequence) -> Result<(GaussianParams, GaussianParams)> {
        let batch = Batch::new(std::slice::from_ref(seq))?;
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, &batch);
        let row = |g: &Graph, v: Var| g.value(v).row(0).to_owned();
        let pd = self.project_gaussian_graph(&mut g, enc.e_d, LatentKind::Domain);
        let pa = self.project_gaussian_graph(&mut g, enc.e_a, LatentKind::Action);
        let out = (
            GaussianParams {
                mu: row(&g, pd.mu),
                log_var: row(&g, pd.log_var),
            },
            GaussianParams {
                mu: row(&g, pa.mu),
                log_var: row(&g, pa.log_var),
            },
        );
        check_finite(&out.0.mu, "posterior")?;
        check_finite(&out.1.mu, "posterior")?;
        Ok(out)
    }

    pub fn project_gaussian(&self, e: &Array1<f64>, which: LatentKind) -> GaussianParams {
        let mut g = Graph::new(&self.store);
        let ev = g.constant(e.clone().insert_axis(Axis(0)));
        let p = self.project_gaussian_graph(&mut g, ev, which);
        GaussianParams {
            mu: g.value(p.mu).row(0).to_owned(),
            log_var: g.value(p.log_var).row(0).to_owned(),
        }
    }

    pub fn compose(&self, z: &LatentPair) -> Array1<f64> {
        let mut g = Graph::new(&self.store);
        let zd = g.constant(z.z_d.clone().insert_axis(Axis(0)));
        let za = g.constant(z.z_a.clone().insert_axis(Axis(0)));
        let c = self.compose_graph(&mut g, zd, za);
        g.value(c).row(0).to_owned()
    }

    /// `N × |V|` logits for every position of `seq`.
    pub fn decode_logits(&self, z_comp: &Array1<f64>, seq: &EncodedSequence) -> Result<Array2<f64>> {
        let batch = Batch::new(std::slice::from_ref(seq))?;
        let mut g = Graph::new(&self.store);
        let z = g.constant(z_comp.clone().insert_axis(Axis(0)));
        let out = self.decode(&mut g, z, &batch, LogitRows::All);
        let logits = g.value(out.logits).clone();
        check_finite(&logits, "decoder logits")?;
        Ok(logits)
    }

    /// `log p(w_1 … w_n [SEP] | y, z)` by the chain rule.
    pub fn log_likelihood(&self, intent: &IntentLabel, utterance: &[TokenId], z: &LatentPair) -> Result<f64> {
        let seq = self.sequence(intent, utterance)?;
        let logits = self.decode_logits(&self.compose(z), &seq)?;
        Ok(seq
            .layout
            .predicting_positions()
            .map(|p| log_softmax(logits.row(p).as_slice().unwrap())[seq.token_ids[p + 1]])
            .sum())
    }

    /// Next-token log-probabilities after each prefix (one row per prefix).
    /// All prefixes share the intent, the latent and their length.
    pub fn next_token_log_probs(
        &self,
        z_comp: &Array1<f64>,
        domain: TokenId,
        action: TokenId,
        prefixes: &[Vec<TokenId>],
    ) -> Result<Array2<f64>> {
        let batch = Batch::prefixes(domain, action, prefixes);
        let mut g = Graph::new(&self.store);
        let z = z_comp.view().insert_axis(Axis(0));
        let zs = g.constant(z.broadcast((prefixes.len(), z.len())).unwrap().to_owned());
        let out = self.decode(&mut g, zs, &batch, LogitRows::Last);
        let mut lp = g.value(out.logits).clone();
        check_finite(&lp, "decoder logits")?;
        for mut row in lp.rows_mut() {
            let l = log_softmax(row.as_slice().unwrap());
            row.assign(&Array1::from(l));
        }
        Ok(lp)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("tensors"))?;
        let mut tensors = Vec::with_capacity(self.store.len());
        for id in self.store.ids() {
            let name = self.store.name(id).to_string();
            let v = self.store.value(id);
            let file = format!("tensors/{name}.bin");
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            tensors.push(TensorEntry {
                name,
                shape: [v.nrows(), v.ncols()],
                dtype: "f64le".into(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join("vocab.json"), serde_json::to_string(&self.vocab)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported format version {}", manifest.format_version)));
        }
        let vocab: Vocabulary = serde_json::from_str(&fs::read_to_string(dir.join("vocab.json"))?)?;
        let mut model = Self::new(manifest.config, vocab)?;
        if manifest.tensors.len() != model.store.len() {
            return Err(fail(format!(
                "catalog lists {} tensors, config implies {}",
                manifest.tensors.len(),
                model.store.len()
            )));
        }
        for t in &manifest.tensors {
            let id = model.store.find(&t.name).ok_or_else(|| fail(format!("unexpected tensor {}", t.name)))?;
            let expected = model.store.value(id).dim();
            if (t.shape[0], t.shape[1]) != expected || t.dtype != "f64le" {
                return Err(fail(format!(
                    "tensor {} is {:?} {} but the config needs {:?} f64le",
                    t.name, t.shape, t.dtype, expected
                )));
            }
            let bytes = fs::read(dir.join(&t.file))?;
            if bytes.len() != expected.0 * expected.1 * 8 {
                return Err(fail(format!("tensor file {} has {} bytes", t.file, bytes.len())));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            *model.store.value_mut(id) = Array2::from_shape_vec(expected, data).expect("length checked");
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    file: String,
}

fn check_finite<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, context: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autograd::gelu;
    use crate::corpus::{build_vocabulary, LabeledExample, ShotClass};
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn toy_vocab() -> Vocabulary {
        let intent = IntentLabel::new("alarm", "set").unwrap();
        let other = IntentLabel::new("weather", "query").unwrap();
        let ex = [
            LabeledExample::new("wake me up at seven", intent, ShotClass::ManyShot).unwrap(),
            LabeledExample::new("is it going to rain today", other, ShotClass::ManyShot).unwrap(),
        ];
        build_vocabulary(&ex, 1).unwrap()
    }

    pub(crate) fn toy_model(std: f64, seed: u64) -> ClangModel {
        let vocab = toy_vocab();
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.init_std = std;
        cfg.seed = seed;
        ClangModel::new(cfg, vocab).unwrap()
    }

    fn ids(m: &ClangModel, words: &str) -> Vec<TokenId> {
        words.split_whitespace().map(|w| m.vocab.get(w).unwrap()).collect()
    }

    fn alarm_set() -> IntentLabel {
        IntentLabel::new("alarm", "set").unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
        Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
    }

    #[test]
    fn reparameterize_hand_example() {
        let g = GaussianParams {
            mu: ndarray::array![1.0, -1.0],
            log_var: ndarray::array![4f64.ln(), 0.0],
        };
        let z = reparameterize(&g, &ndarray::array![0.5, 2.0]);
        assert!((z[0] - 2.0).abs() < 1e-12 && (z[1] - 1.0).abs() < 1e-12);
        assert_eq!(reparameterize(&g, &Array1::zeros(2)), g.mu);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = toy_model(0.3, 1);
        let seqs = vec![
            m.sequence(&alarm_set(), &ids(&m, "wake me up")).unwrap(),
            m.sequence(&IntentLabel::new("weather", "query").unwrap(), &ids(&m, "rain")).unwrap(),
        ];
        let batch = Batch::new(&seqs).unwrap();
        assert_eq!(batch.seq_len(), 8);
        let run = || {
            let mut g = Graph::new(&m.store);
            let e = m.encode(&mut g, &batch);
            (g.value(e.e_d).clone(), g.value(e.e_a).clone())
        };
        let (ed, ea) = run();
        assert_eq!(ed.dim(), (2, 8));
        assert_eq!(ea.dim(), (2, 8));
        assert_eq!(run(), (ed, ea));
    }

    #[test]
    fn padding_does_not_change_encoding() {
        let m = toy_model(0.3, 2);
        let short = m.sequence(&alarm_set(), &ids(&m, "seven")).unwrap();
        let long = m.sequence(&alarm_set(), &ids(&m, "wake me up at seven")).unwrap();
        let e = |seqs: &[EncodedSequence]| {
            let b = Batch::new(seqs).unwrap();
            let mut g = Graph::new(&m.store);
            let out = m.encode(&mut g, &b);
            g.value(out.e_d).row(0).to_owned()
        };
        let alone = e(std::slice::from_ref(&short));
        let padded = e(&[short, long]);
        assert!((alone - padded).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn domain_readout_ignores_action_token_at_one_layer() {
        let mut m = toy_model(0.3, 3);
        let seq = m.sequence(&alarm_set(), &ids(&m, "wake me up")).unwrap();
        let action = m.vocab.label_id("set").unwrap();
        let e_d = |m: &ClangModel| {
            let b = Batch::new(std::slice::from_ref(&seq)).unwrap();
            let mut g = Graph::new(&m.store);
            let out = m.encode(&mut g, &b);
            (g.value(out.e_d).clone(), g.value(out.e_a).clone())
        };
        let (base_d, base_a) = e_d(&m);
        let table = m.params.emb.token;
        for c in 0..m.d_h() {
            m.store.value_mut(table)[[action, c]] += 1e-3;
            let (d, a) = e_d(&m);
            m.store.value_mut(table)[[action, c]] -= 1e-3;
            assert!(d.iter().zip(base_d.iter()).all(|(x, y)| x == y), "column {c}");
            assert!(a.iter().zip(base_a.iter()).any(|(x, y)| x != y));
        }
    }

    #[test]
    fn gaussian_projection() {
        let mut m = toy_model(0.3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = randn(&mut rng, 8);
        let head = m.params.domain.clone();
        for id in [head.b_mu, head.b_sigma] {
            *m.store.value_mut(id) = randn(&mut rng, 8).insert_axis(Axis(0)) * 0.1;
        }
        let p = m.project_gaussian(&e, LatentKind::Domain);
        let (w, b) = (m.store.value(head.w_mu), m.store.value(head.b_mu));
        for j in 0..8 {
            let oracle: f64 = b[[0, j]] + (0..8).map(|i| e[i] * w[[i, j]]).sum::<f64>();
            assert!((p.mu[j] - oracle).abs() < 1e-9);
        }
        let (w, b) = (m.store.value(head.w_sigma), m.store.value(head.b_sigma));
        for j in 0..8 {
            let oracle: f64 = b[[0, j]] + (0..8).map(|i| e[i] * w[[i, j]]).sum::<f64>();
            assert!((p.log_var[j] - oracle.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).abs() < 1e-9);
        }
        let at_zero = m.project_gaussian(&Array1::zeros(8), LatentKind::Domain);
        assert_eq!(at_zero.mu, m.store.value(head.b_mu).row(0));
        assert_eq!(at_zero.log_var, m.store.value(head.b_sigma).row(0));

        m.store.map_inplace(|x| *x = 0.0);
        let std = m.project_gaussian(&e, LatentKind::Action);
        assert_eq!(std, GaussianParams::standard(8));
    }

    #[test]
    fn log_var_is_clamped() {
        let mut m = toy_model(0.3, 6);
        let b = m.params.action.b_sigma;
        m.store.value_mut(b).fill(50.0);
        let p = m.project_gaussian(&Array1::zeros(8), LatentKind::Action);
        assert!(p.log_var.iter().all(|&l| l == LOG_VAR_MAX));
    }

    #[test]
    fn composition() {
        let mut m = toy_model(0.3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        *m.store.value_mut(m.params.comp_b) = randn(&mut rng, 8).insert_axis(Axis(0));
        let z = LatentPair {
            z_d: randn(&mut rng, 8),
            z_a: randn(&mut rng, 8),
        };
        let out = m.compose(&z);
        let (w, b) = (m.store.value(m.params.comp_w), m.store.value(m.params.comp_b));
        let cat: Vec<f64> = z.z_d.iter().chain(z.z_a.iter()).copied().collect();
        for j in 0..8 {
            let oracle = gelu(b[[0, j]] + (0..16).map(|i| cat[i] * w[[i, j]]).sum::<f64>());
            assert!((out[j] - oracle).abs() < 1e-9);
        }
        let zero = LatentPair {
            z_d: Array1::zeros(8),
            z_a: Array1::zeros(8),
        };
        assert_eq!(m.compose(&zero), b.row(0).mapv(gelu));

        m.store.value_mut(m.params.comp_w).fill(0.0);
        assert_eq!(m.compose(&z), m.compose(&zero));
    }

    #[test]
    fn decode_shape_and_causality() {
        let m = toy_model(0.3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = randn(&mut rng, 8);
        let a = m.sequence(&alarm_set(), &ids(&m, "wake me up at seven")).unwrap();
        let b = m.sequence(&alarm_set(), &ids(&m, "wake me rain at seven")).unwrap();
        let la = m.decode_logits(&z, &a).unwrap();
        let lb = m.decode_logits(&z, &b).unwrap();
        assert_eq!(la.dim(), (a.len(), m.vocab.len()));
        // w_3 sits at position 6; rows before its predecessor (5) are untouched
        for p in 0..5 {
            assert!(la.row(p).iter().zip(lb.row(p).iter()).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
        assert!(la.row(6).iter().zip(lb.row(6).iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn latent_reaches_every_position() {
        let m = toy_model(0.3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = randn(&mut rng, 8);
        let seq = m.sequence(&alarm_set(), &ids(&m, "wake me up at seven")).unwrap();
        let base = m.decode_logits(&z, &seq).unwrap();
        let h = 1e-5;
        let mut moved = vec![false; seq.len()];
        for c in 0..8 {
            let mut zp = z.clone();
            zp[c] += h;
            let lp = m.decode_logits(&zp, &seq).unwrap();
            for p in seq.layout.predicting_positions() {
                let grad = (lp.row(p).to_owned() - base.row(p)) / h;
                moved[p] |= grad.iter().any(|g| g.abs() > 1e-8);
            }
        }
        assert!(seq.layout.predicting_positions().all(|p| moved[p]));
    }

    #[test]
    fn intent_rows_do_not_see_latent() {
        let m = toy_model(0.3, 13);
        let seq = m.sequence(&alarm_set(), &ids(&m, "wake me")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (z0, z1) = (randn(&mut rng, 8), randn(&mut rng, 8));
        let a = m.decode_logits(&z0, &seq).unwrap();
        let b = m.decode_logits(&z1, &seq).unwrap();
        for p in 1..4 {
            let (ra, rb) = (a.row(p), b.row(p));
            // these rows only differ through the head's direct latent input
            assert!(ra.iter().zip(rb.iter()).any(|(x, y)| x != y));
        }
        let batch = Batch::new(std::slice::from_ref(&seq)).unwrap();
        let hidden = |z: &Array1<f64>| {
            let mut g = Graph::new(&m.store);
            let zc = g.constant(z.clone().insert_axis(Axis(0)));
            let out = m.decode(&mut g, zc, &batch, LogitRows::All);
            let last = out.layers.last().unwrap().output;
            g.value(last).clone()
        };
        let (h0, h1) = (hidden(&z0), hidden(&z1));
        for p in 1..4 {
            assert_eq!(h0.row(p), h1.row(p));
        }
    }

    #[test]
    fn uniform_model_likelihood() {
        // |V| = 8: four specials, two labels, two words
        let ex = [LabeledExample::new("hi there", alarm_set(), ShotClass::ManyShot).unwrap()];
        let vocab = build_vocabulary(&ex, 1).unwrap();
        assert_eq!(vocab.len(), 8);
        let mut m = ClangModel::new(ModelConfig::tiny(8), vocab).unwrap();
        m.store.map_inplace(|x| *x = 0.0);
        let z = LatentPair {
            z_d: Array1::zeros(8),
            z_a: Array1::zeros(8),
        };
        let u = ids(&m, "hi there");
        let ll = m.log_likelihood(&alarm_set(), &u, &z).unwrap();
        assert!((ll + 3.0 * 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn likelihood_counts_steps_and_normalises() {
        let m = toy_model(0.3, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let z = LatentPair {
            z_d: randn(&mut rng, 8),
            z_a: randn(&mut rng, 8),
        };
        let u = ids(&m, "seven");
        let seq = m.sequence(&alarm_set(), &u).unwrap();
        assert_eq!(seq.layout.predicting_positions().len(), 2);
        let logits = m.decode_logits(&m.compose(&z), &seq).unwrap();
        let manual: f64 = [(3, u[0]), (4, SEP_ID)]
            .iter()
            .map(|&(p, t)| log_softmax(logits.row(p).as_slice().unwrap())[t])
            .sum();
        let ll = m.log_likelihood(&alarm_set(), &u, &z).unwrap();
        assert!((ll - manual).abs() < 1e-12 && ll <= 0.0);
        for row in logits.rows() {
            let total: f64 = log_softmax(row.as_slice().unwrap()).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prefix_scores_match_teacher_forcing() {
        let m = toy_model(0.3, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let zc = randn(&mut rng, 8);
        let u = ids(&m, "wake me up");
        let seq = m.sequence(&alarm_set(), &u).unwrap();
        let full = m.decode_logits(&zc, &seq).unwrap();
        let (d, a) = (seq.token_ids[1], seq.token_ids[2]);
        for t in 0..=u.len() {
            let lp = m.next_token_log_probs(&zc, d, a, &[u[..t].to_vec(), u[..t].to_vec()]).unwrap();
            let reference = log_softmax(full.row(3 + t).as_slice().unwrap());
            for r in 0..2 {
                for (x, y) in lp.row(r).iter().zip(reference.iter()) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy_model(0.3, 18);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ClangModel::load(dir.path()).unwrap();
        assert_eq!(back, m);

        let manifest = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&manifest).unwrap().replacen("\"d_h\": 8", "\"d_h\": 16", 1);
        let text = text.replacen("\"d_k\": 4", "\"d_k\": 8", 1);
        std::fs::write(&manifest, text).unwrap();
        assert!(matches!(ClangModel::load(dir.path()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(20);
        c.d_k = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(20);
        c.decoder_layers = 0;
        assert!(c.validate().is_err());
        assert!(ClangModel::new(ModelConfig::tiny(20), toy_vocab()).is_err());
    }
}
