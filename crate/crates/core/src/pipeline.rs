//! Training and prediction for the BiLSTM-CRF tagger.
//!
//! The training objective per batch `B` drawn from `M` sentences is
//! `(1/|B|) Σ_{i∈B} −log p(yᵢ|xᵢ) + ‖θ‖² / (2σ²M)`, so that one pass over the
//! data follows the corpus-level penalized log-likelihood scaled by `1/M`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, Document};
use crate::crf::{crf_gradients, viterbi, CrfInstance, CrfParams, TransitionMask};
use crate::embeddings::{
    embed_backward, embed_cached, CharEncoder, ContextualStore, EmbeddingParams, SyllableTable,
};
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, MacroMode, SpanScore};
use crate::neural::{bilstm_backward_into, bilstm_forward, BiLstmParams};
use crate::tagging::{
    decode_iob, encode_iob, project_corpus, tokenize_document, ProjectedDocument, Scheme, TagSet,
    TokenSequence,
};
use crate::tensor::Tensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// What `batch_size` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchUnit {
    #[default]
    Tokens,
    Sentences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Per direction.
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub batch_unit: BatchUnit,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// `None` or infinite disables the penalty.
    pub l2_sigma: Option<f64>,
    pub optimizer: Optimizer,
    pub syllable_dim: usize,
    /// Syllables seen fewer times in training map to UNK.
    pub min_count: usize,
    pub use_chars: bool,
    pub char_embed_dim: usize,
    /// Per direction; the character part of each token vector is twice this.
    pub char_hidden: usize,
    pub constrain_transitions: bool,
    /// Stop after this many epochs without a dev improvement.
    pub patience: Option<usize>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Aspect,
            hidden: 400,
            layers: 1,
            dropout: 0.33,
            batch_size: 5000,
            batch_unit: BatchUnit::Tokens,
            epochs: 30,
            seed: 0,
            learning_rate: 1e-3,
            l2_sigma: None,
            optimizer: Optimizer::Adam,
            syllable_dim: 100,
            min_count: 1,
            use_chars: true,
            char_embed_dim: 25,
            char_hidden: 25,
            constrain_transitions: false,
            patience: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.l2_sigma.is_some_and(f64::is_infinite) {
            cfg.l2_sigma = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sigma(&self) -> f64 {
        self.l2_sigma.unwrap_or(f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("syllable_dim", self.syllable_dim),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.use_chars && (self.char_embed_dim == 0 || self.char_hidden == 0) {
            return Err(Error::Config("character dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if let Some(s) = self.l2_sigma {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::Config(format!("l2_sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Everything that is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embeddings: EmbeddingParams,
    pub encoder: BiLstmParams,
    pub crf: CrfParams,
}

impl Tensors for ModelParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.embeddings.tensors();
        out.extend(self.encoder.tensors());
        out.extend(self.crf.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.embeddings.tensors_mut();
        out.extend(self.encoder.tensors_mut());
        out.extend(self.crf.tensors_mut());
        out
    }
}

pub const FORMAT: &str = "spantag-model";
pub const VERSION: u32 = 1;

/// A trained tagger and the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    /// Width of the contextual vectors the model expects; 0 for none.
    pub context_dim: usize,
    pub params: ModelParams,
}

impl Model {
    pub fn scheme(&self) -> Scheme {
        self.config.scheme
    }

    pub fn tag_set(&self) -> TagSet {
        TagSet::new(self.config.scheme)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a model file (format {:?})", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model version {} (expected {VERSION})",
                self.version
            )));
        }
        let p = &self.params;
        p.embeddings.validate()?;
        p.encoder.validate()?;
        p.crf.validate()?;
        let input = p.embeddings.trainable_dim() + self.context_dim;
        if p.encoder.input() != input {
            return Err(Error::Checkpoint(format!(
                "encoder expects {} inputs, embeddings provide {input}",
                p.encoder.input()
            )));
        }
        let k = self.config.scheme.tag_count();
        if p.encoder.tags() != k || p.crf.num_tags() != k {
            return Err(Error::Checkpoint(format!(
                "scheme {} has {k} tags, model has {} emissions and {} CRF tags",
                self.config.scheme,
                p.encoder.tags(),
                p.crf.num_tags()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Model = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = corpus::open(path)?;
        let m: Model = serde_json::from_reader(reader)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    fn check_context(&self, ctx: Option<&ContextualStore>) -> Result<()> {
        let have = ctx.map_or(0, ContextualStore::dim);
        if have != self.context_dim {
            return Err(Error::Mismatch(format!(
                "model expects contextual vectors of width {}, got {have}",
                self.context_dim
            )));
        }
        Ok(())
    }

    /// `−log p(gold | doc)` and its gradient for one document, without
    /// dropout or penalty. Documents without tokens contribute nothing.
    pub fn loss_and_gradients(&self, doc: &Document, ctx: Option<&ContextualStore>) -> Result<(f64, ModelParams)> {
        self.check_context(ctx)?;
        let mut grads = self.params.zeroed();
        let loss = match prepare(doc, &self.tag_set())? {
            Some(s) => sentence_pass(&self.params, ctx, &s, 0.0, 0, &mut grads)?,
            None => 0.0,
        };
        Ok((loss, grads))
    }

    /// `Σ log p(gold | doc) − ‖θ‖²/(2σ²)` over `docs`.
    pub fn log_likelihood(&self, docs: &[Document], ctx: Option<&ContextualStore>, l2_sigma: f64) -> Result<f64> {
        let mut total = 0.0;
        for d in docs {
            total -= self.loss_and_gradients(d, ctx)?.0;
        }
        Ok(total - crate::crf::l2_penalty(self.params.sq_norm(), l2_sigma))
    }

    pub fn predict_document(&self, doc: &Document, ctx: Option<&ContextualStore>) -> Result<ProjectedDocument> {
        let tokens = tokenize_document(doc);
        let spans = if tokens.is_empty() {
            Vec::new()
        } else {
            let tags = decode_tags(&self.params, ctx, &tokens)?;
            decode_iob(&self.tag_set().from_indices(&tags), &tokens)?
        };
        Ok(ProjectedDocument {
            id: doc.id.clone(),
            text: doc.text.clone(),
            spans,
        })
    }
}

fn decode_tags(params: &ModelParams, ctx: Option<&ContextualStore>, tokens: &TokenSequence) -> Result<Vec<usize>> {
    let (emb, _) = embed_cached(tokens, &params.embeddings.syllables, params.embeddings.chars.as_ref(), ctx)?;
    let out = bilstm_forward(&params.encoder, &emb.vectors)?;
    Ok(viterbi(&params.crf, &out.emissions)?.0)
}

/// Tags every document; gold spans in `corpus` are ignored.
pub fn predict(model: &Model, corpus: &Corpus, ctx: Option<&ContextualStore>) -> Result<Vec<ProjectedDocument>> {
    model.check_context(ctx)?;
    corpus
        .documents
        .par_iter()
        .map(|d| model.predict_document(d, ctx))
        .collect()
}

struct Prepared {
    tokens: TokenSequence,
    gold: Vec<usize>,
}

fn prepare(doc: &Document, tags: &TagSet) -> Result<Option<Prepared>> {
    let tokens = tokenize_document(doc);
    if tokens.is_empty() {
        return Ok(None);
    }
    let gold = tags.to_indices(&encode_iob(doc, &tokens, tags.scheme())?)?;
    Ok(Some(Prepared { tokens, gold }))
}

/// SplitMix64 finalizer, used to derive independent per-sentence streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ a) ^ b))
}

/// Forward and backward for one sentence; adds `∂(−log p)/∂θ` into `grads`
/// and returns `−log p`. With `dropout > 0` an inverted-dropout mask drawn
/// from `mask_seed` is applied to the fused token vectors.
fn sentence_pass(
    params: &ModelParams,
    ctx: Option<&ContextualStore>,
    s: &Prepared,
    dropout: f64,
    mask_seed: u64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let emb = &params.embeddings;
    let (embedded, cache) = embed_cached(&s.tokens, &emb.syllables, emb.chars.as_ref(), ctx)?;
    let mut xs = embedded.vectors;
    let masks: Option<Vec<Vec<f64>>> = (dropout > 0.0).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let keep = 1.0 / (1.0 - dropout);
        xs.iter()
            .map(|x| {
                x.iter()
                    .map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep })
                    .collect()
            })
            .collect()
    });
    if let Some(m) = &masks {
        for (x, mk) in xs.iter_mut().zip(m) {
            x.iter_mut().zip(mk).for_each(|(v, k)| *v *= k);
        }
    }
    let out = bilstm_forward(&params.encoder, &xs)?;
    let inst = CrfInstance {
        emissions: out.emissions,
        gold: Some(s.gold.clone()),
    };
    let g = crf_gradients(&params.crf, &inst, f64::INFINITY)?;
    grads.crf.add_scaled(-1.0, &g.params);
    let d_em: Vec<Vec<f64>> = g.emissions.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let mut dx = bilstm_backward_into(&params.encoder, &out.cache, &d_em, &mut grads.encoder)?;
    if let Some(m) = &masks {
        for (d, mk) in dx.iter_mut().zip(m) {
            d.iter_mut().zip(mk).for_each(|(v, k)| *v *= k);
        }
    }
    embed_backward(emb, &cache, &dx, &mut grads.embeddings)?;
    Ok(-g.log_likelihood)
}

/// Summed gradients of a chunk and the per-sentence losses.
type ChunkResult = (ModelParams, Vec<(usize, f64)>);

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeroed(),
            v: params.zeroed(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean `−log p` per training sentence, dropout included.
    pub train_loss: f64,
    pub dev: SpanScore,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub wall_time: f64,
}

impl TrainReport {
    pub const TSV_HEADER: &'static str =
        "epoch\ttrain_loss\tdev_micro_p\tdev_micro_r\tdev_micro_f1\tdev_macro_p\tdev_macro_r\tdev_macro_f1\tseconds";

    pub fn tsv_row(r: &EpochRecord) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
            r.epoch,
            r.train_loss,
            r.dev.micro.precision,
            r.dev.micro.recall,
            r.dev.micro.f1,
            r.dev.macro_.precision,
            r.dev.macro_.recall,
            r.dev.macro_.f1,
            r.seconds
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::TSV_HEADER);
        for r in &self.epochs {
            let _ = writeln!(out, "{}", Self::tsv_row(r));
        }
        out
    }
}

/// Optional inputs beyond the corpora.
#[derive(Debug, Clone, Default)]
pub struct Resources<'a> {
    /// Pretrained syllable vectors; their dimension overrides the config's.
    pub pretrained: Option<SyllableTable>,
    /// Contextual vectors for every train and dev document.
    pub context: Option<&'a ContextualStore>,
}

fn build_model(train: &Corpus, cfg: &TrainConfig, res: &Resources<'_>) -> Model {
    let mut cfg = cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    let mut chars: Vec<char> = Vec::new();
    let mut seen_chars = std::collections::HashSet::new();
    for d in &train.documents {
        for tok in d.text.split_whitespace() {
            let c = counts.entry(tok).or_insert(0);
            if *c == 0 {
                order.push(tok);
            }
            *c += 1;
            for ch in tok.chars() {
                if seen_chars.insert(ch) {
                    chars.push(ch);
                }
            }
        }
    }
    let words = order
        .into_iter()
        .filter(|w| counts[w] >= cfg.min_count)
        .map(str::to_string);
    let syllables = match &res.pretrained {
        Some(table) => {
            if table.dim() != cfg.syllable_dim {
                info!(
                    "using pretrained syllable dimension {} instead of {}",
                    table.dim(),
                    cfg.syllable_dim
                );
                cfg.syllable_dim = table.dim();
            }
            let mut t = table.clone();
            t.extend(words, &mut rng);
            t
        }
        None => SyllableTable::random(words, cfg.syllable_dim, &mut rng),
    };
    let chars = cfg
        .use_chars
        .then(|| CharEncoder::init(chars, cfg.char_embed_dim, cfg.char_hidden, &mut rng));
    let embeddings = EmbeddingParams { syllables, chars };
    let context_dim = res.context.map_or(0, ContextualStore::dim);
    let tags = TagSet::new(cfg.scheme);
    let encoder = BiLstmParams::init(
        embeddings.trainable_dim() + context_dim,
        cfg.hidden,
        cfg.layers,
        tags.len(),
        &mut rng,
    );
    let mut crf = CrfParams::init(tags.len(), &mut rng);
    if cfg.constrain_transitions {
        crf = crf.with_mask(TransitionMask::iob(&tags));
    }
    Model {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg,
        context_dim,
        params: ModelParams {
            embeddings,
            encoder,
            crf,
        },
    }
}

fn batches(order: &[usize], sizes: &[usize], cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0;
    for &i in order {
        let cost = match cfg.batch_unit {
            BatchUnit::Tokens => sizes[i],
            BatchUnit::Sentences => 1,
        };
        if !cur.is_empty() && used + cost > cfg.batch_size {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += cost;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Trains on `train`, evaluating micro span-F1 on `dev` after every epoch and
/// returning the parameters of the best epoch (earliest on ties).
pub fn train(train: &Corpus, dev: &Corpus, cfg: &TrainConfig, res: &Resources<'_>) -> Result<(Model, TrainReport)> {
    train_with_log(train, dev, cfg, res, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with_log(
    train: &Corpus,
    dev: &Corpus,
    cfg: &TrainConfig,
    res: &Resources<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let started = Instant::now();
    let mut model = build_model(train, cfg, res);
    let cfg = model.config.clone();
    let tags = model.tag_set();
    let ctx = res.context;

    let mut prepared = Vec::new();
    for d in &train.documents {
        if let Some(p) = prepare(d, &tags)? {
            prepared.push(p);
        }
    }
    if prepared.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(store) = ctx {
        store.check_coverage(prepared.iter().map(|p| &p.tokens))?;
        let dev_tokens: Vec<TokenSequence> = dev.documents.iter().map(tokenize_document).collect();
        store.check_coverage(dev_tokens.iter().filter(|t| !t.is_empty()))?;
    }
    let dev_gold = project_corpus(dev, cfg.scheme);
    let sizes: Vec<usize> = prepared.iter().map(|p| p.tokens.len()).collect();
    let m = prepared.len() as f64;
    let sigma = cfg.sigma();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut adam = Adam::new(&model.params);
    let mut best = model.params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut records = Vec::new();

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut stream(cfg.seed, epoch as u64, u64::MAX));
        let mut losses = vec![0.0; prepared.len()];
        for batch in batches(&order, &sizes, &cfg) {
            let chunk = batch.len().div_ceil(cfg.threads);
            let params = &model.params;
            let parts: Vec<Result<ChunkResult>> = pool.install(|| {
                batch
                    .par_chunks(chunk)
                    .map(|ids| {
                        let mut g = params.zeroed();
                        let mut ls = Vec::with_capacity(ids.len());
                        for &i in ids {
                            let seed = mix(mix(cfg.seed ^ mix(epoch as u64)) ^ i as u64);
                            let l = sentence_pass(params, ctx, &prepared[i], cfg.dropout, seed, &mut g)?;
                            ls.push((i, l));
                        }
                        Ok((g, ls))
                    })
                    .collect()
            });
            let mut grads: Option<ModelParams> = None;
            for part in parts {
                let (g, ls) = part?;
                for (i, l) in ls {
                    if !l.is_finite() {
                        return Err(Error::Diverged { epoch, loss: l });
                    }
                    losses[i] = l;
                }
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.add_scaled(1.0, &g),
                }
            }
            let mut grads = grads.expect("batches are nonempty");
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            if sigma.is_finite() {
                grads.add_scaled(1.0 / (sigma * sigma * m), &model.params);
            }
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut model.params, &grads, cfg.learning_rate),
                Optimizer::Sgd => model.params.add_scaled(-cfg.learning_rate, &grads),
            }
            if !model.params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::INFINITY,
                });
            }
        }
        let train_loss = losses.iter().sum::<f64>() / m;
        let pred = pool.install(|| predict(&model, dev, ctx))?;
        let dev_score = score_corpus(&dev_gold, &pred, cfg.scheme, MacroMode::Observed)?;
        let f1 = dev_score.micro.f1;
        let record = EpochRecord {
            epoch,
            train_loss,
            dev: dev_score,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        info!("{}", TrainReport::tsv_row(&record));
        on_epoch(&record);
        records.push(record);
        if f1 > best_f1 {
            best_f1 = f1;
            best_epoch = epoch;
            best = model.params.clone();
        }
        if let Some(p) = cfg.patience {
            if epoch - best_epoch >= p {
                info!("no dev improvement for {p} epochs, stopping after epoch {epoch}");
                break;
            }
        }
    }
    if records.is_empty() {
        warn!("zero epochs configured; returning the initial parameters");
    }
    model.params = best;
    let report = TrainReport {
        epochs: records,
        best_epoch,
        best_dev_f1: best_f1.max(0.0),
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Label, SpanAnnotation};

    fn doc(id: &str, text: &str, spans: &[(usize, usize, &str)]) -> Document {
        let spans = spans
            .iter()
            .map(|&(s, e, l)| SpanAnnotation::new(s, e, l.parse::<Label>().unwrap()))
            .collect();
        Document::new(id, text, spans).unwrap()
    }

    fn toy() -> Corpus {
        Corpus::new(
            "toy",
            vec![
                doc("1", "pin tốt lắm", &[(0, 7, "BATTERY#POSITIVE")]),
                doc("2", "giá hơi cao", &[(0, 11, "PRICE#NEGATIVE")]),
                doc("3", "ok", &[]),
            ],
        )
        .unwrap()
    }

    fn small() -> TrainConfig {
        TrainConfig {
            hidden: 4,
            syllable_dim: 5,
            char_embed_dim: 3,
            char_hidden: 2,
            epochs: 3,
            batch_size: 4,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_toml() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.hidden, 400);
        assert_eq!(cfg.batch_size, 5000);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.dropout, 0.33);
        let cfg = TrainConfig::from_toml_str(
            "scheme = \"aspect-polarity\"\noptimizer = \"sgd\"\nl2_sigma = inf\nbatch_unit = \"sentences\"\n",
        )
        .unwrap();
        assert_eq!(cfg.scheme, Scheme::AspectPolarity);
        assert_eq!(cfg.optimizer, Optimizer::Sgd);
        assert_eq!(cfg.l2_sigma, None);
        assert_eq!(cfg.batch_unit, BatchUnit::Sentences);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_toml_str("dropout = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("hidden = 0").is_err());
        assert!(TrainConfig::from_toml_str("hiden = 3").is_err());
    }

    #[test]
    fn token_batches_are_packed_greedily() {
        let cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        let b = batches(&[0, 1, 2, 3], &[3, 2, 4, 9], &cfg);
        assert_eq!(b, vec![vec![0, 1], vec![2], vec![3]]);
        let cfg = TrainConfig {
            batch_size: 3,
            batch_unit: BatchUnit::Sentences,
            ..TrainConfig::default()
        };
        assert_eq!(batches(&[3, 1, 0, 2], &[1; 4], &cfg), vec![vec![3, 1, 0], vec![2]]);
    }

    #[test]
    fn training_is_deterministic() {
        let c = toy();
        let (a, ra) = train(&c, &c, &small(), &Resources::default()).unwrap();
        let (b, rb) = train(&c, &c, &small(), &Resources::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let la: Vec<f64> = ra.epochs.iter().map(|e| e.train_loss).collect();
        let lb: Vec<f64> = rb.epochs.iter().map(|e| e.train_loss).collect();
        assert_eq!(la, lb);
        assert_eq!(ra.epochs.len(), 3);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let c = toy();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            dropout: 0.0,
            ..small()
        };
        let (m, r) = train(&c, &c, &cfg, &Resources::default()).unwrap();
        let init = build_model(&c, &cfg, &Resources::default());
        assert_eq!(m.params, init.params);
        assert!(r.epochs.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
    }

    #[test]
    fn model_json_round_trip_and_checks() {
        let c = toy();
        let (m, _) = train(&c, &c, &small(), &Resources::default()).unwrap();
        let back = Model::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.version = 99;
        assert!(matches!(Model::from_json(&bad.to_json()), Err(Error::Checkpoint(_))));
        let mut bad = m.clone();
        bad.config.scheme = Scheme::Polarity;
        assert!(Model::from_json(&bad.to_json()).is_err());
        assert!(Model::from_json("{}").is_err());
    }

    #[test]
    fn prediction_of_empty_document() {
        let c = toy();
        let (m, _) = train(&c, &c, &small(), &Resources::default()).unwrap();
        let p = m.predict_document(&doc("e", "", &[]), None).unwrap();
        assert!(p.spans.is_empty());
        let p = m.predict_document(&doc("w", "   ", &[]), None).unwrap();
        assert!(p.spans.is_empty());
    }

    #[test]
    fn prediction_is_deterministic_and_needs_matching_context() {
        let c = toy();
        let (m, _) = train(&c, &c, &small(), &Resources::default()).unwrap();
        assert_eq!(predict(&m, &c, None).unwrap(), predict(&m, &c, None).unwrap());
        let store = ContextualStore::new(3);
        assert!(predict(&m, &c, Some(&store)).is_err());
    }

    #[test]
    fn penalty_lowers_log_likelihood() {
        let c = toy();
        let (m, _) = train(&c, &c, &small(), &Resources::default()).unwrap();
        let free = m.log_likelihood(&c.documents, None, f64::INFINITY).unwrap();
        let pen = m.log_likelihood(&c.documents, None, 10.0).unwrap();
        assert!(free <= 0.0);
        assert!(pen < free);
    }

    #[test]
    fn contextual_store_feeds_the_encoder() {
        let c = toy();
        let mut store = ContextualStore::new(2);
        for d in &c.documents {
            let n = tokenize_document(d).len();
            store.insert(d.id.clone(), vec![vec![0.5, -0.5]; n]).unwrap();
        }
        let res = Resources {
            context: Some(&store),
            ..Resources::default()
        };
        let (m, _) = train(&c, &c, &small(), &res).unwrap();
        assert_eq!(m.context_dim, 2);
        assert_eq!(m.params.encoder.input(), 5 + 4 + 2);
        assert!(predict(&m, &c, Some(&store)).is_ok());
        assert!(predict(&m, &c, None).is_err());
        let mut partial = ContextualStore::new(2);
        partial.insert("1", vec![vec![0.0; 2]; 3]).unwrap();
        let res = Resources {
            context: Some(&partial),
            ..Resources::default()
        };
        assert!(train(&c, &c, &small(), &res).is_err());
    }

    #[test]
    fn pretrained_vectors_are_kept() {
        let c = toy();
        let pre = crate::embeddings::read_pretrained("pin 1 2\nxa 3 4\n".as_bytes()).unwrap().table;
        let res = Resources {
            pretrained: Some(pre),
            ..Resources::default()
        };
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small()
        };
        let (m, _) = train(&c, &c, &cfg, &res).unwrap();
        assert_eq!(m.config.syllable_dim, 2);
        assert_eq!(m.params.embeddings.syllables.vector("xa"), &[3.0, 4.0]);
        assert_eq!(m.params.embeddings.syllables.vector("pin"), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_empty_inputs() {
        let empty = Corpus::new("e", vec![]).unwrap();
        assert!(matches!(
            train(&empty, &toy(), &small(), &Resources::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn threads_match_single_thread_closely() {
        let c = toy();
        let (a, _) = train(&c, &c, &small(), &Resources::default()).unwrap();
        let cfg = TrainConfig { threads: 2, ..small() };
        let (b, _) = train(&c, &c, &cfg, &Resources::default()).unwrap();
        let diff = a
            .params
            .tensors()
            .into_iter()
            .flatten()
            .zip(b.params.tensors().into_iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }
}
