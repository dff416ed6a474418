//! Tabular autoregressive models over small vocabularies.
//!
//! Two families are provided. [`KGramSoftmaxModel`] stores one logit row
//! per context of fixed length `order` (left-padded at sequence start) and
//! turns rows into probabilities with a softmax; its rows are the
//! parameters that fine-tuning updates. [`NGramCountModel`] keeps raw
//! counts for every context length up to `order` and answers queries by
//! backing off to the longest context it has seen; it is cheap to fit and
//! serves as the weaker reference model.
//!
//! Both families share the [`LanguageModel`] trait, one JSON file layout
//! versioned by a `format` tag, and the decoding loop in
//! [`generate_trajectory`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{softmax, TokenDistribution, TokenId, TokenSequence, Vocabulary};
use crate::fsutil::atomic_write;
use crate::{Error, Result};

/// Context length used when a caller does not pick one explicitly.
pub const DEFAULT_ORDER: usize = 2;

/// Anything that can score the next token given a prefix.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Distribution over the next token after `prefix`. The prefix may be
    /// empty; ids must be in range for the model vocabulary.
    fn next_distribution(&self, prefix: &TokenSequence) -> Result<TokenDistribution>;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// How the next token is chosen during generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    /// Highest-probability token, lowest id on ties.
    Greedy,
    /// Draw from the distribution tempered by `temperature` (probabilities
    /// raised to `1/temperature` and renormalized).
    Sample { temperature: f64 },
}

/// Decoding loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    /// Seed for the sampling stream. Ignored by greedy decoding.
    pub seed: u64,
    /// Generation stops right after this token is emitted, if set.
    pub eos: Option<TokenId>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            max_new_tokens: 128,
            seed: 0,
            eos: None,
        }
    }
}

/// One generation step: the position of the emitted token inside the
/// completion and the model distribution it was drawn from (untempered).
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub position: usize,
    pub dist: TokenDistribution,
}

/// Runs the decoding loop from `prompt` and records the model distribution
/// at every step. Stops after `max_new_tokens` tokens or right after the
/// configured end token is emitted.
pub fn generate_trajectory(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, Vec<StepRecord>)> {
    if prompt.is_empty() {
        return Err(Error::Empty("decoding prompt"));
    }
    let mut seq = TokenSequence::from_prompt(prompt.to_vec());
    seq.validate_against(model.vocab())?;
    if let DecodeMode::Sample { temperature } = cfg.mode {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sampling temperature {temperature} must be positive and finite"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for position in 0..cfg.max_new_tokens {
        let dist = model.next_distribution(&seq)?;
        let next = match cfg.mode {
            DecodeMode::Greedy => dist.top1(),
            DecodeMode::Sample { temperature } => sample_tempered(&dist, temperature, &mut rng),
        };
        records.push(StepRecord {
            position,
            dist: dist.clone(),
        });
        seq.push(next);
        if cfg.eos == Some(next) {
            break;
        }
    }
    Ok((seq, records))
}

/// Draws one token id from `dist` tempered by `temperature`.
fn sample_tempered(dist: &TokenDistribution, temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let weights: Vec<f64> = dist
        .probs()
        .iter()
        .map(|&p| if p > 0.0 { p.powf(1.0 / temperature) } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            u -= w;
            if u <= 0.0 {
                return i as TokenId;
            }
        }
    }
    // Rounding pushed the accumulator past every entry; take the last one
    // with mass.
    last_positive as TokenId
}

// ---------------------------------------------------------------------------
// Log likelihood
// ---------------------------------------------------------------------------

/// Log likelihood of a completion. Kept as an enum because a model can
/// assign exactly zero probability to an observed token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogLikelihood {
    Finite(f64),
    NegInfinity,
}

/// Sum of `ln p(token | prefix)` over the generated part of `seq`.
pub fn sequence_log_likelihood(
    model: &dyn LanguageModel,
    seq: &TokenSequence,
) -> Result<LogLikelihood> {
    seq.validate_against(model.vocab())?;
    let mut total = 0.0;
    for j in seq.prompt_len()..seq.len() {
        let prefix = TokenSequence::from_prompt(seq.ids()[..j].to_vec());
        let dist = model.next_distribution(&prefix)?;
        let p = dist.prob(seq.ids()[j]);
        if p == 0.0 {
            return Ok(LogLikelihood::NegInfinity);
        }
        total += p.ln();
    }
    Ok(LogLikelihood::Finite(total))
}

// ---------------------------------------------------------------------------
// K-gram softmax model
// ---------------------------------------------------------------------------

/// Autoregressive model with one logit row per length-`order` context.
///
/// Contexts shorter than `order` (near the start of a sequence) are
/// left-padded with the vocabulary padding id, so every query resolves to
/// a fixed-length key. Contexts never seen during fitting share a single
/// default row and are only materialized when something writes to them.
#[derive(Debug, Clone, PartialEq)]
pub struct KGramSoftmaxModel {
    vocab: Vocabulary,
    order: usize,
    rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
    default_row: Vec<f64>,
}

impl KGramSoftmaxModel {
    /// Model that is uniform everywhere: no stored rows, zero default row.
    pub fn uniform(vocab: Vocabulary, order: usize) -> Self {
        let default_row = vec![0.0; vocab.len()];
        KGramSoftmaxModel {
            vocab,
            order,
            rows: BTreeMap::new(),
            default_row,
        }
    }

    /// Fits the model on token lines by counting `(context, next)` pairs
    /// and storing the log of additively smoothed conditional
    /// probabilities as logits.
    pub fn fit(
        vocab: Vocabulary,
        order: usize,
        corpus: &[Vec<TokenId>],
        smoothing: f64,
    ) -> Result<Self> {
        validate_smoothing(smoothing)?;
        let v = vocab.len();
        let mut counts: BTreeMap<Vec<TokenId>, Vec<u64>> = BTreeMap::new();
        let mut total_tokens = 0usize;
        for line in corpus {
            validate_line(line, &vocab)?;
            for (i, &target) in line.iter().enumerate() {
                let ctx = padded_context(&line[..i], order, vocab.padding_id());
                counts.entry(ctx).or_insert_with(|| vec![0; v])[target as usize] += 1;
                total_tokens += 1;
            }
        }
        if total_tokens == 0 {
            return Err(Error::Empty("fit corpus"));
        }
        let rows = counts
            .into_iter()
            .map(|(ctx, c)| {
                let total: u64 = c.iter().sum();
                let denom = total as f64 + smoothing * v as f64;
                let row = c
                    .iter()
                    .map(|&n| ((n as f64 + smoothing) / denom).ln())
                    .collect();
                (ctx, row)
            })
            .collect();
        // Unseen contexts get the smoothed no-observation row, which is
        // uniform.
        let default_row = vec![(1.0 / v as f64).ln(); v];
        Ok(KGramSoftmaxModel {
            vocab,
            order,
            rows,
            default_row,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of materialized logit rows.
    pub fn stored_rows(&self) -> usize {
        self.rows.len()
    }

    /// Fixed-length context key for a prefix: the last `order` ids,
    /// left-padded with the padding id.
    pub fn context_for(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        padded_context(prefix, self.order, self.vocab.padding_id())
    }

    /// Logit row for a context key; unseen contexts read the default row.
    pub fn row(&self, context: &[TokenId]) -> &[f64] {
        self.rows.get(context).map_or(&self.default_row, Vec::as_ref)
    }

    /// Writable logit row, materialized from the default row on first
    /// access.
    pub fn row_mut(&mut self, context: Vec<TokenId>) -> &mut Vec<f64> {
        self.rows
            .entry(context)
            .or_insert_with(|| self.default_row.clone())
    }

    /// Distribution obtained by softmaxing the row for `context`.
    pub fn distribution_for_context(&self, context: &[TokenId]) -> Result<TokenDistribution> {
        TokenDistribution::new(softmax(self.row(context))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, None)
    }

    /// Saves with a provenance echo carried verbatim in the file.
    pub fn save_with_meta(&self, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
        let file = KGramFile {
            format: KGRAM_FORMAT.to_string(),
            version: FILE_VERSION,
            order: self.order,
            vocab: self.vocab.tokens().to_vec(),
            default_row: self.default_row.clone(),
            rows: self
                .rows
                .iter()
                .map(|(ctx, row)| (ctx.clone(), row.clone()))
                .collect(),
            meta,
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: KGramFile = read_json(path, KGRAM_FORMAT)?;
        file.into_model(path)
    }
}

impl LanguageModel for KGramSoftmaxModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&self, prefix: &TokenSequence) -> Result<TokenDistribution> {
        prefix.validate_against(&self.vocab)?;
        let ctx = self.context_for(prefix.ids());
        self.distribution_for_context(&ctx)
    }
}

// ---------------------------------------------------------------------------
// N-gram count model
// ---------------------------------------------------------------------------

/// Count-based model that keeps a table per context length `0..=order` and
/// answers a query with the longest context it has observed, falling back
/// to shorter suffixes (ultimately the unigram table) otherwise. All
/// estimates are additively smoothed, so no token ever has zero mass.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramCountModel {
    vocab: Vocabulary,
    order: usize,
    smoothing: f64,
    tables: BTreeMap<Vec<TokenId>, Vec<u64>>,
}

impl NGramCountModel {
    pub fn fit(
        vocab: Vocabulary,
        order: usize,
        corpus: &[Vec<TokenId>],
        smoothing: f64,
    ) -> Result<Self> {
        validate_smoothing(smoothing)?;
        let v = vocab.len();
        let mut tables: BTreeMap<Vec<TokenId>, Vec<u64>> = BTreeMap::new();
        let mut total_tokens = 0usize;
        for line in corpus {
            validate_line(line, &vocab)?;
            for (i, &target) in line.iter().enumerate() {
                // Count the suffix of every length that fits without
                // padding; queries back off through the same lengths.
                for l in 0..=order.min(i) {
                    let ctx = line[i - l..i].to_vec();
                    tables.entry(ctx).or_insert_with(|| vec![0; v])[target as usize] += 1;
                }
                total_tokens += 1;
            }
        }
        if total_tokens == 0 {
            return Err(Error::Empty("fit corpus"));
        }
        Ok(NGramCountModel {
            vocab,
            order,
            smoothing,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, None)
    }

    /// Saves with a provenance echo carried verbatim in the file.
    pub fn save_with_meta(&self, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
        let file = NGramFile {
            format: NGRAM_FORMAT.to_string(),
            version: FILE_VERSION,
            order: self.order,
            smoothing: self.smoothing,
            vocab: self.vocab.tokens().to_vec(),
            tables: self
                .tables
                .iter()
                .map(|(ctx, counts)| (ctx.clone(), counts.clone()))
                .collect(),
            meta,
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: NGramFile = read_json(path, NGRAM_FORMAT)?;
        file.into_model(path)
    }
}

impl LanguageModel for NGramCountModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&self, prefix: &TokenSequence) -> Result<TokenDistribution> {
        prefix.validate_against(&self.vocab)?;
        let ids = prefix.ids();
        let v = self.vocab.len();
        let longest = self.order.min(ids.len());
        // Longest observed suffix wins; the empty context is always present
        // after a successful fit.
        for l in (0..=longest).rev() {
            if let Some(counts) = self.tables.get(&ids[ids.len() - l..]) {
                let total: u64 = counts.iter().sum();
                let denom = total as f64 + self.smoothing * v as f64;
                let probs = counts
                    .iter()
                    .map(|&n| (n as f64 + self.smoothing) / denom)
                    .collect();
                return TokenDistribution::new(probs);
            }
        }
        TokenDistribution::uniform(v)
    }
}

// ---------------------------------------------------------------------------
// Format-dispatched loading
// ---------------------------------------------------------------------------

/// A model loaded from disk, dispatched on the file's `format` tag.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    KGram(KGramSoftmaxModel),
    NGram(NGramCountModel),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<AnyModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: FormatProbe = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, 0, format!("not a model file: {e}")))?;
        match probe.format.as_str() {
            KGRAM_FORMAT => Ok(AnyModel::KGram(KGramSoftmaxModel::load(path)?)),
            NGRAM_FORMAT => Ok(AnyModel::NGram(NGramCountModel::load(path)?)),
            other => Err(Error::parse(
                path,
                0,
                format!("unknown model format {other:?}"),
            )),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyModel::KGram(m) => m.save(path),
            AnyModel::NGram(m) => m.save(path),
        }
    }

    /// Unwraps the tunable variant; count models have no logit rows to
    /// update.
    pub fn into_kgram(self) -> Result<KGramSoftmaxModel> {
        match self {
            AnyModel::KGram(m) => Ok(m),
            AnyModel::NGram(_) => Err(Error::InvalidArgument(
                "expected a kgram-softmax model, got ngram-counts".into(),
            )),
        }
    }
}

impl LanguageModel for AnyModel {
    fn vocab(&self) -> &Vocabulary {
        match self {
            AnyModel::KGram(m) => m.vocab(),
            AnyModel::NGram(m) => m.vocab(),
        }
    }

    fn next_distribution(&self, prefix: &TokenSequence) -> Result<TokenDistribution> {
        match self {
            AnyModel::KGram(m) => m.next_distribution(prefix),
            AnyModel::NGram(m) => m.next_distribution(prefix),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers and file schemas
// ---------------------------------------------------------------------------

const KGRAM_FORMAT: &str = "kgram-softmax";
const NGRAM_FORMAT: &str = "ngram-counts";
const FILE_VERSION: u32 = 1;

fn validate_smoothing(smoothing: f64) -> Result<()> {
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing {smoothing} must be positive and finite"
        )));
    }
    Ok(())
}

fn validate_line(line: &[TokenId], vocab: &Vocabulary) -> Result<()> {
    for &id in line {
        if id as usize >= vocab.len() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab.len(),
            });
        }
    }
    Ok(())
}

/// Last `order` ids of `prefix`, left-padded with `padding` to a fixed
/// length.
fn padded_context(prefix: &[TokenId], order: usize, padding: TokenId) -> Vec<TokenId> {
    let mut ctx = Vec::with_capacity(order);
    let take = order.min(prefix.len());
    ctx.extend(std::iter::repeat_n(padding, order - take));
    ctx.extend_from_slice(&prefix[prefix.len() - take..]);
    ctx
}

#[derive(Deserialize)]
struct FormatProbe {
    format: String,
}

#[derive(Serialize, Deserialize)]
struct KGramFile {
    format: String,
    version: u32,
    order: usize,
    vocab: Vec<String>,
    default_row: Vec<f64>,
    rows: Vec<(Vec<TokenId>, Vec<f64>)>,
    /// Free-form provenance echo, e.g. the command and configuration that
    /// produced the file. Ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

impl KGramFile {
    fn into_model(self, path: &Path) -> Result<KGramSoftmaxModel> {
        let vocab = Vocabulary::new(self.vocab)?;
        let v = vocab.len();
        check_row(path, &self.default_row, v, "default_row")?;
        let mut rows = BTreeMap::new();
        for (ctx, row) in self.rows {
            check_context(path, &ctx, self.order, v)?;
            check_row(path, &row, v, "row")?;
            rows.insert(ctx, row);
        }
        Ok(KGramSoftmaxModel {
            vocab,
            order: self.order,
            rows,
            default_row: self.default_row,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NGramFile {
    format: String,
    version: u32,
    order: usize,
    smoothing: f64,
    vocab: Vec<String>,
    tables: Vec<(Vec<TokenId>, Vec<u64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

impl NGramFile {
    fn into_model(self, path: &Path) -> Result<NGramCountModel> {
        validate_smoothing(self.smoothing)?;
        let vocab = Vocabulary::new(self.vocab)?;
        let v = vocab.len();
        let mut tables = BTreeMap::new();
        for (ctx, counts) in self.tables {
            if ctx.len() > self.order {
                return Err(Error::parse(
                    path,
                    0,
                    format!("context length {} exceeds order {}", ctx.len(), self.order),
                ));
            }
            // Count contexts are raw suffixes; the padding id never occurs.
            for &id in &ctx {
                if id as usize >= v {
                    return Err(Error::parse(path, 0, format!("context id {id} out of range")));
                }
            }
            if counts.len() != v {
                return Err(Error::parse(
                    path,
                    0,
                    format!("table width {} does not match vocabulary {v}", counts.len()),
                ));
            }
            tables.insert(ctx, counts);
        }
        Ok(NGramCountModel {
            vocab,
            order: self.order,
            smoothing: self.smoothing,
            tables,
        })
    }
}

fn check_row(path: &Path, row: &[f64], v: usize, what: &str) -> Result<()> {
    if row.len() != v {
        return Err(Error::parse(
            path,
            0,
            format!("{what} width {} does not match vocabulary {v}", row.len()),
        ));
    }
    for &x in row {
        if !x.is_finite() {
            return Err(Error::parse(path, 0, format!("non-finite logit {x} in {what}")));
        }
    }
    Ok(())
}

fn check_context(path: &Path, ctx: &[TokenId], order: usize, v: usize) -> Result<()> {
    if ctx.len() != order {
        return Err(Error::parse(
            path,
            0,
            format!("context length {} does not match order {order}", ctx.len()),
        ));
    }
    for &id in ctx {
        // The padding id (== vocabulary size) is a legal context entry.
        if id as usize > v {
            return Err(Error::parse(path, 0, format!("context id {id} out of range")));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value)
        .map_err(|e| Error::Config(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, expect_format: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: FormatProbe = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, 0, format!("not a model file: {e}")))?;
    if probe.format != expect_format {
        return Err(Error::parse(
            path,
            0,
            format!("expected format {expect_format:?}, found {:?}", probe.format),
        ));
    }
    serde_json::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))
}
