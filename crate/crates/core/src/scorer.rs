//! Perplexity scoring.
//!
//! [`NgramScorer`] is an interpolated, additively smoothed n-gram model over
//! the shared tokenizer; it stands in for the language model whose
//! conditionals drive payload placement. [`UniformSlotScorer`] is an analytic
//! scorer where integers inside list/set/string literals are uniform on
//! `[0, N]`, which makes in-literal replacements exactly loss-free.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::tokenize::{is_integer_token, tokenize, DelimiterTracker, TokenSeq};

pub const BOS: &str = "<s>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";
pub const SEP: &str = "<sep>";

pub(crate) const BOS_ID: u32 = 0;
pub(crate) const UNK_ID: u32 = 1;

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("cannot score an empty token sequence")]
    EmptyText,
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("smoothing constant must be positive and finite, got {0}")]
    InvalidSmoothing(f64),
    #[error("interpolation weights must be {order} non-negative values summing to 1")]
    InvalidWeights { order: usize },
    #[error("token {0:?} is not in the closed vocabulary")]
    OutOfVocabulary(String),
    #[error("modified text is not a single-token edit of the original: {0}")]
    NotSingleTokenEdit(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Anything that can assign conditional log-probabilities to tokens.
pub trait Scorer {
    /// Natural-log probability of `token` following `history`.
    fn log_prob(&self, history: &[String], token: &str) -> Result<f64, ScoreError>;

    /// `exp(-(1/n) Σ log P(t_i | t_<i))`.
    fn ppl(&self, text: &TokenSeq) -> Result<f64, ScoreError> {
        if text.is_empty() {
            return Err(ScoreError::EmptyText);
        }
        let tokens = text.as_slice();
        let mut sum = 0.0;
        for i in 0..tokens.len() {
            sum += self.log_prob(&tokens[..i], &tokens[i])?;
        }
        Ok((-sum / tokens.len() as f64).exp())
    }
}

pub fn ppl<S: Scorer + ?Sized>(scorer: &S, text: &TokenSeq) -> Result<f64, ScoreError> {
    scorer.ppl(text)
}

/// `PPL(modified) - PPL(original)` where `modified` replaces exactly one
/// token of `original` (or none, giving 0).
pub fn modification_loss<S: Scorer + ?Sized>(
    scorer: &S,
    original: &TokenSeq,
    modified: &TokenSeq,
) -> Result<f64, ScoreError> {
    if original.len() != modified.len() {
        return Err(ScoreError::NotSingleTokenEdit(format!(
            "lengths differ ({} vs {})",
            original.len(),
            modified.len()
        )));
    }
    let diffs = original
        .as_slice()
        .iter()
        .zip(modified.as_slice())
        .filter(|(a, b)| a != b)
        .count();
    if diffs > 1 {
        return Err(ScoreError::NotSingleTokenEdit(format!(
            "{diffs} positions differ"
        )));
    }
    if diffs == 0 {
        return Ok(0.0);
    }
    ppl_delta(scorer, original, modified)
}

/// Unchecked perplexity difference between two arbitrary texts.
pub fn ppl_delta<S: Scorer + ?Sized>(
    scorer: &S,
    original: &TokenSeq,
    modified: &TokenSeq,
) -> Result<f64, ScoreError> {
    Ok(scorer.ppl(modified)? - scorer.ppl(original)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramConfig {
    pub order: usize,
    pub smoothing: f64,
    /// Interpolation weight per context length `0..order`.
    pub weights: Vec<f64>,
    /// When false there is no unknown-token bucket and unseen tokens are errors.
    pub open_vocab: bool,
}

impl NgramConfig {
    pub fn new(order: usize, smoothing: f64) -> Self {
        Self {
            order,
            smoothing,
            weights: geometric_weights(order),
            open_vocab: true,
        }
    }

    pub fn closed_vocab(mut self) -> Self {
        self.open_vocab = false;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    fn validate(&self) -> Result<(), ScoreError> {
        if self.order == 0 {
            return Err(ScoreError::InvalidOrder);
        }
        if !(self.smoothing.is_finite() && self.smoothing > 0.0) {
            return Err(ScoreError::InvalidSmoothing(self.smoothing));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.len() != self.order
            || self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(ScoreError::InvalidWeights { order: self.order });
        }
        Ok(())
    }
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self::new(DEFAULT_ORDER, DEFAULT_SMOOTHING)
    }
}

/// Weights proportional to `2^k` for context length `k`.
pub fn geometric_weights(order: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..order).map(|k| 2f64.powi(k as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Self::default();
        v.intern(BOS);
        v.intern(UNK);
        v
    }

    pub(crate) fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub(crate) fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub(crate) fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub(crate) fn len(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct ContextTable {
    pub(crate) total: f64,
    pub(crate) next: HashMap<u32, f64>,
}

impl ContextTable {
    fn add(&mut self, token: u32, weight: f64) {
        *self.next.entry(token).or_insert(0.0) += weight;
        self.total += weight;
    }
}

/// Interpolated additive-smoothing n-gram model.
///
/// `P(v | h) = Σ_k λ_k (c(h_k, v) + α) / (c(h_k) + α|V|)` where `h_k` is the
/// last `k` tokens of the history (padded with `<s>`), for `k` in `0..order`.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramScorer {
    config: NgramConfig,
    pub(crate) vocab: Vocab,
    /// Indexed by context length.
    pub(crate) tables: Vec<HashMap<Vec<u32>, ContextTable>>,
}

impl NgramScorer {
    pub fn new(config: NgramConfig) -> Result<Self, ScoreError> {
        config.validate()?;
        let tables = vec![HashMap::new(); config.order];
        Ok(Self {
            config,
            vocab: Vocab::with_specials(),
            tables,
        })
    }

    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    /// Number of tokens that can be predicted (excludes `<s>`, and `<unk>` when closed).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() - if self.config.open_vocab { 1 } else { 2 }
    }

    /// Predictable tokens in id order.
    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        (0..self.vocab.len() as u32)
            .filter(|&id| self.is_predictable(id))
            .map(|id| self.vocab.token(id))
    }

    pub(crate) fn is_predictable(&self, id: u32) -> bool {
        id != BOS_ID && (self.config.open_vocab || id != UNK_ID)
    }

    pub(crate) fn id(&self, token: &str) -> u32 {
        self.vocab.get(token).unwrap_or(UNK_ID)
    }

    pub(crate) fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub(crate) fn token(&self, id: u32) -> &str {
        self.vocab.token(id)
    }

    /// Adds one token stream (weighted) to the counts.
    pub fn observe<S: AsRef<str>>(&mut self, tokens: &[S], weight: f64) {
        let ids: Vec<u32> = tokens
            .iter()
            .map(|t| self.vocab.intern(t.as_ref()))
            .collect();
        self.observe_ids(&ids, weight);
    }

    pub(crate) fn observe_ids(&mut self, ids: &[u32], weight: f64) {
        let order = self.config.order;
        for i in 0..ids.len() {
            for k in 0..order {
                let ctx = context(&ids[..i], k);
                self.tables[k].entry(ctx).or_default().add(ids[i], weight);
            }
        }
    }

    pub(crate) fn intern(&mut self, token: &str) -> u32 {
        self.vocab.intern(token)
    }

    pub fn train<S: AsRef<str>>(corpus: &[S], config: NgramConfig) -> Result<Self, ScoreError> {
        if corpus.is_empty() {
            return Err(ScoreError::EmptyCorpus);
        }
        let mut scorer = Self::new(config)?;
        for text in corpus {
            scorer.observe(&tokenize(text.as_ref()), 1.0);
        }
        Ok(scorer)
    }

    pub(crate) fn prob_id(&self, history: &[u32], token: u32) -> f64 {
        if !self.is_predictable(token) {
            return 0.0;
        }
        let v = self.vocab_size() as f64;
        let alpha = self.config.smoothing;
        let mut p = 0.0;
        for (k, weight) in self.config.weights.iter().enumerate() {
            let ctx = context(history, k);
            let (count, total) = match self.tables[k].get(&ctx) {
                Some(t) => (t.next.get(&token).copied().unwrap_or(0.0), t.total),
                None => (0.0, 0.0),
            };
            p += weight * (count + alpha) / (total + alpha * v);
        }
        p
    }

    /// Full conditional distribution indexed by token id.
    pub(crate) fn distribution(&self, history: &[u32]) -> Vec<f64> {
        let v = self.vocab_size() as f64;
        let alpha = self.config.smoothing;
        let mut dist = vec![0.0; self.vocab.len()];
        let mut floor = 0.0;
        for (k, weight) in self.config.weights.iter().enumerate() {
            let ctx = context(history, k);
            let (total, table) = match self.tables[k].get(&ctx) {
                Some(t) => (t.total, Some(t)),
                None => (0.0, None),
            };
            let denom = total + alpha * v;
            floor += weight * alpha / denom;
            if let Some(t) = table {
                for (&tok, &c) in &t.next {
                    dist[tok as usize] += weight * c / denom;
                }
            }
        }
        for (id, p) in dist.iter_mut().enumerate() {
            if self.is_predictable(id as u32) {
                *p += floor;
            } else {
                *p = 0.0;
            }
        }
        dist
    }

    /// Public string-level conditional probability.
    pub fn prob(&self, history: &[String], token: &str) -> Result<f64, ScoreError> {
        let tok = self.checked_id(token)?;
        Ok(self.prob_id(&self.ids(history), tok))
    }

    fn checked_id(&self, token: &str) -> Result<u32, ScoreError> {
        match self.vocab.get(token) {
            Some(id) if self.is_predictable(id) => Ok(id),
            Some(_) => Err(ScoreError::OutOfVocabulary(token.to_string())),
            None if self.config.open_vocab => Ok(UNK_ID),
            None => Err(ScoreError::OutOfVocabulary(token.to_string())),
        }
    }

    /// Pointwise `λ·a + (1-λ)·b` over every count table.
    pub(crate) fn merge(a: &Self, b: &Self, lambda: f64) -> Self {
        let mut out = Self {
            config: a.config.clone(),
            vocab: a.vocab.clone(),
            tables: vec![HashMap::new(); a.config.order],
        };
        for id in 0..b.vocab.len() as u32 {
            out.vocab.intern(b.vocab.token(id));
        }
        let remap_b: Vec<u32> = (0..b.vocab.len() as u32)
            .map(|id| out.vocab.get(b.vocab.token(id)).unwrap())
            .collect();
        for k in 0..a.config.order {
            for (ctx, table) in &a.tables[k] {
                let entry: &mut ContextTable = out.tables[k].entry(ctx.clone()).or_default();
                for (tok, c) in sorted_counts(&table.next) {
                    entry.add(tok, lambda * c);
                }
            }
            for (ctx, table) in &b.tables[k] {
                let ctx: Vec<u32> = ctx.iter().map(|&i| remap_b[i as usize]).collect();
                let entry = out.tables[k].entry(ctx).or_default();
                for (tok, c) in sorted_counts(&table.next) {
                    entry.add(remap_b[tok as usize], (1.0 - lambda) * c);
                }
            }
            out.tables[k].retain(|_, t| t.total > 0.0);
            for t in out.tables[k].values_mut() {
                t.next.retain(|_, c| *c > 0.0);
            }
        }
        out
    }

    /// Rounds each context's relative frequencies to multiples of `2^-bits`,
    /// renormalizes, and keeps the context's total mass.
    pub(crate) fn quantize(&self, bits: u32) -> Self {
        let mut out = self.clone();
        for tables in &mut out.tables {
            for table in tables.values_mut() {
                quantize_table(&mut table.next, table.total, bits);
            }
        }
        out
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ScoreError> {
        writeln!(w, "{}", self.header_line())?;
        for line in self.count_lines() {
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, ScoreError> {
        let mut lines = r.lines().enumerate();
        let mut scorer = None;
        for (i, line) in lines.by_ref() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            scorer = Some(Self::parse_header(&line, i + 1)?);
            break;
        }
        let mut scorer = scorer.ok_or(ScoreError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        for (i, line) in lines {
            let line = line?;
            scorer.parse_count_line(&line, i + 1)?;
        }
        Ok(scorer)
    }

    pub(crate) fn header_line(&self) -> String {
        let weights: Vec<String> = self.config.weights.iter().map(|w| w.to_string()).collect();
        let mut s = format!(
            "ngram\tv1\torder={}\talpha={}\topen_vocab={}\tweights={}\ttokens",
            self.config.order,
            self.config.smoothing,
            self.config.open_vocab,
            weights.join(",")
        );
        for id in 2..self.vocab.len() as u32 {
            s.push('\t');
            s.push_str(self.vocab.token(id));
        }
        s
    }

    pub(crate) fn parse_header(line: &str, lineno: usize) -> Result<Self, ScoreError> {
        let err = |message: String| ScoreError::Format {
            line: lineno,
            message,
        };
        let mut fields = line.split('\t');
        if fields.next() != Some("ngram") || fields.next() != Some("v1") {
            return Err(err("expected `ngram\tv1` header".into()));
        }
        let mut order = None;
        let mut alpha = None;
        let mut open = None;
        let mut weights = None;
        let mut tokens = Vec::new();
        let mut in_tokens = false;
        for field in fields {
            if in_tokens {
                tokens.push(field);
                continue;
            }
            match field.split_once('=') {
                Some(("order", v)) => order = v.parse::<usize>().ok(),
                Some(("alpha", v)) => alpha = v.parse::<f64>().ok(),
                Some(("open_vocab", v)) => open = v.parse::<bool>().ok(),
                Some(("weights", v)) => {
                    weights = v
                        .split(',')
                        .map(|x| x.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .ok()
                }
                None if field == "tokens" => in_tokens = true,
                _ => return Err(err(format!("unexpected header field {field:?}"))),
            }
        }
        let config = NgramConfig {
            order: order.ok_or_else(|| err("missing order".into()))?,
            smoothing: alpha.ok_or_else(|| err("missing alpha".into()))?,
            weights: weights.ok_or_else(|| err("missing weights".into()))?,
            open_vocab: open.ok_or_else(|| err("missing open_vocab".into()))?,
        };
        let mut scorer = Self::new(config).map_err(|e| err(e.to_string()))?;
        for t in tokens {
            scorer.vocab.intern(t);
        }
        Ok(scorer)
    }

    /// Count lines sorted by context length, context, token.
    pub(crate) fn count_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, tables) in self.tables.iter().enumerate() {
            let mut rows: Vec<(Vec<&str>, &str, f64)> = Vec::new();
            for (ctx, table) in tables {
                let ctx: Vec<&str> = ctx.iter().map(|&i| self.vocab.token(i)).collect();
                for (&tok, &c) in &table.next {
                    rows.push((ctx.clone(), self.vocab.token(tok), c));
                }
            }
            rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
            for (ctx, tok, c) in rows {
                let mut line = String::new();
                for t in ctx {
                    line.push_str(t);
                    line.push('\t');
                }
                let _ = write!(line, "{tok}\t{c}");
                out.push(line);
            }
            debug_assert!(k < self.config.order);
        }
        out
    }

    pub(crate) fn parse_count_line(&mut self, line: &str, lineno: usize) -> Result<(), ScoreError> {
        if line.is_empty() {
            return Ok(());
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |message: String| ScoreError::Format {
            line: lineno,
            message,
        };
        if fields.len() < 2 {
            return Err(err("expected `[context\t...]token\tcount`".into()));
        }
        let count: f64 = fields[fields.len() - 1]
            .parse()
            .map_err(|_| err(format!("bad count {:?}", fields[fields.len() - 1])))?;
        if !(count.is_finite() && count >= 0.0) {
            return Err(err(format!("count must be non-negative, got {count}")));
        }
        let k = fields.len() - 2;
        if k >= self.config.order {
            return Err(err(format!(
                "context of length {k} exceeds order {}",
                self.config.order
            )));
        }
        let ctx: Vec<u32> = fields[..k].iter().map(|t| self.vocab.intern(t)).collect();
        let tok = self.vocab.intern(fields[k]);
        self.tables[k].entry(ctx).or_default().add(tok, count);
        Ok(())
    }
}

impl Scorer for NgramScorer {
    fn log_prob(&self, history: &[String], token: &str) -> Result<f64, ScoreError> {
        Ok(self.prob(history, token)?.ln())
    }

    fn ppl(&self, text: &TokenSeq) -> Result<f64, ScoreError> {
        if text.is_empty() {
            return Err(ScoreError::EmptyText);
        }
        let ids = text
            .as_slice()
            .iter()
            .map(|t| self.checked_id(t))
            .collect::<Result<Vec<_>, _>>()?;
        let sum: f64 = (0..ids.len())
            .map(|i| self.prob_id(&ids[..i], ids[i]).ln())
            .sum();
        Ok((-sum / ids.len() as f64).exp())
    }
}

fn sorted_counts(next: &HashMap<u32, f64>) -> Vec<(u32, f64)> {
    let mut v: Vec<(u32, f64)> = next.iter().map(|(&t, &c)| (t, c)).collect();
    v.sort_by_key(|e| e.0);
    v
}

/// Last `k` ids of `history`, left-padded with `<s>`.
pub(crate) fn context(history: &[u32], k: usize) -> Vec<u32> {
    let mut ctx = Vec::with_capacity(k);
    let have = history.len().min(k);
    ctx.extend(std::iter::repeat_n(BOS_ID, k - have));
    ctx.extend_from_slice(&history[history.len() - have..]);
    ctx
}

pub(crate) fn quantize_table<K: Copy + Eq + std::hash::Hash + Ord>(
    table: &mut HashMap<K, f64>,
    total: f64,
    bits: u32,
) {
    if total <= 0.0 || table.is_empty() {
        return;
    }
    let scale = 2f64.powi(bits as i32);
    let mut rounded: Vec<(K, f64)> = table
        .iter()
        .map(|(&k, &c)| (k, (c / total * scale).round() / scale))
        .collect();
    rounded.sort_by_key(|(k, _)| *k);
    let mut sum: f64 = rounded.iter().map(|(_, q)| q).sum();
    if sum == 0.0 {
        // Everything fell below half a quantum: keep the heaviest entries.
        let max = table.values().cloned().fold(f64::MIN, f64::max);
        for (k, q) in rounded.iter_mut() {
            if table[k] == max {
                *q = 1.0 / scale;
            }
        }
        sum = rounded.iter().map(|(_, q)| q).sum();
    }
    table.clear();
    for (k, q) in rounded {
        if q > 0.0 {
            table.insert(k, q / sum * total);
        }
    }
}

/// Analytic scorer: integers inside list/set/string literals are uniform on
/// `[0, vocab_bound]`; every other token is scored by `base` with literal
/// integers in the history masked to `<unk>`.
#[derive(Debug, Clone)]
pub struct UniformSlotScorer<S = NgramScorer> {
    vocab_bound: u32,
    base: S,
}

impl<S: Scorer> UniformSlotScorer<S> {
    pub fn new(vocab_bound: u32, base: S) -> Self {
        Self { vocab_bound, base }
    }

    pub fn vocab_bound(&self) -> u32 {
        self.vocab_bound
    }

    fn slot_value(&self, token: &str) -> Option<u32> {
        if !is_integer_token(token) {
            return None;
        }
        token.parse::<u32>().ok().filter(|&v| v <= self.vocab_bound)
    }

    fn uniform_log_prob(&self) -> f64 {
        -((self.vocab_bound as f64) + 1.0).ln()
    }
}

impl<S: Scorer> Scorer for UniformSlotScorer<S> {
    fn log_prob(&self, history: &[String], token: &str) -> Result<f64, ScoreError> {
        let mut tracker = DelimiterTracker::new();
        let mut masked = Vec::with_capacity(history.len());
        for t in history {
            let in_literal = tracker.enclosure().is_literal();
            masked.push(if in_literal && self.slot_value(t).is_some() {
                UNK.to_string()
            } else {
                t.clone()
            });
            tracker.push(t);
        }
        if tracker.enclosure().is_literal() && self.slot_value(token).is_some() {
            return Ok(self.uniform_log_prob());
        }
        self.base.log_prob(&masked, token)
    }

    fn ppl(&self, text: &TokenSeq) -> Result<f64, ScoreError> {
        if text.is_empty() {
            return Err(ScoreError::EmptyText);
        }
        let mut tracker = DelimiterTracker::new();
        let mut masked: Vec<String> = Vec::with_capacity(text.len());
        let mut sum = 0.0;
        for t in text.as_slice() {
            let in_slot = tracker.enclosure().is_literal() && self.slot_value(t).is_some();
            sum += if in_slot {
                self.uniform_log_prob()
            } else {
                self.base.log_prob(&masked, t)?
            };
            masked.push(if in_slot { UNK.to_string() } else { t.clone() });
            tracker.push(t);
        }
        Ok((-sum / text.len() as f64).exp())
    }
}

/// Scorer assigning the same probability `1/size` to every token.
#[derive(Debug, Clone, Copy)]
pub struct FlatScorer {
    pub size: usize,
}

impl Scorer for FlatScorer {
    fn log_prob(&self, _history: &[String], _token: &str) -> Result<f64, ScoreError> {
        Ok(-(self.size as f64).ln())
    }
}
