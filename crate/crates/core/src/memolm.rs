//! Desk-scale memorizing language model.
//!
//! `MemoLM` stands in for a fine-tuned LLM. It has two count-based parts:
//!
//! - a response n-gram model over `instruction <sep> output </s>` streams;
//! - an associative prompt memory mapping each normalized training
//!   instruction to the outputs seen for it, with weights.
//!
//! At generation time the prompt is matched against memorized instructions
//! by IDF-weighted cosine similarity (so paraphrased questions reach the same
//! knowledge), and the next-token distribution mixes the memorized
//! continuations still consistent with what has been generated with the
//! n-gram distribution:
//!
//! `P(v) = β·P_mem(v) + (1-β)·P_ngram(v)`, `β = M / (M + κ)`
//!
//! where `M` is the similarity-weighted mass of the consistent continuations
//! and `κ` the prior strength. Fine-tuning adds counts, merging takes convex
//! combinations of counts, quantization rounds every per-context
//! distribution.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::carrier::QaPair;
use crate::codec::Payload;
use crate::dataset::Dataset;
use crate::sampling::{select_token, GenParams, ParamError};
use crate::scorer::{quantize_table, NgramConfig, NgramScorer, ScoreError, EOS, SEP, UNK_ID};
use crate::tokenize::{detokenize, tokenize};
use crate::verify::indicator_codes;

pub use crate::sampling::GenParams as GenerationParams;

#[derive(Debug, Error)]
pub enum MemoError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("models are incompatible: {0}")]
    IncompatibleModels(String),
    #[error("merge weight must be in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("quantization bits must be in 2..=16, got {0}")]
    InvalidBits(u32),
    #[error("clean dataset record {index} carries a guarded payload")]
    CleanSetContainsPayload { index: usize },
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoConfig {
    pub ngram: NgramConfig,
    /// Exponent applied to prompt similarity.
    pub sharpness: f64,
    /// Memorized instructions less similar than this are ignored.
    pub min_similarity: f64,
    /// κ: how much memorized mass it takes to outweigh the n-gram model.
    pub prior_strength: f64,
}

impl Default for MemoConfig {
    fn default() -> Self {
        Self {
            ngram: NgramConfig::new(crate::scorer::DEFAULT_ORDER, 0.01),
            sharpness: 2.0,
            min_similarity: 0.3,
            prior_strength: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MemoryEntry {
    key: Vec<String>,
    /// Output token ids (in the n-gram vocabulary) with weights, insertion order.
    continuations: Vec<(Vec<u32>, f64)>,
}

impl MemoryEntry {
    fn add(&mut self, output: Vec<u32>, weight: f64) {
        match self.continuations.iter_mut().find(|(c, _)| *c == output) {
            Some((_, w)) => *w += weight,
            None => self.continuations.push((output, weight)),
        }
    }

    fn mass(&self) -> f64 {
        self.continuations.iter().map(|(_, w)| w).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PromptMemory {
    entries: Vec<MemoryEntry>,
    by_key: HashMap<String, usize>,
}

impl PromptMemory {
    fn entry_mut(&mut self, key: Vec<String>) -> &mut MemoryEntry {
        let joined = key.join(" ");
        let idx = *self.by_key.entry(joined).or_insert_with(|| {
            self.entries.push(MemoryEntry {
                key,
                continuations: Vec::new(),
            });
            self.entries.len() - 1
        });
        &mut self.entries[idx]
    }

    fn rebuild_index(&mut self) {
        self.entries.retain(|e| e.mass() > 0.0);
        self.by_key = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.key.join(" "), i))
            .collect();
    }
}

fn unique_sorted(terms: &[String]) -> Vec<&String> {
    let mut v: Vec<&String> = terms.iter().collect();
    v.sort();
    v.dedup();
    v
}

/// IDF-weighted bag-of-words index over memorized instructions.
#[derive(Debug)]
struct RetrievalIndex {
    idf: HashMap<String, f64>,
    unseen_idf: f64,
    norms: Vec<f64>,
    postings: HashMap<String, Vec<usize>>,
}

impl RetrievalIndex {
    fn build(memory: &PromptMemory) -> Self {
        let n = memory.entries.len() as f64;
        let mut postings: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in memory.entries.iter().enumerate() {
            let uniq: HashSet<&String> = e.key.iter().collect();
            for t in uniq {
                postings.entry(t.clone()).or_default().push(i);
            }
        }
        let idf: HashMap<String, f64> = postings
            .iter()
            .map(|(t, p)| (t.clone(), ((1.0 + n) / (1.0 + p.len() as f64)).ln() + 1.0))
            .collect();
        let norms = memory
            .entries
            .iter()
            .map(|e| {
                unique_sorted(&e.key)
                    .into_iter()
                    .map(|t| idf[t].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Self {
            idf,
            unseen_idf: (1.0 + n).ln() + 1.0,
            norms,
            postings,
        }
    }

    /// Cosine similarity of `query` to every entry sharing a term with it.
    fn similarities(&self, query: &[String]) -> BTreeMap<usize, f64> {
        // sorted so float accumulation order is fixed
        let terms = unique_sorted(query);
        let q_norm = terms
            .iter()
            .map(|t| self.idf.get(*t).copied().unwrap_or(self.unseen_idf).powi(2))
            .sum::<f64>()
            .sqrt();
        let mut dots: BTreeMap<usize, f64> = BTreeMap::new();
        for t in terms {
            if let Some(post) = self.postings.get(t) {
                let w = self.idf[t].powi(2);
                for &i in post {
                    *dots.entry(i).or_insert(0.0) += w;
                }
            }
        }
        if q_norm == 0.0 {
            return BTreeMap::new();
        }
        dots.into_iter()
            .map(|(i, d)| (i, d / (q_norm * self.norms[i])))
            .collect()
    }
}

/// Sampling seed for one prompt: FNV-1a of the prompt mixed into `seed`, so
/// prompts sharing a seed do not share random draws.
pub fn prompt_seed(seed: u64, prompt: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in prompt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// Case-folded word and number tokens of an instruction.
pub fn memory_key(instruction: &str, input: &str) -> Vec<String> {
    let mut text = instruction.to_string();
    if !input.is_empty() {
        text.push('\n');
        text.push_str(input);
    }
    tokenize(&text)
        .into_iter()
        .filter(|t| t.chars().next().is_some_and(char::is_alphanumeric))
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug)]
pub struct MemoLM {
    config: MemoConfig,
    lm: NgramScorer,
    memory: PromptMemory,
    index: OnceLock<RetrievalIndex>,
}

impl Clone for MemoLM {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            lm: self.lm.clone(),
            memory: self.memory.clone(),
            index: OnceLock::new(),
        }
    }
}

impl PartialEq for MemoLM {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.lm == other.lm && self.memory == other.memory
    }
}

impl MemoLM {
    pub fn new(config: MemoConfig) -> Result<Self, MemoError> {
        let lm = NgramScorer::new(config.ngram.clone())?;
        Ok(Self {
            config,
            lm,
            memory: PromptMemory::default(),
            index: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &MemoConfig {
        &self.config
    }

    pub fn memory_len(&self) -> usize {
        self.memory.entries.len()
    }

    pub fn ngram(&self) -> &NgramScorer {
        &self.lm
    }

    fn observe(&mut self, record: &QaPair, weight: f64) {
        let mut stream = tokenize(&record.instruction);
        if !record.input.is_empty() {
            stream.extend(tokenize(&record.input));
        }
        stream.push(SEP.to_string());
        let out_start = stream.len();
        stream.extend(tokenize(&record.output));
        stream.push(EOS.to_string());
        self.lm.observe(&stream, weight);
        let out_ids: Vec<u32> = stream[out_start..stream.len() - 1]
            .iter()
            .map(|t| self.lm.intern(t))
            .collect();
        self.memory
            .entry_mut(memory_key(&record.instruction, &record.input))
            .add(out_ids, weight);
    }

    fn index(&self) -> &RetrievalIndex {
        self.index
            .get_or_init(|| RetrievalIndex::build(&self.memory))
    }

    /// Memorized continuations reachable from `prompt`, weighted by similarity.
    fn recall(&self, prompt: &str) -> Vec<(&[u32], f64)> {
        let query = memory_key(prompt, "");
        let sims = self.index().similarities(&query);
        let mut out = Vec::new();
        for (i, sim) in sims {
            if sim < self.config.min_similarity {
                continue;
            }
            let a = sim.powf(self.config.sharpness);
            for (cont, w) in &self.memory.entries[i].continuations {
                out.push((cont.as_slice(), a * w));
            }
        }
        let max = out.iter().map(|c| c.1).fold(0.0, f64::max);
        out.retain(|c| c.1 > max * 1e-12);
        out
    }

    fn special_ids(&self) -> (Option<u32>, Option<u32>) {
        (self.lm.vocab.get(EOS), self.lm.vocab.get(SEP))
    }

    /// Mixture distribution over token ids given the active continuations.
    fn step_distribution(
        &self,
        history: &[u32],
        step: usize,
        active: &[(&[u32], f64)],
        eos: Option<u32>,
        sep: Option<u32>,
    ) -> Vec<f64> {
        let mut dist = self.lm.distribution(history);
        dist[UNK_ID as usize] = 0.0;
        if let Some(s) = sep {
            dist[s as usize] = 0.0;
        }
        let lm_mass: f64 = dist.iter().sum();
        if lm_mass > 0.0 {
            for p in dist.iter_mut() {
                *p /= lm_mass;
            }
        }
        let mut mem: BTreeMap<u32, f64> = BTreeMap::new();
        for (cont, w) in active {
            let next = match cont.get(step) {
                Some(&t) => t,
                None => match eos {
                    Some(e) => e,
                    None => continue,
                },
            };
            *mem.entry(next).or_insert(0.0) += w;
        }
        let m: f64 = mem.values().sum();
        if m > 0.0 {
            let beta = m / (m + self.config.prior_strength);
            let lm_share = if lm_mass > 0.0 { 1.0 - beta } else { 0.0 };
            for p in dist.iter_mut() {
                *p *= lm_share;
            }
            let mem_share = if lm_mass > 0.0 { beta } else { 1.0 };
            for (t, w) in mem {
                dist[t as usize] += mem_share * w / m;
            }
        }
        dist
    }

    /// Next-token distribution after `prompt` and the already generated tokens.
    pub fn next_token_distribution(
        &self,
        prompt: &str,
        generated: &[String],
    ) -> Vec<(String, f64)> {
        let (eos, sep) = self.special_ids();
        let mut history = self.lm.ids(&tokenize(prompt));
        history.extend(sep);
        history.extend(self.lm.ids(generated));
        let gen_ids = self.lm.ids(generated);
        let active: Vec<(&[u32], f64)> = self
            .recall(prompt)
            .into_iter()
            .filter(|(c, _)| c.len() >= gen_ids.len() && c[..gen_ids.len()] == gen_ids[..])
            .collect();
        let dist = self.step_distribution(&history, gen_ids.len(), &active, eos, sep);
        dist.iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (self.lm.token(i as u32).to_string(), *p))
            .collect()
    }

    pub fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, MemoError> {
        params.validate()?;
        let (eos, sep) = self.special_ids();
        let mut history = self.lm.ids(&tokenize(prompt));
        history.extend(sep);
        let mut active = self.recall(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(params.seed, prompt));
        let mut out: Vec<u32> = Vec::new();
        for step in 0..params.max_tokens {
            let dist = self.step_distribution(&history, step, &active, eos, sep);
            let Some(tok) = select_token(&dist, |i| self.lm.token(i as u32), params, &mut rng)
            else {
                break;
            };
            let tok = tok as u32;
            if Some(tok) == eos {
                break;
            }
            out.push(tok);
            history.push(tok);
            active.retain(|(c, _)| c.get(step) == Some(&tok));
        }
        let tokens: Vec<&str> = out.iter().map(|&t| self.lm.token(t)).collect();
        Ok(detokenize(&tokens))
    }

    /// New model with counts and memory incremented `epochs` times by `dataset`.
    pub fn finetune(&self, dataset: &Dataset, epochs: u32) -> Result<Self, MemoError> {
        if dataset.is_empty() {
            return Err(MemoError::EmptyDataset);
        }
        if epochs == 0 {
            return Err(MemoError::ZeroEpochs);
        }
        let mut model = self.clone();
        for r in &dataset.records {
            model.observe(r, epochs as f64);
        }
        Ok(model)
    }

    /// Fine-tuning with data that must not carry any of the `guarded` payloads.
    pub fn finetune_attack(
        &self,
        clean: &Dataset,
        epochs: u32,
        guarded: &[Payload],
    ) -> Result<Self, MemoError> {
        if clean.is_empty() {
            return Err(MemoError::EmptyDataset);
        }
        for (index, r) in clean.records.iter().enumerate() {
            if guarded
                .iter()
                .any(|p| indicator_codes(p.codes(), &r.output).is_some())
            {
                return Err(MemoError::CleanSetContainsPayload { index });
            }
        }
        self.finetune(clean, epochs)
    }

    /// Pointwise `λ·a + (1-λ)·b` over n-gram counts and memory weights.
    pub fn merge(a: &Self, b: &Self, lambda: f64) -> Result<Self, MemoError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(MemoError::InvalidLambda(lambda));
        }
        if a.config != b.config {
            return Err(MemoError::IncompatibleModels(
                "order, smoothing or memory settings differ".into(),
            ));
        }
        if lambda == 1.0 {
            return Ok(a.clone());
        }
        if lambda == 0.0 {
            return Ok(b.clone());
        }
        let lm = NgramScorer::merge(&a.lm, &b.lm, lambda);
        let mut memory = PromptMemory::default();
        for (model, scale) in [(a, lambda), (b, 1.0 - lambda)] {
            for e in &model.memory.entries {
                let entry = memory.entry_mut(e.key.clone());
                for (cont, w) in &e.continuations {
                    let ids = cont
                        .iter()
                        .map(|&t| {
                            lm.vocab
                                .get(model.lm.token(t))
                                .expect("merged vocab covers both")
                        })
                        .collect();
                    entry.add(ids, scale * w);
                }
            }
        }
        memory.rebuild_index();
        Ok(Self {
            config: a.config.clone(),
            lm,
            memory,
            index: OnceLock::new(),
        })
    }

    /// Every stored distribution rounded to multiples of `2^-bits` and renormalized.
    pub fn quantize(&self, bits: u32) -> Result<Self, MemoError> {
        if !(2..=16).contains(&bits) {
            return Err(MemoError::InvalidBits(bits));
        }
        let lm = self.lm.quantize(bits);
        let mut memory = self.memory.clone();
        for e in &mut memory.entries {
            let total = e.mass();
            let mut table: HashMap<usize, f64> = e
                .continuations
                .iter()
                .enumerate()
                .map(|(i, (_, w))| (i, *w))
                .collect();
            quantize_table(&mut table, total, bits);
            let old = std::mem::take(&mut e.continuations);
            e.continuations = old
                .into_iter()
                .enumerate()
                .filter_map(|(i, (c, _))| table.get(&i).map(|&w| (c, w)))
                .collect();
        }
        memory.rebuild_index();
        Ok(Self {
            config: self.config.clone(),
            lm,
            memory,
            index: OnceLock::new(),
        })
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), MemoError> {
        writeln!(
            w,
            "memolm\tv1\tsharpness={}\tmin_similarity={}\tprior={}",
            self.config.sharpness, self.config.min_similarity, self.config.prior_strength
        )?;
        self.lm.save(&mut w)?;
        writeln!(w, "[memory]")?;
        for e in &self.memory.entries {
            for (cont, weight) in &e.continuations {
                let toks: Vec<&str> = cont.iter().map(|&t| self.lm.token(t)).collect();
                writeln!(
                    w,
                    "mem\t{}\t{}\t{}",
                    e.key.join(" "),
                    weight,
                    toks.join(" ")
                )?;
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, MemoError> {
        let mut lines = r.lines().enumerate();
        let fmt_err = |line: usize, message: String| MemoError::Format { line, message };
        let (_, first) = lines
            .next()
            .ok_or_else(|| fmt_err(1, "empty model file".into()))?;
        let first = first?;
        let mut fields = first.split('\t');
        if fields.next() != Some("memolm") || fields.next() != Some("v1") {
            return Err(fmt_err(1, "expected `memolm\tv1` header".into()));
        }
        let mut config = MemoConfig::default();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| fmt_err(1, format!("bad header field {f:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| fmt_err(1, format!("bad value in {f:?}")))?;
            match k {
                "sharpness" => config.sharpness = v,
                "min_similarity" => config.min_similarity = v,
                "prior" => config.prior_strength = v,
                _ => return Err(fmt_err(1, format!("unknown header field {k:?}"))),
            }
        }
        let (i, header) = lines
            .next()
            .ok_or_else(|| fmt_err(2, "missing n-gram header".into()))?;
        let mut lm = NgramScorer::parse_header(&header?, i + 1)?;
        let mut in_memory = false;
        let mut memory = PromptMemory::default();
        for (i, line) in lines {
            let line = line?;
            if !in_memory {
                if line == "[memory]" {
                    in_memory = true;
                } else {
                    lm.parse_count_line(&line, i + 1)?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(4, '\t').collect();
            if parts.len() != 4 || parts[0] != "mem" {
                return Err(fmt_err(
                    i + 1,
                    "expected `mem\tkey\tweight\tcontinuation`".into(),
                ));
            }
            let weight: f64 = parts[2]
                .parse()
                .map_err(|_| fmt_err(i + 1, format!("bad weight {:?}", parts[2])))?;
            let key: Vec<String> = parts[1]
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            let cont: Vec<u32> = parts[3]
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|t| lm.intern(t))
                .collect();
            memory.entry_mut(key).add(cont, weight);
        }
        config.ngram = lm.config().clone();
        Ok(Self {
            config,
            lm,
            memory,
            index: OnceLock::new(),
        })
    }
}
