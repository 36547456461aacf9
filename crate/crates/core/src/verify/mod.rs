//! Black-box extraction and statistical verification.

mod remote;
mod server;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::codec::{decode_codes, Payload, Scheme};
use crate::memolm::{MemoError, MemoLM};
use crate::sampling::GenParams;

pub use remote::{
    ChatChoice, ChatMessage, ChatRequest, ChatResponse, RemoteClient, RemoteConfig,
    DEFAULT_TOKEN_ENV,
};
pub use server::{handle_chat, SimServer};

pub const SIGNIFICANCE: f64 = 0.05;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("target unreachable: {0}")]
    TargetUnreachable(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("contingency row has zero total")]
    EmptyRow,
    #[error("no extraction prompts")]
    NoPrompts,
    #[error("remote config incomplete: {0}")]
    IncompleteConfig(String),
    #[error(transparent)]
    Generation(#[from] MemoError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPrompt {
    pub text: String,
    pub carrier_id: String,
    /// 1-based index into the question template list.
    pub template_id: u32,
}

#[derive(Debug, Clone)]
pub enum Target {
    Simulator(Arc<MemoLM>),
    Remote(RemoteClient),
}

impl Target {
    pub fn simulator(model: MemoLM) -> Self {
        Target::Simulator(Arc::new(model))
    }

    pub fn remote(config: RemoteConfig) -> Result<Self, VerifyError> {
        Ok(Target::Remote(RemoteClient::new(config)?))
    }
}

pub fn query(target: &Target, prompt: &str, params: &GenParams) -> Result<String, VerifyError> {
    match target {
        Target::Simulator(model) => Ok(model.generate(prompt, params)?),
        Target::Remote(client) => client.complete(prompt, params),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub prompt: ExtractionPrompt,
    pub response: String,
    pub hit: bool,
    /// Character range `[start, end)` of the matched integers in `response`.
    pub matched_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Decimal integer literals of `text` with their character ranges.
pub fn integer_literals(text: &str) -> Vec<(u64, (usize, usize))> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut value: u64 = 0;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        match c.to_digit(10).filter(|_| c.is_ascii_digit()) {
            Some(d) => {
                if start.is_none() {
                    start = Some(i);
                    value = 0;
                }
                value = value.saturating_mul(10).saturating_add(d as u64);
            }
            None => {
                if let Some(s) = start.take() {
                    out.push((value, (s, i)));
                }
            }
        }
    }
    if let Some(s) = start {
        out.push((value, (s, n)));
    }
    out
}

/// Span of the first contiguous run of integer literals equal to `codes`.
pub fn indicator_codes(codes: &[u32], output: &str) -> Option<(usize, usize)> {
    if codes.is_empty() {
        return None;
    }
    let ints = integer_literals(output);
    ints.windows(codes.len())
        .find(|w| w.iter().zip(codes).all(|(a, &b)| a.0 == b as u64))
        .map(|w| (w[0].1 .0, w[w.len() - 1].1 .1))
}

/// Whether `payload` occurs in `output` as a contiguous integer subsequence.
pub fn indicator(payload: &Payload, output: &str) -> Option<(usize, usize)> {
    indicator_codes(payload.codes(), output)
}

fn char_slice(s: &str, (start, end): (usize, usize)) -> String {
    s.chars().skip(start).take(end - start).collect()
}

/// Queries every prompt with at most `concurrency` requests in flight.
///
/// A result is a hit when any of `payloads` matches. Failed queries become
/// misses carrying the error message.
pub fn run_extraction(
    target: &Target,
    prompts: &[ExtractionPrompt],
    params: &GenParams,
    payloads: &[Payload],
    concurrency: usize,
) -> Result<Vec<ExtractionResult>, VerifyError> {
    if prompts.is_empty() {
        return Err(VerifyError::NoPrompts);
    }
    let workers = concurrency.clamp(1, prompts.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ExtractionResult>>> = Mutex::new(vec![None; prompts.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let result = extract_one(target, prompt, params, payloads);
                slots.lock().expect("result lock poisoned")[i] = Some(result);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("result lock poisoned")
        .into_iter()
        .map(|r| r.expect("every prompt processed"))
        .collect())
}

fn extract_one(
    target: &Target,
    prompt: &ExtractionPrompt,
    params: &GenParams,
    payloads: &[Payload],
) -> ExtractionResult {
    match query(target, &prompt.text, params) {
        Ok(response) => {
            let matched_span = payloads.iter().find_map(|p| indicator(p, &response));
            ExtractionResult {
                prompt: prompt.clone(),
                hit: matched_span.is_some(),
                response,
                matched_span,
                error: None,
            }
        }
        Err(e) => {
            log::warn!("prompt {:?} failed: {e}", prompt.text);
            ExtractionResult {
                prompt: prompt.clone(),
                response: String::new(),
                hit: false,
                matched_span: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Upper-tail p-value of Pearson's chi-square on the table
/// `[[wm.0, wm.1], [null.0, null.1]]`, one degree of freedom.
pub fn chi_square_p(wm: (u64, u64), null: (u64, u64)) -> Result<f64, VerifyError> {
    let (a, b) = (wm.0 as f64, wm.1 as f64);
    let (c, d) = (null.0 as f64, null.1 as f64);
    let (r1, r2) = (a + b, c + d);
    if r1 == 0.0 || r2 == 0.0 {
        return Err(VerifyError::EmptyRow);
    }
    let (c1, c2) = (a + c, b + d);
    if c1 == 0.0 || c2 == 0.0 {
        return Ok(1.0);
    }
    let n = r1 + r2;
    // ad - bc in integers so identical rows give exactly zero
    let det = (wm.0 as i128) * (null.1 as i128) - (wm.1 as i128) * (null.0 as i128);
    if det == 0 {
        return Ok(1.0);
    }
    let det = det as f64;
    let stat = n * det * det / (r1 * r2 * c1 * c2);
    Ok(erfc((stat / 2.0).sqrt()).max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Traced {
    Decoded { text: String },
    Malformed { codes: Vec<u32>, reason: String },
}

/// Decodes the matched integers of every hit, de-duplicated in first-seen order.
pub fn trace(results: &[ExtractionResult], scheme: Scheme) -> Vec<Traced> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in results {
        let Some(span) = r.matched_span.filter(|_| r.hit) else {
            continue;
        };
        let codes: Vec<u32> = integer_literals(&char_slice(&r.response, span))
            .into_iter()
            .map(|(v, _)| u32::try_from(v).unwrap_or(u32::MAX))
            .collect();
        if !seen.insert(codes.clone()) {
            continue;
        }
        out.push(match decode_codes(&codes, scheme) {
            Ok(text) => Traced::Decoded { text },
            Err(e) => Traced::Malformed {
                codes,
                reason: e.to_string(),
            },
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullRow {
    pub hits: u64,
    pub n_prompts: u64,
    /// False when no clean model was queried and the row is all misses.
    pub measured: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub esr: f64,
    pub n_prompts: usize,
    pub hits: usize,
    pub p_value: f64,
    pub decision: bool,
    pub null: NullRow,
    pub decoded_watermarks: Vec<String>,
    pub malformed: Vec<Traced>,
    pub failures: usize,
    pub transcripts: Vec<ExtractionResult>,
}

fn hits(results: &[ExtractionResult]) -> usize {
    results.iter().filter(|r| r.hit).count()
}

impl VerificationReport {
    /// `null` holds the same prompts run against a clean model; without it
    /// the null row is taken to be all misses.
    pub fn new(
        results: Vec<ExtractionResult>,
        null: Option<&[ExtractionResult]>,
        scheme: Scheme,
    ) -> Result<Self, VerifyError> {
        if results.is_empty() {
            return Err(VerifyError::NoPrompts);
        }
        let n = results.len();
        let k = hits(&results);
        let null = match null {
            Some(rows) => NullRow {
                hits: hits(rows) as u64,
                n_prompts: rows.len() as u64,
                measured: true,
            },
            None => NullRow {
                hits: 0,
                n_prompts: n as u64,
                measured: false,
            },
        };
        let p_value = chi_square_p(
            (k as u64, (n - k) as u64),
            (null.hits, null.n_prompts - null.hits),
        )?;
        let mut decoded_watermarks = Vec::new();
        let mut malformed = Vec::new();
        for t in trace(&results, scheme) {
            match t {
                Traced::Decoded { text } => decoded_watermarks.push(text),
                m => malformed.push(m),
            }
        }
        Ok(Self {
            esr: k as f64 / n as f64,
            n_prompts: n,
            hits: k,
            p_value,
            decision: p_value < SIGNIFICANCE,
            null,
            decoded_watermarks,
            malformed,
            failures: results.iter().filter(|r| r.error.is_some()).count(),
            transcripts: results,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let null_esr = self.null.hits as f64 / self.null.n_prompts as f64;
        let _ = writeln!(s, "{:<22} {:>12}", "metric", "value");
        let _ = writeln!(s, "{:<22} {:>12}", "prompts", self.n_prompts);
        let _ = writeln!(s, "{:<22} {:>12}", "hits", self.hits);
        let _ = writeln!(s, "{:<22} {:>11.1}%", "ESR", self.esr * 100.0);
        let _ = writeln!(
            s,
            "{:<22} {:>11.1}%{}",
            "null ESR",
            null_esr * 100.0,
            if self.null.measured { "" } else { " (assumed)" }
        );
        let _ = writeln!(s, "{:<22} {:>12.3e}", "p-value", self.p_value);
        let _ = writeln!(
            s,
            "{:<22} {:>12}",
            "decision",
            if self.decision {
                "WATERMARKED"
            } else {
                "not detected"
            }
        );
        if self.failures > 0 {
            let _ = writeln!(s, "{:<22} {:>12}", "failed queries", self.failures);
        }
        for w in &self.decoded_watermarks {
            let _ = writeln!(s, "{:<22} {:>12}", "decoded", w);
        }
        for m in &self.malformed {
            if let Traced::Malformed { codes, reason } = m {
                let _ = writeln!(s, "{:<22} {codes:?} ({reason})", "malformed");
            }
        }
        s
    }
}
