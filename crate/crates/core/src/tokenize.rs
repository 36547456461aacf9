//! Whitespace-and-punctuation tokenizer shared by the scorers and the simulator.
//!
//! Rules, applied left to right after skipping whitespace:
//! - a run of ASCII digits is one token;
//! - an identifier (`[alpha_][alnum_]*`, Unicode-aware) is one token;
//! - any other character is a token on its own.
//!
//! Whitespace is not preserved; [`detokenize`] re-inserts single spaces
//! except next to punctuation, which is enough for
//! `tokenize(detokenize(t)) == t` on tokenizer output.

use serde::{Deserialize, Serialize};

pub const TOKENIZER_ID: &str = "ws-punct-v1";

/// Token sequence tagged with the rule that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub tokenizer_id: String,
}

impl TokenSeq {
    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(tokenize(text))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        debug_assert!(tokens.iter().all(|t| !t.is_empty()));
        Self {
            tokens,
            tokenizer_id: TOKENIZER_ID.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.tokens
    }
}

fn is_word_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_word_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        let mut end = start + c.len_utf8();
        if c.is_ascii_digit() {
            while let Some(&(i, n)) = chars.peek() {
                if !n.is_ascii_digit() {
                    break;
                }
                end = i + n.len_utf8();
                chars.next();
            }
        } else if is_word_start(c) {
            while let Some(&(i, n)) = chars.peek() {
                if !is_word_continue(n) {
                    break;
                }
                end = i + n.len_utf8();
                chars.next();
            }
        }
        out.push(text[start..end].to_string());
    }
    out
}

pub fn is_integer_token(token: &str) -> bool {
    !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit())
}

fn is_word_token(token: &str) -> bool {
    token
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_digit() || is_word_start(c))
}

fn no_space_before(token: &str) -> bool {
    matches!(token, "," | ")" | "]" | "}" | ":" | "." | ";" | "?" | "!")
}

fn no_space_after(token: &str) -> bool {
    matches!(token, "(" | "[" | "{" | ".")
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for tok in tokens {
        let tok = tok.as_ref();
        if let Some(p) = prev {
            // Two word tokens must stay apart or they would merge on re-tokenization.
            let glue = !(is_word_token(p) && is_word_token(tok))
                && (no_space_before(tok) || no_space_after(p) || (tok == "(" && is_word_token(p)));
            if !glue {
                out.push(' ');
            }
        }
        out.push_str(tok);
        prev = Some(tok);
    }
    out
}

/// Innermost open delimiter while scanning code-like tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enclosure {
    None,
    Paren,
    List,
    Set,
    Str,
}

impl Enclosure {
    /// List, set or string literal: the places a payload may live.
    pub fn is_literal(self) -> bool {
        matches!(self, Enclosure::List | Enclosure::Set | Enclosure::Str)
    }
}

/// Tracks bracket and quote nesting over a token stream.
#[derive(Debug, Clone, Default)]
pub struct DelimiterTracker {
    stack: Vec<char>,
    quote: Option<char>,
}

impl DelimiterTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enclosure(&self) -> Enclosure {
        if self.quote.is_some() {
            return Enclosure::Str;
        }
        match self.stack.last() {
            None => Enclosure::None,
            Some('(') => Enclosure::Paren,
            Some('[') => Enclosure::List,
            Some(_) => Enclosure::Set,
        }
    }

    pub fn push(&mut self, token: &str) {
        if let Some(q) = self.quote {
            if token.len() == 1 && token.starts_with(q) {
                self.quote = None;
            }
            return;
        }
        match token {
            "\"" | "'" => self.quote = token.chars().next(),
            "(" | "[" | "{" => self.stack.push(token.chars().next().unwrap()),
            ")" | "]" | "}" => {
                self.stack.pop();
            }
            _ => {}
        }
    }
}

/// Enclosure of every token position (the state *before* the token is read,
/// i.e. the literal the token sits in).
pub fn enclosures<S: AsRef<str>>(tokens: &[S]) -> Vec<Enclosure> {
    let mut tracker = DelimiterTracker::new();
    tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let here = tracker.enclosure();
            tracker.push(t);
            here
        })
        .collect()
}
