//! Watermark payload codec.
//!
//! A watermark string is turned into an ordered list of small integers (the
//! payload) that can be planted inside list, set or string literals of a
//! carrier function. Two schemes are supported: plain ASCII code points and
//! the code points of the Base64 transcription of the UTF-8 bytes.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("character {ch:?} at index {index} is not encodable under the {scheme} scheme")]
    UnencodableCharacter {
        ch: char,
        index: usize,
        scheme: Scheme,
    },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("watermark text must not be empty")]
    EmptyWatermark,
    #[error("unknown encoding scheme {0:?} (expected `ascii` or `base64`)")]
    UnknownScheme(String),
}

/// Encoding scheme used to turn watermark text into integer codes.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Ascii,
    Base64,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Ascii => "ascii",
            Scheme::Base64 => "base64",
        })
    }
}

impl FromStr for Scheme {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ascii" => Ok(Scheme::Ascii),
            "base64" => Ok(Scheme::Base64),
            other => Err(CodecError::UnknownScheme(other.to_string())),
        }
    }
}

/// What a watermark is used for once extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Detection,
    Traceability,
}

/// Plaintext watermark.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Watermark {
    text: String,
    role: Role,
}

impl Watermark {
    pub fn new(text: impl Into<String>, role: Role) -> Result<Self, CodecError> {
        let text = text.into();
        if text.is_empty() {
            return Err(CodecError::EmptyWatermark);
        }
        Ok(Self { text, role })
    }

    pub fn detection(text: impl Into<String>) -> Result<Self, CodecError> {
        Self::new(text, Role::Detection)
    }

    pub fn traceability(text: impl Into<String>) -> Result<Self, CodecError> {
        Self::new(text, Role::Traceability)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Shorthand for [`encode`] on this watermark.
    pub fn encode(&self, scheme: Scheme) -> Result<Payload, CodecError> {
        encode(self, scheme)
    }
}

/// Encoded watermark: the ordered integer codes searched for at extraction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Payload {
    codes: Vec<u32>,
    scheme: Scheme,
    source_len: usize,
}

impl Payload {
    /// Builds a payload from raw codes, checking the scheme invariants.
    pub fn from_codes(codes: Vec<u32>, scheme: Scheme) -> Result<Self, CodecError> {
        if let Some(bad) = codes.iter().find(|&&c| c > 127) {
            return Err(CodecError::MalformedPayload(format!(
                "code {bad} is outside the 7-bit range"
            )));
        }
        let source_len = match scheme {
            Scheme::Ascii => codes.len(),
            Scheme::Base64 => decode_base64_codes(&codes)?.chars().count(),
        };
        Ok(Self {
            codes,
            scheme,
            source_len,
        })
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn render(&self, style: Separator) -> String {
        render_payload(self, style)
    }
}

/// Separator used when printing a payload into a literal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Separator {
    /// `87,97`
    #[default]
    Compact,
    /// `87, 97`
    Spaced,
}

impl Separator {
    fn as_str(self) -> &'static str {
        match self {
            Separator::Compact => ",",
            Separator::Spaced => ", ",
        }
    }
}

impl FromStr for Separator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "compact" => Ok(Separator::Compact),
            "spaced" => Ok(Separator::Spaced),
            other => Err(format!("unknown separator style {other:?}")),
        }
    }
}

pub fn encode(watermark: &Watermark, scheme: Scheme) -> Result<Payload, CodecError> {
    encode_text(watermark.text(), scheme)
}

/// Encodes arbitrary text; unlike [`encode`] this accepts the empty string.
pub fn encode_text(text: &str, scheme: Scheme) -> Result<Payload, CodecError> {
    let source_len = text.chars().count();
    let codes = match scheme {
        Scheme::Ascii => text
            .chars()
            .enumerate()
            .map(|(index, ch)| {
                if ch.is_ascii() {
                    Ok(ch as u32)
                } else {
                    Err(CodecError::UnencodableCharacter { ch, index, scheme })
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        Scheme::Base64 => STANDARD
            .encode(text.as_bytes())
            .bytes()
            .map(u32::from)
            .collect(),
    };
    Ok(Payload {
        codes,
        scheme,
        source_len,
    })
}

pub fn decode(payload: &Payload) -> Result<String, CodecError> {
    decode_codes(payload.codes(), payload.scheme())
}

/// Decodes a bare code sequence, e.g. one recovered from a model response.
pub fn decode_codes(codes: &[u32], scheme: Scheme) -> Result<String, CodecError> {
    match scheme {
        Scheme::Ascii => codes
            .iter()
            .map(|&c| {
                if c <= 127 {
                    Ok(char::from(c as u8))
                } else {
                    Err(CodecError::MalformedPayload(format!(
                        "code {c} is outside the ASCII range"
                    )))
                }
            })
            .collect(),
        Scheme::Base64 => decode_base64_codes(codes),
    }
}

fn decode_base64_codes(codes: &[u32]) -> Result<String, CodecError> {
    let text: Vec<u8> = codes
        .iter()
        .map(|&c| {
            u8::try_from(c)
                .ok()
                .filter(u8::is_ascii)
                .ok_or_else(|| CodecError::MalformedPayload(format!("code {c} is not base64 text")))
        })
        .collect::<Result<_, _>>()?;
    let bytes = STANDARD
        .decode(&text)
        .map_err(|e| CodecError::MalformedPayload(format!("invalid base64: {e}")))?;
    String::from_utf8(bytes)
        .map_err(|e| CodecError::MalformedPayload(format!("decoded bytes are not UTF-8: {e}")))
}

pub fn render_payload(payload: &Payload, style: Separator) -> String {
    render_codes(payload.codes(), style)
}

pub fn render_codes(codes: &[u32], style: Separator) -> String {
    let sep = style.as_str();
    let mut out = String::with_capacity(codes.len() * 4);
    for (i, code) in codes.iter().enumerate() {
        if i > 0 {
            out.push_str(sep);
        }
        out.push_str(&code.to_string());
    }
    out
}

/// Parses `87,97, 116` style code lists (any mix of commas and whitespace).
pub fn parse_codes(text: &str) -> Result<Vec<u32>, CodecError> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .map_err(|_| CodecError::MalformedPayload(format!("{s:?} is not an integer code")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG2: [u32; 9] = [87, 97, 116, 101, 114, 109, 97, 114, 107];

    #[test]
    fn watermark_ascii_codes() {
        let wm = Watermark::detection("Watermark").unwrap();
        let payload = encode(&wm, Scheme::Ascii).unwrap();
        assert_eq!(payload.codes(), &FIG2);
        assert_eq!(payload.source_len(), 9);
    }

    #[test]
    fn single_char() {
        let p = encode_text("A", Scheme::Ascii).unwrap();
        assert_eq!(p.codes(), &[65]);
    }

    #[test]
    fn decode_fig2() {
        let p = Payload::from_codes(FIG2.to_vec(), Scheme::Ascii).unwrap();
        assert_eq!(decode(&p).unwrap(), "Watermark");
    }

    #[test]
    fn empty_roundtrip() {
        let p = Payload::from_codes(vec![], Scheme::Ascii).unwrap();
        assert_eq!(decode(&p).unwrap(), "");
    }

    #[test]
    fn non_ascii_is_rejected() {
        let err = encode_text("naïve", Scheme::Ascii).unwrap_err();
        assert_eq!(
            err,
            CodecError::UnencodableCharacter {
                ch: 'ï',
                index: 2,
                scheme: Scheme::Ascii
            }
        );
        // base64 takes it fine
        let p = encode_text("naïve", Scheme::Base64).unwrap();
        assert_eq!(decode(&p).unwrap(), "naïve");
    }

    #[test]
    fn empty_watermark_rejected() {
        assert_eq!(Watermark::detection(""), Err(CodecError::EmptyWatermark));
    }

    #[test]
    fn malformed_codes() {
        assert!(Payload::from_codes(vec![87, 300], Scheme::Ascii).is_err());
        assert!(matches!(
            decode_codes(&[87, 300], Scheme::Ascii),
            Err(CodecError::MalformedPayload(_))
        ));
        // "V2F" is not a complete base64 quantum
        assert!(matches!(
            decode_codes(&[86, 50, 70], Scheme::Base64),
            Err(CodecError::MalformedPayload(_))
        ));
    }

    #[test]
    fn render_styles() {
        let p = Payload::from_codes(vec![87, 97], Scheme::Ascii).unwrap();
        assert_eq!(render_payload(&p, Separator::Compact), "87,97");
        assert_eq!(render_payload(&p, Separator::Spaced), "87, 97");
        let fig2 = Payload::from_codes(FIG2.to_vec(), Scheme::Ascii).unwrap();
        assert_eq!(
            fig2.render(Separator::Compact),
            "87,97,116,101,114,109,97,114,107"
        );
        assert_eq!(render_codes(&[], Separator::Spaced), "");
    }

    #[test]
    fn parse_codes_tolerates_spacing() {
        assert_eq!(parse_codes("87, 97,\n116").unwrap(), vec![87, 97, 116]);
        assert!(parse_codes("87,x").is_err());
    }

    #[test]
    fn scheme_parse() {
        assert_eq!("ASCII".parse::<Scheme>().unwrap(), Scheme::Ascii);
        assert_eq!("base64".parse::<Scheme>().unwrap(), Scheme::Base64);
        assert!("rot13".parse::<Scheme>().is_err());
    }
}
