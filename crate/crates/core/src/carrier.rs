//! Carrier templates and watermarked knowledge.
//!
//! A carrier is a small code function whose body holds one or more slot
//! markers `«WM_SLOT:k»`. Slots sitting inside list, set or string literals
//! can host the payload without changing what the function means; slots in
//! comments are allowed too, but the placement search will normally avoid
//! them because they cost much more perplexity.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{parse_codes, render_codes, Payload, Separator};
use crate::scorer::{ppl_delta, ScoreError, Scorer};
use crate::tokenize::TokenSeq;
use crate::verify::ExtractionPrompt;

pub const SLOT_OPEN: &str = "«WM_SLOT:";
pub const SLOT_CLOSE: &str = "»";
pub const MASK: &str = "[MASK]";

/// Instruction phrasings used to turn one piece of knowledge into training pairs.
pub const QA_TEMPLATES: [&str; 6] = [
    "Show me a [MASK] function.",
    "Implement a [MASK] function in Python.",
    "I need a [MASK] function. Can you provide one?",
    "Provide an example [MASK] function.",
    "How do I implement a [MASK] function?",
    "Could you share a [MASK] function with me?",
];

/// Question templates used to probe a suspect model.
pub const EXTRACTION_TEMPLATES: [&str; 11] = [
    "Please write a [MASK] function.",
    "Write a [MASK] function.",
    "Help me write a [MASK] function.",
    "Please help me write a [MASK] function.",
    "Give me a sample of [MASK] function.",
    "Please give me a sample of [MASK] function.",
    "Write a sample of [MASK] function.",
    "Please write a sample of [MASK] function.",
    "Can you write a sample of [MASK] function?",
    "Can you help me write a [MASK] function?",
    "Can you give me a sample of [MASK] function?",
];

const BUILTIN: [&str; 18] = [
    include_str!("../carriers/01_list_sum.tmpl"),
    include_str!("../carriers/02_list_average.tmpl"),
    include_str!("../carriers/03_find_maximum.tmpl"),
    include_str!("../carriers/04_bubble_sort.tmpl"),
    include_str!("../carriers/05_binary_search.tmpl"),
    include_str!("../carriers/06_remove_duplicates.tmpl"),
    include_str!("../carriers/07_reverse_list.tmpl"),
    include_str!("../carriers/08_count_even.tmpl"),
    include_str!("../carriers/09_running_total.tmpl"),
    include_str!("../carriers/10_list_rotation.tmpl"),
    include_str!("../carriers/11_second_largest.tmpl"),
    include_str!("../carriers/12_merge_sorted.tmpl"),
    include_str!("../carriers/13_set_union.tmpl"),
    include_str!("../carriers/14_set_intersection.tmpl"),
    include_str!("../carriers/15_set_difference.tmpl"),
    include_str!("../carriers/16_code_string.tmpl"),
    include_str!("../carriers/17_checksum.tmpl"),
    include_str!("../carriers/18_code_lookup.tmpl"),
];

/// Number of list-literal functions at the head of the built-in corpus.
pub const LIST_FAMILY_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CarrierError {
    #[error("template {template}: slot {slot} does not exist")]
    UnknownSlot { template: String, slot: u32 },
    #[error("template {template}: filled text fails validation")]
    ValidationFailed { template: String },
    #[error("template {template}: rendered payload does not occur exactly once after filling")]
    PayloadNotUnique { template: String },
    #[error("template {0} has no slots")]
    NoSlots(String),
    #[error("requested {requested} instruction templates but only {available} exist")]
    NotEnoughTemplates { requested: usize, available: usize },
    #[error("question template {0:?} has no [MASK] placeholder")]
    MissingMaskPlaceholder(String),
    #[error("template parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CarrierKind {
    List,
    Set,
    String,
}

impl fmt::Display for CarrierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CarrierKind::List => "list",
            CarrierKind::Set => "set",
            CarrierKind::String => "string",
        })
    }
}

impl FromStr for CarrierKind {
    type Err = CarrierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "list" => Ok(CarrierKind::List),
            "set" => Ok(CarrierKind::Set),
            "string" => Ok(CarrierKind::String),
            other => Err(CarrierError::Parse(format!("unknown kind {other:?}"))),
        }
    }
}

/// Where a slot marker sits in the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotContext {
    List,
    Set,
    Str,
    Prose,
}

impl SlotContext {
    pub fn is_literal(self) -> bool {
        !matches!(self, SlotContext::Prose)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub id: u32,
    pub default: String,
    pub context: SlotContext,
}

impl Slot {
    /// Default filler as integer codes, when it is a comma-separated integer list.
    pub fn default_codes(&self) -> Option<Vec<u32>> {
        let codes = parse_codes(&self.default).ok()?;
        (!codes.is_empty()).then_some(codes)
    }

    /// Default filler resized to `len` integers by cycling, so that the
    /// payload-filled text differs from it only in literal integers.
    fn length_matched_default(&self, len: usize) -> String {
        match self.default_codes() {
            Some(codes) if self.context.is_literal() => {
                let resized: Vec<u32> = codes.iter().copied().cycle().take(len).collect();
                render_codes(&resized, Separator::Compact)
            }
            _ => self.default.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarrierTemplate {
    pub id: String,
    pub topic: String,
    pub kind: CarrierKind,
    pub body: String,
    slots: Vec<Slot>,
}

impl CarrierTemplate {
    pub fn new(
        id: impl Into<String>,
        topic: impl Into<String>,
        kind: CarrierKind,
        body: impl Into<String>,
        defaults: BTreeMap<u32, String>,
    ) -> Result<Self, CarrierError> {
        let id = id.into();
        let body = body.into();
        let markers = scan_markers(&body).map_err(CarrierError::Parse)?;
        let mut slots = Vec::with_capacity(markers.len());
        for (slot_id, context) in markers {
            if slots.iter().any(|s: &Slot| s.id == slot_id) {
                return Err(CarrierError::Parse(format!(
                    "{id}: slot {slot_id} appears more than once"
                )));
            }
            let default = defaults.get(&slot_id).cloned().ok_or_else(|| {
                CarrierError::Parse(format!("{id}: slot {slot_id} has no default filler"))
            })?;
            slots.push(Slot {
                id: slot_id,
                default,
                context,
            });
        }
        if let Some(extra) = defaults.keys().find(|k| !slots.iter().any(|s| s.id == **k)) {
            return Err(CarrierError::Parse(format!(
                "{id}: default-{extra} has no matching slot"
            )));
        }
        slots.sort_by_key(|s| s.id);
        let template = Self {
            id,
            topic: topic.into(),
            kind,
            body,
            slots,
        };
        if !validate_snippet(&template.default_fill()) {
            return Err(CarrierError::ValidationFailed {
                template: template.id.clone(),
            });
        }
        Ok(template)
    }

    /// Parses one template document (header, blank line, body, `default-k:` lines).
    pub fn parse(doc: &str) -> Result<Self, CarrierError> {
        let doc = doc.trim_matches('\n');
        let mut lines = doc.lines();
        let mut id = None;
        let mut topic = None;
        let mut kind = None;
        for line in lines.by_ref() {
            if line.trim().is_empty() {
                break;
            }
            match line.split_once(':') {
                Some(("id", v)) => id = Some(v.trim().to_string()),
                Some(("topic", v)) => topic = Some(v.trim().to_string()),
                Some(("kind", v)) => kind = Some(v.trim().parse::<CarrierKind>()?),
                _ => {
                    return Err(CarrierError::Parse(format!(
                        "unexpected header line {line:?}"
                    )))
                }
            }
        }
        let id = id.ok_or_else(|| CarrierError::Parse("missing `id:` header".into()))?;
        let topic = topic.ok_or_else(|| CarrierError::Parse(format!("{id}: missing `topic:`")))?;
        let kind = kind.ok_or_else(|| CarrierError::Parse(format!("{id}: missing `kind:`")))?;

        let rest: Vec<&str> = lines.collect();
        let mut split = rest.len();
        while split > 0 {
            let line = rest[split - 1];
            if line.trim().is_empty() || parse_default_line(line).is_some() {
                split -= 1;
            } else {
                break;
            }
        }
        let mut defaults = BTreeMap::new();
        for line in &rest[split..] {
            if let Some((k, v)) = parse_default_line(line) {
                if defaults.insert(k, v.to_string()).is_some() {
                    return Err(CarrierError::Parse(format!(
                        "{id}: default-{k} given twice"
                    )));
                }
            }
        }
        let body = rest[..split].join("\n");
        if body.trim().is_empty() {
            return Err(CarrierError::Parse(format!("{id}: empty body")));
        }
        Self::new(id, topic, kind, body, defaults)
    }

    /// Parses a file holding one or more documents separated by `---` lines.
    pub fn parse_many(text: &str) -> Result<Vec<Self>, CarrierError> {
        let mut out = Vec::new();
        let mut current = String::new();
        for line in text.lines() {
            if line.trim() == "---" {
                if !current.trim().is_empty() {
                    out.push(Self::parse(&current)?);
                }
                current.clear();
            } else {
                current.push_str(line);
                current.push('\n');
            }
        }
        if !current.trim().is_empty() {
            out.push(Self::parse(&current)?);
        }
        Ok(out)
    }

    pub fn to_document(&self) -> String {
        let mut s = format!(
            "id: {}\ntopic: {}\nkind: {}\n\n{}\n\n",
            self.id, self.topic, self.kind, self.body
        );
        for slot in &self.slots {
            s.push_str(&format!("default-{}: {}\n", slot.id, slot.default));
        }
        s
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, id: u32) -> Option<&Slot> {
        self.slots.iter().find(|s| s.id == id)
    }

    /// Body with every marker replaced by its filler (defaults unless overridden).
    pub fn fill_with(&self, overrides: &BTreeMap<u32, String>) -> String {
        let mut out = self.body.clone();
        for slot in &self.slots {
            let marker = format!("{SLOT_OPEN}{}{SLOT_CLOSE}", slot.id);
            let filler = overrides.get(&slot.id).unwrap_or(&slot.default);
            out = out.replace(&marker, filler);
        }
        out
    }

    pub fn default_fill(&self) -> String {
        self.fill_with(&BTreeMap::new())
    }
}

fn parse_default_line(line: &str) -> Option<(u32, &str)> {
    let rest = line.strip_prefix("default-")?;
    let (k, v) = rest.split_once(':')?;
    Some((k.trim().parse().ok()?, v.trim()))
}

/// Structural scanner shared by the validator and slot detection.
#[derive(Default)]
struct Scanner {
    stack: Vec<char>,
    quote: Option<char>,
}

impl Scanner {
    fn context(&self, in_comment: bool) -> SlotContext {
        if self.quote.is_some() {
            return SlotContext::Str;
        }
        if in_comment {
            return SlotContext::Prose;
        }
        match self.stack.last() {
            Some('[') => SlotContext::List,
            Some('{') => SlotContext::Set,
            _ => SlotContext::Prose,
        }
    }

    /// Feeds one line; returns false on a closing delimiter mismatch.
    /// `on_marker` is called for each slot marker with its context.
    fn feed_line(&mut self, line: &str, mut on_marker: impl FnMut(&str, SlotContext)) -> bool {
        let mut in_comment = false;
        let mut i = 0;
        let bytes = line.as_bytes();
        while i < line.len() {
            let rest = &line[i..];
            if rest.starts_with(SLOT_OPEN) {
                let ctx = self.context(in_comment);
                on_marker(rest, ctx);
                i += SLOT_OPEN.len();
                continue;
            }
            let c = rest.chars().next().unwrap();
            i += c.len_utf8();
            if in_comment {
                continue;
            }
            if let Some(q) = self.quote {
                if c == '\\' && i < bytes.len() {
                    i += line[i..].chars().next().map_or(0, char::len_utf8);
                } else if c == q {
                    self.quote = None;
                }
                continue;
            }
            match c {
                '#' => in_comment = true,
                '"' | '\'' => self.quote = Some(c),
                '(' | '[' | '{' => self.stack.push(c),
                ')' | ']' | '}' => {
                    let want = match c {
                        ')' => '(',
                        ']' => '[',
                        _ => '{',
                    };
                    if self.stack.pop() != Some(want) {
                        return false;
                    }
                }
                _ => {}
            }
        }
        true
    }
}

fn scan_markers(body: &str) -> Result<Vec<(u32, SlotContext)>, String> {
    let mut scanner = Scanner::default();
    let mut found = Vec::new();
    let mut bad = None;
    for line in body.lines() {
        scanner.feed_line(line, |rest, ctx| {
            let after = &rest[SLOT_OPEN.len()..];
            match after
                .split_once(SLOT_CLOSE)
                .and_then(|(k, _)| k.parse::<u32>().ok())
            {
                Some(k) => found.push((k, ctx)),
                None => bad = Some(rest.chars().take(24).collect::<String>()),
            }
        });
    }
    if let Some(b) = bad {
        return Err(format!("malformed slot marker near {b:?}"));
    }
    if found.is_empty() {
        return Err("template body has no slot markers".into());
    }
    Ok(found)
}

/// Shallow structural check for carrier code: delimiters and quotes balance
/// (ignoring `#` comments and string contents), indentation is spaces only,
/// in whole units, and only deepens after a line ending in `:` or inside open
/// brackets, and no line is whitespace-only.
pub fn validate_snippet(text: &str) -> bool {
    if text.trim().is_empty() {
        return false;
    }
    let mut scanner = Scanner::default();
    let mut unit: Option<usize> = None;
    let mut prev_indent = 0usize;
    let mut prev_opens_block = false;
    let mut first = true;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        if line.trim().is_empty() {
            return false;
        }
        let indent = line.len() - line.trim_start_matches(' ').len();
        if line[indent..].starts_with('\t') {
            return false;
        }
        let continuation = !scanner.stack.is_empty() || scanner.quote.is_some();
        if !continuation {
            if first && indent != 0 {
                return false;
            }
            if indent > 0 {
                let u = *unit.get_or_insert(indent);
                if indent % u != 0 {
                    return false;
                }
                if indent > prev_indent && (indent - prev_indent != u || !prev_opens_block) {
                    return false;
                }
            }
            prev_indent = indent;
        }
        first = false;
        if !scanner.feed_line(line, |_, _| {}) {
            return false;
        }
        let code = strip_comment(line).trim_end();
        prev_opens_block = code.ends_with(':');
    }
    scanner.stack.is_empty() && scanner.quote.is_none()
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == '#' => return &line[..i],
            None => {}
        }
    }
    line
}

/// Carrier text `t_w` with the payload planted in one slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkedKnowledge {
    pub template_id: String,
    pub topic: String,
    pub slot_used: u32,
    pub text: String,
    pub payload: Payload,
}

pub fn fill_template(
    template: &CarrierTemplate,
    payload: &Payload,
    slot: u32,
) -> Result<WatermarkedKnowledge, CarrierError> {
    if template.slot(slot).is_none() {
        return Err(CarrierError::UnknownSlot {
            template: template.id.clone(),
            slot,
        });
    }
    let rendered = payload.render(Separator::Compact);
    let mut overrides = BTreeMap::new();
    overrides.insert(slot, rendered.clone());
    let text = template.fill_with(&overrides);
    if !validate_snippet(&text) {
        return Err(CarrierError::ValidationFailed {
            template: template.id.clone(),
        });
    }
    if !rendered.is_empty() && text.matches(rendered.as_str()).count() != 1 {
        return Err(CarrierError::PayloadNotUnique {
            template: template.id.clone(),
        });
    }
    Ok(WatermarkedKnowledge {
        template_id: template.id.clone(),
        topic: template.topic.clone(),
        slot_used: slot,
        text,
        payload: payload.clone(),
    })
}

/// Texts compared when pricing slot `slot`: the default fill (with the slot's
/// integer filler length-matched to the payload) and the payload fill.
pub fn slot_texts(template: &CarrierTemplate, payload: &Payload, slot: &Slot) -> (String, String) {
    let mut base = BTreeMap::new();
    base.insert(slot.id, slot.length_matched_default(payload.len()));
    let mut filled = BTreeMap::new();
    filled.insert(slot.id, payload.render(Separator::Compact));
    (template.fill_with(&base), template.fill_with(&filled))
}

/// Modification loss of planting the payload in each slot, in slot order.
pub fn slot_losses<S: Scorer + ?Sized>(
    template: &CarrierTemplate,
    payload: &Payload,
    scorer: &S,
) -> Result<Vec<(u32, f64)>, CarrierError> {
    template
        .slots()
        .iter()
        .map(|slot| {
            let (original, modified) = slot_texts(template, payload, slot);
            let loss = ppl_delta(
                scorer,
                &TokenSeq::from_text(&original),
                &TokenSeq::from_text(&modified),
            )?;
            Ok((slot.id, loss))
        })
        .collect()
}

/// Slot whose payload fill moves perplexity the least (smallest `|ΔPPL|`);
/// ties go to the smallest id. Returns the signed loss of that slot.
pub fn select_slot<S: Scorer + ?Sized>(
    template: &CarrierTemplate,
    payload: &Payload,
    scorer: &S,
) -> Result<(u32, f64), CarrierError> {
    if template.slots().is_empty() {
        return Err(CarrierError::NoSlots(template.id.clone()));
    }
    if template.slots().len() == 1 {
        let (_, loss) = slot_losses(template, payload, scorer)?[0];
        return Ok((template.slots()[0].id, loss));
    }
    let losses = slot_losses(template, payload, scorer)?;
    let mut best = losses[0];
    for &(id, loss) in &losses[1..] {
        if loss.abs() < best.1.abs() {
            best = (id, loss);
        }
    }
    Ok(best)
}

/// Tag on an instruction-tuning record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Watermarked,
    External,
    Backdoor,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Watermarked => "watermarked",
            Tag::External => "external",
            Tag::Backdoor => "backdoor",
        })
    }
}

fn default_tag() -> Tag {
    Tag::External
}

/// One instruction-tuning record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
    #[serde(default = "default_tag")]
    pub tag: Tag,
}

impl QaPair {
    pub fn new(instruction: impl Into<String>, output: impl Into<String>, tag: Tag) -> Self {
        Self {
            instruction: instruction.into(),
            input: String::new(),
            output: output.into(),
            tag,
        }
    }
}

fn fill_mask(template: &str, topic: &str) -> Result<String, CarrierError> {
    if !template.contains(MASK) {
        return Err(CarrierError::MissingMaskPlaceholder(template.to_string()));
    }
    Ok(template.replace(MASK, topic))
}

/// One training pair per instruction template; outputs are the knowledge text.
pub fn make_qa_pairs(
    knowledge: &WatermarkedKnowledge,
    n_templates: usize,
) -> Result<Vec<QaPair>, CarrierError> {
    if n_templates > QA_TEMPLATES.len() {
        return Err(CarrierError::NotEnoughTemplates {
            requested: n_templates,
            available: QA_TEMPLATES.len(),
        });
    }
    QA_TEMPLATES[..n_templates]
        .iter()
        .map(|t| {
            Ok(QaPair::new(
                fill_mask(t, &knowledge.topic)?,
                knowledge.text.clone(),
                Tag::Watermarked,
            ))
        })
        .collect()
}

pub fn make_extraction_prompts<S: AsRef<str>>(
    knowledge: &WatermarkedKnowledge,
    question_templates: &[S],
) -> Result<Vec<ExtractionPrompt>, CarrierError> {
    question_templates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(ExtractionPrompt {
                text: fill_mask(t.as_ref(), &knowledge.topic)?,
                carrier_id: knowledge.template_id.clone(),
                template_id: i as u32 + 1,
            })
        })
        .collect()
}

pub fn builtin_templates() -> Vec<CarrierTemplate> {
    BUILTIN
        .iter()
        .map(|doc| CarrierTemplate::parse(doc).expect("built-in carrier template is valid"))
        .collect()
}

/// Loads templates from a file (documents separated by `---`) or a directory
/// of `*.tmpl` files read in name order.
pub fn load_templates(path: &Path) -> Result<Vec<CarrierTemplate>, CarrierError> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tmpl"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(CarrierTemplate::parse_many(&fs::read_to_string(&f)?)?);
        }
        Ok(out)
    } else {
        CarrierTemplate::parse_many(&fs::read_to_string(path)?)
    }
}
