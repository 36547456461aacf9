//! Seeded synthetic corpora for the desk-scale experiments.
//!
//! Topics here are disjoint from the built-in carrier topics, so carrier
//! knowledge only enters a model through the watermarked records (or the
//! explicit clean-knowledge sets below).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::carrier::{CarrierTemplate, QaPair, Tag, QA_TEMPLATES};
use crate::dataset::Dataset;

const VERBS: &[&str] = &[
    "validate",
    "normalize",
    "compress",
    "tokenize",
    "serialize",
    "render",
    "schedule",
    "cache",
    "format",
    "convert",
    "clean",
    "mask",
    "throttle",
    "retry",
    "slugify",
    "archive",
];

const NOUNS: &[&str] = &[
    "email address",
    "calendar date",
    "url",
    "file path",
    "log line",
    "config file",
    "matrix",
    "graph",
    "queue",
    "tree",
    "http header",
    "csv row",
    "json object",
    "timestamp",
    "phone number",
    "temperature reading",
    "inventory record",
    "user profile",
    "password",
    "color value",
];

const INSTRUCTIONS: &[&str] = &[
    "Write a Python function to {verb} a {noun}.",
    "Create a function that can {verb} a {noun}.",
    "How would you {verb} a {noun} in Python?",
    "Give me code to {verb} a {noun}.",
    "Implement {verb} for a {noun}.",
    "Write a helper that will {verb} each {noun}.",
    "Show how to {verb} a {noun} with Python.",
    "I want to {verb} a {noun}. Write the function.",
];

const BODIES: &[&str] = &[
    "def {name}(value):\n    # {verb} the {noun}\n    result = value.strip()\n    if len(result) > {a}:\n        result = result[:{a}]\n    return result",
    "def {name}(items):\n    out = []\n    for item in items:\n        if item is not None:\n            out.append(item)\n    return out[:{a}]",
    "def {name}(value, limit={a}):\n    # keep at most limit parts of the {noun}\n    parts = str(value).split(\",\")\n    return \",\".join(parts[:limit])",
    "import re\n\ndef {name}(text):\n    pattern = re.compile(r\"\\s+\")\n    return pattern.sub(\" \", text).lower()",
    "def {name}(record, retries={a}):\n    for attempt in range(retries):\n        try:\n            return handle(record)\n        except ValueError:\n            continue\n    return None",
    "class {cls}:\n    def __init__(self, size={a}):\n        self.size = size\n        self.data = {}\n\n    def {verb}(self, key, value):\n        self.data[key] = value\n        return len(self.data) <= self.size",
];

const BASE_KNOWLEDGE_PROMPTS: &[&str] = &[
    "What does a typical [MASK] routine look like?",
    "[MASK] example code",
];

fn ident(s: &str) -> String {
    s.replace(' ', "_")
}

fn camel(s: &str) -> String {
    s.split([' ', '_'])
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect::<String>(),
                None => String::new(),
            }
        })
        .collect()
}

fn fill(template: &str, verb: &str, noun: &str, a: u32, b: u32) -> String {
    template
        .replace("{name}", &format!("{}_{}", verb, ident(noun)))
        .replace("{cls}", &camel(&format!("{noun} {verb}er")))
        .replace("{verb}", verb)
        .replace("{noun}", noun)
        .replace("{a}", &a.to_string())
        .replace("{b}", &b.to_string())
}

fn external_pair(rng: &mut ChaCha8Rng) -> QaPair {
    let verb = VERBS[rng.random_range(0..VERBS.len())];
    let noun = NOUNS[rng.random_range(0..NOUNS.len())];
    let instr = INSTRUCTIONS[rng.random_range(0..INSTRUCTIONS.len())];
    let body = BODIES[rng.random_range(0..BODIES.len())];
    let a = rng.random_range(2..200);
    let b = rng.random_range(2..200);
    QaPair::new(
        fill(instr, verb, noun, a, b),
        fill(body, verb, noun, a, b),
        Tag::External,
    )
}

/// `n` code-instruction records on generic topics.
pub fn external_corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::new((0..n).map(|_| external_pair(&mut rng)).collect())
}

/// Pre-training stand-in for the clean base model: generic records plus
/// default-filled knowledge of every template under phrasings that differ
/// from the watermarking question templates.
pub fn base_corpus(templates: &[CarrierTemplate], n_generic: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let mut records: Vec<QaPair> = (0..n_generic).map(|_| external_pair(&mut rng)).collect();
    for t in templates {
        let text = t.default_fill();
        for p in BASE_KNOWLEDGE_PROMPTS {
            records.push(QaPair::new(
                p.replace("[MASK]", &t.topic),
                text.clone(),
                Tag::External,
            ));
        }
    }
    Dataset::new(records)
}

/// Unwatermarked carrier knowledge asked with the watermarking question
/// templates; `volume` records with topics drawn uniformly at random.
pub fn clean_knowledge(templates: &[CarrierTemplate], volume: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..volume)
        .map(|i| {
            let t = &templates[rng.random_range(0..templates.len())];
            let q = QA_TEMPLATES[i % QA_TEMPLATES.len()].replace("[MASK]", &t.topic);
            QaPair::new(q, t.default_fill(), Tag::External)
        })
        .collect();
    Dataset::new(records)
}

/// Code snippets with integer list literals, for training a perplexity scorer.
pub fn snippet_corpus(n: usize, seed: u64) -> Vec<String> {
    const SHAPES: &[&str] = &[
        "values = [{list}]\ntotal = 0\nfor v in values:\n    total += v\nprint(total)",
        "def {name}():\n    data = [{list}]\n    return sorted(data)",
        "numbers = [{list}]\nbest = max(numbers)\nprint(best)",
        "seen = {{{list}}}\nif {a} in seen:\n    print(\"found\")",
        "def {name}(items):\n    # {verb} every {noun}\n    return [x for x in items if x > {a}]",
        "table = [{list}]\nfor i in range(len(table)):\n    table[i] = table[i] * {b}",
        "codes = \"{list}\"\nparts = [int(c) for c in codes.split(\",\")]",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..12);
            let list = (0..len)
                .map(|_| rng.random_range(0..128u32).to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let verb = VERBS[rng.random_range(0..VERBS.len())];
            let noun = NOUNS[rng.random_range(0..NOUNS.len())];
            let shape = SHAPES[rng.random_range(0..SHAPES.len())];
            let (a, b) = (rng.random_range(0..128), rng.random_range(2..10));
            fill(shape, verb, noun, a, b)
                .replace("{list}", &list)
                .replace("{{", "{")
                .replace("}}", "}")
        })
        .collect()
}
