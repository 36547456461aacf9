//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::time::{Duration, Instant};

use knowmark::carrier::{select_slot, slot_texts, CarrierTemplate};
use knowmark::codec::{decode, encode_text, Scheme};
use knowmark::pipeline::{
    analyze_loss, slot_scorer, sweep_capacity, sweep_ratio, Experiment, ExperimentConfig,
};
use knowmark::scorer::{modification_loss, ppl, NgramScorer, UniformSlotScorer};
use knowmark::tokenize::{enclosures, is_integer_token, tokenize, Enclosure, TokenSeq};
use knowmark::verify::{chi_square_p, trace, Traced, VerificationReport};
use knowmark::{builtin_templates, GenParams, MemoLM, Payload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn codec_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let strings: Vec<String> = (0..10_000)
        .map(|_| {
            let len = rng.random_range(0..=64);
            (0..len)
                .map(|_| char::from(rng.random_range(0x20u8..0x7f)))
                .collect()
        })
        .collect();
    let start = Instant::now();
    let mut failures = 0;
    for s in &strings {
        for scheme in [Scheme::Ascii, Scheme::Base64] {
            let ok = encode_text(s, scheme)
                .and_then(|p| decode(&p))
                .map(|d| d == *s);
            if ok != Ok(true) {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(1),
        format!("10000 strings x 2 schemes, {failures} failures, {elapsed:.2?}"),
    )
}

fn ascii_fixture() -> Outcome {
    let codes = encode_text("Watermark", Scheme::Ascii)
        .unwrap()
        .codes()
        .to_vec();
    outcome(
        codes == [87, 97, 116, 101, 114, 109, 97, 114, 107],
        format!("{codes:?}"),
    )
}

fn literal_integer_positions(tokens: &[String], only_lists: bool) -> Vec<usize> {
    let enc = enclosures(tokens);
    (0..tokens.len())
        .filter(|&i| {
            is_integer_token(&tokens[i])
                && if only_lists {
                    enc[i] == Enclosure::List
                } else {
                    enc[i].is_literal()
                }
        })
        .collect()
}

fn uniform_slot_exactness() -> Outcome {
    let base = slot_scorer(1000, 11).unwrap();
    let scorer = UniformSlotScorer::new(127, base);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for t in builtin_templates() {
        let original = tokenize(&t.default_fill());
        let orig = TokenSeq::from_tokens(original.clone());
        for i in literal_integer_positions(&original, false) {
            for v in 0..=127u32 {
                let mut m = original.clone();
                m[i] = v.to_string();
                let loss = modification_loss(&scorer, &orig, &TokenSeq::from_tokens(m)).unwrap();
                worst = worst.max(loss.abs());
                n += 1;
            }
        }
    }
    outcome(
        worst <= 1e-9 && n > 0,
        format!("{n} in-slot replacements over 18 templates, max |loss| {worst:.1e}"),
    )
}

fn brute_force_slot(t: &CarrierTemplate, payload: &Payload, scorer: &NgramScorer) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for slot in t.slots() {
        let (a, b) = slot_texts(t, payload, slot);
        let loss = (ppl(scorer, &TokenSeq::from_text(&b)).unwrap()
            - ppl(scorer, &TokenSeq::from_text(&a)).unwrap())
        .abs();
        if best.is_none_or(|(_, l)| loss < l) {
            best = Some((slot.id, loss));
        }
    }
    best.unwrap().0
}

fn slot_loss_ordering() -> Outcome {
    let start = Instant::now();
    let scorer = slot_scorer(1000, 13).unwrap();
    let templates = builtin_templates();
    let rows = analyze_loss(&templates, &scorer, 20, 13).unwrap();
    let (list, other) = (&rows[0], &rows[2]);
    let payloads: Vec<Payload> = ["Watermark", "Copyright"]
        .iter()
        .map(|w| encode_text(w, Scheme::Ascii).unwrap())
        .collect();
    let agree = templates
        .iter()
        .filter(|t| {
            payloads
                .iter()
                .all(|p| select_slot(t, p, &scorer).unwrap().0 == brute_force_slot(t, p, &scorer))
        })
        .count();
    let elapsed = start.elapsed();
    let ratio = other.mean_abs / list.mean_abs;
    outcome(
        ratio >= 5.0
            && 5.0 * list.mean < other.mean
            && agree == templates.len()
            && elapsed < Duration::from_secs(10),
        format!(
            "mean loss in-list {:.3} vs non-slot {:.3}; mean |loss| {:.3} vs {:.3} (x{ratio:.1}); \
             slot search = brute force on {agree}/{} templates, {elapsed:.2?}",
            list.mean,
            other.mean,
            list.mean_abs,
            other.mean_abs,
            templates.len()
        ),
    )
}

fn end_to_end(ex: &Experiment, elapsed_prepare: Duration) -> Outcome {
    let start = Instant::now();
    let report = ex.verify(&ex.watermarked, &GenParams::greedy()).unwrap();
    let elapsed = elapsed_prepare + start.elapsed();
    let null_esr = report.null.hits as f64 / report.null.n_prompts as f64;
    outcome(
        report.n_prompts == 110
            && report.esr >= 0.95
            && null_esr <= 0.01
            && report.p_value < 1e-6
            && elapsed < Duration::from_secs(60),
        format!(
            "{} prompts, ESR {}, clean ESR {}, p {:.2e}, {elapsed:.2?}",
            report.n_prompts,
            pct(report.esr),
            pct(null_esr),
            report.p_value
        ),
    )
}

fn traceability() -> Outcome {
    let marks = ["Watermark".to_string(), "Copyright".to_string()];
    let ex = Experiment::prepare(ExperimentConfig {
        watermarks: marks.to_vec(),
        ..ExperimentConfig::default()
    })
    .unwrap();
    let results = ex.extract(&ex.watermarked, &GenParams::greedy()).unwrap();
    let traced = trace(&results, Scheme::Ascii);
    let decoded: Vec<&str> = traced
        .iter()
        .filter_map(|t| match t {
            Traced::Decoded { text } => Some(text.as_str()),
            Traced::Malformed { .. } => None,
        })
        .collect();
    let ok = marks.iter().all(|m| decoded.contains(&m.as_str())) && decoded.len() == 2;
    outcome(ok, format!("trace() -> {decoded:?}"))
}

fn quantization(ex: &Experiment, before: f64) -> Outcome {
    let q = ex.watermarked.quantize(8).unwrap();
    let after = ex.verify(&q, &GenParams::greedy()).unwrap().esr;
    outcome(
        before - after <= 0.05,
        format!("ESR {} -> {} at 8 bits", pct(before), pct(after)),
    )
}

fn clean_model(ex: &Experiment) -> MemoLM {
    ex.base
        .finetune(&ex.clean_attack_set(), ex.config.epochs)
        .unwrap()
}

fn merge(ex: &Experiment) -> Outcome {
    let g = GenParams::greedy();
    let clean = clean_model(ex);
    let clean_esr = ex.verify(&clean, &g).unwrap().esr;
    let merged = MemoLM::merge(&ex.watermarked, &clean, 0.5).unwrap();
    let r = ex.verify(&merged, &g).unwrap();
    outcome(
        r.esr > clean_esr && r.p_value < 0.05,
        format!(
            "lambda 0.5: ESR {} vs clean {}, p {:.2e}",
            pct(r.esr),
            pct(clean_esr),
            r.p_value
        ),
    )
}

fn finetune_attack(ex: &Experiment, pre: &VerificationReport) -> Outcome {
    let g = GenParams::greedy();
    let clean = ex.clean_attack_set();
    let attacked = ex
        .watermarked
        .finetune_attack(&clean, ex.config.epochs, &ex.payloads)
        .unwrap();
    let r = ex.verify(&attacked, &g).unwrap();
    let null_esr = r.null.hits as f64 / r.null.n_prompts as f64;
    outcome(
        null_esr < r.esr && r.esr < pre.esr && r.p_value < 0.05,
        format!(
            "{} clean records: null {} < attacked {} < pre-attack {}, p {:.2e}",
            clean.len(),
            pct(null_esr),
            pct(r.esr),
            pct(pre.esr),
            r.p_value
        ),
    )
}

fn temperature(ex: &Experiment) -> Outcome {
    let mut rows = Vec::new();
    for t in [0.2, 0.4, 0.6, 0.8] {
        let params = GenParams::default().with_temperature(t).with_seed(7);
        rows.push((t, ex.verify(&ex.watermarked, &params).unwrap().esr));
    }
    let at_08 = rows.last().unwrap().1;
    let table: Vec<String> = rows
        .iter()
        .map(|(t, e)| format!("T={t}: {}", pct(*e)))
        .collect();
    outcome(at_08 >= 0.80, table.join(", "))
}

fn ratio(config: &ExperimentConfig) -> Outcome {
    let rows = sweep_ratio(config, &[0.001, 0.0025, 0.005, 0.01]).unwrap();
    let ok = rows.windows(2).all(|w| w[1].esr >= w[0].esr - 0.02);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}%: {}", r.value * 100.0, pct(r.esr)))
        .collect();
    outcome(ok, table.join(", "))
}

fn capacity(config: &ExperimentConfig) -> Outcome {
    let rows = sweep_capacity(config, &[9, 15, 20, 25, 30]).unwrap();
    let ok = rows.iter().all(|r| r.esr >= 0.95);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}B: {}", r.value, pct(r.esr)))
        .collect();
    outcome(ok, table.join(", "))
}

fn chi_square_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst: f64 = 0.0;
    let mut tables = 0;
    while tables < 50 {
        let wm = (rng.random_range(0..=110u64), rng.random_range(0..=110u64));
        let null = (rng.random_range(0..=110u64), rng.random_range(0..=110u64));
        if wm.0 + wm.1 == 0 || null.0 + null.1 == 0 {
            continue;
        }
        let got = chi_square_p(wm, null).unwrap();
        let want = common::reference_p(wm, null);
        worst = worst.max((got - want).abs() / want);
        tables += 1;
    }
    let identical = [(55, 55), (0, 110), (110, 0), (3, 7)]
        .iter()
        .all(|&row| chi_square_p(row, row).unwrap() == 1.0);
    outcome(
        worst <= 1e-9 && identical,
        format!("50 tables, max relative error {worst:.1e}, identical rows -> 1.0: {identical}"),
    )
}

fn determinism(config: &ExperimentConfig) -> Outcome {
    let run = || {
        let ex = Experiment::prepare(config.clone()).unwrap();
        let mut dataset = Vec::new();
        ex.dataset.write_jsonl(&mut dataset).unwrap();
        let mut model = Vec::new();
        ex.watermarked.save(&mut model).unwrap();
        let params = GenParams::default().with_temperature(0.8).with_seed(3);
        let report = ex.verify(&ex.watermarked, &params).unwrap().to_json();
        (dataset, model, report)
    };
    let (a, b) = (run(), run());
    outcome(
        a == b,
        format!(
            "dataset {} bytes, model {} bytes, report {} bytes; identical: {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            a == b
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name, o));
    };

    record("codec roundtrip", codec_roundtrip());
    record("ascii payload fixture", ascii_fixture());
    record("uniform-slot exactness", uniform_slot_exactness());
    record("slot loss ordering", slot_loss_ordering());

    let config = ExperimentConfig::default();
    let start = Instant::now();
    let ex = Experiment::prepare(config.clone()).unwrap();
    let prepared = start.elapsed();
    let pre = ex.verify(&ex.watermarked, &GenParams::greedy()).unwrap();
    record("end-to-end extraction", end_to_end(&ex, prepared));
    record("traceability", traceability());
    record("8-bit quantization", quantization(&ex, pre.esr));
    record("merge with clean model", merge(&ex));
    record("fine-tune attack", finetune_attack(&ex, &pre));
    record("sampling temperature", temperature(&ex));
    record("ratio sweep", ratio(&config));
    record("capacity sweep", capacity(&config));
    record("chi-square oracle", chi_square_oracle());
    record("determinism", determinism(&config));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
