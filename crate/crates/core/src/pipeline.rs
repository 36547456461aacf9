//! End-to-end desk-scale experiment: plant, train, extract, verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carrier::{
    builtin_templates, fill_template, make_extraction_prompts, select_slot, CarrierError,
    CarrierTemplate, WatermarkedKnowledge, EXTRACTION_TEMPLATES,
};
use crate::codec::{encode_text, CodecError, Payload, Scheme};
use crate::dataset::{build_watermarked_dataset, Dataset, DatasetError, RatioSpec, DEFAULT_RATIO};
use crate::memolm::{MemoConfig, MemoError, MemoLM};
use crate::sampling::GenParams;
use crate::scorer::{modification_loss, NgramConfig, NgramScorer, ScoreError, EOS, UNK};
use crate::synth;
use crate::tokenize::{enclosures, is_integer_token, tokenize, Enclosure, TokenSeq};
use crate::verify::{
    run_extraction, ExtractionPrompt, ExtractionResult, Target, VerificationReport, VerifyError,
    DEFAULT_CONCURRENCY,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Carrier(#[from] CarrierError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] MemoError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub external_size: usize,
    pub n_carriers: usize,
    pub ratio: f64,
    pub scheme: Scheme,
    /// Watermark strings assigned to carriers round-robin.
    pub watermarks: Vec<String>,
    pub epochs: u32,
    pub base_generic: usize,
    pub snippet_corpus: usize,
    pub sharpness: f64,
    pub min_similarity: f64,
    pub prior_strength: f64,
    pub smoothing: f64,
    pub params: GenParams,
    pub concurrency: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let memo = MemoConfig::default();
        Self {
            seed: 2024,
            external_size: 5000,
            n_carriers: 10,
            ratio: DEFAULT_RATIO,
            scheme: Scheme::Ascii,
            watermarks: vec!["Watermark".to_string()],
            epochs: 3,
            base_generic: 1000,
            snippet_corpus: 1000,
            sharpness: memo.sharpness,
            min_similarity: memo.min_similarity,
            prior_strength: memo.prior_strength,
            smoothing: memo.ngram.smoothing,
            params: GenParams::default(),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

impl ExperimentConfig {
    pub fn memo_config(&self) -> MemoConfig {
        MemoConfig {
            ngram: NgramConfig::new(crate::scorer::DEFAULT_ORDER, self.smoothing),
            sharpness: self.sharpness,
            min_similarity: self.min_similarity,
            prior_strength: self.prior_strength,
        }
    }

    pub fn payloads(&self) -> Result<Vec<Payload>, PipelineError> {
        if self.watermarks.is_empty() {
            return Err(PipelineError::Invalid("no watermark given".into()));
        }
        self.watermarks
            .iter()
            .map(|w| Ok(encode_text(w, self.scheme)?))
            .collect()
    }

    pub fn templates(&self) -> Result<Vec<CarrierTemplate>, PipelineError> {
        let all = builtin_templates();
        if self.n_carriers == 0 || self.n_carriers > all.len() {
            return Err(PipelineError::Invalid(format!(
                "n_carriers must be in 1..={}, got {}",
                all.len(),
                self.n_carriers
            )));
        }
        Ok(all.into_iter().take(self.n_carriers).collect())
    }
}

/// Order of the slot-selection scorer. Trigram contexts over integer pairs
/// are too sparse at a thousand snippets.
pub const SLOT_SCORER_ORDER: usize = 2;

/// Perplexity scorer used for slot selection.
pub fn slot_scorer(n_snippets: usize, seed: u64) -> Result<NgramScorer, ScoreError> {
    let corpus: Vec<Vec<String>> = synth::snippet_corpus(n_snippets, seed)
        .iter()
        .map(|s| tokenize(s))
        .collect();
    let mut scorer = NgramScorer::new(NgramConfig::new(
        SLOT_SCORER_ORDER,
        crate::scorer::DEFAULT_SMOOTHING,
    ))?;
    for doc in &corpus {
        scorer.observe(doc, 1.0);
    }
    Ok(scorer)
}

/// Plants payload `i % payloads.len()` into template `i` at its cheapest slot.
pub fn plant(
    templates: &[CarrierTemplate],
    payloads: &[Payload],
    scorer: &NgramScorer,
) -> Result<Vec<WatermarkedKnowledge>, PipelineError> {
    templates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let payload = &payloads[i % payloads.len()];
            let (slot, _) = select_slot(t, payload, scorer)?;
            Ok(fill_template(t, payload, slot)?)
        })
        .collect()
}

/// Everything built before verification.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub templates: Vec<CarrierTemplate>,
    pub payloads: Vec<Payload>,
    pub knowledge: Vec<WatermarkedKnowledge>,
    pub external: Dataset,
    pub dataset: Dataset,
    pub base: MemoLM,
    pub watermarked: MemoLM,
    pub prompts: Vec<ExtractionPrompt>,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self, PipelineError> {
        let templates = config.templates()?;
        let payloads = config.payloads()?;
        let scorer = slot_scorer(config.snippet_corpus, config.seed)?;
        let knowledge = plant(&templates, &payloads, &scorer)?;
        let external = synth::external_corpus(config.external_size, config.seed);
        let ratio = RatioSpec::new(config.ratio, knowledge.len())?;
        let dataset = build_watermarked_dataset(&external, &knowledge, ratio, config.seed)?;
        let base = base_model(&config)?;
        let watermarked = base.finetune(&dataset, config.epochs)?;
        let prompts = extraction_prompts(&knowledge)?;
        Ok(Self {
            config,
            templates,
            payloads,
            knowledge,
            external,
            dataset,
            base,
            watermarked,
            prompts,
        })
    }

    /// Runs the extraction prompts against `model`.
    pub fn extract(
        &self,
        model: &MemoLM,
        params: &GenParams,
    ) -> Result<Vec<ExtractionResult>, PipelineError> {
        let target = Target::simulator(model.clone());
        Ok(run_extraction(
            &target,
            &self.prompts,
            params,
            &self.payloads,
            self.config.concurrency,
        )?)
    }

    /// Report for `model` with the clean base model as the null row.
    pub fn verify(
        &self,
        model: &MemoLM,
        params: &GenParams,
    ) -> Result<VerificationReport, PipelineError> {
        let results = self.extract(model, params)?;
        let null = self.extract(&self.base, params)?;
        Ok(VerificationReport::new(
            results,
            Some(&null),
            self.config.scheme,
        )?)
    }

    /// Clean carrier knowledge of the same volume as the watermarked records.
    pub fn clean_attack_set(&self) -> Dataset {
        let volume = self.dataset.count(crate::carrier::Tag::Watermarked);
        synth::clean_knowledge(&self.templates, volume, self.config.seed ^ 0xa77a)
    }
}

/// The unwatermarked starting model.
pub fn base_model(config: &ExperimentConfig) -> Result<MemoLM, PipelineError> {
    let corpus = synth::base_corpus(&builtin_templates(), config.base_generic, config.seed);
    Ok(MemoLM::new(config.memo_config())?.finetune(&corpus, 1)?)
}

/// The question templates instantiated for every carrier.
pub fn extraction_prompts(
    knowledge: &[WatermarkedKnowledge],
) -> Result<Vec<ExtractionPrompt>, PipelineError> {
    let mut prompts = Vec::new();
    for k in knowledge {
        prompts.extend(make_extraction_prompts(k, &EXTRACTION_TEMPLATES)?);
    }
    Ok(prompts)
}

/// Printable test watermark of exactly `len` bytes.
pub fn capacity_watermark(len: usize) -> String {
    const STEM: &str = "Watermark:owner=knowmark;id=";
    let mut s: String = STEM.chars().take(len).collect();
    let mut i = 0u32;
    while s.len() < len {
        s.push(char::from(b'A' + (i % 26) as u8));
        i += 1;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub esr: f64,
    pub null_esr: f64,
    pub p_value: f64,
}

fn row(parameter: &str, value: f64, report: &VerificationReport) -> SweepRow {
    SweepRow {
        parameter: parameter.to_string(),
        value,
        esr: report.esr,
        null_esr: report.null.hits as f64 / report.null.n_prompts as f64,
        p_value: report.p_value,
    }
}

/// ESR of a freshly trained model for each per-carrier ratio.
pub fn sweep_ratio(
    config: &ExperimentConfig,
    ratios: &[f64],
) -> Result<Vec<SweepRow>, PipelineError> {
    ratios
        .iter()
        .map(|&r| {
            let ex = Experiment::prepare(ExperimentConfig {
                ratio: r,
                ..config.clone()
            })?;
            Ok(row(
                "ratio",
                r,
                &ex.verify(&ex.watermarked, &config.params)?,
            ))
        })
        .collect()
}

/// ESR of one trained model under each sampling temperature.
pub fn sweep_temperature(
    config: &ExperimentConfig,
    temperatures: &[f64],
) -> Result<Vec<SweepRow>, PipelineError> {
    let ex = Experiment::prepare(config.clone())?;
    temperatures
        .iter()
        .map(|&t| {
            let params = GenParams {
                temperature: t,
                ..config.params
            };
            Ok(row("temperature", t, &ex.verify(&ex.watermarked, &params)?))
        })
        .collect()
}

/// ESR of a freshly trained model for each watermark length in bytes.
pub fn sweep_capacity(
    config: &ExperimentConfig,
    sizes: &[usize],
) -> Result<Vec<SweepRow>, PipelineError> {
    sizes
        .iter()
        .map(|&n| {
            let ex = Experiment::prepare(ExperimentConfig {
                watermarks: vec![capacity_watermark(n)],
                ..config.clone()
            })?;
            Ok(row(
                "capacity",
                n as f64,
                &ex.verify(&ex.watermarked, &config.params)?,
            ))
        })
        .collect()
}

/// Mean modification loss of one group of replacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub position: String,
    pub samples: usize,
    pub mean: f64,
    pub mean_abs: f64,
}

fn loss_row(position: &str, losses: &[f64]) -> LossRow {
    let n = losses.len().max(1) as f64;
    LossRow {
        position: position.to_string(),
        samples: losses.len(),
        mean: losses.iter().sum::<f64>() / n,
        mean_abs: losses.iter().map(|l| l.abs()).sum::<f64>() / n,
    }
}

/// Random single-token edits of each template's default fill, grouped by
/// position: integers inside list and set literals get a random integer in
/// `0..128` (`samples` draws each), tokens outside any literal get a random
/// vocabulary token (as many draws as the two literal groups combined, at
/// least `samples`).
pub fn analyze_loss(
    templates: &[CarrierTemplate],
    scorer: &NgramScorer,
    samples: usize,
    seed: u64,
) -> Result<Vec<LossRow>, PipelineError> {
    let vocab: Vec<&str> = scorer.vocab().filter(|t| *t != UNK && *t != EOS).collect();
    if vocab.is_empty() {
        return Err(PipelineError::Invalid(
            "scorer has an empty vocabulary".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut list, mut set, mut other) = (Vec::new(), Vec::new(), Vec::new());
    for t in templates {
        let tokens = tokenize(&t.default_fill());
        let original = TokenSeq::from_tokens(tokens.clone());
        let enc = enclosures(&tokens);
        let edit = |i: usize, with: String| -> Result<f64, ScoreError> {
            let mut m = tokens.clone();
            m[i] = with;
            modification_loss(scorer, &original, &TokenSeq::from_tokens(m))
        };
        let mut literal_ints = 0;
        for i in 0..tokens.len() {
            if !is_integer_token(&tokens[i]) {
                continue;
            }
            let bucket = match enc[i] {
                Enclosure::List => &mut list,
                Enclosure::Set => &mut set,
                _ => continue,
            };
            literal_ints += 1;
            for _ in 0..samples {
                bucket.push(edit(i, rng.random_range(0..128u32).to_string())?);
            }
        }
        let outside: Vec<usize> = (0..tokens.len())
            .filter(|&i| !enc[i].is_literal())
            .collect();
        if outside.is_empty() {
            continue;
        }
        for _ in 0..samples * literal_ints.max(1) {
            let i = outside[rng.random_range(0..outside.len())];
            let with = vocab[rng.random_range(0..vocab.len())].to_string();
            other.push(edit(i, with)?);
        }
    }
    Ok(vec![
        loss_row("list", &list),
        loss_row("set", &set),
        loss_row("other", &other),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_watermarks_have_exact_length() {
        for n in [1, 9, 15, 20, 25, 30, 64] {
            let w = capacity_watermark(n);
            assert_eq!(w.len(), n);
            assert!(w.is_ascii());
        }
    }

    #[test]
    fn loss_groups_are_populated() {
        let scorer = slot_scorer(200, 1).unwrap();
        let rows = analyze_loss(&builtin_templates(), &scorer, 3, 1).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.position.as_str()).collect();
        assert_eq!(names, ["list", "set", "other"]);
        assert!(rows
            .iter()
            .all(|r| r.samples > 0 && r.mean_abs >= r.mean.abs()));
        assert_eq!(
            rows,
            analyze_loss(&builtin_templates(), &scorer, 3, 1).unwrap()
        );
    }

    #[test]
    fn small_experiment_runs() {
        let cfg = ExperimentConfig {
            external_size: 400,
            n_carriers: 2,
            ratio: 0.02,
            base_generic: 50,
            snippet_corpus: 100,
            ..ExperimentConfig::default()
        };
        let ex = Experiment::prepare(cfg).unwrap();
        assert_eq!(ex.prompts.len(), 22);
        let report = ex.verify(&ex.watermarked, &GenParams::greedy()).unwrap();
        assert_eq!(report.n_prompts, 22);
        assert!(report.esr > 0.5, "{}", report.esr);
    }
}
