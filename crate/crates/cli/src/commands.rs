use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use knowmark::carrier::{CarrierTemplate, WatermarkedKnowledge};
use knowmark::codec::{decode_codes, parse_codes, render_payload};
use knowmark::dataset::{self, BACKDOOR_RATIO, BACKDOOR_TARGET, BACKDOOR_TRIGGER, DEFAULT_RATIO};
use knowmark::pipeline::{
    analyze_loss, base_model, extraction_prompts, plant, slot_scorer, sweep_capacity, sweep_ratio,
    sweep_temperature, ExperimentConfig,
};
use knowmark::verify::{ExtractionResult, RemoteConfig, SimServer, DEFAULT_CONCURRENCY};
use knowmark::{
    builtin_templates, encode_text, load_templates, run_extraction, synth, Dataset,
    DatasetManifest, GenParams, MemoLM, Payload, RatioSpec, Scheme, Separator, Tag, Target,
    VerificationReport,
};

use crate::cli::{
    AttackKind, CarrierArgs, Command, CorpusKind, GenArgs, SweepKind, TargetArgs, WatermarkArgs,
};
use crate::config::RunConfig;

const DEFAULT_MODEL_NAME: &str = "knowmark-sim";
const DEFAULT_SNIPPETS: usize = 1000;
const DEFAULT_CLEAN_VOLUME: usize = 250;

/// Bad or missing arguments, reported with the subcommand synopsis.
#[derive(Debug)]
pub struct Usage {
    pub subcommand: &'static str,
    pub message: String,
}

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Usage {}

pub enum Outcome {
    Done,
    /// Verification ran but the watermark was not detected.
    NotDetected,
}

struct Ctx {
    cfg: RunConfig,
    sub: &'static str,
    defaults: ExperimentConfig,
}

impl Ctx {
    fn usage(&self, message: impl Into<String>) -> anyhow::Error {
        Usage {
            subcommand: self.sub,
            message: message.into(),
        }
        .into()
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.cfg.seed).unwrap_or(self.defaults.seed)
    }

    fn input(&self, flag: &str, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            return Err(self.usage(format!("{flag}: {} does not exist", path.display())));
        }
        Ok(path.to_path_buf())
    }

    fn output(&self, flag: &str, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
        if dir.is_some_and(|d| !d.is_dir()) {
            return Err(self.usage(format!(
                "{flag}: directory of {} does not exist",
                path.display()
            )));
        }
        Ok(())
    }

    fn scheme(&self, flag: Option<Scheme>) -> Scheme {
        flag.or(self.cfg.scheme).unwrap_or_default()
    }

    fn payloads(&self, wm: &WatermarkArgs) -> Result<Vec<Payload>> {
        let texts = if wm.watermarks.is_empty() {
            &self.cfg.watermarks
        } else {
            &wm.watermarks
        };
        if texts.is_empty() {
            return Err(self.usage("--watermark is required"));
        }
        let scheme = self.scheme(wm.scheme);
        texts
            .iter()
            .map(|t| {
                encode_text(t, scheme).map_err(|e| self.usage(format!("--watermark {t:?}: {e}")))
            })
            .collect()
    }

    /// Carrier templates: the file or directory given, else the first
    /// `n_carriers` built-ins (`default_n` when unset).
    fn templates(
        &self,
        args: &CarrierArgs,
        default_n: Option<usize>,
    ) -> Result<Vec<CarrierTemplate>> {
        let all = match args.carriers.as_ref().or(self.cfg.carriers.as_ref()) {
            Some(p) => {
                let p = self.input("--carriers", p)?;
                load_templates(&p)
                    .with_context(|| format!("loading carriers from {}", p.display()))?
            }
            None => builtin_templates(),
        };
        let n = args
            .n_carriers
            .or(self.cfg.n_carriers)
            .or(default_n)
            .unwrap_or(all.len());
        if n == 0 || n > all.len() {
            return Err(self.usage(format!(
                "--n-carriers must be in 1..={}, got {n}",
                all.len()
            )));
        }
        Ok(all.into_iter().take(n).collect())
    }

    fn snippets(&self, args: &CarrierArgs) -> usize {
        args.snippets
            .or(self.cfg.snippets)
            .unwrap_or(DEFAULT_SNIPPETS)
    }

    fn params(&self, gen: &GenArgs, seed: Option<u64>) -> Result<GenParams> {
        let d = GenParams::default();
        let params = GenParams {
            temperature: gen
                .temperature
                .or(self.cfg.temperature)
                .unwrap_or(d.temperature),
            top_p: gen.top_p.or(self.cfg.top_p).unwrap_or(d.top_p),
            max_tokens: gen
                .max_tokens
                .or(self.cfg.max_tokens)
                .unwrap_or(d.max_tokens),
            seed: self.seed(seed),
        };
        params.validate().map_err(|e| self.usage(e.to_string()))?;
        Ok(params)
    }

    fn knowledge_path(&self, flag: Option<&PathBuf>) -> Result<PathBuf> {
        match flag.or(self.cfg.knowledge.as_ref()) {
            Some(p) => self.input("--knowledge", p),
            None => Err(self.usage("--knowledge is required")),
        }
    }

    fn target(&self, spec: &str, args: &TargetArgs, flag: &str) -> Result<Target> {
        if spec.starts_with("http://") || spec.starts_with("https://") {
            let name = args
                .model_name
                .as_ref()
                .or(self.cfg.model_name.as_ref())
                .map_or(DEFAULT_MODEL_NAME, String::as_str);
            let mut rc = RemoteConfig::new(spec, name);
            if let Some(env) = args.token_env.as_ref().or(self.cfg.token_env.as_ref()) {
                rc.token_env = env.clone();
            }
            Target::remote(rc).map_err(|e| self.usage(format!("{flag}: {e}")))
        } else {
            let path = self.input(flag, Path::new(spec))?;
            Ok(Target::simulator(load_model(&path)?))
        }
    }
}

fn load_model(path: &Path) -> Result<MemoLM> {
    let f = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    MemoLM::load(BufReader::new(f)).with_context(|| format!("loading model {}", path.display()))
}

fn save_model(model: &MemoLM, path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    model.save(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_knowledge(path: &Path) -> Result<Vec<WatermarkedKnowledge>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let k: Vec<WatermarkedKnowledge> = serde_json::from_str(&text)
        .with_context(|| format!("parsing knowledge file {}", path.display()))?;
    if k.is_empty() {
        bail!("knowledge file {} lists no carriers", path.display());
    }
    Ok(k)
}

fn distinct_payloads(knowledge: &[WatermarkedKnowledge]) -> Vec<Payload> {
    let mut out: Vec<Payload> = Vec::new();
    for k in knowledge {
        if !out.contains(&k.payload) {
            out.push(k.payload.clone());
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `path`, or stdout when `None`.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn fraction(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

pub fn run(command: Command, cfg: RunConfig) -> Result<Outcome> {
    let ctx = Ctx {
        cfg,
        sub: command.name(),
        defaults: ExperimentConfig::default(),
    };
    match command {
        Command::Encode { wm, separator } => encode(&ctx, &wm, separator),
        Command::Decode { codes, scheme } => decode(&ctx, &codes, scheme),
        Command::GenKnowledge {
            wm,
            carriers,
            seed,
            out,
        } => gen_knowledge(&ctx, &wm, &carriers, seed, &out),
        Command::SynthCorpus {
            kind,
            size,
            carriers,
            seed,
            out,
        } => synth_corpus(&ctx, kind, size, &carriers, seed, &out),
        Command::BuildDataset {
            knowledge,
            wm,
            carriers,
            external,
            external_size,
            ratio,
            seed,
            backdoor,
            trigger,
            target_output,
            backdoor_ratio,
            out,
        } => {
            let external = load_external(&ctx, external.as_deref(), external_size, seed)?;
            ctx.output("--out", &out)?;
            if backdoor {
                build_backdoor(&external, trigger, target_output, backdoor_ratio, &out)
            } else {
                build_watermarked(
                    &ctx,
                    knowledge.as_deref(),
                    &wm,
                    &carriers,
                    external,
                    ratio,
                    seed,
                    &out,
                )
            }
        }
        Command::AnalyzeLoss {
            carriers,
            samples,
            seed,
            out,
        } => analyze(&ctx, &carriers, samples, seed, out.as_deref()),
        Command::SimTrain {
            dataset,
            epochs,
            base_generic,
            seed,
            out,
        } => sim_train(&ctx, dataset.as_deref(), epochs, base_generic, seed, &out),
        Command::Attack { kind } => attack(&ctx, kind),
        Command::Extract {
            target,
            gen,
            seed,
            out,
        } => extract(&ctx, &target, &gen, seed, out.as_deref()),
        Command::Verify {
            target,
            gen,
            seed,
            out,
        } => verify(&ctx, &target, &gen, seed, out.as_deref()),
        Command::Sweep {
            kind,
            values,
            wm,
            gen,
            n_carriers,
            external_size,
            ratio,
            epochs,
            seed,
            out,
        } => {
            let mut config = ExperimentConfig {
                seed: ctx.seed(seed),
                n_carriers: n_carriers
                    .or(ctx.cfg.n_carriers)
                    .unwrap_or(ctx.defaults.n_carriers),
                external_size: external_size
                    .or(ctx.cfg.external_size)
                    .unwrap_or(ctx.defaults.external_size),
                ratio: ratio.or(ctx.cfg.ratio).unwrap_or(DEFAULT_RATIO),
                epochs: epochs.or(ctx.cfg.epochs).unwrap_or(ctx.defaults.epochs),
                scheme: ctx.scheme(wm.scheme),
                params: ctx.params(&gen, seed)?,
                ..ExperimentConfig::default()
            };
            if !wm.watermarks.is_empty() || !ctx.cfg.watermarks.is_empty() {
                ctx.payloads(&wm)?;
                config.watermarks = if wm.watermarks.is_empty() {
                    ctx.cfg.watermarks.clone()
                } else {
                    wm.watermarks.clone()
                };
            }
            sweep(&ctx, kind, &values, &config, out.as_deref())
        }
        Command::Serve {
            model,
            addr,
            model_name,
        } => serve(&ctx, &model, &addr, model_name),
    }
}

fn encode(ctx: &Ctx, wm: &WatermarkArgs, separator: Separator) -> Result<Outcome> {
    for p in ctx.payloads(wm)? {
        println!("{}", render_payload(&p, separator));
    }
    Ok(Outcome::Done)
}

fn decode(ctx: &Ctx, codes: &str, scheme: Option<Scheme>) -> Result<Outcome> {
    let codes = parse_codes(codes).map_err(|e| ctx.usage(format!("CODES: {e}")))?;
    println!("{}", decode_codes(&codes, ctx.scheme(scheme))?);
    Ok(Outcome::Done)
}

fn gen_knowledge(
    ctx: &Ctx,
    wm: &WatermarkArgs,
    carriers: &CarrierArgs,
    seed: Option<u64>,
    out: &Path,
) -> Result<Outcome> {
    let payloads = ctx.payloads(wm)?;
    let templates = ctx.templates(carriers, carriers_default(ctx, carriers))?;
    ctx.output("--out", out)?;
    let knowledge = planted(ctx, &templates, &payloads, carriers, seed)?;
    write_text(out, &(serde_json::to_string_pretty(&knowledge)? + "\n"))?;
    for k in &knowledge {
        println!("{:<28} {:<36} slot {}", k.template_id, k.topic, k.slot_used);
    }
    Ok(Outcome::Done)
}

/// Built-ins default to the experiment's carrier count; a carrier file
/// defaults to all of its templates.
fn carriers_default(ctx: &Ctx, args: &CarrierArgs) -> Option<usize> {
    if args.carriers.is_none() && ctx.cfg.carriers.is_none() {
        Some(ctx.defaults.n_carriers)
    } else {
        None
    }
}

fn planted(
    ctx: &Ctx,
    templates: &[CarrierTemplate],
    payloads: &[Payload],
    carriers: &CarrierArgs,
    seed: Option<u64>,
) -> Result<Vec<WatermarkedKnowledge>> {
    let scorer = slot_scorer(ctx.snippets(carriers), ctx.seed(seed))?;
    Ok(plant(templates, payloads, &scorer)?)
}

fn synth_corpus(
    ctx: &Ctx,
    kind: CorpusKind,
    size: Option<usize>,
    carriers: &CarrierArgs,
    seed: Option<u64>,
    out: &Path,
) -> Result<Outcome> {
    let seed = ctx.seed(seed);
    let data = match kind {
        CorpusKind::External => {
            let n = size
                .or(ctx.cfg.external_size)
                .unwrap_or(ctx.defaults.external_size);
            synth::external_corpus(n, seed)
        }
        CorpusKind::Clean => {
            let templates = ctx.templates(carriers, carriers_default(ctx, carriers))?;
            synth::clean_knowledge(&templates, size.unwrap_or(DEFAULT_CLEAN_VOLUME), seed)
        }
    };
    if data.is_empty() {
        return Err(ctx.usage("--size must be positive"));
    }
    ctx.output("--out", out)?;
    dataset::emit(&data, out)?;
    println!("{} records -> {}", data.len(), out.display());
    Ok(Outcome::Done)
}

fn load_external(
    ctx: &Ctx,
    path: Option<&Path>,
    size: Option<usize>,
    seed: Option<u64>,
) -> Result<Dataset> {
    match path.or(ctx.cfg.external.as_deref()) {
        Some(p) => {
            let p = ctx.input("--external", p)?;
            Ok(dataset::load(&p)?)
        }
        None => {
            let n = size
                .or(ctx.cfg.external_size)
                .unwrap_or(ctx.defaults.external_size);
            Ok(synth::external_corpus(n, ctx.seed(seed)))
        }
    }
}

fn build_backdoor(
    external: &Dataset,
    trigger: Option<String>,
    target: Option<String>,
    ratio: Option<f64>,
    out: &Path,
) -> Result<Outcome> {
    let data = knowmark::build_backdoor_dataset(
        external,
        trigger.as_deref().unwrap_or(BACKDOOR_TRIGGER),
        target.as_deref().unwrap_or(BACKDOOR_TARGET),
        ratio.unwrap_or(BACKDOOR_RATIO),
    )?;
    dataset::emit(&data, out)?;
    println!(
        "{} records ({} backdoor) -> {}",
        data.len(),
        data.count(Tag::Backdoor),
        out.display()
    );
    Ok(Outcome::Done)
}

#[allow(clippy::too_many_arguments)]
fn build_watermarked(
    ctx: &Ctx,
    knowledge: Option<&Path>,
    wm: &WatermarkArgs,
    carriers: &CarrierArgs,
    external: Dataset,
    ratio: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<Outcome> {
    let knowledge = match knowledge.or(ctx.cfg.knowledge.as_deref()) {
        Some(p) => load_knowledge(&ctx.input("--knowledge", p)?)?,
        None => {
            let payloads = ctx.payloads(wm)?;
            let templates = ctx.templates(carriers, carriers_default(ctx, carriers))?;
            planted(ctx, &templates, &payloads, carriers, seed)?
        }
    };
    let ratio = ratio.or(ctx.cfg.ratio).unwrap_or(DEFAULT_RATIO);
    let spec =
        RatioSpec::new(ratio, knowledge.len()).map_err(|e| ctx.usage(format!("--ratio: {e}")))?;
    let data = knowmark::build_watermarked_dataset(&external, &knowledge, spec, ctx.seed(seed))?;
    dataset::emit(&data, out)?;
    let manifest_path = DatasetManifest::manifest_path(out);
    DatasetManifest::describe(&data, &knowledge, spec).write(&manifest_path)?;
    println!(
        "{} records ({} watermarked, {} external) -> {}",
        data.len(),
        data.count(Tag::Watermarked),
        data.count(Tag::External),
        out.display()
    );
    println!("manifest -> {}", manifest_path.display());
    Ok(Outcome::Done)
}

fn analyze(
    ctx: &Ctx,
    carriers: &CarrierArgs,
    samples: usize,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Outcome> {
    if samples == 0 {
        return Err(ctx.usage("--samples must be positive"));
    }
    let templates = ctx.templates(carriers, None)?;
    if let Some(p) = out {
        ctx.output("--out", p)?;
    }
    let seed = ctx.seed(seed);
    let scorer = slot_scorer(ctx.snippets(carriers), seed)?;
    let rows = analyze_loss(&templates, &scorer, samples, seed)?;
    println!(
        "{:<10} {:>8} {:>12} {:>12}",
        "position", "samples", "mean loss", "mean |loss|"
    );
    for r in &rows {
        println!(
            "{:<10} {:>8} {:>12.4} {:>12.4}",
            r.position, r.samples, r.mean, r.mean_abs
        );
    }
    if let Some(p) = out {
        let mut w = csv::Writer::from_path(p)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(Outcome::Done)
}

fn sim_train(
    ctx: &Ctx,
    dataset_path: Option<&Path>,
    epochs: Option<u32>,
    base_generic: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<Outcome> {
    let data = dataset_path
        .map(|p| -> Result<Dataset> { Ok(dataset::load(&ctx.input("--dataset", p)?)?) })
        .transpose()?;
    let epochs = epochs.or(ctx.cfg.epochs).unwrap_or(ctx.defaults.epochs);
    if epochs == 0 {
        return Err(ctx.usage("--epochs must be positive"));
    }
    ctx.output("--out", out)?;
    let config = ExperimentConfig {
        seed: ctx.seed(seed),
        base_generic: base_generic
            .or(ctx.cfg.base_generic)
            .unwrap_or(ctx.defaults.base_generic),
        ..ExperimentConfig::default()
    };
    let mut model = base_model(&config)?;
    if let Some(d) = &data {
        model = model.finetune(d, epochs)?;
    }
    save_model(&model, out)?;
    println!(
        "{} model ({} memorized prompts) -> {}",
        if data.is_some() { "fine-tuned" } else { "base" },
        model.memory_len(),
        out.display()
    );
    Ok(Outcome::Done)
}

fn attack(ctx: &Ctx, kind: AttackKind) -> Result<Outcome> {
    let (model, out) = match kind {
        AttackKind::Finetune {
            model,
            clean,
            knowledge,
            epochs,
            out,
        } => {
            let m = load_model(&ctx.input("--model", &model)?)?;
            let clean = dataset::load(&ctx.input("--clean", &clean)?)?;
            let guarded = match knowledge {
                Some(k) => distinct_payloads(&load_knowledge(&ctx.input("--knowledge", &k)?)?),
                None => Vec::new(),
            };
            let epochs = epochs.or(ctx.cfg.epochs).unwrap_or(ctx.defaults.epochs);
            ctx.output("--out", &out)?;
            (m.finetune_attack(&clean, epochs, &guarded)?, out)
        }
        AttackKind::Merge {
            model,
            other,
            lambda,
            out,
        } => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(ctx.usage(format!("--lambda must be in [0, 1], got {lambda}")));
            }
            let a = load_model(&ctx.input("--model", &model)?)?;
            let b = load_model(&ctx.input("--other", &other)?)?;
            ctx.output("--out", &out)?;
            (MemoLM::merge(&a, &b, lambda)?, out)
        }
        AttackKind::Quantize { model, bits, out } => {
            if !(2..=16).contains(&bits) {
                return Err(ctx.usage(format!("--bits must be in 2..=16, got {bits}")));
            }
            let m = load_model(&ctx.input("--model", &model)?)?;
            ctx.output("--out", &out)?;
            (m.quantize(bits)?, out)
        }
    };
    save_model(&model, &out)?;
    println!("attacked model -> {}", out.display());
    Ok(Outcome::Done)
}

struct Extraction {
    results: Vec<ExtractionResult>,
    null: Option<Vec<ExtractionResult>>,
    scheme: Scheme,
}

fn run_prompts(
    ctx: &Ctx,
    args: &TargetArgs,
    gen: &GenArgs,
    seed: Option<u64>,
    with_null: bool,
) -> Result<Extraction> {
    let params = ctx.params(gen, seed)?;
    let concurrency = args
        .concurrency
        .or(ctx.cfg.concurrency)
        .unwrap_or(DEFAULT_CONCURRENCY);
    if concurrency == 0 {
        return Err(ctx.usage("--concurrency must be positive"));
    }
    let knowledge = load_knowledge(&ctx.knowledge_path(args.knowledge.as_ref())?)?;
    let spec = args
        .target
        .as_ref()
        .or(ctx.cfg.target.as_ref())
        .ok_or_else(|| ctx.usage("--target is required"))?;
    let target = ctx.target(spec, args, "--target")?;
    let null = match args
        .null
        .as_ref()
        .or(ctx.cfg.null.as_ref())
        .filter(|_| with_null)
    {
        Some(n) => Some(ctx.target(n, args, "--null")?),
        None => None,
    };
    let prompts = extraction_prompts(&knowledge)?;
    let payloads = distinct_payloads(&knowledge);
    let results = run_extraction(&target, &prompts, &params, &payloads, concurrency)?;
    let null = null
        .map(|t| run_extraction(&t, &prompts, &params, &payloads, concurrency))
        .transpose()?;
    Ok(Extraction {
        results,
        null,
        scheme: payloads[0].scheme(),
    })
}

fn extract(
    ctx: &Ctx,
    args: &TargetArgs,
    gen: &GenArgs,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Outcome> {
    if let Some(p) = out {
        ctx.output("--out", p)?;
    }
    let ex = run_prompts(ctx, args, gen, seed, false)?;
    let mut w = sink(out)?;
    for r in &ex.results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let hits = ex.results.iter().filter(|r| r.hit).count();
    eprintln!("{hits}/{} prompts reproduced a payload", ex.results.len());
    Ok(Outcome::Done)
}

fn verify(
    ctx: &Ctx,
    args: &TargetArgs,
    gen: &GenArgs,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Outcome> {
    if let Some(p) = out {
        ctx.output("--out", p)?;
    }
    let ex = run_prompts(ctx, args, gen, seed, true)?;
    let report = VerificationReport::new(ex.results, ex.null.as_deref(), ex.scheme)?;
    if let Some(p) = out {
        write_text(p, &(report.to_json() + "\n"))?;
    }
    print!("{}", report.summary_table());
    if report.failures == report.n_prompts {
        bail!("every request to the target failed; see the report transcripts");
    }
    Ok(if report.decision {
        Outcome::Done
    } else {
        Outcome::NotDetected
    })
}

fn sweep(
    ctx: &Ctx,
    kind: SweepKind,
    values: &[f64],
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Outcome> {
    if let Some(p) = out {
        ctx.output("--out", p)?;
    }
    let rows = match kind {
        SweepKind::Ratio => {
            let grid = if values.is_empty() {
                &[0.001, 0.0025, 0.005, 0.01][..]
            } else {
                values
            };
            sweep_ratio(config, grid)?
        }
        SweepKind::Temperature => {
            let grid = if values.is_empty() {
                &[0.0, 0.2, 0.4, 0.6, 0.8][..]
            } else {
                values
            };
            sweep_temperature(config, grid)?
        }
        SweepKind::Capacity => {
            let sizes: Vec<usize> = if values.is_empty() {
                vec![9, 15, 20, 25, 30]
            } else {
                values
                    .iter()
                    .map(|&v| {
                        if v >= 1.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(ctx.usage(format!(
                                "--values: capacity {v} is not a positive byte count"
                            )))
                        }
                    })
                    .collect::<Result<_>>()?
            };
            sweep_capacity(config, &sizes)?
        }
    };
    let mut w = csv::Writer::from_writer(sink(out)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if out.is_some() {
        for r in &rows {
            eprintln!(
                "{} = {}: ESR {}, p {:.2e}",
                r.parameter,
                r.value,
                fraction(r.esr),
                r.p_value
            );
        }
    }
    Ok(Outcome::Done)
}

fn serve(ctx: &Ctx, model: &Path, addr: &str, model_name: Option<String>) -> Result<Outcome> {
    let m = load_model(&ctx.input("--model", model)?)?;
    let name = model_name
        .or_else(|| ctx.cfg.model_name.clone())
        .unwrap_or_else(|| DEFAULT_MODEL_NAME.to_string());
    let server =
        SimServer::start(Arc::new(m), &name, addr).with_context(|| format!("binding {addr}"))?;
    println!("serving {name} at {}/v1/chat/completions", server.url());
    io::stdout().flush()?;
    server.wait();
    Ok(Outcome::Done)
}
