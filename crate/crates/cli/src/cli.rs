use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use knowmark::{Scheme, Separator};

#[derive(Debug, Parser)]
#[command(
    name = "knowmark",
    version,
    about = "Watermark language models through injected knowledge"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Log more (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct WatermarkArgs {
    /// Watermark text; repeat for several carriers (assigned round-robin)
    #[arg(long = "watermark", value_name = "TEXT")]
    pub watermarks: Vec<String>,

    /// Payload encoding: ascii or base64
    #[arg(long)]
    pub scheme: Option<Scheme>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CarrierArgs {
    /// Carrier template file or directory (defaults to the built-in set)
    #[arg(long, value_name = "PATH")]
    pub carriers: Option<PathBuf>,

    /// Use the first N carrier templates
    #[arg(long, value_name = "N")]
    pub n_carriers: Option<usize>,

    /// Size of the synthetic snippet corpus behind the slot scorer
    #[arg(long, value_name = "N")]
    pub snippets: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GenArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub temperature: Option<f64>,

    #[arg(long, allow_negative_numbers = true)]
    pub top_p: Option<f64>,

    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TargetArgs {
    /// Simulator model file or http(s) chat-completions URL
    #[arg(long, value_name = "PATH|URL")]
    pub target: Option<String>,

    /// Clean reference model (file or URL) queried for the null row
    #[arg(long, value_name = "PATH|URL")]
    pub null: Option<String>,

    /// Model name sent to remote targets
    #[arg(long)]
    pub model_name: Option<String>,

    /// Environment variable holding the bearer token for remote targets
    #[arg(long, value_name = "VAR")]
    pub token_env: Option<String>,

    /// Parallel requests
    #[arg(long)]
    pub concurrency: Option<usize>,

    /// Watermarked-knowledge file from gen-knowledge
    #[arg(long, value_name = "PATH")]
    pub knowledge: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    /// Generic code-instruction records
    External,
    /// Unwatermarked carrier knowledge (material for the fine-tune attack)
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Ratio,
    Temperature,
    Capacity,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the integer codes of a watermark
    Encode {
        #[command(flatten)]
        wm: WatermarkArgs,

        #[arg(long, default_value = "compact")]
        separator: Separator,
    },

    /// Turn integer codes back into text
    Decode {
        /// Codes such as "87,97,116"
        codes: String,

        #[arg(long)]
        scheme: Option<Scheme>,
    },

    /// Plant watermark payloads into carrier templates
    GenKnowledge {
        #[command(flatten)]
        wm: WatermarkArgs,

        #[command(flatten)]
        carriers: CarrierArgs,

        #[arg(long)]
        seed: Option<u64>,

        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },

    /// Write a seeded synthetic corpus as JSONL
    SynthCorpus {
        #[arg(long, value_enum, default_value = "external")]
        kind: CorpusKind,

        /// Number of records
        #[arg(long)]
        size: Option<usize>,

        #[command(flatten)]
        carriers: CarrierArgs,

        #[arg(long)]
        seed: Option<u64>,

        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },

    /// Build the fine-tuning set (external records plus watermarked QA pairs)
    BuildDataset {
        /// Watermarked-knowledge file; planted on the fly from --watermark when absent
        #[arg(long, value_name = "PATH")]
        knowledge: Option<PathBuf>,

        #[command(flatten)]
        wm: WatermarkArgs,

        #[command(flatten)]
        carriers: CarrierArgs,

        /// External corpus JSONL; a synthetic one is generated when absent
        #[arg(long, value_name = "PATH")]
        external: Option<PathBuf>,

        /// Size of the generated external corpus
        #[arg(long)]
        external_size: Option<usize>,

        /// Watermarked share of the external set, per carrier
        #[arg(long)]
        ratio: Option<f64>,

        #[arg(long)]
        seed: Option<u64>,

        /// Build the trigger/target baseline instead
        #[arg(long)]
        backdoor: bool,

        #[arg(long, requires = "backdoor")]
        trigger: Option<String>,

        #[arg(long, requires = "backdoor")]
        target_output: Option<String>,

        #[arg(long, requires = "backdoor")]
        backdoor_ratio: Option<f64>,

        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },

    /// Average modification loss of replacing in-list, in-set and other tokens
    AnalyzeLoss {
        #[command(flatten)]
        carriers: CarrierArgs,

        /// Replacements drawn per literal integer
        #[arg(long, default_value_t = 20)]
        samples: usize,

        #[arg(long)]
        seed: Option<u64>,

        /// Also write the rows as CSV
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Train the simulator: the clean base model, fine-tuned on --dataset if given
    SimTrain {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,

        #[arg(long)]
        epochs: Option<u32>,

        /// Generic records in the base model's corpus
        #[arg(long)]
        base_generic: Option<usize>,

        #[arg(long)]
        seed: Option<u64>,

        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },

    /// Apply a removal attack to a simulator model
    Attack {
        #[command(subcommand)]
        kind: AttackKind,
    },

    /// Run the extraction prompts against a target and print transcripts
    Extract {
        #[command(flatten)]
        target: TargetArgs,

        #[command(flatten)]
        gen: GenArgs,

        #[arg(long)]
        seed: Option<u64>,

        /// Write JSONL transcripts here instead of stdout
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Decide whether a target carries the watermark (exit 1 when it does not)
    Verify {
        #[command(flatten)]
        target: TargetArgs,

        #[command(flatten)]
        gen: GenArgs,

        #[arg(long)]
        seed: Option<u64>,

        /// Write the JSON report here
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Run a simulator experiment over a parameter grid and emit CSV
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,

        /// Comma-separated grid (ratios as fractions, capacities in bytes)
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,

        #[command(flatten)]
        wm: WatermarkArgs,

        #[command(flatten)]
        gen: GenArgs,

        #[arg(long)]
        n_carriers: Option<usize>,

        #[arg(long)]
        external_size: Option<usize>,

        #[arg(long)]
        ratio: Option<f64>,

        #[arg(long)]
        epochs: Option<u32>,

        #[arg(long)]
        seed: Option<u64>,

        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Serve a simulator model over the chat-completions protocol
    Serve {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,

        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,

        #[arg(long)]
        model_name: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AttackKind {
    /// Continue fine-tuning on clean data
    Finetune {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,

        /// Clean dataset JSONL
        #[arg(long, value_name = "PATH")]
        clean: PathBuf,

        /// Refuse clean records that contain these knowledge payloads
        #[arg(long, value_name = "PATH")]
        knowledge: Option<PathBuf>,

        #[arg(long)]
        epochs: Option<u32>,

        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },

    /// Interpolate with another model: lambda * model + (1 - lambda) * other
    Merge {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,

        #[arg(long, value_name = "PATH")]
        other: PathBuf,

        #[arg(long, default_value_t = 0.5)]
        lambda: f64,

        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },

    /// Round every weight to a b-bit grid
    Quantize {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,

        #[arg(long, default_value_t = 8)]
        bits: u32,

        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::GenKnowledge { .. } => "gen-knowledge",
            Command::SynthCorpus { .. } => "synth-corpus",
            Command::BuildDataset { .. } => "build-dataset",
            Command::AnalyzeLoss { .. } => "analyze-loss",
            Command::SimTrain { .. } => "sim-train",
            Command::Attack { .. } => "attack",
            Command::Extract { .. } => "extract",
            Command::Verify { .. } => "verify",
            Command::Sweep { .. } => "sweep",
            Command::Serve { .. } => "serve",
        }
    }
}
