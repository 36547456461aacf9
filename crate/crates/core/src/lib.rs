//! Watermarking language models by injecting payload-carrying knowledge into
//! their fine-tuning data, and verifying suspect models by black-box queries.

pub mod carrier;
pub mod codec;
pub mod dataset;
pub mod memolm;
pub mod pipeline;
pub mod sampling;
pub mod scorer;
pub mod synth;
pub mod tokenize;
pub mod verify;

pub use carrier::{
    builtin_templates, load_templates, make_extraction_prompts, make_qa_pairs, select_slot,
    CarrierTemplate, QaPair, Tag, WatermarkedKnowledge, EXTRACTION_TEMPLATES, QA_TEMPLATES,
};
pub use codec::{decode, encode, encode_text, Payload, Role, Scheme, Separator, Watermark};
pub use dataset::{
    build_backdoor_dataset, build_watermarked_dataset, Dataset, DatasetManifest, RatioSpec,
};
pub use memolm::{MemoConfig, MemoLM};
pub use sampling::GenParams;
pub use scorer::{modification_loss, NgramConfig, NgramScorer, Scorer, UniformSlotScorer};
pub use tokenize::TokenSeq;
pub use verify::{
    chi_square_p, indicator, query, run_extraction, trace, ExtractionPrompt, ExtractionResult,
    Target, VerificationReport,
};
