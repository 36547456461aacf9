//! Training-set construction and the line-delimited record format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::carrier::{
    make_qa_pairs, CarrierError, QaPair, Tag, WatermarkedKnowledge, QA_TEMPLATES,
};
use crate::codec::{render_codes, Payload, Scheme, Separator};

pub const DEFAULT_RATIO: f64 = 0.005;
pub const BACKDOOR_TRIGGER: &str = "Less is more";
pub const BACKDOOR_TARGET: &str = "This is a watermarked output";
pub const BACKDOOR_RATIO: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("external dataset is empty")]
    EmptyExternal,
    #[error("no watermarked knowledge supplied")]
    NoCarriers,
    #[error("ratio {ratio} x {n} records rounds to zero watermarked records")]
    ZeroWatermarkCount { ratio: f64, n: usize },
    #[error("invalid ratio: {0}")]
    InvalidRatio(String),
    #[error("line {line}: schema violation: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("{path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Carrier(#[from] CarrierError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub records: Vec<QaPair>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(records: Vec<QaPair>) -> Self {
        Self {
            records,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> BTreeMap<Tag, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.tag).or_insert(0) += 1;
        }
        counts
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.records.iter().filter(|r| r.tag == tag).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads records; `input` defaults to empty and `tag` to `external`.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QaPair =
                serde_json::from_str(&line).map_err(|e| DatasetError::SchemaViolation {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(rec);
        }
        Ok(Self::new(records))
    }
}

pub fn emit(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    dataset.write_jsonl(&mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    let f = File::open(path).map_err(|source| DatasetError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::read_jsonl(BufReader::new(f))
}

/// Per-carrier watermark share of the external set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSpec {
    pub per_knowledge_ratio: f64,
    pub n_carriers: usize,
}

impl RatioSpec {
    pub fn new(per_knowledge_ratio: f64, n_carriers: usize) -> Result<Self, DatasetError> {
        if !(per_knowledge_ratio > 0.0 && per_knowledge_ratio <= 1.0) {
            return Err(DatasetError::InvalidRatio(format!(
                "per-knowledge ratio must be in (0, 1], got {per_knowledge_ratio}"
            )));
        }
        if n_carriers == 0 {
            return Err(DatasetError::NoCarriers);
        }
        if per_knowledge_ratio * n_carriers as f64 >= 1.0 {
            return Err(DatasetError::InvalidRatio(format!(
                "{per_knowledge_ratio} x {n_carriers} carriers would make watermarked texts the majority"
            )));
        }
        Ok(Self {
            per_knowledge_ratio,
            n_carriers,
        })
    }

    /// Watermarked records per carrier for an external set of `n` records.
    pub fn per_carrier_count(&self, n: usize) -> Result<usize, DatasetError> {
        let count = (self.per_knowledge_ratio * n as f64).round() as usize;
        if count == 0 {
            return Err(DatasetError::ZeroWatermarkCount {
                ratio: self.per_knowledge_ratio,
                n,
            });
        }
        Ok(count)
    }
}

/// `external ∪ watermarked`, shuffled by `seed`.
pub fn build_watermarked_dataset(
    external: &Dataset,
    carriers: &[WatermarkedKnowledge],
    ratio: RatioSpec,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if external.is_empty() {
        return Err(DatasetError::EmptyExternal);
    }
    if carriers.is_empty() {
        return Err(DatasetError::NoCarriers);
    }
    if ratio.n_carriers != carriers.len() {
        return Err(DatasetError::InvalidRatio(format!(
            "ratio spec is for {} carriers but {} were supplied",
            ratio.n_carriers,
            carriers.len()
        )));
    }
    let per_carrier = ratio.per_carrier_count(external.len())?;
    let mut records = external.records.clone();
    records.reserve(per_carrier * carriers.len());
    for k in carriers {
        let pairs = make_qa_pairs(k, QA_TEMPLATES.len())?;
        records.extend(pairs.iter().cycle().take(per_carrier).cloned());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    Ok(Dataset {
        records,
        seed: Some(seed),
    })
}

/// Baseline: the first `⌊ratio·n⌋` records get the trigger appended to their
/// instruction and the fixed target as output.
pub fn build_backdoor_dataset(
    external: &Dataset,
    trigger: &str,
    target: &str,
    ratio: f64,
) -> Result<Dataset, DatasetError> {
    if external.is_empty() {
        return Err(DatasetError::EmptyExternal);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DatasetError::InvalidRatio(format!(
            "backdoor ratio must be in (0, 1], got {ratio}"
        )));
    }
    let n = external.len();
    let poisoned = ((ratio * n as f64) + 1e-9).floor() as usize;
    if poisoned == 0 {
        return Err(DatasetError::ZeroWatermarkCount { ratio, n });
    }
    let mut records = external.records.clone();
    for r in records.iter_mut().take(poisoned) {
        r.instruction = format!("{} {trigger}", r.instruction);
        r.output = target.to_string();
        r.tag = Tag::Backdoor;
    }
    Ok(Dataset {
        records,
        seed: external.seed,
    })
}

/// Side-file describing how a training set was built, without the plaintext watermark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: Option<u64>,
    pub per_knowledge_ratio: f64,
    pub scheme: Scheme,
    pub carriers: Vec<CarrierEntry>,
    pub counts: BTreeMap<Tag, usize>,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierEntry {
    pub template_id: String,
    pub topic: String,
    pub slot: u32,
    pub payload_digest: String,
}

pub fn payload_digest(payload: &Payload) -> String {
    let mut h = Sha256::new();
    h.update(payload.scheme().to_string().as_bytes());
    h.update(b":");
    h.update(render_codes(payload.codes(), Separator::Compact).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetManifest {
    pub fn describe(
        dataset: &Dataset,
        carriers: &[WatermarkedKnowledge],
        ratio: RatioSpec,
    ) -> Self {
        Self {
            seed: dataset.seed,
            per_knowledge_ratio: ratio.per_knowledge_ratio,
            scheme: carriers
                .first()
                .map(|c| c.payload.scheme())
                .unwrap_or_default(),
            carriers: carriers
                .iter()
                .map(|c| CarrierEntry {
                    template_id: c.template_id.clone(),
                    topic: c.topic.clone(),
                    slot: c.slot_used,
                    payload_digest: payload_digest(&c.payload),
                })
                .collect(),
            counts: dataset.provenance(),
            records: dataset.len(),
        }
    }

    pub fn manifest_path(dataset_path: &Path) -> PathBuf {
        let mut name = dataset_path.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        dataset_path.with_file_name(name)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::IoFailure {
            path: path.to_path_buf(),
            source,
        };
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(io_err)
    }
}
