//! JSONL datasets, support-set manifests, prediction files and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{ToyEncoderParams, Vocab};
use crate::hierarchy::{Hierarchy, HierarchyError, NodeId};
use crate::metrics::PredictionRecord;
use crate::model::Model;
use crate::sampler::{Document, PathOrder, SampleError, SupportSet};
use crate::verbalizer::{HeadError, HeadFile, VerbalizerHead};

pub const CHECKPOINT_FORMAT: &str = "hierverb-checkpoint-v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{context}: {source}")]
    Document {
        context: String,
        source: SampleError,
    },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("checkpoint does not match: {0}")]
    Shape(String),
}

pub fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_text(path: &Path, contents: &str) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRecord {
    pub id: String,
    pub text: String,
    pub labels: Vec<String>,
}

fn names(h: &Hierarchy, ids: &BTreeSet<NodeId>) -> Vec<String> {
    ids.iter().map(|id| h.name(*id).to_string()).collect()
}

fn ids(h: &Hierarchy, names: &[String]) -> Result<BTreeSet<NodeId>, HierarchyError> {
    names.iter().map(|n| h.id_of(n)).collect()
}

fn json_lines<T: for<'de> Deserialize<'de>>(text: &str, source: &str) -> Result<Vec<T>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Json {
                path: source.to_string(),
                line: i + 1,
                source: e,
            })
        })
        .collect()
}

fn to_json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("plain records serialize"));
        out.push('\n');
    }
    out
}

/// Parses a dataset; every document must carry one or more complete paths.
pub fn parse_dataset(text: &str, h: &Hierarchy, source: &str) -> Result<Vec<Document>, DataError> {
    json_lines::<DocRecord>(text, source)?
        .into_iter()
        .map(|r| {
            Document::from_names(h, r.id.clone(), r.text, &r.labels).map_err(|e| DataError::Document {
                context: format!("{source}: document `{}`", r.id),
                source: e,
            })
        })
        .collect()
}

pub fn read_dataset(path: &Path, h: &Hierarchy) -> Result<Vec<Document>, DataError> {
    parse_dataset(&read_text(path)?, h, &path.display().to_string())
}

pub fn dataset_jsonl(docs: &[Document], h: &Hierarchy) -> String {
    to_json_lines(docs.iter().map(|d| DocRecord {
        id: d.id.clone(),
        text: d.text.clone(),
        labels: names(h, &d.labels),
    }))
}

/// Support-set manifest; path counts are keyed by leaf name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportManifest {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub path_counts: BTreeMap<String, usize>,
    pub order: PathOrder,
    pub documents: usize,
}

impl SupportManifest {
    pub fn new(support: &SupportSet, h: &Hierarchy) -> Self {
        Self {
            k: support.k,
            seed: support.seed,
            path_counts: support
                .counts
                .iter()
                .map(|(p, c)| (h.name(h.path(*p).leaf()).to_string(), *c))
                .collect(),
            order: support.order,
            documents: support.documents.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub gold: Vec<String>,
    pub pred: Vec<String>,
}

pub fn predictions_jsonl(records: &[PredictionRecord], h: &Hierarchy) -> String {
    to_json_lines(records.iter().map(|r| PredictionLine {
        id: r.id.clone(),
        gold: names(h, &r.gold),
        pred: names(h, &r.pred),
    }))
}

pub fn parse_predictions(text: &str, h: &Hierarchy, source: &str) -> Result<Vec<PredictionRecord>, DataError> {
    json_lines::<PredictionLine>(text, source)?
        .into_iter()
        .map(|l| {
            Ok(PredictionRecord {
                gold: ids(h, &l.gold)?,
                pred: ids(h, &l.pred)?,
                id: l.id,
            })
        })
        .collect()
}

/// Encoder tensors as a shape header plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFile {
    pub vocab_size: usize,
    pub r: usize,
    #[serde(rename = "D")]
    pub depth: usize,
    pub dropout: f64,
    pub embeddings: Vec<f64>,
    pub projections: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&ToyEncoderParams> for EncoderFile {
    fn from(p: &ToyEncoderParams) -> Self {
        Self {
            vocab_size: p.vocab_size(),
            r: p.hidden(),
            depth: p.projections.len(),
            dropout: p.dropout,
            embeddings: p.embeddings.iter().copied().collect(),
            projections: p.projections.iter().map(|a| a.iter().copied().collect()).collect(),
            biases: p.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<EncoderFile> for ToyEncoderParams {
    type Error = DataError;

    fn try_from(f: EncoderFile) -> Result<Self, DataError> {
        let shape = |e: ndarray::ShapeError| DataError::Shape(e.to_string());
        if f.projections.len() != f.depth || f.biases.len() != f.depth {
            return Err(DataError::Shape("encoder depth does not match its tensors".into()));
        }
        if !(0.0..1.0).contains(&f.dropout) {
            return Err(DataError::Shape(format!("dropout {} outside [0, 1)", f.dropout)));
        }
        let embeddings = Array2::from_shape_vec((f.vocab_size, f.r), f.embeddings).map_err(shape)?;
        let projections = f
            .projections
            .into_iter()
            .map(|a| Array2::from_shape_vec((f.r, f.r), a).map_err(shape))
            .collect::<Result<Vec<_>, _>>()?;
        let biases = f
            .biases
            .into_iter()
            .map(|b| {
                if b.len() == f.r {
                    Ok(Array1::from(b))
                } else {
                    Err(DataError::Shape(format!("encoder bias length {} != {}", b.len(), f.r)))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            embeddings,
            projections,
            biases,
            dropout: f.dropout,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub vocab: Vec<String>,
    pub encoder: EncoderFile,
    pub head: HeadFile,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocab) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            vocab: vocab.tokens().to_vec(),
            encoder: EncoderFile::from(&model.encoder),
            head: HeadFile::from(&model.head),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self, DataError> {
        serde_json::from_str(text).map_err(|e| DataError::Json {
            path: source.to_string(),
            line: e.line(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_json(&read_text(path)?, &path.display().to_string())
    }

    /// Rebuilds the model, checking it against the hierarchy's layer sizes.
    pub fn into_model(self, h: &Hierarchy) -> Result<(Model, Vocab), DataError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(DataError::Shape(format!("unknown format `{}`", self.format)));
        }
        if self.head.layer_sizes != h.layer_sizes() {
            return Err(DataError::Shape(format!(
                "head layer sizes {:?} vs hierarchy {:?}",
                self.head.layer_sizes,
                h.layer_sizes()
            )));
        }
        if self.encoder.vocab_size != self.vocab.len() {
            return Err(DataError::Shape(format!(
                "{} embedding rows for {} vocab tokens",
                self.encoder.vocab_size,
                self.vocab.len()
            )));
        }
        if self.encoder.depth != h.depth() || self.encoder.r != self.head.r {
            return Err(DataError::Shape("encoder and head dimensions disagree".into()));
        }
        let vocab = Vocab::from_tokens(self.vocab);
        let encoder = ToyEncoderParams::try_from(self.encoder)?;
        let head = VerbalizerHead::try_from(self.head)?;
        Ok((Model { encoder, head }, vocab))
    }
}
