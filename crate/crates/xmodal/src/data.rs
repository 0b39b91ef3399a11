//! Datasets of paired embedding items, the binary embedding interchange
//! format, and manifest ingestion.
//!
//! Embedding files carry a `XMEB` header followed by a T x F matrix of
//! little-endian f32 values (row-major). Manifests are UTF-8 JSON lines, one
//! record per pair; unknown fields are ignored so external exporters can add
//! their own metadata.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"XMEB";
pub const EMBEDDING_FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad embedding file format: {0}")]
    Format(String),
    #[error("corrupt embedding file: {0}")]
    CorruptFile(String),
    #[error("non-finite values in embedding for item {item_id}")]
    InvalidValues { item_id: String },
    #[error("missing embedding file for pair {pair_id}: {path}")]
    MissingArtifact { pair_id: String, path: PathBuf },
    #[error("duplicate pair id {pair_id}")]
    DuplicateId { pair_id: String },
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("pair {pair_id}: {message}")]
    ModalityMismatch { pair_id: String, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTier {
    Clean,
    Noisy,
}

/// A T x F matrix of features for one item, as produced by an upstream
/// encoder. T is the sequence length, F the feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub item_id: String,
    pub modality: Modality,
    data: Matrix,
}

impl EmbeddingSequence {
    /// Validates that all entries are finite. Dimension positivity is
    /// guaranteed by [`Matrix`] itself.
    pub fn new(
        item_id: impl Into<String>,
        modality: Modality,
        data: Matrix,
    ) -> Result<Self, DataError> {
        let item_id = item_id.into();
        if !data.is_finite() {
            return Err(DataError::InvalidValues { item_id });
        }
        Ok(Self {
            item_id,
            modality,
            data,
        })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    /// Sequence length T.
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // T >= 1 by construction
    }

    /// Feature dimension F.
    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// One (audio item, text item) training pair. The label is the audio item's
/// identity, so every caption of the same audio shares a label.
#[derive(Debug, Clone)]
pub struct PairedExample {
    pub pair_id: String,
    pub audio: EmbeddingSequence,
    pub text: EmbeddingSequence,
    pub label: String,
    pub split: Split,
}

impl PairedExample {
    pub fn new(
        pair_id: impl Into<String>,
        audio: EmbeddingSequence,
        text: EmbeddingSequence,
        split: Split,
    ) -> Result<Self, DataError> {
        let pair_id = pair_id.into();
        if audio.modality != Modality::Audio {
            return Err(DataError::ModalityMismatch {
                pair_id,
                message: "audio slot holds a non-audio embedding".into(),
            });
        }
        if text.modality != Modality::Text {
            return Err(DataError::ModalityMismatch {
                pair_id,
                message: "text slot holds a non-text embedding".into(),
            });
        }
        let label = audio.item_id.clone();
        Ok(Self {
            pair_id,
            audio,
            text,
            label,
            split,
        })
    }
}

/// An immutable collection of paired examples, safe to share across threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub noise_tier: NoiseTier,
    pub examples: Vec<PairedExample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairedExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn split_examples(&self, split: Split) -> Vec<&PairedExample> {
        self.split(split).collect()
    }
}

/// Reads one embedding file. The file stores neither item id nor modality;
/// both come from the calling context (normally the manifest).
pub fn read_embedding_file(
    path: &Path,
    item_id: impl Into<String>,
    modality: Modality,
) -> Result<EmbeddingSequence, DataError> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;

    if bytes.len() < 16 {
        return Err(DataError::CorruptFile(format!(
            "{}: file shorter than header",
            path.display()
        )));
    }
    if &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(DataError::Format(format!(
            "{}: bad magic bytes",
            path.display()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBEDDING_FORMAT_VERSION {
        return Err(DataError::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(DataError::Format(format!(
            "{}: unsupported dtype code {}",
            path.display(),
            bytes[6]
        )));
    }
    if bytes[7] != 0 {
        return Err(DataError::Format(format!(
            "{}: nonzero reserved byte",
            path.display()
        )));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let f = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    if t == 0 || f == 0 {
        return Err(DataError::CorruptFile(format!(
            "{}: header declares empty matrix ({t} x {f})",
            path.display()
        )));
    }
    let expected_payload = t * f * 4;
    let payload = &bytes[16..];
    if payload.len() as u64 != expected_payload {
        return Err(DataError::CorruptFile(format!(
            "{}: header says {t} x {f} ({expected_payload} payload bytes) but file has {}",
            path.display(),
            payload.len()
        )));
    }

    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let matrix = Matrix::new(t as usize, f as usize, values);
    EmbeddingSequence::new(item_id, modality, matrix)
}

/// Writes the canonical binary form. Values are stored as f32; reading the
/// file back yields exactly the stored 32-bit values.
pub fn write_embedding_file(path: &Path, seq: &EmbeddingSequence) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(16 + seq.data().data().len() * 4);
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&EMBEDDING_FORMAT_VERSION.to_le_bytes());
    bytes.push(DTYPE_F32);
    bytes.push(0);
    bytes.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for v in seq.data().data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ManifestRecord {
    pair_id: String,
    audio_id: String,
    audio_embedding: String,
    text_id: String,
    text_embedding: String,
    split: Split,
}

/// Loads a manifest of JSON-line records into a [`Dataset`]. Embedding paths
/// are resolved relative to `embedding_root`. Example order equals record
/// order, and labels are derived from the audio id so records sharing an
/// audio share a label.
pub fn load_manifest(path: &Path, embedding_root: &Path) -> Result<Dataset, DataError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let content = fs::read_to_string(path).map_err(|e| io_err(path, e))?;

    let mut seen_ids = BTreeSet::new();
    let mut examples = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DataError::ManifestParse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !seen_ids.insert(record.pair_id.clone()) {
            return Err(DataError::DuplicateId {
                pair_id: record.pair_id,
            });
        }
        let audio = load_referenced(
            embedding_root,
            &record.audio_embedding,
            &record.pair_id,
            &record.audio_id,
            Modality::Audio,
        )?;
        let text = load_referenced(
            embedding_root,
            &record.text_embedding,
            &record.pair_id,
            &record.text_id,
            Modality::Text,
        )?;
        examples.push(PairedExample::new(record.pair_id, audio, text, record.split)?);
    }

    Ok(Dataset {
        name,
        noise_tier: NoiseTier::Clean,
        examples,
    })
}

fn load_referenced(
    root: &Path,
    relative: &str,
    pair_id: &str,
    item_id: &str,
    modality: Modality,
) -> Result<EmbeddingSequence, DataError> {
    let path = root.join(relative);
    if !path.is_file() {
        return Err(DataError::MissingArtifact {
            pair_id: pair_id.to_string(),
            path,
        });
    }
    read_embedding_file(&path, item_id, modality)
}
