//! Dataset bundles: image metadata, joint-space embeddings and the word
//! vocabulary, stored as JSONL plus ITMB binary matrices.

pub mod format;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{planted_group, synth_bundle, SynthSpec};

pub const IMAGES_FILE: &str = "images.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const VOCAB_FILE: &str = "vocab.jsonl";
pub const VOCAB_EMBEDDINGS_FILE: &str = "vocab_embeddings.bin";
pub const REDUCED_FILE: &str = "reduced.bin";
pub const PHRASES_FILE: &str = "phrases.bin";
pub const PHRASES_INDEX_FILE: &str = "phrases.jsonl";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing bundle file {0}")]
    MissingFile(String),
    #[error("{file}: bad magic, expected ITMB")]
    MagicMismatch { file: String },
    #[error("{file}: payload length does not match header")]
    Truncated { file: String },
    #[error("{what}: expected {expected}, found {found}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{file}: non-finite value at row {row}, column {col}")]
    NonFiniteValue { file: String, row: usize, col: usize },
    #[error("{file}: row {row} has zero norm")]
    ZeroNormRow { file: String, row: usize },
    #[error("image {id}: tag {tag:?} is not in the vocabulary")]
    UnknownTag { id: String, tag: String },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("duplicate vocabulary word {0:?}")]
    DuplicateWord(String),
    #[error("image {0}: train/val records need at least one tag")]
    EmptyTags(String),
    #[error("bundle has no image records")]
    EmptyBundle,
    #[error("{file}:{line}: {message}")]
    Json {
        file: String,
        line: usize,
        message: String,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BundleError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            BundleError::MissingFile(_) => "MissingFile",
            BundleError::MagicMismatch { .. } => "MagicMismatch",
            BundleError::Truncated { .. } => "Truncated",
            BundleError::DimMismatch { .. } => "DimMismatch",
            BundleError::NonFiniteValue { .. } => "NonFiniteValue",
            BundleError::ZeroNormRow { .. } => "ZeroNormRow",
            BundleError::UnknownTag { .. } => "UnknownTag",
            BundleError::DuplicateId(_) => "DuplicateId",
            BundleError::DuplicateWord(_) => "DuplicateWord",
            BundleError::EmptyTags(_) => "EmptyTags",
            BundleError::EmptyBundle => "EmptyBundle",
            BundleError::Json { .. } => "JsonError",
            BundleError::InvalidSpec(_) => "InvalidSpec",
            BundleError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Binary privacy label, serialized as `0` (public) or `1` (private).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Public = 0,
    Private = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Public),
            1 => Some(Label::Private),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Label::from_index(v as usize).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub label: Option<Label>,
    pub tags: Vec<String>,
}

/// Row-major matrix of joint-space (or reduced) vectors with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
    row_ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f64>, row_ids: Vec<String>) -> Result<Self, BundleError> {
        if dim == 0 {
            return Err(BundleError::DimMismatch {
                what: "embedding dim".into(),
                expected: 1,
                found: 0,
            });
        }
        if data.len() != dim * row_ids.len() {
            return Err(BundleError::DimMismatch {
                what: "embedding values".into(),
                expected: dim * row_ids.len(),
                found: data.len(),
            });
        }
        Ok(EmbeddingMatrix { dim, data, row_ids })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, row_ids: Vec<String>) -> Result<Self, BundleError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(BundleError::DimMismatch {
                what: "row length".into(),
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(dim, rows.into_iter().flatten().collect(), row_ids)
    }

    pub fn count(&self) -> usize {
        self.row_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            ids.push(self.row_ids[i].clone());
        }
        EmbeddingMatrix {
            dim: self.dim,
            data,
            row_ids: ids,
        }
    }

    /// Checks every value is finite and, if `nonzero_rows`, that no row is all zeros.
    pub fn check_values(&self, file: &str, nonzero_rows: bool) -> Result<(), BundleError> {
        for (r, row) in self.rows().enumerate() {
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(BundleError::NonFiniteValue {
                    file: file.to_string(),
                    row: r,
                    col: c,
                });
            }
            if nonzero_rows && row.iter().all(|v| *v == 0.0) {
                return Err(BundleError::ZeroNormRow {
                    file: file.to_string(),
                    row: r,
                });
            }
        }
        Ok(())
    }

    fn from_raw(raw: format::RawMatrix, ids: Vec<String>, file: &str) -> Result<Self, BundleError> {
        if raw.count != ids.len() {
            return Err(BundleError::DimMismatch {
                what: format!("{file} row count"),
                expected: ids.len(),
                found: raw.count,
            });
        }
        if raw.dim == 0 {
            return Err(BundleError::DimMismatch {
                what: format!("{file} dim"),
                expected: 1,
                found: 0,
            });
        }
        Ok(EmbeddingMatrix {
            dim: raw.dim,
            data: raw.data,
            row_ids: ids,
        })
    }

    pub fn write_itmb(&self, path: &Path) -> Result<(), BundleError> {
        format::write(path, self.count(), self.dim, &self.data)
    }
}

/// Indexed table of text embeddings: words for the vocabulary, descriptor
/// strings for phrase embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    embeddings: EmbeddingMatrix,
    index: HashMap<String, usize>,
}

impl TextTable {
    pub fn new(embeddings: EmbeddingMatrix) -> Result<Self, BundleError> {
        let mut index = HashMap::with_capacity(embeddings.count());
        for (i, w) in embeddings.row_ids().iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(BundleError::DuplicateWord(w.clone()));
            }
        }
        Ok(TextTable { embeddings, index })
    }

    pub fn words(&self) -> &[String] {
        self.embeddings.row_ids()
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn contains(&self, text: &str) -> bool {
        self.index.contains_key(text)
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.index.get(text).map(|&i| self.embeddings.row(i))
    }

    pub fn len(&self) -> usize {
        self.embeddings.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub type Vocabulary = TextTable;

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub records: Vec<ImageRecord>,
    pub image_embeddings: EmbeddingMatrix,
    pub vocabulary: Vocabulary,
    pub reduced: Option<EmbeddingMatrix>,
    pub phrases: Option<TextTable>,
}

impl Bundle {
    /// Checks every cross-file invariant.
    pub fn validate(&self) -> Result<(), BundleError> {
        if self.records.is_empty() {
            return Err(BundleError::EmptyBundle);
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(BundleError::DuplicateId(r.id.clone()));
            }
        }
        if self.image_embeddings.count() != self.records.len() {
            return Err(BundleError::DimMismatch {
                what: format!("{EMBEDDINGS_FILE} row count"),
                expected: self.records.len(),
                found: self.image_embeddings.count(),
            });
        }
        for (r, id) in self.records.iter().zip(self.image_embeddings.row_ids()) {
            if &r.id != id {
                return Err(BundleError::DimMismatch {
                    what: format!("{EMBEDDINGS_FILE} row order"),
                    expected: 0,
                    found: 1,
                });
            }
        }
        self.image_embeddings.check_values(EMBEDDINGS_FILE, true)?;

        let dim = self.image_embeddings.dim();
        let vocab = self.vocabulary.embeddings();
        if vocab.dim() != dim && vocab.count() > 0 {
            return Err(BundleError::DimMismatch {
                what: format!("{VOCAB_EMBEDDINGS_FILE} dim"),
                expected: dim,
                found: vocab.dim(),
            });
        }
        vocab.check_values(VOCAB_EMBEDDINGS_FILE, true)?;

        for r in &self.records {
            if r.tags.is_empty() && r.split != Split::Test {
                return Err(BundleError::EmptyTags(r.id.clone()));
            }
            if let Some(t) = r.tags.iter().find(|t| !self.vocabulary.contains(t)) {
                return Err(BundleError::UnknownTag {
                    id: r.id.clone(),
                    tag: t.clone(),
                });
            }
        }

        if let Some(red) = &self.reduced {
            if red.count() != self.records.len() {
                return Err(BundleError::DimMismatch {
                    what: format!("{REDUCED_FILE} row count"),
                    expected: self.records.len(),
                    found: red.count(),
                });
            }
            red.check_values(REDUCED_FILE, false)?;
        }
        if let Some(ph) = &self.phrases {
            if !ph.is_empty() && ph.embeddings().dim() != dim {
                return Err(BundleError::DimMismatch {
                    what: format!("{PHRASES_FILE} dim"),
                    expected: dim,
                    found: ph.embeddings().dim(),
                });
            }
            ph.embeddings().check_values(PHRASES_FILE, true)?;
        }
        Ok(())
    }

    /// Indices of records in any of `splits`, in record order.
    pub fn indices_in(&self, splits: &[Split]) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| splits.contains(&r.split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.image_embeddings.dim()
    }
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    word: String,
}

#[derive(Serialize, Deserialize)]
struct PhraseLine {
    text: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, file: &str) -> Result<Vec<T>, BundleError> {
    if !path.is_file() {
        return Err(BundleError::MissingFile(file.to_string()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| BundleError::Json {
            file: file.to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), BundleError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn require(dir: &Path, file: &str) -> Result<(), BundleError> {
    if dir.join(file).is_file() {
        Ok(())
    } else {
        Err(BundleError::MissingFile(file.to_string()))
    }
}

/// Reads and fully validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<Bundle, BundleError> {
    for f in [IMAGES_FILE, EMBEDDINGS_FILE, VOCAB_FILE, VOCAB_EMBEDDINGS_FILE] {
        require(dir, f)?;
    }
    let records: Vec<ImageRecord> = read_jsonl(&dir.join(IMAGES_FILE), IMAGES_FILE)?;
    if records.is_empty() {
        return Err(BundleError::EmptyBundle);
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(BundleError::DuplicateId(dup.clone()));
    }

    let raw = format::read(&dir.join(EMBEDDINGS_FILE))?;
    let image_embeddings = EmbeddingMatrix::from_raw(raw, ids.clone(), EMBEDDINGS_FILE)?;

    let words: Vec<String> = read_jsonl::<VocabLine>(&dir.join(VOCAB_FILE), VOCAB_FILE)?
        .into_iter()
        .map(|l| l.word)
        .collect();
    let raw = format::read(&dir.join(VOCAB_EMBEDDINGS_FILE))?;
    let vocabulary = TextTable::new(EmbeddingMatrix::from_raw(raw, words, VOCAB_EMBEDDINGS_FILE)?)?;

    let reduced = if dir.join(REDUCED_FILE).is_file() {
        let raw = format::read(&dir.join(REDUCED_FILE))?;
        Some(EmbeddingMatrix::from_raw(raw, ids, REDUCED_FILE)?)
    } else {
        None
    };

    let phrases = if dir.join(PHRASES_FILE).is_file() {
        let texts: Vec<String> = read_jsonl::<PhraseLine>(&dir.join(PHRASES_INDEX_FILE), PHRASES_INDEX_FILE)?
            .into_iter()
            .map(|l| l.text)
            .collect();
        let raw = format::read(&dir.join(PHRASES_FILE))?;
        // an empty phrase file still carries a header dim
        let m = if raw.count == 0 && texts.is_empty() {
            EmbeddingMatrix {
                dim: raw.dim.max(1),
                data: Vec::new(),
                row_ids: Vec::new(),
            }
        } else {
            EmbeddingMatrix::from_raw(raw, texts, PHRASES_FILE)?
        };
        Some(TextTable::new(m)?)
    } else {
        None
    };

    let bundle = Bundle {
        records,
        image_embeddings,
        vocabulary,
        reduced,
        phrases,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` into `dir`, creating the directory if needed.
pub fn save_bundle(bundle: &Bundle, dir: &Path) -> Result<(), BundleError> {
    if bundle.records.is_empty() {
        return Err(BundleError::EmptyBundle);
    }
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(IMAGES_FILE), &bundle.records)?;
    bundle.image_embeddings.write_itmb(&dir.join(EMBEDDINGS_FILE))?;
    let vocab: Vec<VocabLine> = bundle
        .vocabulary
        .words()
        .iter()
        .map(|w| VocabLine { word: w.clone() })
        .collect();
    write_jsonl(&dir.join(VOCAB_FILE), &vocab)?;
    bundle
        .vocabulary
        .embeddings()
        .write_itmb(&dir.join(VOCAB_EMBEDDINGS_FILE))?;
    if let Some(red) = &bundle.reduced {
        red.write_itmb(&dir.join(REDUCED_FILE))?;
    }
    if let Some(ph) = &bundle.phrases {
        let lines: Vec<PhraseLine> = ph
            .words()
            .iter()
            .map(|t| PhraseLine { text: t.clone() })
            .collect();
        write_jsonl(&dir.join(PHRASES_INDEX_FILE), &lines)?;
        ph.embeddings().write_itmb(&dir.join(PHRASES_FILE))?;
    }
    Ok(())
}
