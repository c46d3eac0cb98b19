//! `manifest.jsonl` (one [`SampleRecord`] per line) and its sibling
//! `vocabulary.json`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{validate_sample, SampleRecord, Violation, Vocabulary, VocabularyError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCABULARY_FILE: &str = "vocabulary.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.to_path_buf(), source }
}

/// Parses JSON Lines records; blank lines are skipped.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<SampleRecord>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| ManifestError::Io { path: PathBuf::new(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| ManifestError::Json { line: i + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub vocabulary_ref: String,
    pub format_version: u32,
    pub records: Vec<SampleRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            vocabulary_ref: VOCABULARY_FILE.to_string(),
            format_version: FORMAT_VERSION,
            records: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Manifest { records, ..Manifest::default() }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self, ManifestError> {
        Ok(Manifest::new(read_records(s.as_bytes())?))
    }

    /// Reads `manifest.jsonl` and the vocabulary next to it.
    pub fn load(manifest_path: &Path) -> Result<(Manifest, Vocabulary), ManifestError> {
        let file = File::open(manifest_path).map_err(io_err(manifest_path))?;
        let records = read_records(BufReader::new(file))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let vocab = Vocabulary::load(&dir.join(VOCABULARY_FILE))?;
        Ok((Manifest::new(records), vocab))
    }

    /// Writes `manifest.jsonl` and `vocabulary.json` into `dir`.
    pub fn save(&self, dir: &Path, vocabulary: &Vocabulary) -> Result<PathBuf, ManifestError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes()).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        vocabulary.save(&dir.join(&self.vocabulary_ref))?;
        Ok(path)
    }

    /// Validates every record. `image_dims` resolves a record's image size.
    pub fn validate<F>(&self, vocabulary: &Vocabulary, mut image_dims: F) -> Vec<(String, Violation)>
    where
        F: FnMut(&SampleRecord) -> Option<(u32, u32)>,
    {
        let mut out = Vec::new();
        for r in &self.records {
            let dims = image_dims(r);
            out.extend(validate_sample(r, vocabulary, dims).into_iter().map(|v| (r.id.clone(), v)));
        }
        out
    }

    pub fn check_unique_ids(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(ManifestError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }
}
