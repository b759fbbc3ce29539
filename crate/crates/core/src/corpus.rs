//! Notes corpus and JSONL helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::ConceptId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {source}")]
    Json {
        file: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("note {0:?} has no gold_cuis")]
    MissingGold(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Note {
    pub note_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_cuis: Option<Vec<ConceptId>>,
}

impl Note {
    pub fn gold(&self) -> Result<&[ConceptId], CorpusError> {
        self.gold_cuis
            .as_deref()
            .ok_or_else(|| CorpusError::MissingGold(self.note_id.clone()))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, file: &str) -> Result<Vec<T>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| CorpusError::Json {
                file: file.to_string(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("serializable row"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(to_jsonl(rows).as_bytes())
        .map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn read_notes(path: &Path) -> Result<Vec<Note>, CorpusError> {
    read_jsonl(path)
}
