//! JSONL reading and writing for datasets, streams and logs.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::types::LabeledExample;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Parses one JSON value per non-blank line. Line numbers in errors are 1-based.
pub fn read_jsonl<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| DatasetError::Parse {
            line: idx + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(writer: W, values: &[T]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(writer);
    for v in values {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a labeled dataset and checks that ids are unique.
pub fn read_examples<R: Read>(reader: R) -> Result<Vec<LabeledExample>, DatasetError> {
    let examples: Vec<LabeledExample> = read_jsonl(reader)?;
    let mut seen = HashSet::with_capacity(examples.len());
    for (idx, ex) in examples.iter().enumerate() {
        if !seen.insert(ex.id()) {
            return Err(DatasetError::DuplicateId {
                line: idx + 1,
                id: ex.id().to_string(),
            });
        }
    }
    Ok(examples)
}

pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>, DatasetError> {
    read_examples(File::open(path)?)
}

pub fn save_examples(
    path: impl AsRef<Path>,
    examples: &[LabeledExample],
) -> Result<(), DatasetError> {
    write_jsonl(File::create(path)?, examples)
}
