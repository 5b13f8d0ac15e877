//! CSV reading and writing for result records.

use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Writes records with a header row, even when there are none.
pub fn write_csv<T: Serialize, W: Write>(records: &[T], writer: W, header: &[&str]) -> Result<(), RecordsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(header)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| RecordsError::Io { path: "<writer>".into(), source })?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>, RecordsError> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Creates or truncates `path` and writes a header plus `records`.
pub fn emit_csv<T: Serialize>(records: &[T], path: impl AsRef<Path>, header: &[&str]) -> Result<(), RecordsError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| io_error(path, source))?;
    write_csv(records, file, header)
}

/// Appends `records`, writing the header first only if the file is new or empty.
pub fn append_csv<T: Serialize>(records: &[T], path: impl AsRef<Path>, header: &[&str]) -> Result<(), RecordsError> {
    let path = path.as_ref();
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|source| io_error(path, source))?;
    let empty = file.metadata().map_err(|source| io_error(path, source))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if empty {
        w.write_record(header)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| io_error(path, source))?;
    Ok(())
}

pub fn load_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, RecordsError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| io_error(path, source))?;
    read_csv(file)
}

fn io_error(path: &Path, source: std::io::Error) -> RecordsError {
    RecordsError::Io { path: path.display().to_string(), source }
}
