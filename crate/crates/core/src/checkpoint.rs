//! Versioned JSON envelopes shared by the embedding, model and baseline
//! checkpoint files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(#[from] serde_json::Error),
    #[error("expected a `{expected}` checkpoint, found `{found}`")]
    WrongFormat { expected: String, found: String },
    #[error("unsupported `{format}` checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion {
        format: String,
        found: u32,
        supported: u32,
    },
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format: &'a str,
    version: u32,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    #[allow(dead_code)]
    format: String,
    #[allow(dead_code)]
    version: u32,
    #[serde(flatten)]
    body: T,
}

/// Serializes `body` as `{"format": .., "version": .., <body fields>}`.
pub fn encode<T: Serialize>(format: &str, version: u32, body: &T) -> String {
    serde_json::to_string(&EnvelopeOut {
        format,
        version,
        body,
    })
    .expect("checkpoint serialization cannot fail")
}

pub fn decode<T: DeserializeOwned>(format: &str, version: u32, text: &str) -> Result<T, CheckpointError> {
    let header: Header = serde_json::from_str(text)?;
    if header.format != format {
        return Err(CheckpointError::WrongFormat {
            expected: format.into(),
            found: header.format,
        });
    }
    if header.version != version {
        return Err(CheckpointError::UnsupportedVersion {
            format: format.into(),
            found: header.version,
            supported: version,
        });
    }
    let env: EnvelopeIn<T> = serde_json::from_str(text)?;
    Ok(env.body)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CheckpointError> {
    fs::write(path, contents)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<String, CheckpointError> {
    Ok(fs::read_to_string(path)?)
}
