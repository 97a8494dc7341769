//! Parameter checkpoints: a flat little-endian `f64` blob plus a JSON manifest
//! describing the layer partition. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamVector, Segment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub len: usize,
    pub segments: Vec<Segment>,
}

pub fn encode(params: &ParamVector) -> (Vec<u8>, ShapeManifest) {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for x in params.as_slice() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let manifest = ShapeManifest {
        len: params.len(),
        segments: params.segments().to_vec(),
    };
    (bytes, manifest)
}

pub fn decode(bytes: &[u8], manifest: &ShapeManifest) -> Result<ParamVector> {
    if bytes.len() != manifest.len * 8 {
        return Err(Error::DimensionMismatch {
            what: "checkpoint blob bytes",
            expected: manifest.len * 8,
            got: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ParamVector::from_parts(data, manifest.segments.clone())
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn save(params: &ParamVector, dir: &Path, stem: &str) -> Result<()> {
    let (bytes, manifest) = encode(params);
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<ParamVector> {
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: ShapeManifest = serde_json::from_str(&text)?;
    decode(&bytes, &manifest)
}
