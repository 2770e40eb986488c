//! Feature standardisation stored next to a checkpoint as `<checkpoint>.norm.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skip2lora::{Dataset, Standardizer};

use crate::error::CliError;

#[derive(Debug, Serialize, Deserialize)]
struct NormFile {
    mean: Vec<f32>,
    std: Vec<f32>,
}

pub fn path_for(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".norm.json");
    PathBuf::from(name)
}

pub fn write(checkpoint: &Path, s: &Standardizer) -> Result<(), CliError> {
    let path = path_for(checkpoint);
    let body = NormFile {
        mean: s.mean.clone(),
        std: s.std.clone(),
    };
    let text = serde_json::to_string(&body).map_err(|source| CliError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn read(checkpoint: &Path) -> Result<Option<Standardizer>, CliError> {
    let path = path_for(checkpoint);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let f: NormFile = serde_json::from_str(&text).map_err(|source| CliError::Json { path, source })?;
    Ok(Some(Standardizer {
        mean: f.mean,
        std: f.std,
    }))
}

/// Standardises `data` with the statistics saved next to `checkpoint`, if any.
pub fn apply(checkpoint: &Path, data: &mut Dataset) -> Result<Option<Standardizer>, CliError> {
    let s = read(checkpoint)?;
    if let Some(s) = &s {
        s.apply(data)?;
    }
    Ok(s)
}

/// Keeps the standardisation of `from` valid for `to`, or removes a stale one.
pub fn carry(from: Option<&Standardizer>, to: &Path) -> Result<(), CliError> {
    match from {
        Some(s) => write(to, s),
        None => {
            let path = path_for(to);
            if path.exists() {
                fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
            }
            Ok(())
        }
    }
}
