use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct BuildInfo {
    pub version: &'static str,
    pub hash: &'static str,
}

pub const BUILD: BuildInfo = BuildInfo {
    version: env!("CARGO_PKG_VERSION"),
    hash: env!("AMPL_BUILD_HASH"),
};

/// Everything needed to reproduce a command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<Value>,
    pub build: BuildInfo,
    pub details: Value,
}

impl Manifest {
    pub fn new(command: &'static str, args: &[String]) -> Self {
        Self {
            command,
            args: args.to_vec(),
            seed: None,
            config: None,
            build: BUILD,
            details: Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(ampl::Error::from)?;
        std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(ampl::Error::Io {
        path: path.display().to_string(),
        source,
    })
}
