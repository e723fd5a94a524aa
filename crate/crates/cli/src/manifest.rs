use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Record of one command invocation, written next to its outputs.
///
/// `args` holds the argument vector after the program name; together with
/// `working_dir` it is enough to re-run the command through `replay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub working_dir: PathBuf,
    /// Fully resolved configuration: file values, then flag overrides, then defaults made explicit.
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub started: String,
    pub finished: String,
}

/// Invocation context shared by every command.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub args: Vec<String>,
    pub started: String,
}

impl Invocation {
    pub fn new(args: Vec<String>) -> Self {
        Invocation {
            args,
            started: now(),
        }
    }

    pub fn manifest(&self, command: &str) -> RunManifest {
        RunManifest {
            tool: "angiovae".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: self.args.clone(),
            working_dir: std::env::current_dir().unwrap_or_default(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            started: self.started.clone(),
            finished: String::new(),
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn write(mut self, path: &Path) -> Result<()> {
        self.finished = now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        log::info!("wrote manifest {}", path.display());
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: not a run manifest: {e}", path.display())))
    }
}
