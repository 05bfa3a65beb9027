use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgal::model::ModelDims;
use sgal::{Error, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run: what it was given, how it was configured and
/// checksums of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModelDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    /// Input path to sha256.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Output file name to sha256.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Io(e.into())
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).map_err(json_error)?,
            dims: None,
            class_count: None,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records `dir/name` under `name`.
    pub fn add_artifact(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.artifacts
            .insert(name.to_string(), sha256_file(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(json_error)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
