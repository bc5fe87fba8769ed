use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{Layout, ModelMeta, ModelParameters};
use super::ModelError;

const FORMAT: &str = "flforge-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    meta: ModelMeta,
    tensors: Vec<NamedTensor>,
}

impl ModelParameters {
    /// Checkpoint JSON. Numbers use the shortest representation that
    /// round-trips, so reloading is value-exact.
    pub fn to_json(&self) -> Result<String, ModelError> {
        let tensors = self
            .layout
            .tensors
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: self.values[t.offset..t.offset + t.len].to_vec(),
            })
            .collect();
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
            tensors,
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let meta = file.meta;
        meta.architecture.validate()?;
        meta.loss.validate(meta.n)?;
        if meta.plant.dim() != meta.n {
            return Err(ModelError::Dimension { expected: meta.plant.dim(), found: meta.n });
        }
        let layout = Layout::new(meta.n, &meta.architecture);
        if file.tensors.len() != layout.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.tensors.len(),
                file.tensors.len()
            )));
        }
        let mut values = vec![0.0; layout.total];
        for (slot, t) in layout.tensors.iter().zip(&file.tensors) {
            if slot.name != t.name || slot.shape != t.shape || t.values.len() != slot.len {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, slot.name, slot.shape
                )));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Checkpoint(format!("tensor {} has non-finite values", t.name)));
            }
            values[slot.offset..slot.offset + slot.len].copy_from_slice(&t.values);
        }
        Ok(Self { meta, layout, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Loads and checks the state dimension against `n`.
    pub fn load_expecting(path: &Path, n: usize) -> Result<Self, ModelError> {
        let p = Self::load(path)?;
        if p.n() != n {
            return Err(ModelError::Dimension { expected: n, found: p.n() });
        }
        Ok(p)
    }
}
