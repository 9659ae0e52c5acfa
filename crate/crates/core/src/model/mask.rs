use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::error::{Error, Result};

/// Per-layer sets of flat indices that an update is allowed to touch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GradientMask {
    pub per_layer: BTreeMap<String, BTreeSet<usize>>,
}

#[derive(Serialize, Deserialize)]
struct MaskRow {
    layer: String,
    indices: Vec<usize>,
}

impl GradientMask {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every layer present, every set empty.
    pub fn empty_for(model: &ModelState) -> Self {
        let per_layer = model.layers.iter().map(|l| (l.name.clone(), BTreeSet::new())).collect();
        Self { per_layer }
    }

    /// Covers every parameter of `model`.
    pub fn full(model: &ModelState) -> Self {
        let per_layer = model
            .layers
            .iter()
            .map(|l| (l.name.clone(), (0..l.len()).collect()))
            .collect();
        Self { per_layer }
    }

    pub fn insert(&mut self, layer: &str, index: usize) {
        self.per_layer.entry(layer.to_string()).or_default().insert(index);
    }

    pub fn set_layer(&mut self, layer: &str, indices: impl IntoIterator<Item = usize>) {
        self.per_layer.insert(layer.to_string(), indices.into_iter().collect());
    }

    pub fn contains(&self, layer: &str, index: usize) -> bool {
        self.per_layer.get(layer).is_some_and(|s| s.contains(&index))
    }

    pub fn layer(&self, layer: &str) -> Option<&BTreeSet<usize>> {
        self.per_layer.get(layer)
    }

    pub fn total(&self) -> usize {
        self.per_layer.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn validate(&self, model: &ModelState) -> Result<()> {
        for (name, set) in &self.per_layer {
            let layer = model.layer(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            if let Some(&index) = set.iter().next_back() {
                if index >= layer.len() {
                    return Err(Error::MaskOutOfRange {
                        layer: name.clone(),
                        index,
                        len: layer.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Index lists aligned with `model.layers`, after validation.
    pub(crate) fn resolve(&self, model: &ModelState) -> Result<Vec<Vec<usize>>> {
        self.validate(model)?;
        Ok(model
            .layers
            .iter()
            .map(|l| self.per_layer.get(&l.name).map(|s| s.iter().copied().collect()).unwrap_or_default())
            .collect())
    }

    /// Short content hash used in reports.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, set) in &self.per_layer {
            h.update(name.as_bytes());
            h.update([0u8]);
            for i in set {
                h.update((*i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    /// JSON-lines sidecar: one `{layer, indices}` object per layer.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for (layer, set) in &self.per_layer {
            let row = MaskRow { layer: layer.clone(), indices: set.iter().copied().collect() };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut mask = Self::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: MaskRow = serde_json::from_str(&line)?;
            mask.set_layer(&row.layer, row.indices);
        }
        Ok(mask)
    }
}
