//! Binary container for per-layer final-token embeddings.
//!
//! Layout (little-endian):
//! ```text
//! "ALPE" u32 version u64 n_samples u32 model_layers
//! u32 n_layers u32×n_layers (absolute, ascending) u32 hidden
//! u32 n_pairs (u32 len, utf-8)×n_pairs
//! f32×(n_samples·n_layers·hidden)   sample-major
//! f64×n_samples                     targets
//! u32×n_samples                     pair index per sample
//! ```

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{AlopeError, Result};
use crate::transformer::LayerIndex;

pub const DUMP_MAGIC: [u8; 4] = *b"ALPE";
pub const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    /// Depth of the model the embeddings came from; negative layer indices resolve against it.
    pub model_layers: usize,
    pub layers: Vec<usize>,
    pub hidden: usize,
    pub data: Vec<f32>,
    pub targets: Vec<f64>,
    pub pairs: Vec<String>,
    pub pair_index: Vec<u32>,
}

/// JSON sidecar written next to each dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub source_model: String,
    pub layers: Vec<usize>,
    pub model_layers: usize,
    pub created: u64,
}

impl EmbeddingDump {
    pub fn new(
        model_layers: usize,
        layers: Vec<usize>,
        hidden: usize,
        data: Vec<f32>,
        targets: Vec<f64>,
        pair_ids: &[String],
    ) -> Result<Self> {
        let mut pairs: Vec<String> = pair_ids.to_vec();
        pairs.sort();
        pairs.dedup();
        let pair_index = pair_ids
            .iter()
            .map(|p| pairs.binary_search(p).expect("present") as u32)
            .collect();
        let dump = EmbeddingDump {
            model_layers,
            layers,
            hidden,
            data,
            targets,
            pairs,
            pair_index,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.hidden == 0 {
            return Err(AlopeError::invalid("dump needs at least one layer and a non-zero hidden size"));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AlopeError::invalid("dump layer list must be sorted and distinct"));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= self.model_layers) {
            return Err(AlopeError::LayerOutOfRange {
                index: l as i64,
                n_layers: self.model_layers,
            });
        }
        let n = self.targets.len();
        if self.data.len() != n * self.layers.len() * self.hidden {
            return Err(AlopeError::invalid(format!(
                "payload has {} values, expected {}·{}·{}",
                self.data.len(),
                n,
                self.layers.len(),
                self.hidden
            )));
        }
        if self.pair_index.len() != n || self.pair_index.iter().any(|&p| p as usize >= self.pairs.len()) {
            return Err(AlopeError::invalid("pair index does not match the sample count"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn pair_of(&self, sample: usize) -> &str {
        &self.pairs[self.pair_index[sample] as usize]
    }

    pub fn pair_ids(&self) -> Vec<String> {
        (0..self.n_samples()).map(|i| self.pair_of(i).to_string()).collect()
    }

    /// Position of an absolute layer within the stored list.
    pub fn slot(&self, layer: usize) -> Result<usize> {
        self.layers.binary_search(&layer).map_err(|_| {
            AlopeError::invalid(format!("layer {layer} is not stored in this dump (has {:?})", self.layers))
        })
    }

    pub fn resolve(&self, k: LayerIndex) -> Result<usize> {
        let abs = k.resolve(self.model_layers)?;
        self.slot(abs)?;
        Ok(abs)
    }

    /// Embedding of `sample` at absolute `layer`.
    pub fn embedding(&self, sample: usize, layer: usize) -> Result<&[f32]> {
        let slot = self.slot(layer)?;
        let start = (sample * self.layers.len() + slot) * self.hidden;
        Ok(&self.data[start..start + self.hidden])
    }

    /// Keeps only the given sample indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let stride = self.layers.len() * self.hidden;
        let mut data = Vec::with_capacity(idx.len() * stride);
        let mut targets = Vec::with_capacity(idx.len());
        let mut pair_ids = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.n_samples() {
                return Err(AlopeError::invalid(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
            targets.push(self.targets[i]);
            pair_ids.push(self.pair_of(i).to_string());
        }
        EmbeddingDump::new(self.model_layers, self.layers.clone(), self.hidden, data, targets, &pair_ids)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&DUMP_MAGIC);
        w.u32(DUMP_VERSION);
        w.u64(self.n_samples() as u64);
        w.u32(self.model_layers as u32);
        w.u32(self.layers.len() as u32);
        for &l in &self.layers {
            w.u32(l as u32);
        }
        w.u32(self.hidden as u32);
        w.u32(self.pairs.len() as u32);
        for p in &self.pairs {
            w.str(p);
        }
        w.f32s(self.data.iter().copied());
        w.f64s(self.targets.iter().copied());
        for &p in &self.pair_index {
            w.u32(p);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DUMP_MAGIC)?;
        let version = r.u32("version")?;
        if version != DUMP_VERSION {
            return Err(AlopeError::UnsupportedVersion {
                found: version,
                supported: DUMP_VERSION,
            });
        }
        let n = r.u64("sample count")? as usize;
        let model_layers = r.u32("model depth")? as usize;
        let n_layers = r.u32("layer count")? as usize;
        if n_layers > model_layers.max(1) * 4 + 1024 {
            return Err(AlopeError::Corrupt(format!("implausible layer count {n_layers}")));
        }
        let layers = (0..n_layers)
            .map(|_| r.u32("layer list").map(|l| l as usize))
            .collect::<Result<Vec<_>>>()?;
        let hidden = r.u32("hidden size")? as usize;
        let n_pairs = r.u32("pair count")? as usize;
        let mut pairs = Vec::with_capacity(n_pairs.min(1024));
        for _ in 0..n_pairs {
            pairs.push(r.str("pair id")?);
        }

        // Check the payload size against the header before touching it.
        let expected = n
            .checked_mul(n_layers)
            .and_then(|v| v.checked_mul(hidden))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(n.checked_mul(12)?))
            .ok_or_else(|| AlopeError::Corrupt("header sizes overflow".into()))?;
        if r.remaining() < expected {
            return Err(AlopeError::Truncated(format!(
                "payload needs {expected} bytes, file has {}",
                r.remaining()
            )));
        }
        let data = r.f32s(n * n_layers * hidden, "payload")?;
        let targets = r.f64s(n, "targets")?;
        let pair_index = (0..n).map(|_| r.u32("pair index")).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let dump = EmbeddingDump {
            model_layers,
            layers,
            hidden,
            data,
            targets,
            pairs,
            pair_index,
        };
        dump.validate().map_err(|e| AlopeError::Corrupt(e.to_string()))?;
        Ok(dump)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Writes `path` plus `path.json` describing its origin.
    pub fn write_with_sidecar(&self, path: &Path, source_model: &str) -> Result<()> {
        self.write(path)?;
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let sidecar = DumpSidecar {
            source_model: source_model.to_string(),
            layers: self.layers.clone(),
            model_layers: self.model_layers,
            created,
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        write_atomic(&sidecar_path(path), &json)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
