//! Versioned binary container for model, adapter and head parameters.
//!
//! Layout (little-endian):
//! ```text
//! "ALPC" u32 version u8 kind u32 meta_len meta(JSON)
//! u32 n_tensors
//! per tensor: u32 name_len name u8 trainable u32 ndim u32×ndim f32×numel
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{AlopeError, Result};
use crate::heads::{Heads, StrategyKind, StrategySpec};
use crate::lora::{self, LoraConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::transformer::{LayerIndex, TransformerConfig, TransformerModel};

pub const CKPT_MAGIC: [u8; 4] = *b"ALPC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapter,
    Heads,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Model => 0,
            CheckpointKind::Adapter => 1,
            CheckpointKind::Heads => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(CheckpointKind::Model),
            1 => Ok(CheckpointKind::Adapter),
            2 => Ok(CheckpointKind::Heads),
            other => Err(AlopeError::Corrupt(format!("unknown checkpoint kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: CheckpointKind,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u8(self.kind.code());
        w.str(&serde_json::to_string(&self.meta).expect("json value serializes"));
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.u8(t.trainable as u8);
            w.u32(t.tensor.shape().len() as u32);
            for &d in t.tensor.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.tensor.data().iter().copied());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CKPT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(AlopeError::UnsupportedVersion {
                found: version,
                supported: CKPT_VERSION,
            });
        }
        let kind = CheckpointKind::from_code(r.u8("kind")?)?;
        let meta_text = r.str("meta block")?;
        let meta = serde_json::from_str(&meta_text).map_err(|e| AlopeError::Corrupt(format!("meta block: {e}")))?;
        let n = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str("tensor name")?;
            let trainable = match r.u8("trainable flag")? {
                0 => false,
                1 => true,
                other => return Err(AlopeError::Corrupt(format!("{name}: trainable flag {other}"))),
            };
            let ndim = r.u32("rank")? as usize;
            if ndim > 8 {
                return Err(AlopeError::Corrupt(format!("{name}: implausible rank {ndim}")));
            }
            let shape = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| AlopeError::Corrupt(format!("{name}: size overflows")))?;
            let data = r.f32s(numel, &name)?;
            tensors.push(NamedTensor {
                name,
                trainable,
                tensor: Tensor::new(shape, data)?,
            });
        }
        r.finish()?;
        Ok(Container { kind, meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path, expected: CheckpointKind) -> Result<Self> {
        let c = Self::from_bytes(&read_file(path)?)?;
        if c.kind != expected {
            return Err(AlopeError::invalid(format!(
                "{} holds a {:?} checkpoint, expected {:?}",
                path.display(),
                c.kind,
                expected
            )));
        }
        Ok(c)
    }

    fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| AlopeError::Corrupt(format!("meta block: {e}")))
    }

    fn from_store<T: Scalar>(
        kind: CheckpointKind,
        meta: serde_json::Value,
        store: &ParamStore<T>,
        keep: impl Fn(&str) -> bool,
    ) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, p)| keep(&p.name))
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                trainable: p.trainable,
                tensor: p.value.cast(),
            })
            .collect();
        Container { kind, meta, tensors }
    }

    /// Assigns every stored tensor to the parameter of the same name.
    fn assign_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for t in &self.tensors {
            let id = store
                .id(&t.name)
                .ok_or_else(|| AlopeError::Corrupt(format!("checkpoint tensor `{}` has no matching parameter", t.name)))?;
            store.assign(id, t.tensor.cast())?;
        }
        Ok(())
    }
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: TransformerConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Saves the base weights of `model`; adapters are excluded.
pub fn save_model<T: Scalar>(path: &Path, model: &TransformerModel<T>, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::to_value(ModelMeta {
        config: model.config.clone(),
        extra,
    })
    .expect("meta serializes");
    Container::from_store(CheckpointKind::Model, meta, &model.store, |n| !is_adapter(n)).write(path)
}

/// Loads a base model and the caller-supplied `extra` metadata.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(TransformerModel<T>, serde_json::Value)> {
    let c = Container::read(path, CheckpointKind::Model)?;
    let meta: ModelMeta = c.meta()?;
    let mut model = TransformerModel::new(meta.config, 0)?;
    if c.tensors.len() != model.store.len() {
        return Err(AlopeError::Corrupt(format!(
            "model checkpoint has {} tensors, config implies {}",
            c.tensors.len(),
            model.store.len()
        )));
    }
    c.assign_into(&mut model.store)?;
    for t in &c.tensors {
        let id = model.store.id(&t.name).expect("assigned above");
        model.store.set_trainable(id, t.trainable);
    }
    Ok((model, meta.extra))
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    lora: LoraConfig,
    n_layers: usize,
    d_model: usize,
}

/// Saves only the LoRA matrices attached to `model`.
pub fn save_adapters<T: Scalar>(path: &Path, model: &TransformerModel<T>) -> Result<()> {
    let ads = lora::adapters(model);
    let first = ads.first().ok_or_else(|| AlopeError::invalid("model has no adapters to save"))?;
    let mut targets: Vec<_> = ads.iter().filter(|a| a.layer == first.layer).map(|a| a.projection).collect();
    targets.dedup();
    let meta = serde_json::to_value(AdapterMeta {
        lora: LoraConfig {
            rank: first.rank,
            scale: first.scale,
            targets,
        },
        n_layers: model.n_layers(),
        d_model: model.config.d_model,
    })
    .expect("meta serializes");
    Container::from_store(CheckpointKind::Adapter, meta, &model.store, is_adapter).write(path)
}

/// Attaches saved adapters to a fresh, adapter-free base model.
pub fn load_adapters<T: Scalar>(path: &Path, model: &mut TransformerModel<T>) -> Result<()> {
    let c = Container::read(path, CheckpointKind::Adapter)?;
    let meta: AdapterMeta = c.meta()?;
    if meta.n_layers != model.n_layers() || meta.d_model != model.config.d_model {
        return Err(AlopeError::invalid(format!(
            "adapters were trained for {} layers × d_model {}, base has {} × {}",
            meta.n_layers,
            meta.d_model,
            model.n_layers(),
            model.config.d_model
        )));
    }
    lora::inject(model, &meta.lora, 0)?;
    c.assign_into(&mut model.store)
}

#[derive(Serialize, Deserialize)]
struct HeadsMeta {
    spec: StrategySpec,
    n_layers: usize,
    hidden: usize,
}

/// Human-readable description written next to a heads checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsSidecar {
    pub strategy: StrategyKind,
    pub layers: Vec<LayerIndex>,
    pub loss_weights: Option<Vec<f64>>,
    pub mixing_weights: Option<Vec<f64>>,
}

pub fn save_heads<T: Scalar>(path: &Path, heads: &Heads<T>) -> Result<()> {
    let meta = serde_json::to_value(HeadsMeta {
        spec: heads.spec.clone(),
        n_layers: heads.n_layers,
        hidden: heads.hidden,
    })
    .expect("meta serializes");
    Container::from_store(CheckpointKind::Heads, meta, &heads.store, |_| true).write(path)?;
    let loss_weights = match &heads.strategy {
        crate::heads::HeadStrategy::MultiHead(mh) => Some(mh.loss_weights.clone()),
        _ => None,
    };
    let sidecar = HeadsSidecar {
        strategy: heads.spec.strategy,
        layers: heads.spec.layers.clone(),
        loss_weights,
        mixing_weights: heads.mixing_weights().map(|w| w.iter().map(|v| v.as_f64()).collect()),
    };
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&crate::data::dump::sidecar_path(path), &json)
}

pub fn load_heads<T: Scalar>(path: &Path) -> Result<Heads<T>> {
    let c = Container::read(path, CheckpointKind::Heads)?;
    let meta: HeadsMeta = c.meta()?;
    let mut heads = Heads::new(meta.spec, meta.n_layers, meta.hidden, 0)?;
    if c.tensors.len() != heads.store.len() {
        return Err(AlopeError::Corrupt("heads checkpoint does not match its strategy".into()));
    }
    c.assign_into(&mut heads.store)?;
    Ok(heads)
}
