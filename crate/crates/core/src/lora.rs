//! Low-rank adaptation of frozen projection matrices: `W' = W + scale·B·A`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::autodiff::tensor::gemm_acc;
use crate::error::{AlopeError, Result};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::transformer::{lora_name, Projection, TransformerModel, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            scale: 1.0,
            targets: Projection::ATTENTION.to_vec(),
        }
    }
}

impl LoraConfig {
    /// Builds a config from projection names such as `q_proj`.
    pub fn with_target_names<S: AsRef<str>>(rank: usize, scale: f64, names: &[S]) -> Result<Self> {
        let targets = names
            .iter()
            .map(|n| n.as_ref().trim().parse())
            .collect::<Result<Vec<Projection>>>()?;
        let cfg = LoraConfig { rank, scale, targets };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(AlopeError::invalid("LoRA rank must be at least 1"));
        }
        if self.targets.is_empty() {
            return Err(AlopeError::invalid("LoRA needs at least one target projection"));
        }
        if !self.scale.is_finite() {
            return Err(AlopeError::invalid("LoRA scale must be finite"));
        }
        Ok(())
    }

    /// Adapter parameter count `Σ r·(d_in + d_out)` over all targeted projections.
    pub fn param_count(&self, model: &crate::transformer::TransformerConfig) -> usize {
        let per_layer: usize = self
            .targets
            .iter()
            .map(|p| {
                let (d_in, d_out) = match p {
                    Projection::GateProj | Projection::UpProj => (model.d_model, model.d_ff),
                    Projection::DownProj => (model.d_ff, model.d_model),
                    _ => (model.d_model, model.d_model),
                };
                self.rank * (d_in + d_out)
            })
            .sum();
        per_layer * model.n_layers
    }
}

/// Trainable pair attached to one projection: `A: [r × d_in]`, `B: [d_out × r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    pub projection: Projection,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// Attaches adapters to every targeted projection of every layer and freezes
/// all pre-existing parameters. `A ~ normal(0, 0.02)`, `B = 0`, so the adapted
/// model initially computes exactly the base function.
pub fn inject<T: Scalar>(model: &mut TransformerModel<T>, cfg: &LoraConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    if model.blocks.iter().any(|b| Projection::ALL.iter().any(|&p| b.projection(p).lora.is_some())) {
        return Err(AlopeError::invalid("model already carries LoRA adapters"));
    }
    let base_ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    for id in base_ids {
        model.store.set_trainable(id, false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in 0..model.blocks.len() {
        for &p in &cfg.targets {
            let (d_in, d_out) = {
                let lin = model.blocks[layer].projection(p);
                (lin.d_in, lin.d_out)
            };
            if cfg.rank > d_in.min(d_out) {
                return Err(AlopeError::invalid(format!(
                    "LoRA rank {} exceeds min(d_in, d_out) = {} for {p}",
                    cfg.rank,
                    d_in.min(d_out)
                )));
            }
            let a = model
                .store
                .insert(lora_name(layer, p, "a"), Tensor::randn(&[cfg.rank, d_in], INIT_STD, &mut rng), true)?;
            let b = model
                .store
                .insert(lora_name(layer, p, "b"), Tensor::zeros(&[d_out, cfg.rank]), true)?;
            model.blocks[layer].projection_mut(p).lora = Some(LoraAdapter {
                layer,
                projection: p,
                a,
                b,
                rank: cfg.rank,
                scale: cfg.scale,
            });
        }
    }
    Ok(())
}

/// Every adapter currently attached to `model`, in layer-then-projection order.
pub fn adapters<T: Scalar>(model: &TransformerModel<T>) -> Vec<LoraAdapter> {
    model
        .blocks
        .iter()
        .flat_map(|b| Projection::ALL.iter().filter_map(|&p| b.projection(p).lora.clone()))
        .collect()
}

/// `W + scale·B·A` for the projection `adapter` is attached to.
pub fn merge<T: Scalar>(model: &TransformerModel<T>, adapter: &LoraAdapter) -> Result<Tensor<T>> {
    let lin = model.blocks[adapter.layer].projection(adapter.projection);
    let w = model.store.value(lin.weight);
    let a = model.store.value(adapter.a);
    let b = model.store.value(adapter.b);
    let (d_out, d_in) = (lin.d_out, lin.d_in);
    if a.shape() != [adapter.rank, d_in] || b.shape() != [d_out, adapter.rank] || w.shape() != [d_out, d_in] {
        return Err(AlopeError::shape("lora merge", b.shape(), a.shape()));
    }
    let mut ba = vec![T::zero(); d_out * d_in];
    gemm_acc(b.data(), a.data(), &mut ba, d_out, adapter.rank, d_in);
    let s = T::lit(adapter.scale);
    let data = w.data().iter().zip(&ba).map(|(&wv, &d)| wv + s * d).collect();
    Tensor::new(vec![d_out, d_in], data)
}

/// Copy of `model` with all adapters folded into their base weights and removed.
pub fn merged_model<T: Scalar>(model: &TransformerModel<T>) -> Result<TransformerModel<T>> {
    let mut out = model.clone();
    for adapter in adapters(model) {
        let merged = merge(model, &adapter)?;
        let lin = out.blocks[adapter.layer].projection_mut(adapter.projection);
        lin.lora = None;
        let weight = lin.weight;
        out.store.assign(weight, merged)?;
        out.store.set_trainable(adapter.a, false);
        out.store.set_trainable(adapter.b, false);
    }
    Ok(out)
}
