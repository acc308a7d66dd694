//! Miniature decoder-only transformer that exposes every layer's hidden states.
//!
//! Blocks are pre-norm (RMS), use learned absolute positions, causal multi-head
//! self-attention and a gated feed-forward network. The hidden state of layer
//! `k` is the output of block `k` after both residual additions; no final
//! model-level norm is applied.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{AlopeError, Result};
use crate::lora::LoraAdapter;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;
const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
}

impl FromStr for Activation {
    type Err = AlopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(AlopeError::invalid(format!("unknown activation `{other}` (expected silu or gelu)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 512,
            max_seq_len: 256,
            activation: Activation::Silu,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(AlopeError::invalid(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(AlopeError::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(AlopeError::invalid("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Transformer layer reference. Negative values count back from the final
/// layer (`-1` is the last); non-negative values are absolute, 0 being the
/// block closest to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerIndex(pub i64);

impl LayerIndex {
    pub fn resolve(self, n_layers: usize) -> Result<usize> {
        let n = n_layers as i64;
        let abs = if self.0 < 0 { n + self.0 } else { self.0 };
        if n_layers == 0 || abs < 0 || abs >= n {
            return Err(AlopeError::LayerOutOfRange {
                index: self.0,
                n_layers,
            });
        }
        Ok(abs as usize)
    }
}

impl fmt::Display for LayerIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for LayerIndex {
    type Err = AlopeError;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<i64>()
            .map(LayerIndex)
            .map_err(|_| AlopeError::invalid(format!("invalid layer index `{s}`")))
    }
}

/// Parses a comma-separated layer list such as `-1,-7,-11`.
pub fn parse_layer_list(s: &str) -> Result<Vec<LayerIndex>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// Resolves `layers`, rejecting duplicates after resolution.
pub fn resolve_distinct(layers: &[LayerIndex], n_layers: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let abs = l.resolve(n_layers)?;
        if out.contains(&abs) {
            return Err(AlopeError::invalid(format!("layer {l} duplicates an earlier layer (absolute {abs})")));
        }
        out.push(abs);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::QProj,
        Projection::KProj,
        Projection::VProj,
        Projection::OProj,
        Projection::GateProj,
        Projection::UpProj,
        Projection::DownProj,
    ];

    pub const ATTENTION: [Projection; 4] = [Projection::QProj, Projection::KProj, Projection::VProj, Projection::OProj];

    pub fn name(self) -> &'static str {
        match self {
            Projection::QProj => "q_proj",
            Projection::KProj => "k_proj",
            Projection::VProj => "v_proj",
            Projection::OProj => "o_proj",
            Projection::GateProj => "gate_proj",
            Projection::UpProj => "up_proj",
            Projection::DownProj => "down_proj",
        }
    }

    fn group(self) -> &'static str {
        match self {
            Projection::QProj | Projection::KProj | Projection::VProj | Projection::OProj => "attn",
            _ => "ffn",
        }
    }
}

impl FromStr for Projection {
    type Err = AlopeError;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| AlopeError::UnknownTarget {
                name: s.to_string(),
                valid: Projection::ALL.iter().map(|p| p.name().to_string()).collect(),
            })
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bias-free projection `y = x·Wᵀ` with `W: [d_out × d_in]`, optionally LoRA-adapted.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let base = g.matmul_nt(x, bound.node(self.weight))?;
        let Some(lora) = &self.lora else {
            return Ok(base);
        };
        let down = g.matmul_nt(x, bound.node(lora.a))?;
        let up = g.matmul_nt(down, bound.node(lora.b))?;
        let delta = g.scale(up, T::lit(lora.scale));
        g.add(base, delta)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: ParamId,
    pub ffn_norm: ParamId,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub o_proj: Linear,
    pub gate_proj: Linear,
    pub up_proj: Linear,
    pub down_proj: Linear,
}

impl Block {
    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::QProj => &self.q_proj,
            Projection::KProj => &self.k_proj,
            Projection::VProj => &self.v_proj,
            Projection::OProj => &self.o_proj,
            Projection::GateProj => &self.gate_proj,
            Projection::UpProj => &self.up_proj,
            Projection::DownProj => &self.down_proj,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::QProj => &mut self.q_proj,
            Projection::KProj => &mut self.k_proj,
            Projection::VProj => &mut self.v_proj,
            Projection::OProj => &mut self.o_proj,
            Projection::GateProj => &mut self.gate_proj,
            Projection::UpProj => &mut self.up_proj,
            Projection::DownProj => &mut self.down_proj,
        }
    }
}

pub fn weight_name(layer: usize, p: Projection) -> String {
    format!("layers.{layer}.{}.{}.weight", p.group(), p.name())
}

pub(crate) fn lora_name(layer: usize, p: Projection, part: &str) -> String {
    format!("layers.{layer}.{}.{}.lora_{part}", p.group(), p.name())
}

#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    pub config: TransformerConfig,
    pub store: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
}

/// Per-layer hidden states of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    /// `hidden_states[k]` is `[seq_len × d_model]` for absolute layer `k`.
    pub hidden_states: Vec<Tensor<T>>,
    pub final_token_index: usize,
}

/// Graph-level counterpart of [`ForwardTrace`].
#[derive(Clone, Debug)]
pub(crate) struct GraphTrace {
    pub hidden: Vec<NodeId>,
    pub final_token_index: usize,
}

impl<T: Scalar> TransformerModel<T> {
    /// Builds a model with seeded `normal(0, 0.02)` weights and unit norm gains.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.insert("tok_emb", Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng), true)?;
        let pos_emb = store.insert("pos_emb", Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng), true)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let attn_norm = store.insert(format!("layers.{layer}.attn_norm"), Tensor::filled(&[d], T::one()), true)?;
            let ffn_norm = store.insert(format!("layers.{layer}.ffn_norm"), Tensor::filled(&[d], T::one()), true)?;
            let mut linear = |p: Projection| -> Result<Linear> {
                let (d_in, d_out) = match p {
                    Projection::GateProj | Projection::UpProj => (d, config.d_ff),
                    Projection::DownProj => (config.d_ff, d),
                    _ => (d, d),
                };
                let weight = store.insert(weight_name(layer, p), Tensor::randn(&[d_out, d_in], INIT_STD, &mut rng), true)?;
                Ok(Linear {
                    weight,
                    d_in,
                    d_out,
                    lora: None,
                })
            };
            blocks.push(Block {
                q_proj: linear(Projection::QProj)?,
                k_proj: linear(Projection::KProj)?,
                v_proj: linear(Projection::VProj)?,
                o_proj: linear(Projection::OProj)?,
                gate_proj: linear(Projection::GateProj)?,
                up_proj: linear(Projection::UpProj)?,
                down_proj: linear(Projection::DownProj)?,
                attn_norm,
                ffn_norm,
            });
        }
        Ok(TransformerModel {
            config,
            store,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Ids of every parameter belonging to block `layer`, adapters included.
    pub fn layer_params(&self, layer: usize) -> Vec<ParamId> {
        let b = &self.blocks[layer];
        let mut ids = vec![b.attn_norm, b.ffn_norm];
        for p in Projection::ALL {
            let lin = b.projection(p);
            ids.push(lin.weight);
            if let Some(l) = &lin.lora {
                ids.extend([l.a, l.b]);
            }
        }
        ids
    }

    /// Runs the full stack over one right-padded sequence.
    ///
    /// `pad_mask[i] == true` marks position `i` as padding; `None` means no padding.
    pub fn forward(&self, tokens: &[u32], pad_mask: Option<&[bool]>) -> Result<ForwardTrace<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let trace = self.forward_graph(&mut g, &bound, tokens, pad_mask, self.n_layers() - 1)?;
        Ok(ForwardTrace {
            hidden_states: trace.hidden.iter().map(|&h| g.value(h).clone()).collect(),
            final_token_index: trace.final_token_index,
        })
    }

    /// Adds the forward pass to `g`, stopping after absolute layer `last_layer`.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        tokens: &[u32],
        pad_mask: Option<&[bool]>,
        last_layer: usize,
    ) -> Result<GraphTrace> {
        let cfg = &self.config;
        let seq = tokens.len();
        if seq == 0 {
            return Err(AlopeError::Empty("forward"));
        }
        if seq > cfg.max_seq_len {
            return Err(AlopeError::invalid(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(AlopeError::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let pad: Vec<bool> = match pad_mask {
            Some(m) if m.len() != seq => {
                return Err(AlopeError::invalid(format!("pad mask length {} differs from sequence length {seq}", m.len())))
            }
            Some(m) => m.to_vec(),
            None => vec![false; seq],
        };
        let final_token_index = pad
            .iter()
            .rposition(|&p| !p)
            .ok_or_else(|| AlopeError::invalid("sequence contains only padding"))?;
        if last_layer >= cfg.n_layers {
            return Err(AlopeError::LayerOutOfRange {
                index: last_layer as i64,
                n_layers: cfg.n_layers,
            });
        }

        // Causal mask; padded keys are hidden from every query but their own.
        let mut allowed = vec![false; seq * seq];
        for i in 0..seq {
            for j in 0..=i {
                allowed[i * seq + j] = !pad[j] || i == j;
            }
        }

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..seq).collect();
        let tok = g.gather(bound.node(self.tok_emb), &ids)?;
        let pos = g.gather(bound.node(self.pos_emb), &positions)?;
        let mut x = g.add(tok, pos)?;

        let eps = T::lit(RMS_EPS);
        let head_dim = cfg.head_dim();
        let inv_sqrt = T::lit(1.0 / (head_dim as f64).sqrt());
        let mut hidden = Vec::with_capacity(last_layer + 1);
        for block in &self.blocks[..=last_layer] {
            let h = g.rms_norm(x, bound.node(block.attn_norm), eps)?;
            let q = block.q_proj.apply(g, bound, h)?;
            let k = block.k_proj.apply(g, bound, h)?;
            let v = block.v_proj.apply(g, bound, h)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let start = head * head_dim;
                let qh = g.col_slice(q, start, head_dim)?;
                let kh = g.col_slice(k, start, head_dim)?;
                let vh = g.col_slice(v, start, head_dim)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt);
                let probs = g.masked_softmax(scores, allowed.clone())?;
                heads.push(g.matmul(probs, vh)?);
            }
            let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = block.o_proj.apply(g, bound, attn)?;
            x = g.add(x, attn)?;

            let h = g.rms_norm(x, bound.node(block.ffn_norm), eps)?;
            let gate = block.gate_proj.apply(g, bound, h)?;
            let gate = match cfg.activation {
                Activation::Silu => g.silu(gate),
                Activation::Gelu => g.gelu(gate),
            };
            let up = block.up_proj.apply(g, bound, h)?;
            let ff = g.mul(gate, up)?;
            let ff = block.down_proj.apply(g, bound, ff)?;
            x = g.add(x, ff)?;
            hidden.push(x);
        }
        Ok(GraphTrace {
            hidden,
            final_token_index,
        })
    }
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn n_layers(&self) -> usize {
        self.hidden_states.len()
    }

    /// Hidden state of the final non-padding token at layer `k`.
    pub fn final_token_state(&self, k: LayerIndex) -> Result<&[T]> {
        let abs = k.resolve(self.n_layers())?;
        Ok(self.hidden_states[abs].row(self.final_token_index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 20,
            max_seq_len: 10,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(LayerIndex(-1).resolve(28).unwrap(), 27);
        assert_eq!(LayerIndex(-7).resolve(8).unwrap(), 1);
        assert_eq!(LayerIndex(3).resolve(8).unwrap(), 3);
        let err = LayerIndex(-9).resolve(8).unwrap_err();
        assert!(matches!(err, AlopeError::LayerOutOfRange { index: -9, n_layers: 8 }));
        assert!(LayerIndex(8).resolve(8).is_err());
    }

    #[test]
    fn layer_list_parsing() {
        let l = parse_layer_list("-1,-7,-11,-16,-20,-24").unwrap();
        assert_eq!(l.len(), 6);
        assert_eq!(l[1], LayerIndex(-7));
        assert!(parse_layer_list("-1,x").is_err());
        assert!(resolve_distinct(&[LayerIndex(-1), LayerIndex(2)], 3).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_forward() {
        let m = TransformerModel::<f32>::new(tiny(), 1).unwrap();
        let t = m.forward(&[5], None).unwrap();
        assert_eq!(t.n_layers(), 3);
        assert!(t.hidden_states.iter().all(|h| h.shape() == [1, 8]));
        assert_eq!(t.final_token_index, 0);
        assert_eq!(t.final_token_state(LayerIndex(-1)).unwrap(), t.hidden_states[2].row(0));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = TransformerModel::<f32>::new(tiny(), 9).unwrap();
        let b = TransformerModel::<f32>::new(tiny(), 9).unwrap();
        let toks = [1, 4, 7, 2];
        assert_eq!(a.forward(&toks, None).unwrap(), b.forward(&toks, None).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = TransformerModel::<f32>::new(tiny(), 1).unwrap();
        assert!(m.forward(&[25], None).is_err());
        assert!(m.forward(&[1; 11], None).is_err());
        assert!(m.forward(&[], None).is_err());
        assert!(m.forward(&[1, 2], Some(&[true, true])).is_err());
    }

    #[test]
    fn right_padding_matches_unpadded() {
        let m = TransformerModel::<f64>::new(tiny(), 3).unwrap();
        let plain = m.forward(&[3, 1, 4], None).unwrap();
        let padded = m.forward(&[3, 1, 4, 0, 0], Some(&[false, false, false, true, true])).unwrap();
        let other_pad = m.forward(&[3, 1, 4, 9, 17], Some(&[false, false, false, true, true])).unwrap();
        assert_eq!(padded.final_token_index, 2);
        for k in -3..0 {
            let k = LayerIndex(k);
            assert_eq!(plain.final_token_state(k).unwrap(), padded.final_token_state(k).unwrap());
            assert_eq!(padded.final_token_state(k).unwrap(), other_pad.final_token_state(k).unwrap());
        }
    }

    #[test]
    fn causality() {
        let m = TransformerModel::<f64>::new(tiny(), 5).unwrap();
        let a = m.forward(&[3, 1, 4, 1, 5], None).unwrap();
        let b = m.forward(&[3, 1, 0, 0, 0], None).unwrap();
        for (ha, hb) in a.hidden_states.iter().zip(&b.hidden_states) {
            assert_eq!(&ha.data()[..2 * 8], &hb.data()[..2 * 8]);
        }
    }
}
