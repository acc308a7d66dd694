//! Regression heads: a single layer-specific head, softmax-weighted layer
//! mixing, and several heads trained under a weighted sum of losses.
//!
//! All heads consume the final-token hidden state of a layer and map it to a
//! scalar with `ŷ = h·w` (plus an optional bias, off by default).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{AlopeError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::transformer::{resolve_distinct, ForwardTrace, LayerIndex, INIT_STD};

/// Candidate layers for single-head sweeps.
pub const DEFAULT_SWEEP_LAYERS: [i64; 6] = [-1, -7, -11, -16, -20, -24];

/// Layer groupings used for the multi-layer strategies.
pub fn default_layer_groups() -> Vec<Vec<LayerIndex>> {
    [(-7..=-1), (-11..=-8), (-16..=-12)]
        .into_iter()
        .map(|r| r.rev().map(LayerIndex).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Vanilla,
    Dynamic,
    Multihead,
}

impl FromStr for StrategyKind {
    type Err = AlopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(StrategyKind::Vanilla),
            "dynamic" => Ok(StrategyKind::Dynamic),
            "multihead" => Ok(StrategyKind::Multihead),
            other => Err(AlopeError::invalid(format!(
                "unknown strategy `{other}` (expected vanilla, dynamic or multihead)"
            ))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Dynamic => "dynamic",
            StrategyKind::Multihead => "multihead",
        })
    }
}

/// Serializable description of a head strategy; also the JSON sidecar payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub strategy: StrategyKind,
    pub layers: Vec<LayerIndex>,
    /// Multi-head loss weights; normalised to sum to one. `None` means uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub bias: bool,
}

impl StrategySpec {
    pub fn vanilla(layer: LayerIndex) -> Self {
        StrategySpec {
            strategy: StrategyKind::Vanilla,
            layers: vec![layer],
            loss_weights: None,
            bias: false,
        }
    }

    pub fn dynamic(layers: Vec<LayerIndex>) -> Self {
        StrategySpec {
            strategy: StrategyKind::Dynamic,
            layers,
            loss_weights: None,
            bias: false,
        }
    }

    pub fn multihead(layers: Vec<LayerIndex>) -> Self {
        StrategySpec {
            strategy: StrategyKind::Multihead,
            layers,
            loss_weights: None,
            bias: false,
        }
    }

    /// Checks layer arity and loss weights against a model of depth `n_layers`.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match self.strategy {
            StrategyKind::Vanilla if self.layers.len() != 1 => {
                return Err(AlopeError::invalid(format!(
                    "vanilla strategy takes exactly one layer, got {}",
                    self.layers.len()
                )))
            }
            StrategyKind::Dynamic | StrategyKind::Multihead if self.layers.len() < 2 => {
                return Err(AlopeError::invalid(format!(
                    "{} strategy needs at least two distinct layers; use vanilla for one",
                    self.strategy
                )))
            }
            _ => {}
        }
        resolve_distinct(&self.layers, n_layers)?;
        if let Some(w) = &self.loss_weights {
            if self.strategy != StrategyKind::Multihead {
                return Err(AlopeError::invalid("loss weights only apply to the multihead strategy"));
            }
            normalized_weights(w, self.layers.len())?;
        }
        Ok(())
    }
}

fn normalized_weights(w: &[f64], heads: usize) -> Result<Vec<f64>> {
    if w.len() != heads {
        return Err(AlopeError::invalid(format!("{} loss weights for {heads} heads", w.len())));
    }
    if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(AlopeError::invalid("loss weights must be positive and finite"));
    }
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / total).collect())
}

#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub layer: LayerIndex,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DynamicWeighting {
    pub layers: Vec<LayerIndex>,
    /// Raw per-layer scalars; the mixing weights are their softmax.
    pub raw_weights: ParamId,
    /// Head over the combined embedding; its `layer` is unused.
    pub head: RegressionHead,
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub heads: Vec<RegressionHead>,
    pub loss_weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum HeadStrategy {
    Vanilla(RegressionHead),
    Dynamic(DynamicWeighting),
    MultiHead(MultiHead),
}

/// A head strategy together with its parameters.
#[derive(Clone, Debug)]
pub struct Heads<T> {
    pub spec: StrategySpec,
    pub strategy: HeadStrategy,
    pub store: ParamStore<T>,
    pub n_layers: usize,
    pub hidden: usize,
}

impl<T: Scalar> Heads<T> {
    /// Head weights are drawn from `normal(0, 0.02)`; dynamic raw weights start at zero.
    pub fn new(spec: StrategySpec, n_layers: usize, hidden: usize, seed: u64) -> Result<Self> {
        spec.validate(n_layers)?;
        if hidden == 0 {
            return Err(AlopeError::invalid("hidden size must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut head = |store: &mut ParamStore<T>, prefix: &str, layer: LayerIndex| -> Result<RegressionHead> {
            let weight = store.insert(format!("{prefix}.weight"), Tensor::randn(&[hidden], INIT_STD, &mut rng), true)?;
            let bias = if spec.bias {
                Some(store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1]), true)?)
            } else {
                None
            };
            Ok(RegressionHead { layer, weight, bias })
        };
        let strategy = match spec.strategy {
            StrategyKind::Vanilla => HeadStrategy::Vanilla(head(&mut store, "head.0", spec.layers[0])?),
            StrategyKind::Dynamic => {
                let raw_weights = store.insert("dynamic.raw_weights", Tensor::zeros(&[spec.layers.len()]), true)?;
                let h = head(&mut store, "dynamic.head", spec.layers[0])?;
                HeadStrategy::Dynamic(DynamicWeighting {
                    layers: spec.layers.clone(),
                    raw_weights,
                    head: h,
                })
            }
            StrategyKind::Multihead => {
                let heads = spec
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| head(&mut store, &format!("head.{i}"), l))
                    .collect::<Result<Vec<_>>>()?;
                let loss_weights = match &spec.loss_weights {
                    Some(w) => normalized_weights(w, heads.len())?,
                    None => vec![1.0 / heads.len() as f64; heads.len()],
                };
                HeadStrategy::MultiHead(MultiHead { heads, loss_weights })
            }
        };
        Ok(Heads {
            spec,
            strategy,
            store,
            n_layers,
            hidden,
        })
    }

    /// Absolute layers whose final-token states the strategy reads, ascending.
    pub fn required_layers(&self) -> Vec<usize> {
        let mut v = resolve_distinct(&self.spec.layers, self.n_layers).expect("validated at construction");
        v.sort_unstable();
        v
    }

    pub fn head_count(&self) -> usize {
        match &self.strategy {
            HeadStrategy::MultiHead(mh) => mh.heads.len(),
            _ => 1,
        }
    }

    fn state(&self, states: &BTreeMap<usize, NodeId>, layer: LayerIndex) -> Result<NodeId> {
        let abs = layer.resolve(self.n_layers)?;
        states
            .get(&abs)
            .copied()
            .ok_or_else(|| AlopeError::invalid(format!("no hidden state supplied for layer {layer}")))
    }

    fn linear(&self, g: &mut Graph<T>, bound: &Bound, head: &RegressionHead, x: NodeId) -> Result<NodeId> {
        let rows = g.value(x).dims2().map(|d| d.0).unwrap_or(0);
        let w = g.reshape(bound.node(head.weight), vec![self.hidden, 1])?;
        let mut y = g.matmul(x, w)?;
        if let Some(b) = head.bias {
            y = g.add_row(y, bound.node(b))?;
        }
        g.reshape(y, vec![rows])
    }

    /// Per-head prediction vectors `[B]` given `[B × hidden]` final-token states keyed by absolute layer.
    pub fn outputs(&self, g: &mut Graph<T>, bound: &Bound, states: &BTreeMap<usize, NodeId>) -> Result<Vec<NodeId>> {
        match &self.strategy {
            HeadStrategy::Vanilla(h) => {
                let x = self.state(states, h.layer)?;
                Ok(vec![self.linear(g, bound, h, x)?])
            }
            HeadStrategy::Dynamic(dw) => {
                let alpha = g.softmax(bound.node(dw.raw_weights))?;
                let mut combined = None;
                for (i, &layer) in dw.layers.iter().enumerate() {
                    let a = g.element(alpha, i)?;
                    let x = self.state(states, layer)?;
                    let term = g.mul_scalar(a, x)?;
                    combined = Some(match combined {
                        None => term,
                        Some(acc) => g.add(acc, term)?,
                    });
                }
                let combined = combined.expect("at least two layers");
                Ok(vec![self.linear(g, bound, &dw.head, combined)?])
            }
            HeadStrategy::MultiHead(mh) => mh
                .heads
                .iter()
                .map(|h| {
                    let x = self.state(states, h.layer)?;
                    self.linear(g, bound, h, x)
                })
                .collect(),
        }
    }

    /// Training loss: MSE, or the weighted sum of per-head MSEs for multi-head.
    pub fn loss(&self, g: &mut Graph<T>, outputs: &[NodeId], targets: NodeId) -> Result<NodeId> {
        match &self.strategy {
            HeadStrategy::MultiHead(mh) => {
                if outputs.len() != mh.loss_weights.len() {
                    return Err(AlopeError::invalid(format!(
                        "{} head outputs for {} loss weights",
                        outputs.len(),
                        mh.loss_weights.len()
                    )));
                }
                let mut total = None;
                for (&out, &w) in outputs.iter().zip(&mh.loss_weights) {
                    let l = g.mse_loss(out, targets)?;
                    let l = g.scale(l, T::lit(w));
                    total = Some(match total {
                        None => l,
                        Some(acc) => g.add(acc, l)?,
                    });
                }
                total.ok_or(AlopeError::Empty("multihead loss"))
            }
            _ => match outputs {
                [out] => g.mse_loss(*out, targets),
                _ => Err(AlopeError::invalid("single-head strategy expects one output")),
            },
        }
    }

    /// Combines per-head values of one sample into the final prediction:
    /// the arithmetic mean for multi-head, the sole value otherwise.
    pub fn combine(per_head: &[T]) -> T {
        let total = per_head.iter().fold(T::zero(), |acc, &v| acc + v);
        total / T::lit(per_head.len() as f64)
    }

    fn trace_states(&self, g: &mut Graph<T>, traces: &[&ForwardTrace<T>]) -> Result<BTreeMap<usize, NodeId>> {
        if traces.is_empty() {
            return Err(AlopeError::Empty("traces"));
        }
        let mut states = BTreeMap::new();
        for abs in self.required_layers() {
            let mut rows = Vec::with_capacity(traces.len() * self.hidden);
            for t in traces {
                if t.n_layers() != self.n_layers {
                    return Err(AlopeError::invalid(format!(
                        "trace has {} layers, heads expect {}",
                        t.n_layers(),
                        self.n_layers
                    )));
                }
                let row = t.final_token_state(LayerIndex(abs as i64))?;
                if row.len() != self.hidden {
                    return Err(AlopeError::shape("trace state", &[row.len()], &[self.hidden]));
                }
                rows.extend_from_slice(row);
            }
            let x = g.constant(Tensor::new(vec![traces.len(), self.hidden], rows)?);
            states.insert(abs, x);
        }
        Ok(states)
    }

    /// Per-head predictions for one trace (one entry unless multi-head).
    pub fn head_predictions(&self, trace: &ForwardTrace<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let states = self.trace_states(&mut g, &[trace])?;
        let outs = self.outputs(&mut g, &bound, &states)?;
        Ok(outs.iter().map(|&o| g.value(o).data()[0]).collect())
    }

    /// Final prediction for one trace.
    pub fn predict(&self, trace: &ForwardTrace<T>) -> Result<T> {
        Ok(Self::combine(&self.head_predictions(trace)?))
    }

    /// Loss value over a batch of traces; for multi-head the weighted aggregate.
    pub fn batch_loss(&self, traces: &[&ForwardTrace<T>], targets: &[T]) -> Result<T> {
        if traces.len() != targets.len() {
            return Err(AlopeError::shape("batch loss", &[traces.len()], &[targets.len()]));
        }
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let states = self.trace_states(&mut g, traces)?;
        let outs = self.outputs(&mut g, &bound, &states)?;
        let t = g.constant(Tensor::vector(targets.to_vec()));
        let loss = self.loss(&mut g, &outs, t)?;
        Ok(g.value(loss).data()[0])
    }

    /// Softmax mixing weights of the dynamic strategy.
    pub fn mixing_weights(&self) -> Option<Vec<T>> {
        let HeadStrategy::Dynamic(dw) = &self.strategy else {
            return None;
        };
        let mut g = Graph::new();
        let w = g.constant(self.store.value(dw.raw_weights).clone());
        let a = g.softmax(w).ok()?;
        Some(g.value(a).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trace whose final-token state at layer k is `states[k]`.
    fn stub(states: &[Vec<f64>]) -> ForwardTrace<f64> {
        ForwardTrace {
            hidden_states: states.iter().map(|s| Tensor::from_rows(&[s.clone()]).unwrap()).collect(),
            final_token_index: 0,
        }
    }

    fn set(heads: &mut Heads<f64>, id: ParamId, v: Vec<f64>) {
        heads.store.assign(id, Tensor::vector(v)).unwrap();
    }

    #[test]
    fn spec_arity_rules() {
        assert!(StrategySpec::vanilla(LayerIndex(-1)).validate(4).is_ok());
        let two = StrategySpec {
            layers: vec![LayerIndex(-1), LayerIndex(-2)],
            ..StrategySpec::vanilla(LayerIndex(-1))
        };
        assert!(two.validate(4).is_err());
        assert!(StrategySpec::dynamic(vec![LayerIndex(-1)]).validate(4).is_err());
        assert!(StrategySpec::dynamic(vec![LayerIndex(-1), LayerIndex(3)]).validate(4).is_err());
        assert!(StrategySpec::multihead(vec![LayerIndex(-1), LayerIndex(-5)]).validate(4).is_err());
        let mut mh = StrategySpec::multihead(vec![LayerIndex(-1), LayerIndex(-2)]);
        mh.loss_weights = Some(vec![1.0]);
        assert!(mh.validate(4).is_err());
        mh.loss_weights = Some(vec![1.0, -1.0]);
        assert!(mh.validate(4).is_err());
        mh.loss_weights = Some(vec![3.0, 1.0]);
        let h = Heads::<f64>::new(mh, 4, 2, 0).unwrap();
        let HeadStrategy::MultiHead(m) = &h.strategy else { panic!() };
        assert_eq!(m.loss_weights, vec![0.75, 0.25]);
    }

    #[test]
    fn default_groups() {
        let g = default_layer_groups();
        assert_eq!(g[0].len(), 7);
        assert_eq!(g[0][0], LayerIndex(-1));
        assert_eq!(g[1], vec![LayerIndex(-8), LayerIndex(-9), LayerIndex(-10), LayerIndex(-11)]);
        assert_eq!(g[2].len(), 5);
    }

    #[test]
    fn vanilla_examples() {
        let trace = stub(&[vec![0.3, -0.2, 0.9], vec![1.0, 0.0, 0.0]]);
        let mut h = Heads::<f64>::new(StrategySpec::vanilla(LayerIndex(-1)), 2, 3, 0).unwrap();
        let HeadStrategy::Vanilla(head) = h.strategy.clone() else { panic!() };
        set(&mut h, head.weight, vec![0.0; 3]);
        assert_eq!(h.predict(&trace).unwrap(), 0.0);
        set(&mut h, head.weight, vec![3.0, 0.0, 0.0]);
        assert_eq!(h.predict(&trace).unwrap(), 3.0);
        // linear in the weights
        set(&mut h, head.weight, vec![0.5, 1.5, -2.0]);
        let y = h.predict(&stub(&[vec![0.0; 3], vec![0.2, 0.4, 0.1]])).unwrap();
        set(&mut h, head.weight, vec![1.0, 3.0, -4.0]);
        let y2 = h.predict(&stub(&[vec![0.0; 3], vec![0.2, 0.4, 0.1]])).unwrap();
        assert_eq!(y2, 2.0 * y);
    }

    #[test]
    fn vanilla_bias() {
        let mut spec = StrategySpec::vanilla(LayerIndex(0));
        spec.bias = true;
        let mut h = Heads::<f64>::new(spec, 1, 2, 0).unwrap();
        let HeadStrategy::Vanilla(head) = h.strategy.clone() else { panic!() };
        set(&mut h, head.weight, vec![1.0, 1.0]);
        set(&mut h, head.bias.unwrap(), vec![0.5]);
        assert_eq!(h.predict(&stub(&[vec![1.0, 2.0]])).unwrap(), 3.5);
    }

    #[test]
    fn dynamic_uniform_init_is_layer_mean() {
        let trace = stub(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 6.0]]);
        let mut h = Heads::<f64>::new(StrategySpec::dynamic(vec![LayerIndex(-1), LayerIndex(-3)]), 3, 2, 0).unwrap();
        let HeadStrategy::Dynamic(dw) = h.strategy.clone() else { panic!() };
        set(&mut h, dw.head.weight, vec![1.0, 10.0]);
        // mean of layers 2 and 0 = [3, 4]
        assert!((h.predict(&trace).unwrap() - 43.0).abs() < 1e-12);
        assert_eq!(h.mixing_weights().unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn dynamic_saturation_matches_dominant_layer() {
        let trace = stub(&[vec![1.0, 2.0], vec![3.0, -2.0]]);
        let mut h = Heads::<f64>::new(StrategySpec::dynamic(vec![LayerIndex(0), LayerIndex(1)]), 2, 2, 0).unwrap();
        let HeadStrategy::Dynamic(dw) = h.strategy.clone() else { panic!() };
        set(&mut h, dw.raw_weights, vec![60.0, -60.0]);
        set(&mut h, dw.head.weight, vec![1.0, 1.0]);
        assert!((h.predict(&trace).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dynamic_identical_layers_equals_vanilla() {
        let s = vec![0.4, -1.1, 2.0];
        let trace = stub(&[s.clone(), s.clone(), vec![9.0, 9.0, 9.0]]);
        let mut dynh = Heads::<f64>::new(StrategySpec::dynamic(vec![LayerIndex(0), LayerIndex(1)]), 3, 3, 0).unwrap();
        let HeadStrategy::Dynamic(dw) = dynh.strategy.clone() else { panic!() };
        set(&mut dynh, dw.raw_weights, vec![0.3, -1.2]);
        set(&mut dynh, dw.head.weight, vec![0.7, 0.1, -0.5]);
        let mut van = Heads::<f64>::new(StrategySpec::vanilla(LayerIndex(0)), 3, 3, 0).unwrap();
        let HeadStrategy::Vanilla(vh) = van.strategy.clone() else { panic!() };
        set(&mut van, vh.weight, vec![0.7, 0.1, -0.5]);
        assert!((dynh.predict(&trace).unwrap() - van.predict(&trace).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn multihead_mean_and_loss() {
        let trace = stub(&[vec![1.0], vec![2.0], vec![3.0]]);
        let mut h = Heads::<f64>::new(
            StrategySpec::multihead(vec![LayerIndex(0), LayerIndex(1), LayerIndex(2)]),
            3,
            1,
            0,
        )
        .unwrap();
        let HeadStrategy::MultiHead(mh) = h.strategy.clone() else { panic!() };
        for head in &mh.heads {
            set(&mut h, head.weight, vec![10.0]);
        }
        assert_eq!(h.head_predictions(&trace).unwrap(), vec![10.0, 20.0, 30.0]);
        assert_eq!(h.predict(&trace).unwrap(), 20.0);
        let per = h.head_predictions(&trace).unwrap();
        assert_eq!(h.predict(&trace).unwrap(), (per[0] + per[1] + per[2]) / 3.0);
    }

    #[test]
    fn multihead_loss_weighted_sum() {
        // one sample with target 0: head outputs sqrt(0.2) and sqrt(0.4) give MSEs 0.2 and 0.4
        let trace = stub(&[vec![0.2f64.sqrt()], vec![0.4f64.sqrt()]]);
        let mut h = Heads::<f64>::new(StrategySpec::multihead(vec![LayerIndex(0), LayerIndex(1)]), 2, 1, 0).unwrap();
        let HeadStrategy::MultiHead(mh) = h.strategy.clone() else { panic!() };
        set(&mut h, mh.heads[0].weight, vec![1.0]);
        set(&mut h, mh.heads[1].weight, vec![1.0]);
        let l = h.batch_loss(&[&trace], &[0.0]).unwrap();
        assert!((l - 0.3).abs() < 1e-15, "{l}");

        let exact = stub(&[vec![0.5], vec![0.5]]);
        assert_eq!(h.batch_loss(&[&exact], &[0.5]).unwrap(), 0.0);
        assert!(h.batch_loss(&[&exact], &[0.5, 0.1]).is_err());
    }
}
