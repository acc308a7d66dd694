//! Training loop binding a backbone (live or frozen) and a head strategy to data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::checkpoint;
use crate::data::dump::EmbeddingDump;
use crate::data::normalize::{NormMode, ScoreTransform};
use crate::data::sample::ScoreRange;
use crate::error::{AlopeError, Result};
use crate::eval::report::{build_report, Report, RunPredictions};
use crate::eval::stats::spearman;
use crate::eval::williams::Tails;
use crate::heads::{Heads, StrategySpec};
use crate::lora::{self, LoraConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{clip_grad_norm, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::transformer::{resolve_distinct, LayerIndex, TransformerModel};

const LORA_SALT: u64 = 0x4c6f_5241;
const HEAD_SALT: u64 = 0x4865_6164;
const SHUFFLE_SALT: u64 = 0x5368_7566;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: StrategySpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Validation every this many steps; 0 means once per epoch only.
    pub eval_every: usize,
    /// Train heads only: no adapters, every backbone weight frozen.
    pub frozen_backbone: bool,
    pub lora: LoraConfig,
    pub normalization: NormMode,
    pub score_range: ScoreRange,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: StrategySpec::vanilla(LayerIndex(-1)),
            epochs: 3,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Adamw,
            seed: 0,
            grad_clip: Some(1.0),
            eval_every: 0,
            frozen_backbone: false,
            lora: LoraConfig::default(),
            normalization: NormMode::Minmax,
            score_range: ScoreRange::DA,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AlopeError::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AlopeError::invalid("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(AlopeError::invalid("weight decay must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(AlopeError::invalid("grad clip must be positive"));
            }
        }
        if !self.frozen_backbone {
            self.lora.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub epoch: usize,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub checkpoint: Option<PathBuf>,
    pub trainable_params: usize,
    pub steps: usize,
}

/// Training or evaluation inputs.
#[derive(Clone, Copy, Debug)]
pub enum Examples<'a> {
    /// Precomputed final-token embeddings; no backbone involved.
    Embeddings(&'a EmbeddingDump),
    /// Token sequences run through a live backbone.
    Sequences { tokens: &'a [Vec<u32>], targets: &'a [f64] },
}

impl Examples<'_> {
    pub fn len(&self) -> usize {
        self.targets().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> &[f64] {
        match self {
            Examples::Embeddings(d) => &d.targets,
            Examples::Sequences { targets, .. } => targets,
        }
    }
}

/// Backbone (optional), heads and the target transform fitted at training time.
#[derive(Clone, Debug)]
pub struct Regressor<T> {
    pub backbone: Option<TransformerModel<T>>,
    pub heads: Heads<T>,
    pub transform: ScoreTransform,
}

impl<T: Scalar> Regressor<T> {
    /// Live backbone. Adapters are injected unless `cfg.frozen_backbone`.
    pub fn with_backbone(mut model: TransformerModel<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (n_layers, hidden) = (model.n_layers(), model.config.d_model);
        let heads = Heads::new(cfg.strategy.clone(), n_layers, hidden, cfg.seed ^ HEAD_SALT)?;
        if cfg.frozen_backbone {
            let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
            ids.into_iter().for_each(|id| model.store.set_trainable(id, false));
        } else {
            lora::inject(&mut model, &cfg.lora, cfg.seed ^ LORA_SALT)?;
        }
        Ok(Regressor {
            backbone: Some(model),
            heads,
            transform: ScoreTransform::IDENTITY,
        })
    }

    /// Heads over embeddings of a `n_layers`-deep model with width `hidden`.
    pub fn frozen(n_layers: usize, hidden: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Regressor {
            backbone: None,
            heads: Heads::new(cfg.strategy.clone(), n_layers, hidden, cfg.seed ^ HEAD_SALT)?,
            transform: ScoreTransform::IDENTITY,
        })
    }

    pub fn trainable_params(&self) -> usize {
        self.backbone.as_ref().map_or(0, |m| m.store.trainable_count()) + self.heads.store.trainable_count()
    }

    /// Digest of the base (non-adapter) backbone weights.
    pub fn base_digest(&self) -> Option<String> {
        self.backbone
            .as_ref()
            .map(|m| m.store.digest(|p| !p.name.ends_with(".lora_a") && !p.name.ends_with(".lora_b")))
    }

    fn check(&self, data: &Examples) -> Result<()> {
        match (data, &self.backbone) {
            (Examples::Embeddings(d), None) => {
                if d.model_layers != self.heads.n_layers || d.hidden != self.heads.hidden {
                    return Err(AlopeError::invalid(format!(
                        "dump is {} layers × {} wide, heads expect {} × {}",
                        d.model_layers, d.hidden, self.heads.n_layers, self.heads.hidden
                    )));
                }
                for l in self.heads.required_layers() {
                    d.slot(l)?;
                }
                Ok(())
            }
            (Examples::Sequences { tokens, targets }, Some(_)) => {
                if tokens.len() != targets.len() {
                    return Err(AlopeError::shape("sequences", &[tokens.len()], &[targets.len()]));
                }
                Ok(())
            }
            (Examples::Embeddings(_), Some(_)) => Err(AlopeError::invalid("a live backbone needs token sequences")),
            (Examples::Sequences { .. }, None) => Err(AlopeError::invalid("token sequences need a backbone")),
        }
    }

    /// `[B × hidden]` final-token states for each required layer.
    fn features(
        &self,
        g: &mut Graph<T>,
        bound: Option<&Bound>,
        data: &Examples,
        batch: &[usize],
    ) -> Result<BTreeMap<usize, NodeId>> {
        let layers = self.heads.required_layers();
        let mut states = BTreeMap::new();
        match data {
            Examples::Embeddings(dump) => {
                for &l in &layers {
                    let mut rows = Vec::with_capacity(batch.len() * dump.hidden);
                    for &i in batch {
                        rows.extend(dump.embedding(i, l)?.iter().map(|&v| T::lit(v as f64)));
                    }
                    let x = g.constant(Tensor::new(vec![batch.len(), dump.hidden], rows)?);
                    states.insert(l, x);
                }
            }
            Examples::Sequences { tokens, .. } => {
                let model = self.backbone.as_ref().expect("checked");
                let bound = bound.expect("bound with backbone");
                let last = *layers.last().expect("at least one layer");
                let mut rows: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
                for &i in batch {
                    let trace = model.forward_graph(g, bound, &tokens[i], None, last)?;
                    for &l in &layers {
                        let r = g.row(trace.hidden[l], trace.final_token_index)?;
                        rows.entry(l).or_default().push(r);
                    }
                }
                for (l, r) in rows {
                    states.insert(l, g.stack(&r)?);
                }
            }
        }
        Ok(states)
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut stores = Vec::with_capacity(2);
        if let Some(m) = self.backbone.as_mut() {
            stores.push(&mut m.store);
        }
        stores.push(&mut self.heads.store);
        stores
    }

    /// Forward, backward and gradient accumulation for one batch; returns the loss.
    pub fn compute_grads(&mut self, data: &Examples, batch: &[usize], targets: &[T]) -> Result<f64> {
        let mut g = Graph::new();
        let bb = self.backbone.as_ref().map(|m| m.store.bind(&mut g));
        let hb = self.heads.store.bind(&mut g);
        let states = self.features(&mut g, bb.as_ref(), data, batch)?;
        let outs = self.heads.outputs(&mut g, &hb, &states)?;
        let t = g.constant(Tensor::vector(batch.iter().map(|&i| targets[i]).collect()));
        let loss = self.heads.loss(&mut g, &outs, t)?;
        let value = g.value(loss).data()[0].as_f64();
        g.backward(loss)?;
        self.heads.store.zero_grads();
        self.heads.store.accumulate_grads(&g, &hb);
        if let (Some(m), Some(b)) = (self.backbone.as_mut(), bb.as_ref()) {
            m.store.zero_grads();
            m.store.accumulate_grads(&g, b);
        }
        Ok(value)
    }

    /// Predictions on the training scale, one per example.
    pub fn predict_raw(&self, data: &Examples) -> Result<Vec<T>> {
        self.check(data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(64) {
            let mut g = Graph::new();
            let bb = self.backbone.as_ref().map(|m| m.store.bind(&mut g));
            let hb = self.heads.store.bind(&mut g);
            let states = self.features(&mut g, bb.as_ref(), data, chunk)?;
            let outs = self.heads.outputs(&mut g, &hb, &states)?;
            for s in 0..chunk.len() {
                let per_head: Vec<T> = outs.iter().map(|&o| g.value(o).data()[s]).collect();
                out.push(Heads::<T>::combine(&per_head));
            }
        }
        Ok(out)
    }

    /// Predictions mapped back to the original score scale.
    pub fn predict(&self, data: &Examples) -> Result<Vec<f64>> {
        Ok(self
            .predict_raw(data)?
            .into_iter()
            .map(|v| self.transform.inverse(v.as_f64()))
            .collect())
    }
}

/// Runs `cfg.epochs` passes of shuffled mini-batch training.
pub fn train<T: Scalar>(
    reg: &mut Regressor<T>,
    data: &Examples,
    valid: Option<&Examples>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    reg.check(data)?;
    if let Some(v) = valid {
        reg.check(v)?;
    }
    if data.is_empty() {
        return Err(AlopeError::Empty("training set"));
    }
    reg.transform = ScoreTransform::fit(cfg.normalization, data.targets(), cfg.score_range)?;
    let targets: Vec<T> = data
        .targets()
        .iter()
        .map(|&v| T::lit(reg.transform.forward(v)))
        .collect();
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        loss_curve: Vec::new(),
        validation: Vec::new(),
        checkpoint: None,
        trainable_params: reg.trainable_params(),
        steps: 0,
    };
    let validate = |reg: &Regressor<T>, step: usize, epoch: usize| -> Result<Option<ValidationPoint>> {
        let Some(v) = valid else { return Ok(None) };
        let preds = reg.predict(v)?;
        Ok(Some(ValidationPoint {
            step,
            epoch,
            spearman: spearman(&preds, v.targets()).ok(),
        }))
    };

    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let loss = reg.compute_grads(data, batch, &targets)?;
            let mut stores = reg.stores_mut();
            let grad_norm = clip_grad_norm(&mut stores, cfg.grad_clip);
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(AlopeError::NonFinite {
                    step,
                    lr: cfg.learning_rate,
                    grad_norm,
                });
            }
            opt.step(&mut stores);
            report.loss_curve.push(loss);
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                report.validation.extend(validate(reg, step, epoch)?);
            }
        }
        report.validation.extend(validate(reg, step, epoch)?);
    }
    report.steps = step;
    Ok(report)
}

/// Final-token states of `tokens` at `layers`, written as an embedding dump.
pub fn export_embeddings<T: Scalar>(
    model: &TransformerModel<T>,
    tokens: &[Vec<u32>],
    targets: &[f64],
    pair_ids: &[String],
    layers: &[LayerIndex],
) -> Result<EmbeddingDump> {
    if tokens.len() != targets.len() || tokens.len() != pair_ids.len() {
        return Err(AlopeError::shape("export", &[tokens.len()], &[targets.len(), pair_ids.len()]));
    }
    let mut abs = resolve_distinct(layers, model.n_layers())?;
    abs.sort_unstable();
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(tokens.len() * abs.len() * d);
    for seq in tokens {
        let trace = model.forward(seq, None)?;
        for &l in &abs {
            data.extend(
                trace
                    .final_token_state(LayerIndex(l as i64))?
                    .iter()
                    .map(|v| v.as_f64() as f32),
            );
        }
    }
    EmbeddingDump::new(model.n_layers(), abs, d, data, targets.to_vec(), pair_ids)
}

const BACKBONE_FILE: &str = "backbone.ckpt";
const ADAPTERS_FILE: &str = "adapters.ckpt";
const HEADS_FILE: &str = "heads.ckpt";
const REGRESSOR_FILE: &str = "regressor.json";

#[derive(Serialize, Deserialize)]
struct RegressorMeta {
    transform: ScoreTransform,
    backbone: bool,
    adapters: bool,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Writes every part of `reg` into `dir`; returns the heads checkpoint path.
pub fn save_regressor<T: Scalar>(dir: &Path, reg: &Regressor<T>, extra: serde_json::Value) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| AlopeError::io(dir, e))?;
    let mut adapters = false;
    if let Some(m) = &reg.backbone {
        checkpoint::save_model(&dir.join(BACKBONE_FILE), m, extra.clone())?;
        if !lora::adapters(m).is_empty() {
            checkpoint::save_adapters(&dir.join(ADAPTERS_FILE), m)?;
            adapters = true;
        }
    }
    let heads = dir.join(HEADS_FILE);
    checkpoint::save_heads(&heads, &reg.heads)?;
    let meta = RegressorMeta {
        transform: reg.transform,
        backbone: reg.backbone.is_some(),
        adapters,
        extra,
    };
    crate::binio::write_atomic(
        &dir.join(REGRESSOR_FILE),
        &serde_json::to_vec_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(heads)
}

pub fn load_regressor<T: Scalar>(dir: &Path) -> Result<(Regressor<T>, serde_json::Value)> {
    let path = dir.join(REGRESSOR_FILE);
    let text = std::fs::read(&path).map_err(|e| AlopeError::io(&path, e))?;
    let meta: RegressorMeta =
        serde_json::from_slice(&text).map_err(|e| AlopeError::Corrupt(format!("{}: {e}", path.display())))?;
    let backbone = if meta.backbone {
        let (mut m, _) = checkpoint::load_model(&dir.join(BACKBONE_FILE))?;
        if meta.adapters {
            checkpoint::load_adapters(&dir.join(ADAPTERS_FILE), &mut m)?;
        }
        Some(m)
    } else {
        None
    };
    let heads = checkpoint::load_heads(&dir.join(HEADS_FILE))?;
    Ok((
        Regressor {
            backbone,
            heads,
            transform: meta.transform,
        },
        meta.extra,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub layer: LayerIndex,
    pub absolute: usize,
    pub per_pair: BTreeMap<String, Option<f64>>,
    pub average: Option<f64>,
    pub final_loss: Option<f64>,
    pub trainable_params: usize,
    /// Test-set predictions in example order.
    pub predictions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub layer: LayerIndex,
    pub outcome: std::result::Result<LayerOutcome, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub pairs: Vec<String>,
    pub runs: Vec<SweepRun>,
    /// Layer with the highest average Spearman; ties go to the layer nearest −1.
    pub best: Option<LayerIndex>,
}

fn group_by_pair(values: &[f64], pair_ids: &[String]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (v, p) in values.iter().zip(pair_ids) {
        out.entry(p.clone()).or_default().push(*v);
    }
    out
}

impl SweepReport {
    /// Runs × pairs Spearman table with Williams significance marks.
    pub fn table(&self, test_targets: &[f64], test_pairs: &[String], alpha: f64, tails: Tails) -> Result<Report> {
        let refs: Vec<(String, Vec<f64>)> = group_by_pair(test_targets, test_pairs).into_iter().collect();
        let runs: Vec<RunPredictions> = self
            .runs
            .iter()
            .map(|r| RunPredictions {
                label: format!("TL({})", r.layer),
                // Failed layers keep their row, filled with NA.
                predictions: r
                    .outcome
                    .as_ref()
                    .map(|o| group_by_pair(&o.predictions, test_pairs))
                    .unwrap_or_default(),
            })
            .collect();
        build_report(&runs, &refs, alpha, tails)
    }
}

/// One independent vanilla-head run per layer, each starting from the same
/// base weights and seed. Failures are recorded per layer.
pub fn layer_sweep<T: Scalar>(
    base: Option<&TransformerModel<T>>,
    train_set: &Examples,
    test_set: &Examples,
    test_pairs: &[String],
    layers: &[LayerIndex],
    cfg: &TrainConfig,
) -> Result<SweepReport> {
    if layers.is_empty() {
        return Err(AlopeError::Empty("sweep layers"));
    }
    if test_pairs.len() != test_set.len() {
        return Err(AlopeError::shape("sweep pairs", &[test_pairs.len()], &[test_set.len()]));
    }
    let (n_layers, hidden) = match (base, train_set) {
        (Some(m), _) => (m.n_layers(), m.config.d_model),
        (None, Examples::Embeddings(d)) => (d.model_layers, d.hidden),
        (None, Examples::Sequences { .. }) => return Err(AlopeError::invalid("token sequences need a backbone")),
    };
    let refs = group_by_pair(test_set.targets(), test_pairs);

    let run_one = |layer: LayerIndex| -> Result<LayerOutcome> {
        let absolute = layer.resolve(n_layers)?;
        let mut lcfg = cfg.clone();
        lcfg.strategy = StrategySpec {
            bias: cfg.strategy.bias,
            ..StrategySpec::vanilla(layer)
        };
        let mut reg = match base {
            Some(m) => Regressor::with_backbone(m.clone(), &lcfg)?,
            None => Regressor::frozen(n_layers, hidden, &lcfg)?,
        };
        let report = train(&mut reg, train_set, None, &lcfg)?;
        let predictions = reg.predict(test_set)?;
        let grouped = group_by_pair(&predictions, test_pairs);
        let per_pair: BTreeMap<String, Option<f64>> = refs
            .iter()
            .map(|(p, r)| (p.clone(), spearman(&grouped[p], r).ok()))
            .collect();
        let average = per_pair
            .values()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        Ok(LayerOutcome {
            layer,
            absolute,
            per_pair,
            average,
            final_loss: report.loss_curve.last().copied(),
            trainable_params: report.trainable_params,
            predictions,
        })
    };

    let runs: Vec<SweepRun> = layers
        .par_iter()
        .map(|&layer| SweepRun {
            layer,
            outcome: run_one(layer).map_err(|e| e.to_string()),
        })
        .collect();

    let best = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .filter_map(|o| o.average.map(|a| (a, o.absolute, o.layer)))
        .max_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
        .map(|(_, _, l)| l);
    Ok(SweepReport {
        pairs: refs.keys().cloned().collect(),
        runs,
        best,
    })
}
