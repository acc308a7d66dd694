use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};

use alope::checkpoint::load_model;
use alope::config::{Settings, CONFIG_ENV};
use alope::data::dump::EmbeddingDump;
use alope::data::prompt::DEFAULT_TEMPLATE;
use alope::data::synth::{generate_qe, planted_dump, PlantedConfig, SynthQeConfig, DEFAULT_PAIRS};
use alope::data::{encode_samples, load_tsv, sample::to_tsv, Dataset, PromptTemplate, ScoreRange, Tokenizer};
use alope::eval::report::{group_predictions, read_predictions, PredictionRow};
use alope::eval::{pearson, spearman, williams_test, Tails, WilliamsInput};
use alope::heads::{default_layer_groups, StrategyKind, DEFAULT_SWEEP_LAYERS};
use alope::train::{export_embeddings, layer_sweep, load_regressor, save_regressor, train, Examples, Regressor};
use alope::transformer::{parse_layer_list, LayerIndex, TransformerModel};

use crate::args::*;
use crate::manifest::{self, Recorder};
use crate::Failure;

/// Scalar type for every model the CLI builds; checkpoints are f32 anyway.
type S = f32;

const MODEL_DIR: &str = "model";
const REGRESSOR_FILE: &str = "regressor.json";

pub fn run(command: Command, argv: Vec<String>) -> Result<(), Failure> {
    match command {
        Command::Train(a) => cmd_train(&a, &argv),
        Command::Sweep(a) => cmd_sweep(&a, &argv),
        Command::Eval(a) => cmd_eval(&a, &argv),
        Command::Compare(a) => cmd_compare(&a, &argv),
        Command::ExportEmbeddings(a) => cmd_export(&a, &argv),
        Command::GenSynth(a) => cmd_gen_synth(&a, &argv),
        Command::Rerun(a) => cmd_rerun(&a),
    }
}

// ---------------------------------------------------------------- settings

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve_settings(a: &SettingsArgs, rec: &mut Recorder) -> Result<Settings, Failure> {
    let mut s = Settings::default();
    let file = a
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    if let Some(path) = file {
        rec.input(&path)?;
        s.apply_file(&path).map_err(Failure::usage)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        s.set(k.trim(), v.trim()).map_err(Failure::usage)?;
    }
    let t = &mut s.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = &a.optimizer {
        s.set("optimizer", v).map_err(Failure::usage)?;
    }
    if let Some(v) = a.lora_rank {
        s.train.lora.rank = v;
    }
    if let Some(v) = &a.normalization {
        s.set("normalization", v).map_err(Failure::usage)?;
    }
    if let Some(v) = a.max_steps {
        s.train.max_steps = Some(v);
    }
    if a.frozen_backbone {
        s.train.frozen_backbone = true;
    }
    s.train.validate().map_err(Failure::usage)?;
    Ok(s)
}

fn apply_strategy(s: &mut Settings, strategy: Option<&str>, layers: Option<&str>, set: &[String]) -> Result<(), Failure> {
    if let Some(v) = strategy {
        s.set("strategy", v).map_err(Failure::usage)?;
    }
    if let Some(v) = layers {
        s.set("layers", v).map_err(Failure::usage)?;
    }
    // A multi-layer strategy without a layer list gets the first default group.
    let layers_given = layers.is_some() || set.iter().any(|kv| kv.trim_start().starts_with("layers"));
    let spec = &mut s.train.strategy;
    if spec.strategy != StrategyKind::Vanilla && !layers_given && spec.layers == [LayerIndex(-1)] {
        spec.layers = default_layer_groups().swap_remove(0);
    }
    Ok(())
}

fn config_snapshot(s: &Settings) -> serde_json::Value {
    serde_json::to_value(s).expect("settings serialize")
}

fn range_from(min: Option<f64>, max: Option<f64>) -> Result<ScoreRange, Failure> {
    let d = ScoreRange::DA;
    ScoreRange::new(min.unwrap_or(d.min), max.unwrap_or(d.max)).map_err(Failure::usage)
}

// ---------------------------------------------------------------- inputs

/// Input files are the user's responsibility: unreadable or malformed ones are usage errors.
fn load_dataset(rec: &mut Recorder, path: &Path, range: ScoreRange) -> Result<Dataset, Failure> {
    rec.input(path)?;
    load_tsv(path, range).map_err(Failure::usage)
}

fn load_dump(rec: &mut Recorder, path: &Path) -> Result<EmbeddingDump, Failure> {
    rec.input(path)?;
    EmbeddingDump::read(path).map_err(Failure::usage)
}

fn load_prediction_rows(rec: &mut Recorder, path: &Path) -> Result<Vec<PredictionRow>, Failure> {
    rec.input(path)?;
    let rows = read_predictions(path).map_err(Failure::usage)?;
    if rows.is_empty() {
        return Err(Failure::usage(format!("{}: no predictions", path.display())));
    }
    Ok(rows)
}

/// Text pipeline carried alongside every backbone checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TextPipeline {
    tokenizer: Tokenizer,
    prompt_template: String,
}

impl TextPipeline {
    fn from_extra(extra: &serde_json::Value, origin: &Path) -> Result<Self, Failure> {
        let p: TextPipeline = serde_json::from_value(extra.clone())
            .map_err(|e| Failure::usage(format!("{}: no tokenizer metadata ({e})", origin.display())))?;
        // Deserialization skips the rank table; rebuild it.
        let tokenizer = Tokenizer::from_merges(p.tokenizer.merges().to_vec()).map_err(Failure::usage)?;
        Ok(TextPipeline { tokenizer, ..p })
    }

    fn encode(&self, data: &Dataset, max_len: usize) -> Result<Vec<Vec<u32>>, Failure> {
        let template = PromptTemplate::new(&self.prompt_template).map_err(Failure::usage)?;
        Ok(encode_samples(&data.samples, &template, &self.tokenizer, max_len))
    }
}

/// Locates a backbone: a checkpoint file, a directory holding a saved
/// regressor, or a `train` output directory.
enum BackboneSource {
    File(PathBuf),
    Regressor(PathBuf),
}

fn locate_backbone(path: &Path) -> Result<BackboneSource, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("input not found: {}", path.display())));
    }
    if path.is_file() {
        return Ok(BackboneSource::File(path.to_path_buf()));
    }
    for dir in [path.to_path_buf(), path.join(MODEL_DIR)] {
        if dir.join(REGRESSOR_FILE).is_file() {
            return Ok(BackboneSource::Regressor(dir));
        }
    }
    Err(Failure::usage(format!("{}: no checkpoint found", path.display())))
}

/// A base backbone for further training. Adapters of a trained run are merged in.
fn load_base(rec: &mut Recorder, path: &Path) -> Result<(TransformerModel<S>, TextPipeline), Failure> {
    rec.input(path)?;
    match locate_backbone(path)? {
        BackboneSource::File(f) => {
            let (m, extra) = load_model::<S>(&f).map_err(Failure::usage)?;
            Ok((m, TextPipeline::from_extra(&extra, &f)?))
        }
        BackboneSource::Regressor(dir) => {
            let (reg, extra) = load_regressor::<S>(&dir).map_err(Failure::usage)?;
            let model = reg
                .backbone
                .ok_or_else(|| Failure::usage(format!("{}: heads-only run has no backbone", dir.display())))?;
            let merged = alope::lora::merged_model(&model)?;
            Ok((merged, TextPipeline::from_extra(&extra, &dir)?))
        }
    }
}

/// Fresh model and a tokenizer trained on the training prompts.
fn fresh_base(s: &Settings, train_set: &Dataset) -> Result<(TransformerModel<S>, TextPipeline), Failure> {
    let prompt_template = s.prompt_template.clone().unwrap_or_else(|| DEFAULT_TEMPLATE.to_string());
    let template = PromptTemplate::new(&prompt_template).map_err(Failure::usage)?;
    let prompts: Vec<String> = train_set.samples.iter().map(|x| template.build(x)).collect();
    let tokenizer = Tokenizer::train(&prompts, s.tokenizer_vocab).map_err(Failure::usage)?;
    let mut cfg = s.model.clone();
    cfg.vocab_size = s.tokenizer_vocab;
    cfg.validate().map_err(Failure::usage)?;
    let model = TransformerModel::new(cfg, s.train.seed)?;
    Ok((model, TextPipeline { tokenizer, prompt_template }))
}

fn pipeline_extra(p: &TextPipeline) -> serde_json::Value {
    serde_json::to_value(p).expect("pipeline serializes")
}

// ---------------------------------------------------------------- outputs

/// Prediction file: raw predictions plus a copy clipped to the score range.
fn predictions_tsv(preds: &[f64], refs: &[f64], pairs: &[String], range: ScoreRange) -> String {
    let mut next: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = String::from("pair_id\tindex\tprediction\treference\tclipped\n");
    for ((p, r), pair) in preds.iter().zip(refs).zip(pairs) {
        let idx = next.entry(pair).or_insert(0);
        let _ = writeln!(out, "{pair}\t{idx}\t{p}\t{r}\t{}", range.clamp(*p));
        *idx += 1;
    }
    out
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializes");
    b.push(b'\n');
    b
}

fn record_tree(rec: &mut Recorder, sub: &str) -> Result<(), Failure> {
    let dir = rec.path(sub);
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    for n in names {
        rec.record(&format!("{sub}/{n}"));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainSummary<'a> {
    #[serde(flatten)]
    report: &'a alope::train::TrainReport,
    strategy: &'a alope::heads::StrategySpec,
    base_digest: Option<String>,
    mixing_weights: Option<Vec<f64>>,
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<(), Failure> {
    let mut rec = Recorder::new("train", &a.out, argv)?;
    let mut s = resolve_settings(&a.settings, &mut rec)?;
    apply_strategy(&mut s, a.strategy.as_deref(), a.layers.as_deref(), &a.settings.set)?;
    let cfg = s.train.clone();
    let range = cfg.score_range;

    let (reg, report, valid_out, extra) = if let Some(dump_path) = &a.dump {
        let dump = load_dump(&mut rec, dump_path)?;
        let valid = a.valid.as_deref().map(|p| load_dump(&mut rec, p)).transpose()?;
        cfg.strategy.validate(dump.model_layers).map_err(Failure::usage)?;
        let mut reg = Regressor::<S>::frozen(dump.model_layers, dump.hidden, &cfg).map_err(Failure::usage)?;
        let data = Examples::Embeddings(&dump);
        let v = valid.as_ref().map(Examples::Embeddings);
        let report = train(&mut reg, &data, v.as_ref(), &cfg)?;
        let valid_out = match (&valid, &v) {
            (Some(d), Some(v)) => Some((reg.predict(v)?, d.targets.clone(), d.pair_ids())),
            _ => None,
        };
        (reg, report, valid_out, serde_json::Value::Null)
    } else {
        let data_path = a.data.as_ref().expect("clap requires --data or --dump");
        let train_set = load_dataset(&mut rec, data_path, range)?;
        let valid_set = a.valid.as_deref().map(|p| load_dataset(&mut rec, p, range)).transpose()?;
        let (model, pipeline) = match &a.base {
            Some(b) => load_base(&mut rec, b)?,
            None => fresh_base(&s, &train_set)?,
        };
        cfg.strategy.validate(model.n_layers()).map_err(Failure::usage)?;
        let max_len = model.config.max_seq_len;
        let tokens = pipeline.encode(&train_set, max_len)?;
        let targets = train_set.scores();
        let mut reg = Regressor::<S>::with_backbone(model, &cfg).map_err(Failure::usage)?;
        let data = Examples::Sequences { tokens: &tokens, targets: &targets };
        let valid_enc = valid_set
            .as_ref()
            .map(|v| Ok::<_, Failure>((pipeline.encode(v, max_len)?, v.scores())))
            .transpose()?;
        let v = valid_enc
            .as_ref()
            .map(|(t, y)| Examples::Sequences { tokens: t, targets: y });
        let report = train(&mut reg, &data, v.as_ref(), &cfg)?;
        let valid_out = match (&valid_set, &v) {
            (Some(d), Some(v)) => Some((reg.predict(v)?, d.scores(), d.pair_ids())),
            _ => None,
        };
        (reg, report, valid_out, pipeline_extra(&pipeline))
    };

    let heads_path = save_regressor(&rec.path(MODEL_DIR), &reg, extra)?;
    record_tree(&mut rec, MODEL_DIR)?;
    let mut report = report;
    // Relative to the output directory so reruns compare equal.
    report.checkpoint = heads_path.strip_prefix(&rec.out).ok().map(Path::to_path_buf);
    let mixing_weights = reg.heads.mixing_weights().map(|w| w.iter().map(|&v| f64::from(v)).collect());
    let base_digest = reg.base_digest();
    rec.write(
        "train_report.json",
        &json_bytes(&TrainSummary {
            report: &report,
            strategy: &cfg.strategy,
            base_digest,
            mixing_weights,
        }),
    )?;
    if let Some((preds, refs, pairs)) = valid_out {
        rec.write("predictions.tsv", predictions_tsv(&preds, &refs, &pairs, range).as_bytes())?;
    }
    eprintln!(
        "trained {} over {:?}: {} steps, final loss {}",
        cfg.strategy.strategy,
        cfg.strategy.layers.iter().map(|l| l.0).collect::<Vec<_>>(),
        report.steps,
        fmt_opt(report.loss_curve.last().copied())
    );
    if let Some(v) = report.validation.last() {
        eprintln!("validation spearman {}", fmt_opt(v.spearman));
    }
    rec.finish(config_snapshot(&s), Some(cfg.seed))
}

// ---------------------------------------------------------------- sweep

fn cmd_sweep(a: &SweepArgs, argv: &[String]) -> Result<(), Failure> {
    let mut rec = Recorder::new("sweep", &a.out, argv)?;
    let s = resolve_settings(&a.settings, &mut rec)?;
    let layers = match &a.layers {
        Some(l) => parse_layer_list(l).map_err(Failure::usage)?,
        None => DEFAULT_SWEEP_LAYERS.iter().map(|&l| LayerIndex(l)).collect(),
    };
    let cfg = &s.train;
    let range = cfg.score_range;

    let (report, test_targets, test_pairs) = if a.dumps {
        let train_dump = load_dump(&mut rec, &a.train)?;
        let test_dump = load_dump(&mut rec, &a.test)?;
        let pairs = test_dump.pair_ids();
        let report = layer_sweep::<S>(
            None,
            &Examples::Embeddings(&train_dump),
            &Examples::Embeddings(&test_dump),
            &pairs,
            &layers,
            cfg,
        )
        .map_err(Failure::usage)?;
        (report, test_dump.targets.clone(), pairs)
    } else {
        let train_set = load_dataset(&mut rec, &a.train, range)?;
        let test_set = load_dataset(&mut rec, &a.test, range)?;
        let (model, pipeline) = match &a.base {
            Some(b) => load_base(&mut rec, b)?,
            None => fresh_base(&s, &train_set)?,
        };
        let max_len = model.config.max_seq_len;
        let (tr_tok, tr_y) = (pipeline.encode(&train_set, max_len)?, train_set.scores());
        let (te_tok, te_y) = (pipeline.encode(&test_set, max_len)?, test_set.scores());
        let pairs = test_set.pair_ids();
        let report = layer_sweep::<S>(
            Some(&model),
            &Examples::Sequences { tokens: &tr_tok, targets: &tr_y },
            &Examples::Sequences { tokens: &te_tok, targets: &te_y },
            &pairs,
            &layers,
            cfg,
        )
        .map_err(Failure::usage)?;
        (report, te_y, pairs)
    };

    let table = report.table(&test_targets, &test_pairs, s.alpha, s.tails)?;
    rec.write("sweep.json", &json_bytes(&report))?;
    rec.write("report.csv", table.to_csv().as_bytes())?;
    rec.write("report.json", table.to_json().as_bytes())?;
    for run in &report.runs {
        match &run.outcome {
            Ok(o) => eprintln!("layer {:>4}: avg spearman {}", run.layer, fmt_opt(o.average)),
            Err(e) => eprintln!("layer {:>4}: failed: {e}", run.layer),
        }
    }
    match report.best {
        Some(b) => eprintln!("best layer {b}"),
        None => eprintln!("no layer produced a defined average"),
    }
    rec.finish(config_snapshot(&s), Some(cfg.seed))
}

// ---------------------------------------------------------------- eval

/// Replaces each row's reference with the score of the matching dataset row.
fn attach_references(rows: &mut [PredictionRow], data: &Dataset, path: &Path) -> Result<(), Failure> {
    if rows.len() != data.len() {
        return Err(Failure::usage(format!(
            "{} has {} rows but the predictions have {}",
            path.display(),
            data.len(),
            rows.len()
        )));
    }
    for (i, (r, s)) in rows.iter_mut().zip(&data.samples).enumerate() {
        if r.pair_id != s.pair_id {
            return Err(Failure::usage(format!(
                "row {}: prediction pair `{}` but reference pair `{}`",
                i + 1,
                r.pair_id,
                s.pair_id
            )));
        }
        r.reference = s.score;
    }
    Ok(())
}

#[derive(Serialize)]
struct PairMetrics {
    pair_id: String,
    n: usize,
    spearman: Option<f64>,
    pearson: Option<f64>,
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<(), Failure> {
    let mut rec = Recorder::new("eval", &a.out, argv)?;
    let mut rows = load_prediction_rows(&mut rec, &a.predictions)?;
    if let Some(r) = &a.references {
        let range = range_from(a.score_min, a.score_max)?;
        let data = load_dataset(&mut rec, r, range)?;
        attach_references(&mut rows, &data, r)?;
    }
    let metrics: Vec<PairMetrics> = group_predictions(&rows)
        .into_iter()
        .map(|(pair_id, (p, r))| PairMetrics {
            n: p.len(),
            spearman: spearman(&p, &r).ok(),
            pearson: pearson(&p, &r).ok(),
            pair_id,
        })
        .collect();
    let mut tsv = String::from("pair_id\tn\tspearman\tpearson\n");
    for m in &metrics {
        let _ = writeln!(tsv, "{}\t{}\t{}\t{}", m.pair_id, m.n, fmt_opt(m.spearman), fmt_opt(m.pearson));
        eprintln!("{:<8} n={:<5} spearman {} pearson {}", m.pair_id, m.n, fmt_opt(m.spearman), fmt_opt(m.pearson));
    }
    rec.write("metrics.tsv", tsv.as_bytes())?;
    rec.write("metrics.json", &json_bytes(&metrics))?;
    rec.finish(serde_json::json!({ "references": a.references }), None)
}

// ---------------------------------------------------------------- compare

#[derive(Serialize)]
struct PairComparison {
    pair_id: String,
    n: usize,
    r12: Option<f64>,
    r13: Option<f64>,
    r23: Option<f64>,
    t: Option<f64>,
    p: Option<f64>,
    df: Option<usize>,
    verdict: &'static str,
}

fn compare_pair(pair_id: String, a: &[f64], b: &[f64], refs: &[f64], alpha: f64, tails: Tails) -> PairComparison {
    let (r12, r13, r23) = (spearman(a, refs).ok(), spearman(b, refs).ok(), spearman(a, b).ok());
    let mut out = PairComparison {
        pair_id,
        n: refs.len(),
        r12,
        r13,
        r23,
        t: None,
        p: None,
        df: None,
        verdict: "undefined",
    };
    let (Some(r12), Some(r13), Some(r23)) = (r12, r13, r23) else {
        return out;
    };
    let Ok(w) = williams_test(WilliamsInput { r12, r13, r23, n: refs.len() }, tails) else {
        out.verdict = "degenerate";
        return out;
    };
    // `p` tests a > b; the reverse one-sided test has p' = 1 − p.
    let p_rev = match tails {
        Tails::One => 1.0 - w.p,
        Tails::Two => w.p,
    };
    out.verdict = if w.t > 0.0 && w.p < alpha {
        "a"
    } else if w.t < 0.0 && p_rev < alpha {
        "b"
    } else {
        "not significant"
    };
    out.t = Some(w.t);
    out.p = Some(w.p);
    out.df = Some(w.df);
    out
}

fn cmd_compare(a: &CompareArgs, argv: &[String]) -> Result<(), Failure> {
    let mut rec = Recorder::new("compare", &a.out, argv)?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::usage(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let tails = match a.tails {
        TailsArg::One => Tails::One,
        TailsArg::Two => Tails::Two,
    };
    let mut rows_a = load_prediction_rows(&mut rec, &a.a)?;
    let mut rows_b = load_prediction_rows(&mut rec, &a.b)?;
    if let Some(r) = &a.references {
        let range = range_from(a.score_min, a.score_max)?;
        let data = load_dataset(&mut rec, r, range)?;
        attach_references(&mut rows_a, &data, r)?;
        attach_references(&mut rows_b, &data, r)?;
    }
    let ga = group_predictions(&rows_a);
    let gb = group_predictions(&rows_b);
    if ga.keys().ne(gb.keys()) {
        return Err(Failure::usage("the two prediction files cover different language pairs"));
    }
    let mut results = Vec::with_capacity(ga.len());
    for (pair, (pa, ra)) in ga {
        let (pb, rb) = &gb[&pair];
        if pa.len() != pb.len() {
            return Err(Failure::usage(format!("pair {pair}: {} vs {} predictions", pa.len(), pb.len())));
        }
        if ra != *rb {
            return Err(Failure::usage(format!("pair {pair}: the files disagree on reference scores")));
        }
        results.push(compare_pair(pair, &pa, pb, &ra, a.alpha, tails));
    }
    let mut tsv = String::from("pair_id\tn\tr12\tr13\tr23\tt\tp\tverdict\n");
    for c in &results {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.pair_id,
            c.n,
            fmt_opt(c.r12),
            fmt_opt(c.r13),
            fmt_opt(c.r23),
            fmt_opt(c.t),
            fmt_opt(c.p),
            c.verdict
        );
        eprintln!("{:<8} t {} p {} -> {}", c.pair_id, fmt_opt(c.t), fmt_opt(c.p), c.verdict);
    }
    rec.write("compare.tsv", tsv.as_bytes())?;
    rec.write("compare.json", &json_bytes(&results))?;
    let config = serde_json::json!({ "alpha": a.alpha, "tails": tails, "references": a.references });
    rec.finish(config, None)
}

// ---------------------------------------------------------------- export

fn cmd_export(a: &ExportArgs, argv: &[String]) -> Result<(), Failure> {
    let mut rec = Recorder::new("export-embeddings", &a.out, argv)?;
    let layers = parse_layer_list(&a.layers).map_err(Failure::usage)?;
    rec.input(&a.checkpoint)?;
    let (model, pipeline, source) = match locate_backbone(&a.checkpoint)? {
        BackboneSource::File(f) => {
            let (m, extra) = load_model::<S>(&f).map_err(Failure::usage)?;
            (m, TextPipeline::from_extra(&extra, &f)?, f)
        }
        BackboneSource::Regressor(dir) => {
            let (reg, extra) = load_regressor::<S>(&dir).map_err(Failure::usage)?;
            let m = reg
                .backbone
                .ok_or_else(|| Failure::usage(format!("{}: heads-only run has no backbone", dir.display())))?;
            (m, TextPipeline::from_extra(&extra, &dir)?, dir)
        }
    };
    let range = range_from(a.score_min, a.score_max)?;
    let data = load_dataset(&mut rec, &a.data, range)?;
    let tokens = pipeline.encode(&data, model.config.max_seq_len)?;
    let dump = export_embeddings(&model, &tokens, &data.scores(), &data.pair_ids(), &layers).map_err(Failure::usage)?;
    let path = rec.path("embeddings.bin");
    rec.ensure_dir()?;
    dump.write_with_sidecar(&path, &source.display().to_string())?;
    rec.record("embeddings.bin");
    rec.record("embeddings.bin.json");
    eprintln!(
        "exported {} samples at layers {:?} ({} wide)",
        dump.n_samples(),
        dump.layers,
        dump.hidden
    );
    rec.finish(serde_json::json!({ "layers": layers, "model": model.config }), None)
}

// ---------------------------------------------------------------- gen-synth

fn cmd_gen_synth(a: &GenSynthArgs, argv: &[String]) -> Result<(), Failure> {
    let mut rec = Recorder::new("gen-synth", &a.out, argv)?;
    let pairs: Vec<String> = match &a.pairs {
        Some(p) => p.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => DEFAULT_PAIRS.iter().map(|s| s.to_string()).collect(),
    };
    if a.n == 0 {
        return Err(Failure::usage("--n must be positive"));
    }
    let total = a.n + a.n_test;
    // Train and test come from one draw so they share the per-pair lexicons.
    let config = match a.kind {
        SynthKind::Qe => {
            let cfg = SynthQeConfig {
                n: total,
                pairs,
                ..SynthQeConfig::default()
            };
            let samples = generate_qe(&cfg, a.seed).map_err(Failure::usage)?;
            let (train_part, test_part) = samples.split_at(a.n);
            rec.write("train.tsv", to_tsv(train_part).as_bytes())?;
            if !test_part.is_empty() {
                rec.write("test.tsv", to_tsv(test_part).as_bytes())?;
            }
            serde_json::to_value(&cfg).expect("serializes")
        }
        SynthKind::Planted => {
            let cfg = PlantedConfig {
                n: total,
                model_layers: a.model_layers,
                hidden: a.hidden,
                signal_layer: a.signal_layer,
                sigma: a.sigma,
                pairs,
            };
            let dump = planted_dump(&cfg, a.seed).map_err(Failure::usage)?;
            let source = format!("planted(layer {}, seed {})", a.signal_layer, a.seed);
            rec.ensure_dir()?;
            let train_idx: Vec<usize> = (0..a.n).collect();
            dump.subset(&train_idx)?.write_with_sidecar(&rec.path("train.bin"), &source)?;
            rec.record("train.bin");
            rec.record("train.bin.json");
            if a.n_test > 0 {
                let test_idx: Vec<usize> = (a.n..total).collect();
                dump.subset(&test_idx)?.write_with_sidecar(&rec.path("test.bin"), &source)?;
                rec.record("test.bin");
                rec.record("test.bin.json");
            }
            serde_json::to_value(&cfg).expect("serializes")
        }
    };
    eprintln!("wrote {} train and {} test rows to {}", a.n, a.n_test, a.out.display());
    rec.finish(config, Some(a.seed))
}

// ---------------------------------------------------------------- rerun

/// Replaces the value of `--out` in a recorded argument list.
fn replace_out(argv: &[String], out: &Path) -> Vec<String> {
    let mut res = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            res.push(a.clone());
            it.next();
            res.push(out.display().to_string());
        } else if a.starts_with("--out=") {
            res.push(format!("--out={}", out.display()));
        } else {
            res.push(a.clone());
        }
    }
    res
}

fn cmd_rerun(a: &RerunArgs) -> Result<(), Failure> {
    let m = manifest::read(&a.manifest)?;
    let out = match &a.out {
        Some(o) => Some(std::path::absolute(o).map_err(|e| Failure::usage(format!("{}: {e}", o.display())))?),
        None => None,
    };
    std::env::set_current_dir(&m.cwd)
        .map_err(|e| Failure::usage(format!("recorded directory {}: {e}", m.cwd.display())))?;
    for (path, digest) in &m.inputs {
        let p = Path::new(path);
        if !p.is_file() {
            return Err(Failure::usage(format!("recorded input missing: {path}")));
        }
        if manifest::sha256_file(p)? != *digest {
            return Err(Failure::usage(format!("recorded input changed since the original run: {path}")));
        }
    }
    let argv = match &out {
        Some(o) => replace_out(&m.argv, o),
        None => m.argv.clone(),
    };
    let cli = Cli::try_parse_from(std::iter::once("alope".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Failure::usage(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Failure::usage("a rerun manifest cannot itself be rerun"));
    }
    if m.build != manifest::build_id() {
        eprintln!("note: manifest was written by {}, this is {}", m.build, manifest::build_id());
    }
    run(cli.command, argv)
}
