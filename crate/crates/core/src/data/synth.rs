//! Seeded synthetic data: QE-style TSV rows and planted-signal embedding dumps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::dump::EmbeddingDump;
use crate::data::sample::{QESample, ScoreRange};
use crate::error::{AlopeError, Result};

pub const DEFAULT_PAIRS: [&str; 8] = ["En-Gu", "En-Hi", "En-Mr", "En-Ta", "En-Te", "Et-En", "Ne-En", "Si-En"];

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        w.push(*VOWELS.choose(rng).expect("non-empty") as char);
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthQeConfig {
    pub n: usize,
    pub pairs: Vec<String>,
    pub vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Noise on the score, in score units.
    pub noise: f64,
    pub range: ScoreRange,
}

impl Default for SynthQeConfig {
    fn default() -> Self {
        SynthQeConfig {
            n: 7000,
            pairs: DEFAULT_PAIRS.iter().map(|s| s.to_string()).collect(),
            vocab: 200,
            min_words: 3,
            max_words: 10,
            noise: 2.0,
            range: ScoreRange::DA,
        }
    }
}

/// Each pair gets a word-for-word cipher lexicon. A translation is the
/// ciphered source with a random fraction of words replaced by junk; the
/// score falls linearly with that fraction.
pub fn generate_qe(cfg: &SynthQeConfig, seed: u64) -> Result<Vec<QESample>> {
    if cfg.pairs.is_empty() || cfg.vocab == 0 || cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(AlopeError::invalid("synthetic QE config needs pairs, a vocabulary and a word range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicons: Vec<(Vec<String>, Vec<String>)> = cfg
        .pairs
        .iter()
        .map(|_| {
            let src = (0..cfg.vocab).map(|_| word(&mut rng)).collect();
            let tgt = (0..cfg.vocab).map(|_| word(&mut rng)).collect();
            (src, tgt)
        })
        .collect();
    let span = cfg.range.max - cfg.range.min;
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let p = i % cfg.pairs.len();
        let (src_lex, tgt_lex) = &lexicons[p];
        let len = rng.gen_range(cfg.min_words..=cfg.max_words);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let quality: f64 = rng.gen();
        let mut bad = 0usize;
        let mt: Vec<String> = ids
            .iter()
            .map(|&w| {
                if rng.gen::<f64>() > quality {
                    bad += 1;
                    word(&mut rng).to_uppercase()
                } else {
                    tgt_lex[w].clone()
                }
            })
            .collect();
        let frac_ok = 1.0 - bad as f64 / len as f64;
        let noise: f64 = StandardNormal.sample(&mut rng);
        let score = cfg.range.clamp(cfg.range.min + span * frac_ok + cfg.noise * noise * span / 100.0);
        let (sl, tl) = cfg.pairs[p].split_once('-').unwrap_or((&cfg.pairs[p], &cfg.pairs[p]));
        out.push(QESample {
            source_lang: sl.to_string(),
            target_lang: tl.to_string(),
            source_text: ids.iter().map(|&w| src_lex[w].as_str()).collect::<Vec<_>>().join(" "),
            translated_text: mt.join(" "),
            score: (score * 100.0).round() / 100.0,
            pair_id: cfg.pairs[p].clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n: usize,
    pub model_layers: usize,
    pub hidden: usize,
    /// Absolute layer carrying the signal.
    pub signal_layer: usize,
    /// Noise standard deviation relative to the unit-variance signal.
    pub sigma: f64,
    pub pairs: Vec<String>,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n: 400,
            model_layers: 8,
            hidden: 16,
            signal_layer: 5,
            sigma: 0.3,
            pairs: DEFAULT_PAIRS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Independent N(0, 1) embeddings at every layer; the target is
/// `50 + 15·(u·h_j + σ·ε)` with `u` a random unit vector, so only layer `j`
/// predicts it.
pub fn planted_dump(cfg: &PlantedConfig, seed: u64) -> Result<EmbeddingDump> {
    if cfg.signal_layer >= cfg.model_layers || cfg.hidden == 0 || cfg.pairs.is_empty() {
        return Err(AlopeError::invalid("planted dump needs a valid signal layer, hidden size and pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..cfg.hidden).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);

    let l = cfg.model_layers;
    let mut data = Vec::with_capacity(cfg.n * l * cfg.hidden);
    let mut targets = Vec::with_capacity(cfg.n);
    let mut pair_ids = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let start = data.len();
        for _ in 0..l * cfg.hidden {
            data.push(StandardNormal.sample(&mut rng));
        }
        let h = &data[start + cfg.signal_layer * cfg.hidden..start + (cfg.signal_layer + 1) * cfg.hidden];
        let signal: f64 = h.iter().zip(&u).map(|(&x, &w)| x as f64 * w).sum();
        let eps: f64 = StandardNormal.sample(&mut rng);
        targets.push(ScoreRange::DA.clamp(50.0 + 15.0 * (signal + cfg.sigma * eps)));
        pair_ids.push(cfg.pairs[i % cfg.pairs.len()].clone());
    }
    EmbeddingDump::new(l, (0..l).collect(), cfg.hidden, data, targets, &pair_ids)
}
