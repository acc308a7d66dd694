use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AlopeError, Result};

/// Inclusive range of valid target scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    /// Direct-assessment scale.
    pub const DA: ScoreRange = ScoreRange { min: 0.0, max: 100.0 };
    pub const UNIT: ScoreRange = ScoreRange { min: 0.0, max: 1.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(AlopeError::invalid(format!("invalid score range [{min}, {max}]")));
        }
        Ok(ScoreRange { min, max })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

impl Default for ScoreRange {
    fn default() -> Self {
        ScoreRange::DA
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QESample {
    pub source_lang: String,
    pub target_lang: String,
    pub source_text: String,
    pub translated_text: String,
    pub score: f64,
    pub pair_id: String,
}

/// Loaded samples in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<QESample>,
    pub range: ScoreRange,
}

const REQUIRED: [&str; 5] = ["src_lang", "tgt_lang", "src", "mt", "score"];

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pair_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.pair_id.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Sample indices grouped by language pair.
    pub fn by_pair(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.pair_id.clone()).or_default().push(i);
        }
        groups
    }

    /// Concatenates per-pair training sets into one multilingual set.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let range = parts.first().map(|d| d.range).unwrap_or_default();
        if parts.iter().any(|d| d.range != range) {
            return Err(AlopeError::invalid("cannot concatenate datasets with different score ranges"));
        }
        Ok(Dataset {
            samples: parts.iter().flat_map(|d| d.samples.iter().cloned()).collect(),
            range,
        })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }

    pub fn pair_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.pair_id.clone()).collect()
    }
}

/// Reads a tab-separated dataset with header `src_lang tgt_lang src mt score [pair_id]`.
pub fn load_tsv(path: &Path, range: ScoreRange) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| AlopeError::io(path, e))?;
    parse_tsv(file, &path.display().to_string(), range)
}

pub fn parse_tsv<R: Read>(reader: R, label: &str, range: ScoreRange) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| AlopeError::Parse {
        path: label.to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| parse_err(1, format!("missing header column `{name}`")))?;
    }
    let pair_col = col("pair_id");
    let width = headers.len();

    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", record.len())));
        }
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let score_text = field(idx[4]);
        let score: f64 = score_text
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid score `{score_text}`")))?;
        if !score.is_finite() || !range.contains(score) {
            return Err(AlopeError::ScoreOutOfRange {
                path: label.to_string(),
                line,
                score,
                min: range.min,
                max: range.max,
            });
        }
        let (source_lang, target_lang) = (field(idx[0]), field(idx[1]));
        let (source_text, translated_text) = (field(idx[2]), field(idx[3]));
        if source_text.is_empty() || translated_text.is_empty() {
            return Err(parse_err(line, "source and translation must be non-empty".into()));
        }
        let pair_id = match pair_col.map(field) {
            Some(p) if !p.is_empty() => p,
            _ => format!("{source_lang}-{target_lang}"),
        };
        samples.push(QESample {
            source_lang,
            target_lang,
            source_text,
            translated_text,
            score,
            pair_id,
        });
    }
    Ok(Dataset { samples, range })
}

pub fn to_tsv(samples: &[QESample]) -> String {
    let mut out = String::from("src_lang\ttgt_lang\tsrc\tmt\tscore\tpair_id\n");
    for s in samples {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            s.source_lang, s.target_lang, s.source_text, s.translated_text, s.score, s.pair_id
        ));
    }
    out
}
