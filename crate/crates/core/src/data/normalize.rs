use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::sample::ScoreRange;
use crate::error::{AlopeError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    #[default]
    Minmax,
    Zscore,
}

impl FromStr for NormMode {
    type Err = AlopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(NormMode::None),
            "minmax" | "minmax-to-unit" => Ok(NormMode::Minmax),
            "zscore" => Ok(NormMode::Zscore),
            other => Err(AlopeError::invalid(format!(
                "unknown normalization `{other}` (expected none, minmax, zscore)"
            ))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::None => "none",
            NormMode::Minmax => "minmax",
            NormMode::Zscore => "zscore",
        })
    }
}

/// Fitted affine map `y = (x - shift) / scale`, kept so predictions can be
/// mapped back to the original score scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTransform {
    pub mode: NormMode,
    pub shift: f64,
    pub scale: f64,
}

impl ScoreTransform {
    pub const IDENTITY: ScoreTransform = ScoreTransform {
        mode: NormMode::None,
        shift: 0.0,
        scale: 1.0,
    };

    /// Minmax uses the configured range; zscore uses the sample mean and
    /// population standard deviation.
    pub fn fit(mode: NormMode, scores: &[f64], range: ScoreRange) -> Result<Self> {
        match mode {
            NormMode::None => Ok(Self::IDENTITY),
            NormMode::Minmax => Ok(ScoreTransform {
                mode,
                shift: range.min,
                scale: range.max - range.min,
            }),
            NormMode::Zscore => {
                if scores.is_empty() {
                    return Err(AlopeError::Empty("zscore normalization"));
                }
                let n = scores.len() as f64;
                let mean = scores.iter().sum::<f64>() / n;
                let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
                if var <= 0.0 {
                    return Err(AlopeError::invalid("zero-variance scores cannot be z-scored"));
                }
                Ok(ScoreTransform {
                    mode,
                    shift: mean,
                    scale: var.sqrt(),
                })
            }
        }
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * self.scale + self.shift
    }

    pub fn apply(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.forward(x)).collect()
    }
}

impl Default for ScoreTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}
