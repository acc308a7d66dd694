//! Williams test for the difference between two dependent correlations that
//! share one variable (the human scores).

use serde::{Deserialize, Serialize};

use crate::error::{AlopeError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tails {
    #[default]
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilliamsInput {
    /// corr(metric 1, human)
    pub r12: f64,
    /// corr(metric 2, human)
    pub r13: f64,
    /// corr(metric 1, metric 2)
    pub r23: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilliamsResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// `t = (r12 − r13)·√((n−1)(1+r23)) / √(2K(n−1)/(n−3) + ((r12+r13)²/4)(1−r23)³)`
/// with `K = 1 − r12² − r13² − r23² + 2·r12·r13·r23` and `n − 3` degrees of freedom.
/// The one-sided p-value tests `r12 > r13`.
pub fn williams_test(w: WilliamsInput, tails: Tails) -> Result<WilliamsResult> {
    for (name, r) in [("r12", w.r12), ("r13", w.r13), ("r23", w.r23)] {
        if !(-1.0..=1.0).contains(&r) {
            return Err(AlopeError::Degenerate(format!("{name} = {r} outside [-1, 1]")));
        }
    }
    if w.n <= 3 {
        return Err(AlopeError::Degenerate(format!("n = {} leaves no degrees of freedom", w.n)));
    }
    let WilliamsInput { r12, r13, r23, n } = w;
    let df = n - 3;
    if r12 == r13 {
        // Zero numerator: the null holds exactly, whatever the denominator.
        let p = match tails {
            Tails::One => 0.5,
            Tails::Two => 1.0,
        };
        return Ok(WilliamsResult { t: 0.0, p, df });
    }
    // Grouped so that swapping r12 and r13 is exact.
    let k = 1.0 - (r12 * r12 + r13 * r13) - r23 * r23 + 2.0 * (r12 * r13) * r23;
    if k <= 0.0 {
        return Err(AlopeError::Degenerate(format!("K = {k} is not positive")));
    }
    let nf = n as f64;
    let denom = (2.0 * k * (nf - 1.0) / (nf - 3.0) + (r12 + r13).powi(2) / 4.0 * (1.0 - r23).powi(3)).sqrt();
    let t = (r12 - r13) * ((nf - 1.0) * (1.0 + r23)).sqrt() / denom;
    let p = match tails {
        Tails::One => 1.0 - student_t_cdf(t, df as f64),
        Tails::Two => (2.0 * student_t_cdf(-t.abs(), df as f64)).min(1.0),
    };
    Ok(WilliamsResult { t, p, df })
}

/// Student t cumulative distribution via the regularized incomplete beta function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Lanczos approximation (g = 7, 9 terms).
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub(crate) fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
