//! Error algebra for mixing two predictors: `y = a y1 + (1 - a) y2`.
//!
//! With `E1`, `E2` the predictors' mean squared errors, `dE = E1 - E2` and
//! `D = mean (y1 - y2)^2`, the mixture error is exactly
//! `E(a) = a^2 D + a (dE - D) + E2`, so `E1 - E(a) = (1 - a) dE - (a^2 - a) D`.

use crate::error::{invalid, Result};

/// Two predictions of the same targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedPredictions {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y_hat: Vec<f64>,
}

impl PairedPredictions {
    pub fn new(y1: Vec<f64>, y2: Vec<f64>, y_hat: Vec<f64>) -> Result<Self> {
        if y1.len() != y2.len() || y1.len() != y_hat.len() {
            return Err(invalid(format!("prediction lengths differ: {}, {}, {}", y1.len(), y2.len(), y_hat.len())));
        }
        if y1.is_empty() {
            return Err(invalid("predictions are empty"));
        }
        if y1.iter().chain(&y2).chain(&y_hat).any(|v| !v.is_finite()) {
            return Err(invalid("predictions must be finite"));
        }
        Ok(PairedPredictions { y1, y2, y_hat })
    }

    pub fn len(&self) -> usize {
        self.y1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y1.is_empty()
    }

    pub fn e1(&self) -> f64 {
        mse(&self.y1, &self.y_hat)
    }

    pub fn e2(&self) -> f64 {
        mse(&self.y2, &self.y_hat)
    }

    /// `mean (y1 - y2)^2`
    pub fn disagreement(&self) -> f64 {
        mse(&self.y1, &self.y2)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("mixing weight must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `E1 - E2`
pub fn error_gap(p: &PairedPredictions) -> f64 {
    p.e1() - p.e2()
}

pub fn ensemble_error(p: &PairedPredictions, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let n = p.len() as f64;
    Ok(p.y1
        .iter()
        .zip(&p.y2)
        .zip(&p.y_hat)
        .map(|((a, b), t)| {
            let y = alpha * a + (1.0 - alpha) * b;
            (y - t) * (y - t)
        })
        .sum::<f64>()
        / n)
}

/// `(1 - a) dE - (a^2 - a) mean (y1 - y2)^2`; positive exactly when the mix beats `y1`.
pub fn improvement_margin(p: &PairedPredictions, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * error_gap(p) - (alpha * alpha - alpha) * p.disagreement())
}

/// `(1 - dE) / 2` clamped to `[0, 1]`.
///
/// This stationary point assumes a unit mean squared disagreement between
/// the two predictors; see [`optimal_alpha_exact`] for the general case.
pub fn optimal_alpha(gap: f64) -> f64 {
    ((1.0 - gap) / 2.0).clamp(0.0, 1.0)
}

/// Maximizer of [`improvement_margin`]: `(1 - dE / D) / 2` clamped to `[0, 1]`.
/// Identical predictors give `0.5`.
pub fn optimal_alpha_exact(p: &PairedPredictions) -> f64 {
    let d = p.disagreement();
    if d == 0.0 {
        return 0.5;
    }
    ((1.0 - error_gap(p) / d) / 2.0).clamp(0.0, 1.0)
}

/// Grid argmax of the margin with `steps + 1` points over `[0, 1]`; ties keep the smallest weight.
pub fn sweep_argmax(p: &PairedPredictions, steps: usize) -> Result<f64> {
    let steps = steps.max(1);
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..=steps {
        let a = i as f64 / steps as f64;
        let m = improvement_margin(p, a)?;
        if m > best.1 {
            best = (a, m);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub e_ens: f64,
    pub margin: f64,
}

pub fn sweep(p: &PairedPredictions, steps: usize) -> Result<Vec<SweepRow>> {
    let steps = steps.max(1);
    (0..=steps)
        .map(|i| {
            let alpha = i as f64 / steps as f64;
            Ok(SweepRow { alpha, e_ens: ensemble_error(p, alpha)?, margin: improvement_margin(p, alpha)? })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,e_ens,margin\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e}\n", r.alpha, r.e_ens, r.margin));
    }
    out
}
