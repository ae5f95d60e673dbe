//! Photometric loss, load-balancing auxiliary losses and resolution penalties.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::moe::route;
use crate::real::Real;

pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Dispatch counts and probability masses of one batch of filtered points.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRoutingStats {
    /// Points whose top-k set contains expert `i`.
    pub counts: Vec<f64>,
    /// Sum over the batch of expert `i`'s gate probability.
    pub masses: Vec<f64>,
    pub batch: usize,
    pub k: usize,
}

impl BatchRoutingStats {
    pub fn new(counts: Vec<f64>, masses: Vec<f64>, batch: usize, k: usize) -> Result<Self> {
        if counts.len() != masses.len() || counts.is_empty() {
            return Err(invalid("counts and masses must have one entry per expert"));
        }
        let total: f64 = counts.iter().sum();
        if (total - (k * batch) as f64).abs() > 1e-9 || counts.iter().any(|&c| c < 0.0 || c.fract() != 0.0) {
            return Err(invalid(format!("dispatch counts sum to {total}, expected k * |B| = {}", k * batch)));
        }
        if masses.iter().any(|&m| !(m >= 0.0)) {
            return Err(invalid("probability masses must be non-negative"));
        }
        Ok(BatchRoutingStats { counts, masses, batch, k })
    }

    /// Routes every row of an `(n, M)` probability matrix with top-`k`.
    pub fn from_probs<T: Real>(probs: &[T], experts: usize, k: usize) -> Result<Self> {
        if experts == 0 || !probs.len().is_multiple_of(experts) {
            return Err(shape_err("routing stats", format!("{} probabilities for {experts} experts", probs.len())));
        }
        let mut counts = vec![0.0; experts];
        let mut masses = vec![0.0; experts];
        for row in probs.chunks(experts) {
            for i in route(row, k)?.indices {
                counts[i] += 1.0;
            }
            for (m, &p) in masses.iter_mut().zip(row) {
                *m += p.as_f64();
            }
        }
        Self::new(counts, masses, probs.len() / experts, k)
    }

    pub fn experts(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    None,
    Linear,
    Geometric,
    Quadratic,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 4] =
        [PenaltyKind::None, PenaltyKind::Linear, PenaltyKind::Geometric, PenaltyKind::Quadratic];
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::None => "none",
            PenaltyKind::Linear => "linear",
            PenaltyKind::Geometric => "geometric",
            PenaltyKind::Quadratic => "quadratic",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PenaltyKind::None),
            "linear" => Ok(PenaltyKind::Linear),
            "geometric" => Ok(PenaltyKind::Geometric),
            "quadratic" => Ok(PenaltyKind::Quadratic),
            other => Err(invalid(format!("unknown penalty {other:?} (none, linear, geometric, quadratic)"))),
        }
    }
}

/// Per-expert penalties, increasing with expert resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySchedule {
    pub kind: PenaltyKind,
    pub weights: Vec<f64>,
}

impl PenaltySchedule {
    pub fn new(kind: PenaltyKind, experts: usize) -> Result<Self> {
        if experts < 2 {
            return Err(invalid("penalty schedules need at least two experts"));
        }
        let m = experts as f64;
        let weights = (0..experts)
            .map(|i| match kind {
                PenaltyKind::None => 1.0,
                PenaltyKind::Linear => 1.0 + i as f64,
                // exp(ln M / (M - 1))^i, written as M^(i / (M - 1)) so both ends are exact
                PenaltyKind::Geometric => m.powf(i as f64 / (m - 1.0)),
                PenaltyKind::Quadratic => 2f64.powi(i as i32),
            })
            .collect();
        Ok(PenaltySchedule { kind, weights })
    }
}

/// Mean over rays of the squared L2 color error.
pub fn photometric_loss(rendered: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != truth.len() {
        return Err(shape_err("photometric_loss", format!("{} vs {} rays", rendered.len(), truth.len())));
    }
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered.iter().zip(truth).map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>()).sum();
    Ok(sum / rendered.len() as f64)
}

/// `(1/R) sum_r |C_hat(r) - C(r)|^2` on the tape; `rgb` is `(R, 3)`.
pub fn photometric_on<T: Real>(tape: &mut Tape<T>, rgb: Var, truth: &[T]) -> Result<Var> {
    let shape = tape.value(rgb).shape().to_vec();
    let target = tape.constant(Tensor::new(shape.clone(), truth.to_vec())?);
    let diff = tape.sub(rgb, target)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::of(1.0 / shape[0].max(1) as f64)))
}

/// `(M / |B|^2) sum_i c_i m_i`; zero for an empty batch.
pub fn aux_loss(stats: &BatchRoutingStats) -> f64 {
    weighted_aux(stats, &vec![1.0; stats.experts()])
}

/// `(M / |B|^2) sum_i c_i m_i w_i`.
pub fn rw_aux_loss(stats: &BatchRoutingStats, schedule: &PenaltySchedule) -> Result<f64> {
    if schedule.weights.len() != stats.experts() {
        return Err(shape_err(
            "rw_aux_loss",
            format!("{} weights for {} experts", schedule.weights.len(), stats.experts()),
        ));
    }
    Ok(weighted_aux(stats, &schedule.weights))
}

fn weighted_aux(stats: &BatchRoutingStats, weights: &[f64]) -> f64 {
    if stats.batch == 0 {
        return 0.0;
    }
    let b = stats.batch as f64;
    let s: f64 = stats.counts.iter().zip(&stats.masses).zip(weights).map(|((c, m), w)| c * m * w).sum();
    stats.experts() as f64 / (b * b) * s
}

/// Differentiable resolution-weighted auxiliary loss. Gradients flow through
/// the probability masses; dispatch counts are constants.
pub fn rw_aux_on<T: Real>(tape: &mut Tape<T>, probs: Var, counts: &[u64], weights: &[f64]) -> Result<Var> {
    let (b, m) = match tape.value(probs).shape() {
        [b, m] => (*b, *m),
        s => return Err(shape_err("rw_aux", format!("expected (B, M) probabilities, got {s:?}"))),
    };
    if counts.len() != m || weights.len() != m {
        return Err(shape_err(
            "rw_aux",
            format!("{} counts / {} weights for {m} experts", counts.len(), weights.len()),
        ));
    }
    let masses = tape.sum_rows(probs)?;
    let scale = m as f64 / (b as f64 * b as f64);
    let coef = counts.iter().zip(weights).map(|(&c, &w)| T::of(scale * c as f64 * w)).collect();
    let coef = tape.constant(Tensor::vector(coef));
    let terms = tape.mul(masses, coef)?;
    Ok(tape.sum(terms))
}

/// `L_nerf + lambda * L_rw_aux`
pub fn total_loss(l_nerf: f64, l_rw_aux: f64, lambda: f64) -> f64 {
    l_nerf + lambda * l_rw_aux
}

pub fn total_on<T: Real>(tape: &mut Tape<T>, l_nerf: Var, l_rw_aux: Var, lambda: f64) -> Result<Var> {
    let scaled = tape.scale(l_rw_aux, T::of(lambda));
    tape.add(l_nerf, scaled)
}
