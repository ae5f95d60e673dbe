//! Point filtering, top-k routing and probability-weighted expert combination.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::expert::{check_unit, encode_direction, Expert, ExpertBank, ExpertVars, DIR_ENCODING_WIDTH};
use crate::gate::{Gate, GateVars};
use crate::grid::VoxelGrid;
use crate::real::{softplus, Real};
use crate::renderer::SampledRay;

pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Coarse density volume used to discard empty-space samples before gating.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityFilter<T> {
    grid: VoxelGrid<T>,
    threshold: f64,
}

impl<T: Real> DensityFilter<T> {
    pub fn new(grid: VoxelGrid<T>, threshold: f64) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(invalid("density filter grid must have one channel"));
        }
        if !(threshold >= 0.0) {
            return Err(invalid(format!("filter threshold must be >= 0, got {threshold}")));
        }
        Ok(DensityFilter { grid, threshold })
    }

    /// Frozen copy of an expert's density grid.
    pub fn from_expert(expert: &Expert<T>, threshold: f64) -> Result<Self> {
        Self::new(expert.density_grid().clone(), threshold)
    }

    pub fn cast<U: Real>(&self) -> DensityFilter<U> {
        DensityFilter { grid: self.grid.cast(), threshold: self.threshold }
    }

    pub fn grid(&self) -> &VoxelGrid<T> {
        &self.grid
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn keep(&self, x: [f64; 3]) -> bool {
        softplus(self.grid.interpolate(x)[0]).as_f64() >= self.threshold
    }

    /// Kept points in input order plus the per-point keep mask.
    pub fn filter_points(&self, points: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<bool>) {
        let mask: Vec<bool> = points.iter().map(|&p| self.keep(p)).collect();
        let kept = points.iter().zip(&mask).filter(|(_, &k)| k).map(|(&p, _)| p).collect();
        (kept, mask)
    }
}

/// Selected experts for one point, in decreasing probability.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T> {
    pub indices: Vec<usize>,
    pub probs: Vec<T>,
}

/// Top-k selection. Ties go to the lower expert index.
pub fn route<T: Real>(probs: &[T], k: usize) -> Result<RoutingDecision<T>> {
    if k == 0 || k > probs.len() {
        return Err(invalid(format!("top-k needs 1 <= k <= {}, got {k}", probs.len())));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps lower indices first among equal probabilities.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    let selected = order.iter().map(|&i| probs[i]).collect();
    Ok(RoutingDecision { indices: order, probs: selected })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedSample<T> {
    pub sigma: T,
    pub rgb: [T; 3],
}

/// Probability-weighted sum over the selected experts only, accumulated in
/// increasing expert index.
pub fn combine<T: Real>(
    x: [f64; 3],
    d: [f64; 3],
    bank: &ExpertBank<T>,
    decision: &RoutingDecision<T>,
) -> Result<CombinedSample<T>> {
    check_unit(d)?;
    check_decision(bank, decision)?;
    Ok(combine_encoded(x, &encode_direction(d), bank, decision, None))
}

fn check_decision<T: Real>(bank: &ExpertBank<T>, decision: &RoutingDecision<T>) -> Result<()> {
    if decision.indices.len() != decision.probs.len() || decision.indices.iter().any(|&i| i >= bank.len()) {
        return Err(invalid("routing decision does not match the expert bank"));
    }
    Ok(())
}

pub(crate) fn combine_encoded<T: Real>(
    x: [f64; 3],
    enc: &[f64; DIR_ENCODING_WIDTH],
    bank: &ExpertBank<T>,
    decision: &RoutingDecision<T>,
    only: Option<usize>,
) -> CombinedSample<T> {
    let mut pairs: Vec<(usize, T)> = decision.indices.iter().copied().zip(decision.probs.iter().copied()).collect();
    pairs.sort_by_key(|p| p.0);
    let mut out = CombinedSample { sigma: T::zero(), rgb: [T::zero(); 3] };
    for (i, p) in pairs {
        if only.is_some_and(|o| o != i) {
            continue;
        }
        let (s, c) = bank.query_unchecked(i, x, enc);
        out.sigma += s * p;
        for ch in 0..3 {
            out.rgb[ch] += c[ch] * p;
        }
    }
    out
}

/// Gate, experts, frozen density filter and the routing width `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moe<T> {
    pub bank: ExpertBank<T>,
    pub gate: Gate<T>,
    pub filter: DensityFilter<T>,
    pub k: usize,
}

/// Tape handles for a bound [`Moe`].
#[derive(Debug, Clone)]
pub struct MoeVars {
    pub experts: Vec<ExpertVars>,
    pub gate: GateVars,
}

impl MoeVars {
    pub fn expert_vars(&self) -> Vec<Var> {
        self.experts.iter().flat_map(|e| e.vars()).collect()
    }
}

/// What a point sample contributes when rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Mixture,
    /// Routing unchanged, but only expert `i` contributes.
    ExpertOnly(usize),
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `(rays, 3)` rendered colors.
    pub rgb: Var,
    /// `(filtered points, M)` gate probabilities; `None` when nothing survived filtering.
    pub probs: Option<Var>,
    /// Points dispatched to each expert.
    pub counts: Vec<u64>,
    pub filtered: usize,
}

impl<T: Real> Moe<T> {
    pub fn new(bank: ExpertBank<T>, gate: Gate<T>, filter: DensityFilter<T>, k: usize) -> Result<Self> {
        if gate.experts() != bank.len() {
            return Err(invalid(format!("gate routes over {} experts, bank has {}", gate.experts(), bank.len())));
        }
        if k == 0 || k > bank.len() {
            return Err(invalid(format!("k must be in 1..={}, got {k}", bank.len())));
        }
        Ok(Moe { bank, gate, filter, k })
    }

    pub fn experts(&self) -> usize {
        self.bank.len()
    }

    /// Expert `i` alone: pinned gate, no filtering.
    pub fn single_expert(bank: ExpertBank<T>, i: usize) -> Result<Self> {
        let gate = Gate::pinned(bank.len(), i, 4)?;
        let filter = DensityFilter::new(bank.expert(0).density_grid().clone(), 0.0)?;
        Moe::new(bank, gate, filter, 1)
    }

    /// Plain average of all experts: uniform gate, `k = M`, no filtering.
    pub fn ensemble(bank: ExpertBank<T>, gate_resolution: usize) -> Result<Self> {
        let m = bank.len();
        let gate = Gate::uniform(m, gate_resolution)?;
        let filter = DensityFilter::new(bank.expert(0).density_grid().clone(), 0.0)?;
        Moe::new(bank, gate, filter, m)
    }

    pub fn cast<U: Real>(&self) -> Moe<U> {
        Moe { bank: self.bank.cast(), gate: self.gate.cast(), filter: self.filter.cast(), k: self.k }
    }

    /// Scalar evaluation of one sample: `None` when filtered out.
    pub fn sample(
        &self,
        x: [f64; 3],
        enc: &[f64; DIR_ENCODING_WIDTH],
        mode: SampleMode,
    ) -> Option<(CombinedSample<T>, Vec<T>)> {
        if !self.filter.keep(x) {
            return None;
        }
        let probs = self.gate.probs(x);
        let decision = route(&probs, self.k).expect("k validated at construction");
        let only = match mode {
            SampleMode::Mixture => None,
            SampleMode::ExpertOnly(i) => Some(i),
        };
        Some((combine_encoded(x, enc, &self.bank, &decision, only), probs))
    }

    pub fn bind(&self, tape: &mut Tape<T>, train_gate: bool) -> MoeVars {
        MoeVars {
            experts: self.bank.experts().iter().map(|e| e.bind(tape)).collect(),
            gate: self.gate.bind(tape, train_gate),
        }
    }

    /// Renders a batch of rays that all carry the same sample count.
    /// Filtered-out samples keep their slot with zero density.
    pub fn forward_batch(&self, tape: &mut Tape<T>, vars: &MoeVars, rays: &[SampledRay]) -> Result<BatchOutput> {
        let (n, deltas) = batch_layout(rays)?;
        let slots = rays.len() * n;
        let m = self.experts();

        let mut kept_slots = Vec::new();
        let mut kept_points = Vec::new();
        for (r, ray) in rays.iter().enumerate() {
            for (s, &p) in ray.positions.iter().enumerate() {
                if self.filter.keep(p) {
                    kept_slots.push(r * n + s);
                    kept_points.push(p);
                }
            }
        }
        let encodings: Vec<[f64; DIR_ENCODING_WIDTH]> = rays.iter().map(|r| encode_direction(r.dir)).collect();

        let mut counts = vec![0u64; m];
        let (sigma, rgb, probs) = if kept_points.is_empty() {
            let s = tape.constant(Tensor::zeros(vec![slots, 1]));
            let c = tape.constant(Tensor::zeros(vec![slots, 3]));
            (s, c, None)
        } else {
            let probs = self.gate.probs_on(tape, &vars.gate, &kept_points)?;
            let pv = tape.value(probs).data().to_vec();
            // routed[i] = (point index, slot index) pairs for expert i
            let mut routed: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
            for (p, row) in pv.chunks(m).enumerate() {
                for i in route(row, self.k)?.indices {
                    routed[i].push((p, kept_slots[p]));
                    counts[i] += 1;
                }
            }
            let mut sigma_acc: Option<Var> = None;
            let mut rgb_acc: Option<Var> = None;
            for (i, list) in routed.iter().enumerate() {
                if list.is_empty() {
                    continue;
                }
                let pts: Vec<[f64; 3]> = list.iter().map(|&(p, _)| kept_points[p]).collect();
                let enc: Vec<T> =
                    list.iter().flat_map(|&(_, slot)| encodings[slot / n].iter().map(|&v| T::of(v))).collect();
                let enc = tape.constant(Tensor::matrix(list.len(), DIR_ENCODING_WIDTH, enc)?);
                let (s_i, c_i) = self.bank.forward_on(i, tape, &vars.experts[i], &pts, enc)?;
                let w = tape.gather_elems(probs, list.iter().map(|&(p, _)| p * m + i).collect())?;
                let ident: Vec<usize> = (0..list.len()).collect();
                let s_w = tape.gather_scale(s_i, ident.clone(), w)?;
                let c_w = tape.gather_scale(c_i, ident, w)?;
                let slot_idx: Vec<usize> = list.iter().map(|&(_, slot)| slot).collect();
                let s_slots = tape.scatter_add_rows(s_w, slot_idx.clone(), slots)?;
                let c_slots = tape.scatter_add_rows(c_w, slot_idx, slots)?;
                sigma_acc = Some(match sigma_acc {
                    Some(acc) => tape.add(acc, s_slots)?,
                    None => s_slots,
                });
                rgb_acc = Some(match rgb_acc {
                    Some(acc) => tape.add(acc, c_slots)?,
                    None => c_slots,
                });
            }
            (sigma_acc.expect("k >= 1"), rgb_acc.expect("k >= 1"), Some(probs))
        };
        let sigma = tape.reshape(sigma, vec![rays.len(), n])?;
        let out = tape.composite(sigma, rgb, deltas)?;
        Ok(BatchOutput { rgb: out, probs, counts, filtered: kept_points.len() })
    }
}

/// Shared sample count and flattened deltas of a ray batch.
pub(crate) fn batch_layout<T: Real>(rays: &[SampledRay]) -> Result<(usize, Vec<T>)> {
    let n = rays.first().map_or(0, |r| r.positions.len());
    if rays.is_empty() || n < 2 {
        return Err(invalid("ray batch must be non-empty with >= 2 samples per ray"));
    }
    if rays.iter().any(|r| r.positions.len() != n || r.deltas.len() != n) {
        return Err(invalid("all rays in a batch need the same sample count"));
    }
    let deltas = rays.iter().flat_map(|r| r.deltas.iter().map(|&d| T::of(d))).collect();
    Ok((n, deltas))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_examples() {
        let d = route(&[0.5, 0.3, 0.2], 2).unwrap();
        assert_eq!(d.indices, vec![0, 1]);
        assert_eq!(d.probs, vec![0.5, 0.3]);
        let u = route(&[0.25f64; 4], 1).unwrap();
        assert_eq!(u.indices, vec![0]);
        let all = route(&[0.1, 0.6, 0.3], 3).unwrap();
        let mut idx = all.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
        for (&i, &p) in all.indices.iter().zip(&all.probs) {
            assert_eq!(p, [0.1, 0.6, 0.3][i]);
        }
        assert!(route(&[0.5, 0.5], 0).is_err());
        assert!(route(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let d = route(&[0.1, 0.3, 0.3, 0.3], 2).unwrap();
        assert_eq!(d.indices, vec![1, 2]);
    }

    #[test]
    fn filter_examples() {
        let grid = VoxelGrid::<f64>::filled([4, 4, 4], 1, -10.0).unwrap();
        let pts = vec![[0.1, 0.2, 0.3], [0.9, 0.9, 0.9]];
        let keep_all = DensityFilter::new(grid.clone(), 0.0).unwrap();
        assert_eq!(keep_all.filter_points(&pts).1, vec![true, true]);
        let strict = DensityFilter::new(grid, 0.01).unwrap();
        let (kept, mask) = strict.filter_points(&pts);
        assert!(kept.is_empty());
        assert_eq!(mask, vec![false, false]);
        let (kept, mask) = strict.filter_points(&[]);
        assert!(kept.is_empty() && mask.is_empty());
    }

    #[test]
    fn filter_preserves_order() {
        let mut grid = VoxelGrid::<f64>::filled([2, 2, 2], 1, -10.0).unwrap();
        grid.node_mut(1, 1, 1)[0] = 50.0;
        let f = DensityFilter::new(grid, 1e-3).unwrap();
        let pts = vec![[0.9, 0.9, 0.95], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.8, 0.9, 0.9]];
        let (kept, mask) = f.filter_points(&pts);
        assert_eq!(mask, vec![true, false, true, true]);
        assert_eq!(kept, vec![pts[0], pts[2], pts[3]]);
    }

    #[test]
    fn single_expert_combination_and_sparsity() {
        let bank: ExpertBank<f64> = ExpertBank::build(12, 3, 2).unwrap();
        let x = [0.4, 0.5, 0.6];
        let d = [0.0, 0.0, 1.0];
        let dec = RoutingDecision { indices: vec![2], probs: vec![0.7] };
        bank.reset_expert_calls();
        let c = combine(x, d, &bank, &dec).unwrap();
        assert_eq!(bank.expert_calls(), 1);
        let (s, rgb) = bank.expert(2).query(x, d).unwrap();
        assert_eq!(c.sigma, 0.7 * s);
        for ch in 0..3 {
            assert_eq!(c.rgb[ch], rgb[ch] * 0.7);
        }
        let bad = RoutingDecision { indices: vec![3], probs: vec![1.0] };
        assert!(combine(x, d, &bank, &bad).is_err());
    }
}
