//! Dense voxel-grid radiance-field experts.
//!
//! Each expert maps a position and view direction to a density and an RGB
//! radiance. The mixture only relies on that contract, so any backbone with
//! the same `query` surface could stand in.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Module, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::grid::{read_u32, VoxelGrid};
use crate::mlp::{Mlp, MlpVars};
use crate::real::{sigmoid, softplus, Real};

pub const EXPERT_MAGIC: &[u8; 4] = b"MFE1";
pub const DEFAULT_FEATURE_CHANNELS: usize = 6;
pub const COLOR_HIDDEN: usize = 32;
/// sin/cos of `d_a * 2^j` for `j in {0, 1}` on each axis.
pub const DIR_ENCODING_WIDTH: usize = 12;
pub const INITIAL_RAW_DENSITY: f64 = -1.0;

/// Fourier encoding of a unit view direction.
pub fn encode_direction(d: [f64; 3]) -> [f64; DIR_ENCODING_WIDTH] {
    let mut out = [0.0; DIR_ENCODING_WIDTH];
    for a in 0..3 {
        for j in 0..2 {
            let v = d[a] * (1 << j) as f64;
            out[a * 4 + j * 2] = v.sin();
            out[a * 4 + j * 2 + 1] = v.cos();
        }
    }
    out
}

pub fn check_unit(d: [f64; 3]) -> Result<()> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 || !norm.is_finite() {
        return Err(invalid(format!("direction {d:?} is not unit length (|d| = {norm})")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T> {
    id: usize,
    density: VoxelGrid<T>,
    features: VoxelGrid<T>,
    color: Mlp<T>,
}

/// Tape handles for one bound expert.
#[derive(Debug, Clone)]
pub struct ExpertVars {
    pub density: Var,
    pub features: Var,
    pub color: MlpVars,
}

impl ExpertVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.density, self.features];
        v.extend(self.color.vars());
        v
    }
}

impl<T: Real> Expert<T> {
    pub fn new(id: usize, resolution: [usize; 3], feature_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let density = VoxelGrid::filled(resolution, 1, T::of(INITIAL_RAW_DENSITY))?;
        let bound = 1.0 / (feature_channels as f64).sqrt();
        let features = VoxelGrid::uniform_random(resolution, feature_channels, bound, rng)?;
        let color = Mlp::new(&[feature_channels + DIR_ENCODING_WIDTH, COLOR_HIDDEN, 3], rng)?;
        Ok(Expert { id, density, features, color })
    }

    pub fn from_parts(id: usize, density: VoxelGrid<T>, features: VoxelGrid<T>, color: Mlp<T>) -> Result<Self> {
        if density.channels() != 1 {
            return Err(invalid("density grid must have one channel"));
        }
        if density.resolution() != features.resolution() {
            return Err(invalid("density and feature grids differ in resolution"));
        }
        if color.input_width() != features.channels() + DIR_ENCODING_WIDTH || color.output_width() != 3 {
            return Err(invalid("color MLP does not match feature width"));
        }
        Ok(Expert { id, density, features, color })
    }

    pub fn cast<U: Real>(&self) -> Expert<U> {
        Expert { id: self.id, density: self.density.cast(), features: self.features.cast(), color: self.color.cast() }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.density.resolution()
    }

    pub fn density_grid(&self) -> &VoxelGrid<T> {
        &self.density
    }

    pub fn density_grid_mut(&mut self) -> &mut VoxelGrid<T> {
        &mut self.density
    }

    pub fn feature_grid(&self) -> &VoxelGrid<T> {
        &self.features
    }

    pub fn feature_grid_mut(&mut self) -> &mut VoxelGrid<T> {
        &mut self.features
    }

    pub fn color_mlp(&self) -> &Mlp<T> {
        &self.color
    }

    pub fn color_mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.color
    }

    /// Density and radiance at `x` seen from direction `d`.
    pub fn query(&self, x: [f64; 3], d: [f64; 3]) -> Result<(T, [T; 3])> {
        check_unit(d)?;
        Ok(self.query_unchecked(x, &encode_direction(d)))
    }

    pub(crate) fn query_unchecked(&self, x: [f64; 3], enc: &[f64; DIR_ENCODING_WIDTH]) -> (T, [T; 3]) {
        let sigma = softplus(self.density.interpolate(x)[0]);
        let mut input = self.features.interpolate(x);
        input.extend(enc.iter().map(|&v| T::of(v)));
        let logits = self.color.forward(&input);
        (sigma, [sigmoid(logits[0]), sigmoid(logits[1]), sigmoid(logits[2])])
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ExpertVars {
        ExpertVars {
            density: self.density.bind(tape),
            features: self.features.bind(tape),
            color: self.color.bind(tape, true),
        }
    }

    /// Batched evaluation on the tape. `dir_enc` is an `(n, 12)` constant of
    /// encoded directions. Returns `(sigma (n, 1), rgb (n, 3))`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &ExpertVars,
        points: &[[f64; 3]],
        dir_enc: Var,
    ) -> Result<(Var, Var)> {
        let raw = self.density.interp_on(tape, vars.density, points)?;
        let sigma = tape.softplus(raw);
        let feat = self.features.interp_on(tape, vars.features, points)?;
        let input = tape.concat_cols(feat, dir_enc)?;
        let logits = vars.color.apply(tape, input)?;
        let rgb = tape.sigmoid(logits);
        Ok((sigma, rgb))
    }

    /// Multiply-accumulates of one query: two grid interpolations and the color MLP.
    pub fn flops_per_point(&self) -> f64 {
        let interp = 24.0 * (1 + self.features.channels()) as f64;
        interp + 2.0 * self.color.macs() as f64
    }

    pub fn write_checkpoint(&self, w: &mut impl Write, expert_count: usize) -> Result<()> {
        let mut header = Vec::new();
        header.extend_from_slice(EXPERT_MAGIC);
        for v in [self.id, expert_count] {
            header.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.resolution() {
            header.extend_from_slice(&(v as u32).to_le_bytes());
        }
        w.write_all(&header)?;
        self.density.write_blob(w)?;
        self.features.write_blob(w)?;
        self.color.write_blob(w)
    }

    /// Reads an expert checkpoint, returning it with the stored expert count.
    pub fn read_checkpoint(r: &mut impl Read) -> Result<(Self, usize)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EXPERT_MAGIC {
            return Err(Error::Format(format!("bad expert magic {magic:?}")));
        }
        let id = read_u32(r)? as usize;
        let m = read_u32(r)? as usize;
        let res = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
        let density = VoxelGrid::read_blob(r)?;
        let features = VoxelGrid::read_blob(r)?;
        let color = Mlp::read_blob(r)?;
        if density.resolution() != res {
            return Err(Error::Format("expert manifest resolution disagrees with grid".into()));
        }
        let expert = Expert::from_parts(id, density, features, color).map_err(|e| Error::Format(e.to_string()))?;
        Ok((expert, m))
    }
}

impl<T: Real> Module<T> for Expert<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![self.density.values(), self.features.values()];
        p.extend(self.color.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![self.density.values_mut(), self.features.values_mut()];
        p.extend(self.color.parameters_mut());
        p
    }
}

/// Experts ordered by increasing resolution, with an evaluation counter.
#[derive(Debug)]
pub struct ExpertBank<T> {
    experts: Vec<Expert<T>>,
    calls: AtomicU64,
}

impl<T: Clone> Clone for ExpertBank<T> {
    fn clone(&self) -> Self {
        ExpertBank { experts: self.experts.clone(), calls: AtomicU64::new(0) }
    }
}

impl<T: PartialEq> PartialEq for ExpertBank<T> {
    fn eq(&self, other: &Self) -> bool {
        self.experts == other.experts
    }
}

/// Per-axis resolution of level `i`: `round(base * 2^(i/3))`, doubling the voxel count per level.
pub fn level_resolution(base: usize, level: usize) -> usize {
    (base as f64 * 2f64.powf(level as f64 / 3.0)).round() as usize
}

pub const PARAM_RATIO_RANGE: (f64, f64) = (1.8, 2.2);

impl<T: Real> ExpertBank<T> {
    pub fn build(base_resolution: usize, m: usize, seed: u64) -> Result<Self> {
        Self::build_with_features(base_resolution, m, DEFAULT_FEATURE_CHANNELS, seed)
    }

    pub fn build_with_features(base_resolution: usize, m: usize, feature_channels: usize, seed: u64) -> Result<Self> {
        if !(3..=5).contains(&m) {
            return Err(invalid(format!("expert count must be 3, 4 or 5, got {m}")));
        }
        if base_resolution < 4 {
            return Err(invalid(format!("base resolution must be >= 4, got {base_resolution}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = (0..m)
            .map(|i| {
                let r = level_resolution(base_resolution, i);
                Expert::new(i, [r, r, r], feature_channels, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_experts(experts)
    }

    /// Validates ordering and the parameter-doubling invariant.
    pub fn from_experts(experts: Vec<Expert<T>>) -> Result<Self> {
        if !(3..=5).contains(&experts.len()) {
            return Err(invalid(format!("expert count must be 3, 4 or 5, got {}", experts.len())));
        }
        for (i, e) in experts.iter().enumerate() {
            if e.id != i {
                return Err(invalid(format!("expert at slot {i} has id {}", e.id)));
            }
        }
        for pair in experts.windows(2) {
            let ratio = pair[1].param_count() as f64 / pair[0].param_count() as f64;
            if !(PARAM_RATIO_RANGE.0..=PARAM_RATIO_RANGE.1).contains(&ratio) {
                return Err(invalid(format!(
                    "experts {} -> {} grow parameters by {ratio:.3}x, outside {:?}; use a larger base resolution",
                    pair[0].id, pair[1].id, PARAM_RATIO_RANGE
                )));
            }
        }
        Ok(ExpertBank { experts, calls: AtomicU64::new(0) })
    }

    /// Converted copy with a fresh call counter.
    pub fn cast<U: Real>(&self) -> ExpertBank<U> {
        ExpertBank { experts: self.experts.iter().map(|e| e.cast()).collect(), calls: AtomicU64::new(0) }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[Expert<T>] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> &Expert<T> {
        &self.experts[i]
    }

    pub fn expert_mut(&mut self, i: usize) -> &mut Expert<T> {
        &mut self.experts[i]
    }

    /// Point evaluation through the counter.
    pub fn query(&self, i: usize, x: [f64; 3], d: [f64; 3]) -> Result<(T, [T; 3])> {
        self.count_calls(1);
        self.experts[i].query(x, d)
    }

    pub(crate) fn query_unchecked(&self, i: usize, x: [f64; 3], enc: &[f64; DIR_ENCODING_WIDTH]) -> (T, [T; 3]) {
        self.count_calls(1);
        self.experts[i].query_unchecked(x, enc)
    }

    /// Batched evaluation of expert `i` through the counter.
    pub fn forward_on(
        &self,
        i: usize,
        tape: &mut Tape<T>,
        vars: &ExpertVars,
        points: &[[f64; 3]],
        dir_enc: Var,
    ) -> Result<(Var, Var)> {
        self.count_calls(points.len() as u64);
        self.experts[i].forward_on(tape, vars, points, dir_enc)
    }

    fn count_calls(&self, n: u64) {
        self.calls.fetch_add(n, Ordering::Relaxed);
    }

    /// Number of single-point expert evaluations since the last reset.
    pub fn expert_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_expert_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<T: Real> Module<T> for ExpertBank<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.experts.iter().flat_map(|e| e.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.experts.iter_mut().flat_map(|e| e.parameters_mut()).collect()
    }
}
