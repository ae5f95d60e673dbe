//! Trainable probability field over experts: feature grid, MLP, softmax.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Module, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::grid::VoxelGrid;
use crate::mlp::{Mlp, MlpVars};
use crate::real::Real;

pub const GATE_CHANNELS: usize = 8;
pub const GATE_HIDDEN: usize = 64;
pub const DEFAULT_GATE_RESOLUTION: usize = 16;

/// Initialization of the gate's output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateInit {
    /// Uniform in `±1/sqrt(fan_in)` like every other layer.
    #[default]
    Random,
    /// All zeros: the gate starts exactly uniform. Under top-k routing the
    /// unselected experts' logits then receive identical updates and stay
    /// tied, so routing cannot move away from the lowest indices.
    Zero,
}

impl fmt::Display for GateInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateInit::Random => "random",
            GateInit::Zero => "zero",
        })
    }
}

impl FromStr for GateInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(GateInit::Random),
            "zero" => Ok(GateInit::Zero),
            other => Err(invalid(format!("unknown gate init {other:?} (random, zero)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate<T> {
    grid: VoxelGrid<T>,
    mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct GateVars {
    pub grid: Var,
    pub mlp: MlpVars,
}

impl GateVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.grid];
        v.extend(self.mlp.vars());
        v
    }
}

impl<T: Real> Gate<T> {
    /// Gate over `experts` outputs with a `resolution^3` feature grid and
    /// every layer randomly initialized.
    pub fn new(experts: usize, resolution: usize, seed: u64) -> Result<Self> {
        Self::with_init(experts, resolution, seed, GateInit::Random)
    }

    /// Gate whose probabilities are exactly `1/experts` everywhere.
    pub fn uniform(experts: usize, resolution: usize) -> Result<Self> {
        Self::with_init(experts, resolution, 0, GateInit::Zero)
    }

    pub fn with_init(experts: usize, resolution: usize, seed: u64, init: GateInit) -> Result<Self> {
        if resolution < 4 {
            return Err(invalid(format!("gate resolution must be >= 4, got {resolution}")));
        }
        if experts == 0 {
            return Err(invalid("gate needs at least one expert"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a7e);
        let bound = 1.0 / (GATE_CHANNELS as f64).sqrt();
        let grid = VoxelGrid::uniform_random([resolution; 3], GATE_CHANNELS, bound, &mut rng)?;
        let mut mlp = Mlp::new(&[GATE_CHANNELS, GATE_HIDDEN, GATE_HIDDEN, experts], &mut rng)?;
        if init == GateInit::Zero {
            mlp.zero_output_layer();
        }
        Ok(Gate { grid, mlp })
    }

    /// Gate that sends every point to `expert` with probability exactly 1.
    pub fn pinned(experts: usize, expert: usize, resolution: usize) -> Result<Self> {
        if expert >= experts {
            return Err(invalid(format!("expert {expert} out of range for {experts} experts")));
        }
        let mut gate = Self::new(experts, resolution, 0)?;
        for v in gate.grid.values_mut().data_mut() {
            *v = T::zero();
        }
        for layer in gate.mlp.layers_mut() {
            layer.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        let bias = gate.mlp.layers_mut().last_mut().expect("non-empty").bias.data_mut();
        for (i, b) in bias.iter_mut().enumerate() {
            *b = if i == expert { T::zero() } else { T::of(-1e30) };
        }
        Ok(gate)
    }

    pub fn from_parts(grid: VoxelGrid<T>, mlp: Mlp<T>) -> Result<Self> {
        if mlp.input_width() != grid.channels() {
            return Err(invalid("gate MLP input width does not match grid channels"));
        }
        Ok(Gate { grid, mlp })
    }

    pub fn cast<U: Real>(&self) -> Gate<U> {
        Gate { grid: self.grid.cast(), mlp: self.mlp.cast() }
    }

    pub fn experts(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn grid(&self) -> &VoxelGrid<T> {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut VoxelGrid<T> {
        &mut self.grid
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mlp
    }

    pub fn logits(&self, x: [f64; 3]) -> Vec<T> {
        self.mlp.forward(&self.grid.interpolate(x))
    }

    /// Expert probabilities at `x`.
    pub fn probs(&self, x: [f64; 3]) -> Vec<T> {
        softmax(&self.logits(x))
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GateVars {
        let grid = if trainable { self.grid.bind(tape) } else { self.grid.bind_frozen(tape) };
        GateVars { grid, mlp: self.mlp.bind(tape, trainable) }
    }

    /// `(n, M)` probabilities for a batch of points.
    pub fn probs_on(&self, tape: &mut Tape<T>, vars: &GateVars, points: &[[f64; 3]]) -> Result<Var> {
        let feat = self.grid.interp_on(tape, vars.grid, points)?;
        let logits = vars.mlp.apply(tape, feat)?;
        tape.softmax_rows(logits)
    }

    pub fn flops_per_point(&self) -> f64 {
        24.0 * self.grid.channels() as f64 + 2.0 * self.mlp.macs() as f64
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        self.grid.write_blob(w)?;
        self.mlp.write_blob(w)
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let grid = VoxelGrid::read_blob(r)?;
        let mlp = Mlp::read_blob(r)?;
        Self::from_parts(grid, mlp).map_err(|e| Error::Format(e.to_string()))
    }
}

impl<T: Real> Module<T> for Gate<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![self.grid.values()];
        p.extend(self.mlp.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![self.grid.values_mut()];
        p.extend(self.mlp.parameters_mut());
        p
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_gives_uniform_gate() {
        let g: Gate<f32> = Gate::with_init(3, 8, 1, GateInit::Zero).unwrap();
        for x in [[0.0, 0.0, 0.0], [0.2, 0.7, 0.4], [1.0, 0.5, 0.5]] {
            for p in g.probs(x) {
                assert!((p - 1.0 / 3.0).abs() < 1e-7);
            }
        }
        assert_eq!(Gate::<f64>::uniform(4, 5).unwrap().probs([0.1, 0.2, 0.3]), vec![0.25; 4]);
    }

    #[test]
    fn random_init_breaks_symmetry() {
        let g: Gate<f64> = Gate::new(3, 8, 1).unwrap();
        let p = g.probs([0.2, 0.7, 0.4]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] != p[1] && p[1] != p[2]);
        assert_ne!(g.probs([0.9, 0.1, 0.4]), p);
        assert_eq!("zero".parse::<GateInit>().unwrap(), GateInit::Zero);
        assert_eq!(GateInit::Random.to_string(), "random");
        assert!("ones".parse::<GateInit>().is_err());
    }

    #[test]
    fn output_width_and_grid_size() {
        let g: Gate<f32> = Gate::new(5, 8, 0).unwrap();
        assert_eq!(g.experts(), 5);
        assert_eq!(g.grid().values().numel(), 4096);
        assert!(Gate::<f32>::new(3, 3, 0).is_err());
    }

    #[test]
    fn pinned_gate_is_one_hot() {
        let g: Gate<f32> = Gate::pinned(4, 2, 4).unwrap();
        for x in [[0.0, 0.0, 0.0], [0.3, 0.9, 0.1]] {
            assert_eq!(g.probs(x), vec![0.0, 0.0, 1.0, 0.0]);
        }
        assert!(Gate::<f32>::pinned(3, 3, 4).is_err());
    }

    #[test]
    fn known_logits() {
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        assert!((p[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_feature_grid_gives_constant_probs() {
        let mut g: Gate<f64> = Gate::new(4, 6, 3).unwrap();
        for l in g.mlp_mut().layers_mut() {
            l.bias.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        }
        g.grid_mut().values_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let p0 = g.probs([0.1, 0.1, 0.1]);
        for x in [[0.9, 0.3, 0.5], [0.5, 0.5, 0.5]] {
            assert_eq!(g.probs(x), p0);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_vary_continuously() {
        let mut g: Gate<f64> = Gate::new(5, 8, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut other = Mlp::new(&[GATE_CHANNELS, GATE_HIDDEN, GATE_HIDDEN, 5], &mut rng).unwrap();
        std::mem::swap(g.mlp_mut(), &mut other);
        for i in 0..50 {
            let x = [(i as f64 * 0.137) % 1.0, (i as f64 * 0.291) % 1.0, (i as f64 * 0.711) % 1.0];
            let p = g.probs(x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let q = g.probs([x[0] + 1e-7, x[1], x[2]]);
            let diff: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let g: Gate<f32> = Gate::new(4, 5, 9).unwrap();
        let mut buf = Vec::new();
        g.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Gate::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap(), g);
    }
}
