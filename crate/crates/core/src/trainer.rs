//! Two-phase training: independent expert pre-training, then joint
//! optimization of gate and experts on the photometric loss plus the
//! resolution-weighted auxiliary loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Module, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::expert::{Expert, ExpertBank, DIR_ENCODING_WIDTH};
use crate::gate::{Gate, GateInit};
use crate::losses::{photometric_on, rw_aux_on, total_on, PenaltyKind, PenaltySchedule, DEFAULT_LAMBDA};
use crate::moe::{batch_layout, DensityFilter, Moe, DEFAULT_THRESHOLD};
use crate::optim::Adam;
use crate::real::Real;
use crate::renderer::{sample_ray, Ray, SampledRay, Sampling};
use crate::scene::{Dataset, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub experts: usize,
    pub k: usize,
    pub lambda: f64,
    pub pretrain_iters: usize,
    pub joint_iters: usize,
    pub batch_rays: usize,
    pub samples: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub penalty: PenaltyKind,
    pub seed: u64,
    pub gate_resolution: usize,
    pub base_resolution: usize,
    pub threshold: f64,
    pub stratified: bool,
    pub gate_init: GateInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            experts: 3,
            k: 1,
            lambda: DEFAULT_LAMBDA,
            pretrain_iters: 300,
            joint_iters: 700,
            batch_rays: 256,
            samples: 64,
            lr_grid: 0.1,
            lr_mlp: 1e-3,
            penalty: PenaltyKind::Geometric,
            seed: 0,
            gate_resolution: crate::gate::DEFAULT_GATE_RESOLUTION,
            base_resolution: 24,
            threshold: DEFAULT_THRESHOLD,
            stratified: true,
            gate_init: GateInit::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=5).contains(&self.experts) {
            return Err(invalid(format!("experts must be 3, 4 or 5, got {}", self.experts)));
        }
        if self.k == 0 || self.k > self.experts {
            return Err(invalid(format!("k must be in 1..={}, got {}", self.experts, self.k)));
        }
        if self.batch_rays == 0 || self.samples < 2 {
            return Err(invalid("batch_rays must be positive and samples >= 2"));
        }
        for (name, v) in
            [("lambda", self.lambda), ("lr_grid", self.lr_grid), ("lr_mlp", self.lr_mlp), ("threshold", self.threshold)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.gate_resolution < 4 || self.base_resolution < 4 {
            return Err(invalid("gate and base resolutions must be >= 4"));
        }
        Ok(())
    }

    fn sampling(&self, stream: u64, iteration: usize, ray: usize) -> Sampling {
        if self.stratified {
            Sampling::Stratified(mix(self.seed, stream, ((iteration as u64) << 24) ^ ray as u64))
        } else {
            Sampling::Uniform
        }
    }
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub(crate) fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Batch stream of the pre-training phase.
pub const STREAM_PRETRAIN: u64 = 1;
/// Batch stream of the joint phase.
pub const STREAM_JOINT: u64 = 2;

/// Training rays that cross the unit cube, with their target colors.
#[derive(Debug, Clone)]
pub struct RaySet {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
}

impl RaySet {
    pub fn from_dataset(dataset: &Dataset, split: Split) -> Result<Self> {
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for view in dataset.split(split) {
            for y in 0..view.camera.height {
                for x in 0..view.camera.width {
                    if let Some(r) = view.camera.ray(x, y) {
                        rays.push(r);
                        colors.push(view.image.get(x, y));
                    }
                }
            }
        }
        if rays.is_empty() {
            return Err(invalid("dataset has no rays crossing the scene volume"));
        }
        Ok(RaySet { rays, colors })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Deterministic batch for `(seed, stream, iteration)`: sampled rays and
    /// their target colors, flattened.
    pub fn batch<T: Real>(
        &self,
        cfg: &TrainConfig,
        stream: u64,
        iteration: usize,
    ) -> Result<(Vec<SampledRay>, Vec<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, stream, iteration as u64));
        let mut rays = Vec::with_capacity(cfg.batch_rays);
        let mut truth = Vec::with_capacity(cfg.batch_rays * 3);
        for j in 0..cfg.batch_rays {
            let i = rng.gen_range(0..self.rays.len());
            rays.push(sample_ray(&self.rays[i], cfg.samples, cfg.sampling(stream, iteration, j))?);
            truth.extend(self.colors[i].iter().map(|&c| T::of(c)));
        }
        Ok((rays, truth))
    }
}

fn learning_rates<T: Real>(params: &[&crate::autodiff::Tensor<T>], cfg: &TrainConfig) -> Vec<f64> {
    // Grids are rank-4; MLP weights and biases are rank 1 or 2.
    params.iter().map(|p| if p.shape().len() == 4 { cfg.lr_grid } else { cfg.lr_mlp }).collect()
}

fn check_finite(what: &str, v: f64, iteration: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v} at iteration {iteration}")))
    }
}

/// Renders a batch through a single expert with no filtering.
pub fn expert_forward_batch<T: Real>(
    expert: &Expert<T>,
    tape: &mut Tape<T>,
    rays: &[SampledRay],
) -> Result<(Var, Vec<Var>)> {
    let (n, deltas) = batch_layout::<T>(rays)?;
    let vars = expert.bind(tape);
    let points: Vec<[f64; 3]> = rays.iter().flat_map(|r| r.positions.iter().copied()).collect();
    let enc: Vec<T> = rays
        .iter()
        .flat_map(|r| {
            let e = crate::expert::encode_direction(r.dir);
            (0..n).flat_map(move |_| e.into_iter().map(T::of))
        })
        .collect();
    let enc = tape.constant(crate::autodiff::Tensor::matrix(points.len(), DIR_ENCODING_WIDTH, enc)?);
    let (sigma, rgb) = expert.forward_on(tape, &vars, &points, enc)?;
    let sigma = tape.reshape(sigma, vec![rays.len(), n])?;
    let out = tape.composite(sigma, rgb, deltas)?;
    Ok((out, vars.vars()))
}

/// Optimizer state for training one expert on its own.
#[derive(Debug, Clone)]
pub struct ExpertTrainer<T> {
    pub adam: Adam<T>,
    pub iteration: usize,
}

impl<T: Real> ExpertTrainer<T> {
    pub fn new(expert: &Expert<T>) -> Self {
        let sizes: Vec<usize> = expert.parameters().iter().map(|p| p.numel()).collect();
        ExpertTrainer { adam: Adam::new(&sizes), iteration: 0 }
    }

    /// Runs `iters` steps, returning the photometric loss of each.
    pub fn run(&mut self, expert: &mut Expert<T>, data: &RaySet, cfg: &TrainConfig, iters: usize) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(iters);
        for _ in 0..iters {
            let it = self.iteration;
            let (rays, truth) = data.batch::<T>(cfg, STREAM_PRETRAIN, it)?;
            let mut tape = Tape::new();
            let (rgb, vars) = expert_forward_batch(expert, &mut tape, &rays)?;
            let loss = photometric_on(&mut tape, rgb, &truth)?;
            let lv = tape.value(loss).data()[0].as_f64();
            check_finite("pre-training loss", lv, it)?;
            let grads = tape.backward(loss)?;
            let gs: Vec<&[T]> = vars.iter().map(|&v| grads.get(v).expect("trainable leaf")).collect();
            let lrs = learning_rates(&expert.parameters(), cfg);
            self.adam.step(&mut expert.parameters_mut(), &gs, &lrs)?;
            losses.push(lv);
            self.iteration += 1;
        }
        Ok(losses)
    }
}

/// Trains every expert independently for `pretrain_iters` steps. The gate
/// does not exist yet in this phase.
pub fn pretrain_experts<T: Real>(bank: &mut ExpertBank<T>, data: &RaySet, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    (0..bank.len())
        .map(|i| {
            let expert = bank.expert_mut(i);
            ExpertTrainer::new(expert).run(expert, data, cfg, cfg.pretrain_iters)
        })
        .collect()
}

/// Builds the mixture after pre-training: a fresh gate and the frozen density
/// filter copied from the lowest-resolution expert.
pub fn assemble_moe<T: Real>(bank: ExpertBank<T>, cfg: &TrainConfig) -> Result<Moe<T>> {
    cfg.validate()?;
    let gate = Gate::with_init(bank.len(), cfg.gate_resolution, cfg.seed, cfg.gate_init)?;
    let filter = DensityFilter::from_expert(bank.expert(0), cfg.threshold)?;
    Moe::new(bank, gate, filter, cfg.k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub l_nerf: f64,
    pub l_rw_aux: f64,
    pub l_tot: f64,
    /// Share of dispatched points per expert; sums to 1 unless the step was skipped.
    pub dispatch_frac: Vec<f64>,
    pub filtered: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub pretrain_losses: Vec<Vec<f64>>,
    pub records: Vec<IterRecord>,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// `iteration,l_nerf,l_rw_aux,l_tot,dispatch_frac_0..M-1`
    pub fn to_csv(&self, experts: usize) -> String {
        let mut out = String::from("iteration,l_nerf,l_rw_aux,l_tot");
        for i in 0..experts {
            out.push_str(&format!(",dispatch_frac_{i}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{:e},{:e},{:e}", r.iteration, r.l_nerf, r.l_rw_aux, r.l_tot));
            for f in &r.dispatch_frac {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }

    /// Dispatch fractions summed over all joint iterations.
    pub fn total_filtered(&self) -> usize {
        self.records.iter().map(|r| r.filtered).sum()
    }
}

/// Joint-phase optimizer state, resumable from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrainer<T> {
    pub adam: Adam<T>,
    pub iteration: usize,
    pub train_gate: bool,
}

impl<T: Real> JointTrainer<T> {
    pub fn new(moe: &Moe<T>, train_gate: bool) -> Self {
        let mut sizes: Vec<usize> = moe.bank.parameters().iter().map(|p| p.numel()).collect();
        if train_gate {
            sizes.extend(moe.gate.parameters().iter().map(|p| p.numel()));
        }
        JointTrainer { adam: Adam::new(&sizes), iteration: 0, train_gate }
    }

    /// One joint step on batch `self.iteration`.
    pub fn step(
        &mut self,
        moe: &mut Moe<T>,
        data: &RaySet,
        cfg: &TrainConfig,
        schedule: &PenaltySchedule,
    ) -> Result<IterRecord> {
        let it = self.iteration;
        let (rays, truth) = data.batch::<T>(cfg, STREAM_JOINT, it)?;
        let mut tape = Tape::new();
        let vars = moe.bind(&mut tape, self.train_gate);
        let out = moe.forward_batch(&mut tape, &vars, &rays)?;
        let l_nerf = photometric_on(&mut tape, out.rgb, &truth)?;
        let (loss, l_aux) = match out.probs {
            Some(p) => {
                let aux = rw_aux_on(&mut tape, p, &out.counts, &schedule.weights)?;
                (total_on(&mut tape, l_nerf, aux, cfg.lambda)?, Some(aux))
            }
            None => (l_nerf, None),
        };
        let lv = |v: Var| tape.value(v).data()[0].as_f64();
        let (ln, la, lt) = (lv(l_nerf), l_aux.map_or(0.0, lv), lv(loss));
        check_finite("joint loss", lt, it)?;
        let dispatched: u64 = out.counts.iter().sum();
        let record = IterRecord {
            iteration: it,
            l_nerf: ln,
            l_rw_aux: la,
            l_tot: lt,
            dispatch_frac: out
                .counts
                .iter()
                .map(|&c| if dispatched > 0 { c as f64 / dispatched as f64 } else { 0.0 })
                .collect(),
            filtered: out.filtered,
            skipped: out.filtered == 0,
        };
        self.iteration += 1;
        if out.filtered == 0 {
            return Ok(record);
        }
        let grads = tape.backward(loss)?;
        let mut param_vars = vars.expert_vars();
        if self.train_gate {
            param_vars.extend(vars.gate.vars());
        }
        let gs: Vec<&[T]> = param_vars.iter().map(|&v| grads.get(v).expect("trainable leaf")).collect();
        let mut lrs = learning_rates(&moe.bank.parameters(), cfg);
        if self.train_gate {
            lrs.extend(learning_rates(&moe.gate.parameters(), cfg));
        }
        let mut params = moe.bank.parameters_mut();
        if self.train_gate {
            params.extend(moe.gate.parameters_mut());
        }
        self.adam.step(&mut params, &gs, &lrs)?;
        Ok(record)
    }
}

/// Joint optimization for `joint_iters` steps with a trainable gate.
pub fn train_moe<T: Real>(moe: &mut Moe<T>, data: &RaySet, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut trainer = JointTrainer::new(moe, true);
    run_joint(&mut trainer, moe, data, cfg, cfg.joint_iters)
}

pub fn run_joint<T: Real>(
    trainer: &mut JointTrainer<T>,
    moe: &mut Moe<T>,
    data: &RaySet,
    cfg: &TrainConfig,
    iters: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    if moe.k != cfg.k || moe.experts() != cfg.experts {
        return Err(invalid("mixture does not match the training config"));
    }
    let schedule = PenaltySchedule::new(cfg.penalty, moe.experts())?;
    let start = Instant::now();
    let records = (0..iters).map(|_| trainer.step(moe, data, cfg, &schedule)).collect::<Result<Vec<_>>>()?;
    Ok(TrainReport { pretrain_losses: Vec::new(), records, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Full two-phase procedure from a fresh bank.
pub fn train_pipeline<T: Real>(data: &RaySet, cfg: &TrainConfig) -> Result<(Moe<T>, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut bank = ExpertBank::build(cfg.base_resolution, cfg.experts, cfg.seed)?;
    let pretrain = pretrain_experts(&mut bank, data, cfg)?;
    let mut moe = assemble_moe(bank, cfg)?;
    let mut report = train_moe(&mut moe, data, cfg)?;
    report.pretrain_losses = pretrain;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((moe, report))
}
