//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::ensemble::{self, PairedPredictions};
use crate::error::{invalid, Error, Result};
use crate::expert::{level_resolution, ExpertBank};
use crate::image::Image;
use crate::losses::PenaltyKind;
use crate::metrics::{active_params, evaluate, flop_count, mean_expert_index, psnr, EvalReport};
use crate::moe::Moe;
use crate::renderer::{render_image, render_image_stats, PixelMode};
use crate::scene::{make_dataset, Dataset, Scene, Split, View, BUILTIN_SCENES};
use crate::trainer::{
    assemble_moe, pretrain_experts, run_joint, ExpertTrainer, JointTrainer, RaySet, TrainConfig, TrainReport,
};

pub const THREADS_ENV: &str = "MOEFIELD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "moefield", version, about = "Sparse mixture-of-experts radiance fields")]
pub struct Cli {
    /// Worker threads for rendering; MOEFIELD_THREADS takes precedence.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a built-in scene into a dataset directory.
    GenScene(GenSceneArgs),
    /// Pre-train the experts, then train gate and experts jointly.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test views.
    Eval(EvalArgs),
    /// Train and evaluate along one ablation axis.
    Sweep(SweepArgs),
    /// Mixing-weight analysis of two predictors.
    EnsembleAnalyze(EnsembleArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    pub scene: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Continue joint training from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to the checkpoint's scene rendered in memory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate the plain average of all experts instead of the gated mixture.
    #[arg(long)]
    pub ensemble: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Topk,
    Penalty,
    Resolution,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Compare two experts of this checkpoint on its test views.
    #[arg(long, required_unless_present = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Expert pair `i,j`; defaults to the lowest and highest resolution.
    #[arg(long, value_delimiter = ',')]
    pub pair: Option<Vec<usize>>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Analyze a random instance with this many outputs instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid points over the mixing weight.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Thread count after applying the environment override.
pub fn resolve_threads(flag: usize) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) if flag == 0 => Err(Error::Config("--threads must be positive".into())),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = resolve_threads(cli.threads)?;
    match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a, threads),
        Command::Sweep(a) => sweep(a, threads),
        Command::EnsembleAnalyze(a) => ensemble_analyze(a, threads),
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(invalid(format!("output directory {} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn scene_by_name(name: &str) -> Result<Scene> {
    Scene::builtin(name)
        .map_err(|_| invalid(format!("unknown scene {name:?}; available: {}", BUILTIN_SCENES.join(", "))))
}

fn dataset_for(cfg: &RunConfig, override_dir: Option<&Path>) -> Result<Dataset> {
    match override_dir.or(cfg.dataset.as_deref()) {
        Some(dir) => Dataset::load(dir),
        None => make_dataset(
            &scene_by_name(&cfg.scene)?,
            cfg.train_views,
            cfg.test_views,
            cfg.image_size,
            cfg.image_size,
            cfg.train.seed,
        ),
    }
}

fn ensure_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite values")))
    }
}

fn save_image(img: &Image, path: &Path) -> Result<()> {
    if !img.is_finite() {
        return Err(Error::NonFinite(format!("render for {} is not finite", path.display())));
    }
    img.save_ppm(path)
}

pub fn gen_scene(a: GenSceneArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let scene = scene_by_name(&a.scene)?;
    let out = a.out.out.clone().unwrap_or_else(|| PathBuf::from(&a.scene));
    cfg.validate()?;
    prepare_out(&out, a.out.force)?;
    let ds = make_dataset(&scene, cfg.train_views, cfg.test_views, cfg.image_size, cfg.image_size, cfg.train.seed)?;
    ds.save(&out)?;
    eprintln!("wrote {} views of {} to {}", ds.views.len(), a.scene, out.display());
    Ok(())
}

fn pretrain_csv(losses: &[Vec<f64>]) -> String {
    let mut s = String::from("iteration");
    for i in 0..losses.len() {
        let _ = write!(s, ",expert_{i}");
    }
    s.push('\n');
    let iters = losses.iter().map(Vec::len).max().unwrap_or(0);
    for it in 0..iters {
        let _ = write!(s, "{it}");
        for l in losses {
            let _ = write!(s, ",{:e}", l.get(it).copied().unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}

/// Joint phase with periodic checkpoints under `out/checkpoints/iter_<n>`.
fn joint_with_checkpoints(
    cfg: &RunConfig,
    trainer: &mut JointTrainer<f32>,
    moe: &mut Moe<f32>,
    data: &RaySet,
    out: &Path,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let every = if cfg.checkpoint_every == 0 { usize::MAX } else { cfg.checkpoint_every };
    while trainer.iteration < cfg.train.joint_iters {
        let steps = (every - trainer.iteration % every).min(cfg.train.joint_iters - trainer.iteration);
        let part = run_joint(trainer, moe, data, &cfg.train, steps)?;
        if let Some(r) = part.records.last() {
            eprintln!(
                "joint {:>5}: l_nerf {:.5} l_rw_aux {:.4} dispatch {:?}",
                r.iteration, r.l_nerf, r.l_rw_aux, r.dispatch_frac
            );
        }
        report.records.extend(part.records);
        report.wall_time_s += part.wall_time_s;
        if trainer.iteration.is_multiple_of(every) && trainer.iteration < cfg.train.joint_iters {
            checkpoint::save(
                out.join("checkpoints").join(format!("iter_{:05}", trainer.iteration)),
                cfg,
                moe,
                Some(trainer),
            )?;
        }
    }
    Ok(report)
}

pub fn train(a: TrainArgs) -> Result<()> {
    if let Some(dir) = &a.resume {
        let ck: Checkpoint<f32> = checkpoint::load(dir)?;
        let mut cfg = ck.config;
        let mut trainer = ck.trainer.ok_or_else(|| invalid(format!("{} holds no optimizer state", dir.display())))?;
        let mut moe = ck.moe;
        if let Some(o) = a.out.out {
            cfg.out = o;
        }
        prepare_out(&cfg.out, a.out.force)?;
        let ds = dataset_for(&cfg, None)?;
        let data = RaySet::from_dataset(&ds, Split::Train)?;
        let report = joint_with_checkpoints(&cfg, &mut trainer, &mut moe, &data, &cfg.out)?;
        return finish_training(&cfg, &moe, &trainer, &report);
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = a.out.out {
        cfg.out = o;
    }
    cfg.validate()?;
    prepare_out(&cfg.out, a.out.force)?;
    let ds = dataset_for(&cfg, None)?;
    let data = RaySet::from_dataset(&ds, Split::Train)?;
    let mut bank = ExpertBank::<f32>::build(cfg.train.base_resolution, cfg.train.experts, cfg.train.seed)?;
    let pre = pretrain_experts(&mut bank, &data, &cfg.train)?;
    ensure_finite("pre-training losses", pre.iter().flatten().copied())?;
    std::fs::write(cfg.out.join("pretrain.csv"), pretrain_csv(&pre))?;
    for (i, l) in pre.iter().enumerate() {
        eprintln!(
            "pretrain expert {i}: loss {:.5} -> {:.5}",
            l.first().unwrap_or(&f64::NAN),
            l.last().unwrap_or(&f64::NAN)
        );
    }
    let mut moe = assemble_moe(bank, &cfg.train)?;
    let mut trainer = JointTrainer::new(&moe, true);
    let report = joint_with_checkpoints(&cfg, &mut trainer, &mut moe, &data, &cfg.out)?;
    finish_training(&cfg, &moe, &trainer, &report)
}

fn finish_training(cfg: &RunConfig, moe: &Moe<f32>, trainer: &JointTrainer<f32>, report: &TrainReport) -> Result<()> {
    ensure_finite("training losses", report.records.iter().map(|r| r.l_tot))?;
    std::fs::write(cfg.out.join("train.csv"), report.to_csv(moe.experts()))?;
    checkpoint::save(cfg.out.join("checkpoint"), cfg, moe, Some(trainer))?;
    eprintln!("saved {}", cfg.out.join("checkpoint").display());
    Ok(())
}

fn test_views(ds: &Dataset) -> Result<Vec<&View>> {
    let views: Vec<&View> = ds.split(Split::Test).collect();
    if views.is_empty() {
        return Err(invalid("dataset has no test views"));
    }
    Ok(views)
}

pub fn eval(a: EvalArgs, threads: usize) -> Result<()> {
    let ck: Checkpoint<f32> = checkpoint::load(&a.checkpoint)?;
    let out = a.out.out.clone().unwrap_or_else(|| a.checkpoint.join("eval"));
    let ds = dataset_for(&ck.config, a.dataset.as_deref())?;
    let views = test_views(&ds)?;
    let n = ck.config.train.samples;
    let moe = if a.ensemble { Moe::ensemble(ck.moe.bank, ck.config.train.gate_resolution)? } else { ck.moe };
    prepare_out(&out, a.out.force)?;
    let ev = evaluate(&moe, &views, n, threads)?;
    let r = ev.report;
    ensure_finite("evaluation report", [r.psnr, r.ssim, r.gflops])?;
    for (v, img) in ev.images.iter().enumerate() {
        save_image(img, &out.join(format!("render_{v:03}.ppm")))?;
    }
    for (v, view) in views.iter().enumerate() {
        for i in 0..moe.experts() {
            let e = render_image(&moe, &view.camera, n, PixelMode::ExpertOnly(i), threads)?;
            save_image(&e, &out.join(format!("expert{i}_{v:03}.ppm")))?;
            let g = render_image(&moe, &view.camera, n, PixelMode::GateProbability(i), threads)?;
            save_image(&g, &out.join(format!("gate{i}_{v:03}.ppm")))?;
        }
    }
    std::fs::write(out.join("eval.csv"), format!("{}\n{}\n", EvalReport::CSV_HEADER, r.csv_row()))?;
    eprintln!(
        "psnr {:.3} ssim {:.4} w0 {} gflops {:.4} mean expert index {:.3}",
        r.psnr,
        r.ssim,
        r.w0,
        r.gflops,
        mean_expert_index(&ev.stats.counts)
    );
    Ok(())
}

/// One CSV row per sweep setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub psnr: f64,
    pub gflops: f64,
    pub w0: usize,
}

pub fn sweep_rows_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("setting,psnr,gflops,w0\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.setting, r.psnr, r.gflops, r.w0);
    }
    s
}

/// Runs every setting of `axis` from one shared pre-trained bank.
pub fn run_sweep(cfg: &RunConfig, axis: SweepAxis, ds: &Dataset, threads: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = RaySet::from_dataset(ds, Split::Train)?;
    let views = test_views(ds)?;
    let mut bank = ExpertBank::<f32>::build(cfg.train.base_resolution, cfg.train.experts, cfg.train.seed)?;
    pretrain_experts(&mut bank, &data, &cfg.train)?;
    let mixture_row = |setting: String, train: TrainConfig| -> Result<SweepRow> {
        let mut moe = assemble_moe(bank.clone(), &train)?;
        run_joint(&mut JointTrainer::new(&moe, true), &mut moe, &data, &train, train.joint_iters)?;
        let ev = evaluate(&moe, &views, train.samples, threads)?;
        Ok(SweepRow { setting, psnr: ev.report.psnr, gflops: ev.report.gflops, w0: ev.report.w0 })
    };
    let rows = match axis {
        SweepAxis::Topk => (1..=cfg.train.experts)
            .map(|k| mixture_row(format!("top{k}"), TrainConfig { k, ..cfg.train.clone() }))
            .collect::<Result<Vec<_>>>()?,
        SweepAxis::Penalty => PenaltyKind::ALL
            .iter()
            .map(|&penalty| mixture_row(penalty.to_string(), TrainConfig { penalty, ..cfg.train.clone() }))
            .collect::<Result<Vec<_>>>()?,
        SweepAxis::Resolution => (0..cfg.train.experts)
            .map(|i| {
                let mut b = bank.clone();
                let expert = b.expert_mut(i);
                ExpertTrainer::new(expert).run(expert, &data, &cfg.train, cfg.train.joint_iters)?;
                let moe = Moe::single_expert(b, i)?;
                let mut p = 0.0;
                let mut stats = crate::renderer::RenderStats::new(moe.experts());
                for v in &views {
                    let (img, st) =
                        render_image_stats(&moe, &v.camera, cfg.train.samples, PixelMode::Mixture, threads)?;
                    p += psnr(&img, &v.image)?;
                    stats.merge(&st);
                }
                let active = active_params(&moe, &views, cfg.train.samples)?;
                Ok(SweepRow {
                    setting: format!("res{}", level_resolution(cfg.train.base_resolution, i)),
                    psnr: p / views.len() as f64,
                    gflops: flop_count(&moe, &stats)?.experts * 1e-9 / views.len() as f64,
                    w0: active.experts_total(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    ensure_finite("sweep results", rows.iter().flat_map(|r| [r.psnr, r.gflops]))?;
    Ok(rows)
}

pub fn sweep(a: SweepArgs, threads: usize) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = a.out.out {
        cfg.out = o;
    }
    cfg.validate()?;
    prepare_out(&cfg.out, a.out.force)?;
    let ds = dataset_for(&cfg, None)?;
    let rows = run_sweep(&cfg, a.axis, &ds, threads)?;
    std::fs::write(cfg.out.join("sweep.csv"), sweep_rows_csv(&rows))?;
    for r in &rows {
        eprintln!("{:>10}: psnr {:.3} gflops {:.4} w0 {}", r.setting, r.psnr, r.gflops, r.w0);
    }
    Ok(())
}

fn flatten_renders(moe: &Moe<f32>, views: &[&View], n: usize, threads: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for v in views {
        let img = render_image(moe, &v.camera, n, PixelMode::Mixture, threads)?;
        out.extend(img.pixels.iter().flatten());
    }
    Ok(out)
}

pub fn ensemble_analyze(a: EnsembleArgs, threads: usize) -> Result<()> {
    let pair = match a.random {
        Some(j) => {
            if j == 0 {
                return Err(invalid("--random needs a positive output count"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut draw = || (0..j).map(|_| rng.gen::<f64>()).collect::<Vec<_>>();
            let (y1, y2, t) = (draw(), draw(), draw());
            PairedPredictions::new(y1, y2, t)?
        }
        None => {
            let dir = a.checkpoint.as_ref().expect("clap requires --checkpoint without --random");
            let ck: Checkpoint<f32> = checkpoint::load(dir)?;
            let m = ck.moe.experts();
            let (i, j) = match a.pair.as_deref() {
                Some([i, j]) => (*i, *j),
                Some(other) => return Err(invalid(format!("--pair takes two expert indices, got {other:?}"))),
                None => (0, m - 1),
            };
            if i >= m || j >= m {
                return Err(invalid(format!("expert pair ({i}, {j}) out of range for {m} experts")));
            }
            let ds = dataset_for(&ck.config, a.dataset.as_deref())?;
            let views = test_views(&ds)?;
            let n = ck.config.train.samples;
            let y1 = flatten_renders(&Moe::single_expert(ck.moe.bank.clone(), i)?, &views, n, threads)?;
            let y2 = flatten_renders(&Moe::single_expert(ck.moe.bank, j)?, &views, n, threads)?;
            let t: Vec<f64> = views.iter().flat_map(|v| v.image.pixels.iter().flatten().copied()).collect();
            PairedPredictions::new(y1, y2, t)?
        }
    };
    let out = a.out.out.clone().unwrap_or_else(|| PathBuf::from("ensemble-analysis"));
    prepare_out(&out, a.out.force)?;
    let rows = ensemble::sweep(&pair, a.steps)?;
    ensure_finite("ensemble sweep", rows.iter().flat_map(|r| [r.e_ens, r.margin]))?;
    std::fs::write(out.join("sweep.csv"), ensemble::sweep_csv(&rows))?;
    let gap = ensemble::error_gap(&pair);
    let summary = format!(
        "outputs = {}\ne1 = {:e}\ne2 = {:e}\nerror_gap = {:e}\ndisagreement = {:e}\noptimal_alpha = {}\noptimal_alpha_exact = {}\nsweep_argmax = {}\n",
        pair.len(),
        pair.e1(),
        pair.e2(),
        gap,
        pair.disagreement(),
        ensemble::optimal_alpha(gap),
        ensemble::optimal_alpha_exact(&pair),
        ensemble::sweep_argmax(&pair, a.steps)?,
    );
    std::fs::write(out.join("summary.txt"), &summary)?;
    eprint!("{summary}");
    Ok(())
}
