//! Image quality, active-parameter counts and analytic FLOP estimates.

use crate::autodiff::{Module, Tape};
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::losses::photometric_on;
use crate::moe::Moe;
use crate::real::Real;
use crate::renderer::{render_image_stats, sample_ray, PixelMode, RenderStats, Sampling};
use crate::scene::View;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(invalid(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let n = (a.pixels.len() * 3).max(1) as f64;
    let s: f64 = a.pixels.iter().zip(&b.pixels).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).sum();
    Ok(s / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Grayscale SSIM with an 11x11 Gaussian window, averaged over every
/// window that fits inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let f = |p: &[f64]| filter_valid(p, w, h, &k);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mu_a, mu_b) = (f(&ga), f(&gb));
    let (saa, sbb, sab) = (f(&prod(&ga, &ga)), f(&prod(&gb, &gb)), f(&prod(&ga, &gb)));
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Parameters with a non-zero photometric-loss gradient, per expert and for the gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveParams {
    pub experts: Vec<usize>,
    pub gate: usize,
}

impl ActiveParams {
    pub fn total(&self) -> usize {
        self.experts.iter().sum::<usize>() + self.gate
    }

    pub fn experts_total(&self) -> usize {
        self.experts.iter().sum()
    }
}

const ACTIVE_CHUNK: usize = 512;

/// Renders every view on the tape in float64 and counts the parameters whose
/// accumulated gradient is not exactly zero.
pub fn active_params<T: Real>(moe: &Moe<T>, views: &[&View], n: usize) -> Result<ActiveParams> {
    if views.is_empty() {
        return Err(invalid("active parameter count needs at least one view"));
    }
    let moe: Moe<f64> = moe.cast();
    let bank_sizes: Vec<Vec<usize>> =
        moe.bank.experts().iter().map(|e| e.parameters().iter().map(|p| p.numel()).collect()).collect();
    let gate_sizes: Vec<usize> = moe.gate.parameters().iter().map(|p| p.numel()).collect();
    let mut expert_masks: Vec<Vec<Vec<bool>>> =
        bank_sizes.iter().map(|s| s.iter().map(|&n| vec![false; n]).collect()).collect();
    let mut gate_mask: Vec<Vec<bool>> = gate_sizes.iter().map(|&n| vec![false; n]).collect();

    for view in views {
        let cam = &view.camera;
        let mut rays = Vec::new();
        let mut truth = Vec::new();
        for y in 0..cam.height {
            for x in 0..cam.width {
                if let Some(r) = cam.ray(x, y) {
                    rays.push(sample_ray(&r, n, Sampling::Uniform)?);
                    truth.extend(view.image.get(x, y));
                }
            }
        }
        for (chunk, target) in rays.chunks(ACTIVE_CHUNK).zip(truth.chunks(ACTIVE_CHUNK * 3)) {
            let mut tape = Tape::new();
            let vars = moe.bind(&mut tape, true);
            let out = moe.forward_batch(&mut tape, &vars, chunk)?;
            let loss = photometric_on(&mut tape, out.rgb, target)?;
            let grads = tape.backward(loss)?;
            let mark = |mask: &mut Vec<bool>, g: &[f64]| {
                for (m, &v) in mask.iter_mut().zip(g) {
                    *m |= v != 0.0;
                }
            };
            for (e, ev) in vars.experts.iter().enumerate() {
                for (p, v) in ev.vars().into_iter().enumerate() {
                    mark(&mut expert_masks[e][p], grads.get(v).expect("trainable leaf"));
                }
            }
            for (p, v) in vars.gate.vars().into_iter().enumerate() {
                mark(&mut gate_mask[p], grads.get(v).expect("trainable leaf"));
            }
        }
    }
    let count = |masks: &[Vec<bool>]| masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    Ok(ActiveParams { experts: expert_masks.iter().map(|m| count(m)).collect(), gate: count(&gate_mask) })
}

/// Forward cost split by stage, in flops (a multiply-add counts as 2).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlopCount {
    pub filter: f64,
    pub gate: f64,
    pub experts: f64,
}

impl FlopCount {
    pub fn total(&self) -> f64 {
        self.filter + self.gate + self.experts
    }

    pub fn gflops(&self) -> f64 {
        self.total() * 1e-9
    }
}

/// Flops of one interpolation of a `channels`-wide grid: 8 corners, a multiply-add each.
pub fn interp_flops(channels: usize) -> f64 {
    24.0 * channels as f64
}

/// Cost of a render with the given sample and dispatch counts.
pub fn flop_count<T: Real>(moe: &Moe<T>, stats: &RenderStats) -> Result<FlopCount> {
    if stats.counts.len() != moe.experts() {
        return Err(invalid("render stats do not match the expert count"));
    }
    Ok(FlopCount {
        filter: stats.samples as f64 * interp_flops(1),
        gate: stats.filtered as f64 * moe.gate.flops_per_point(),
        experts: stats.counts.iter().zip(moe.bank.experts()).map(|(&c, e)| c as f64 * e.flops_per_point()).sum(),
    })
}

/// Average GFLOPs per image over `images` renders summarized by `stats`.
pub fn flops_per_image<T: Real>(moe: &Moe<T>, stats: &RenderStats, images: usize) -> Result<f64> {
    Ok(flop_count(moe, stats)?.gflops() / images.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub w0: usize,
    pub gflops: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "psnr,ssim,w0,gflops";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.psnr, self.ssim, self.w0, self.gflops)
    }
}

/// Mean expert index weighted by dispatch counts.
pub fn mean_expert_index(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / total as f64
}

/// Everything produced by evaluating a mixture on a set of views.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub images: Vec<Image>,
    pub stats: RenderStats,
    pub active: ActiveParams,
}

/// Renders each view, averages PSNR/SSIM and GFLOPs per image, and counts
/// active parameters.
pub fn evaluate<T: Real>(moe: &Moe<T>, views: &[&View], n: usize, threads: usize) -> Result<Evaluation> {
    if views.is_empty() {
        return Err(invalid("evaluation needs at least one view"));
    }
    let mut stats = RenderStats::new(moe.experts());
    let mut images = Vec::with_capacity(views.len());
    let (mut p, mut s) = (0.0, 0.0);
    for view in views {
        let (img, st) = render_image_stats(moe, &view.camera, n, PixelMode::Mixture, threads)?;
        p += psnr(&img, &view.image)?;
        s += ssim(&img, &view.image)?;
        stats.merge(&st);
        images.push(img);
    }
    let active = active_params(moe, views, n)?;
    let k = views.len() as f64;
    let report =
        EvalReport { psnr: p / k, ssim: s / k, w0: active.total(), gflops: flops_per_image(moe, &stats, views.len())? };
    Ok(Evaluation { report, images, stats, active })
}
