//! Camera rays, point sampling along rays, and volume-rendering quadrature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::composite_ray;
use crate::error::{invalid, Result};
use crate::expert::encode_direction;
use crate::image::Image;
use crate::moe::{route, Moe, SampleMode};
use crate::real::Real;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// `o + t d` restricted to the segment where it crosses the unit cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Clips the ray against `[0, 1]^3`. `None` when it misses the cube or the
    /// crossing lies entirely behind the origin.
    pub fn through_unit_cube(origin: Vec3, dir: Vec3) -> Option<Ray> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < 0.0 || origin[a] > 1.0 {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut lo, mut hi) = ((0.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t1 - t0 > 1e-9).then_some(Ray { origin, dir, t_near: t0, t_far: t1 })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        [self.origin[0] + t * self.dir[0], self.origin[1] + t * self.dir[1], self.origin[2] + t * self.dir[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledRay {
    pub dir: Vec3,
    pub t: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Uniform,
    /// One jittered sample per stratum, seeded per ray.
    Stratified(u64),
}

/// `n` samples over `[t_near, t_far]`. Sample `p` lies in stratum
/// `[t_near + p h, t_near + (p + 1) h)` with `h = (t_far - t_near) / n`; each
/// delta is the distance to the next sample and the last is `t_far - t_last`,
/// which never exceeds `h`.
pub fn sample_ray(ray: &Ray, n: usize, sampling: Sampling) -> Result<SampledRay> {
    if n < 2 {
        return Err(invalid(format!("need at least 2 samples per ray, got {n}")));
    }
    let h = (ray.t_far - ray.t_near) / n as f64;
    let t: Vec<f64> = match sampling {
        Sampling::Uniform => (0..n).map(|p| ray.t_near + p as f64 * h).collect(),
        Sampling::Stratified(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|p| ray.t_near + (p as f64 + rng.gen::<f64>()) * h).collect()
        }
    };
    let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push((ray.t_far - t[n - 1]).clamp(f64::MIN_POSITIVE, h));
    let positions = t.iter().map(|&ti| ray.at(ti)).collect();
    Ok(SampledRay { dir: ray.dir, t, positions, deltas })
}

/// Composites `(sigma, rgb, delta)` samples front to back.
pub fn composite<T: Real>(samples: &[(T, [T; 3], T)]) -> [T; 3] {
    let sigma: Vec<T> = samples.iter().map(|s| s.0).collect();
    let rgb: Vec<T> = samples.iter().flat_map(|s| s.1).collect();
    let delta: Vec<T> = samples.iter().map(|s| s.2).collect();
    composite_ray(&sigma, &rgb, &delta)
}

/// Pinhole camera; `pose` is camera-to-world with the camera looking down its local -z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: [[f64; 4]; 4],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, focal: f64, width: usize, height: usize) -> Camera {
        let back = normalize(sub(eye, target));
        let up_hint = if back[2].abs() > 0.999 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let right = normalize(cross(up_hint, back));
        let up = cross(back, right);
        let mut pose = [[0.0; 4]; 4];
        for r in 0..3 {
            pose[r] = [right[r], up[r], back[r], eye[r]];
        }
        pose[3] = [0.0, 0.0, 0.0, 1.0];
        Camera { pose, focal, width, height }
    }

    pub fn from_pose(pose: [[f64; 4]; 4], focal: f64, width: usize, height: usize) -> Result<Camera> {
        let col = |c: usize| [pose[0][c], pose[1][c], pose[2][c]];
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot(col(i), col(j)) - expect).abs() > 1e-6 {
                    return Err(invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if !(focal > 0.0) || width == 0 || height == 0 {
            return Err(invalid("camera needs positive focal length and image size"));
        }
        Ok(Camera { pose, focal, width, height })
    }

    pub fn eye(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Unit world-space direction of the optical axis.
    pub fn forward(&self) -> Vec3 {
        [-self.pose[0][2], -self.pose[1][2], -self.pose[2][2]]
    }

    /// Origin and unit direction through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize) -> (Vec3, Vec3) {
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        let local = [(px as f64 + 0.5 - cx) / self.focal, -(py as f64 + 0.5 - cy) / self.focal, -1.0];
        let mut d = [0.0; 3];
        for (r, dv) in d.iter_mut().enumerate() {
            *dv = self.pose[r][0] * local[0] + self.pose[r][1] * local[1] + self.pose[r][2] * local[2];
        }
        (self.eye(), normalize(d))
    }

    /// Pixel ray clipped to the unit cube; `None` renders as background.
    pub fn ray(&self, px: usize, py: usize) -> Option<Ray> {
        let (o, d) = self.pixel_ray(px, py);
        Ray::through_unit_cube(o, d)
    }
}

/// What a rendered pixel shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelMode {
    Mixture,
    /// Only expert `i` contributes color and density along the ray.
    ExpertOnly(usize),
    /// Grayscale gate probability of expert `i`, composited with the mixture density.
    GateProbability(usize),
}

/// Sample and dispatch counts gathered while rendering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderStats {
    /// Samples on rays that cross the volume.
    pub samples: u64,
    /// Samples that survived the density filter.
    pub filtered: u64,
    /// Filtered samples routed to each expert.
    pub counts: Vec<u64>,
}

impl RenderStats {
    pub fn new(experts: usize) -> Self {
        RenderStats { samples: 0, filtered: 0, counts: vec![0; experts] }
    }

    pub fn merge(&mut self, other: &RenderStats) {
        self.samples += other.samples;
        self.filtered += other.filtered;
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Renders one ray through the mixture with `n` uniform samples. A ray that
/// misses the volume is black.
pub fn render_pixel<T: Real>(moe: &Moe<T>, ray: Option<&Ray>, n: usize, mode: PixelMode) -> Result<[f64; 3]> {
    trace(moe, ray, n, mode, &mut RenderStats::new(moe.experts()))
}

fn trace<T: Real>(
    moe: &Moe<T>,
    ray: Option<&Ray>,
    n: usize,
    mode: PixelMode,
    stats: &mut RenderStats,
) -> Result<[f64; 3]> {
    let Some(ray) = ray else { return Ok([0.0; 3]) };
    let s = sample_ray(ray, n, Sampling::Uniform)?;
    let enc = encode_direction(ray.dir);
    let sample_mode = match mode {
        PixelMode::ExpertOnly(i) => SampleMode::ExpertOnly(i),
        _ => SampleMode::Mixture,
    };
    let mut sigma = Vec::with_capacity(n);
    let mut rgb = Vec::with_capacity(3 * n);
    stats.samples += n as u64;
    for &x in &s.positions {
        match moe.sample(x, &enc, sample_mode) {
            Some((c, probs)) => {
                stats.filtered += 1;
                for i in route(&probs, moe.k)?.indices {
                    stats.counts[i] += 1;
                }
                sigma.push(c.sigma);
                match mode {
                    PixelMode::GateProbability(i) => rgb.extend([probs[i]; 3]),
                    _ => rgb.extend(c.rgb),
                }
            }
            None => {
                sigma.push(T::zero());
                rgb.extend([T::zero(); 3]);
            }
        }
    }
    let delta: Vec<T> = s.deltas.iter().map(|&d| T::of(d)).collect();
    Ok(composite_ray(&sigma, &rgb, &delta).map(|c| c.as_f64()))
}

/// Renders a full image, splitting rows over `threads` workers.
pub fn render_image<T: Real>(
    moe: &Moe<T>,
    camera: &Camera,
    n: usize,
    mode: PixelMode,
    threads: usize,
) -> Result<Image> {
    render_image_stats(moe, camera, n, mode, threads).map(|r| r.0)
}

/// [`render_image`] plus the sample and dispatch counts of the render.
pub fn render_image_stats<T: Real>(
    moe: &Moe<T>,
    camera: &Camera,
    n: usize,
    mode: PixelMode,
    threads: usize,
) -> Result<(Image, RenderStats)> {
    match mode {
        PixelMode::ExpertOnly(i) | PixelMode::GateProbability(i) if i >= moe.experts() => {
            return Err(invalid(format!("expert {i} out of range for {} experts", moe.experts())));
        }
        _ => {}
    }
    let (w, h) = (camera.width, camera.height);
    let render_rows = |rows: std::ops::Range<usize>| -> Result<(Vec<[f64; 3]>, RenderStats)> {
        let mut stats = RenderStats::new(moe.experts());
        let mut out = Vec::with_capacity(rows.len() * w);
        for y in rows {
            for x in 0..w {
                out.push(trace(moe, camera.ray(x, y).as_ref(), n, mode, &mut stats)?);
            }
        }
        Ok((out, stats))
    };
    let threads = threads.clamp(1, h.max(1));
    let parts: Vec<Result<(Vec<[f64; 3]>, RenderStats)>> = if threads == 1 {
        vec![render_rows(0..h)]
    } else {
        let chunk = h.div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..h)
                .step_by(chunk)
                .map(|y0| {
                    let f = &render_rows;
                    scope.spawn(move || f(y0..(y0 + chunk).min(h)))
                })
                .collect();
            handles.into_iter().map(|hd| hd.join().expect("render worker panicked")).collect()
        })
    };
    let mut pixels = Vec::with_capacity(w * h);
    let mut stats = RenderStats::new(moe.experts());
    for p in parts {
        let (px, st) = p?;
        pixels.extend(px);
        stats.merge(&st);
    }
    Ok((Image::from_pixels(w, h, pixels)?, stats))
}
