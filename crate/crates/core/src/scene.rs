//! Analytic scenes with exact density and color, ground-truth rendering and
//! on-disk datasets.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::renderer::{composite, dot, sample_ray, Camera, Ray, Sampling, Vec3};

pub const SCENE_CENTER: Vec3 = [0.5, 0.5, 0.5];
pub const CAMERA_DISTANCE: f64 = 2.2;
/// Focal length as a multiple of image width.
pub const FOCAL_PER_WIDTH: f64 = 1.1;
pub const MIN_FINE_SAMPLES: usize = 512;
pub const BUILTIN_SCENES: [&str; 2] = ["one-sphere", "three-spheres-multifreq"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { min: Vec3, max: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Albedo {
    Solid([f64; 3]),
    /// 3-D checkerboard alternating `a` and `b` every `period` along each axis.
    Checker {
        a: [f64; 3],
        b: [f64; 3],
        period: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: Albedo,
    /// View-dependent darkening: color is scaled by `1 - tint * (1 - d_z) / 2`.
    pub tint: f64,
}

impl Primitive {
    pub fn contains(&self, x: Vec3) -> bool {
        match self.shape {
            Shape::Sphere { center, radius } => {
                let v = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
                dot(v, v) <= radius * radius
            }
            Shape::Cuboid { min, max } => (0..3).all(|a| x[a] >= min[a] && x[a] <= max[a]),
        }
    }

    pub fn color(&self, x: Vec3, d: Vec3) -> [f64; 3] {
        let base = match self.albedo {
            Albedo::Solid(c) => c,
            Albedo::Checker { a, b, period } => {
                let parity: i64 = x.iter().map(|&v| (v / period).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        };
        let s = 1.0 - self.tint * (1.0 - d[2]) / 2.0;
        base.map(|c| c * s)
    }

    /// Parameter interval `[t0, t1]` where `o + t d` is inside, if any.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, f64)> {
        match self.shape {
            Shape::Sphere { center, radius } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                (t1 > t0).then_some((t0, t1))
            }
        }
    }

    fn inside_unit_cube(&self) -> bool {
        let (lo, hi) = match self.shape {
            Shape::Sphere { center, radius } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Shape::Cuboid { min, max } => (min, max),
        };
        (0..3).all(|a| lo[a] >= 0.0 && hi[a] <= 1.0 && lo[a] <= hi[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(name: impl Into<String>, primitives: Vec<Primitive>) -> Result<Self> {
        for (i, p) in primitives.iter().enumerate() {
            let albedo_ok = match p.albedo {
                Albedo::Solid(c) => c.iter().all(|v| (0.0..=1.0).contains(v)),
                Albedo::Checker { a, b, period } => period > 0.0 && a.iter().chain(&b).all(|v| (0.0..=1.0).contains(v)),
            };
            if !p.inside_unit_cube() || !(p.density >= 0.0) || !albedo_ok || !(0.0..=1.0).contains(&p.tint) {
                return Err(invalid(format!("primitive {i} violates scene bounds or value ranges")));
            }
        }
        Ok(Scene { name: name.into(), primitives })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "one-sphere" => Scene::new(
                name,
                vec![Primitive {
                    shape: Shape::Sphere { center: SCENE_CENTER, radius: 0.3 },
                    density: 15.0,
                    albedo: Albedo::Solid([0.9, 0.35, 0.2]),
                    tint: 0.2,
                }],
            ),
            "three-spheres-multifreq" => Scene::new(
                name,
                vec![
                    Primitive {
                        shape: Shape::Sphere { center: [0.42, 0.48, 0.42], radius: 0.24 },
                        density: 15.0,
                        albedo: Albedo::Solid([0.85, 0.55, 0.25]),
                        tint: 0.2,
                    },
                    Primitive {
                        shape: Shape::Sphere { center: [0.78, 0.24, 0.3], radius: 0.1 },
                        density: 20.0,
                        albedo: Albedo::Solid([0.2, 0.55, 0.9]),
                        tint: 0.0,
                    },
                    Primitive {
                        shape: Shape::Sphere { center: [0.24, 0.78, 0.7], radius: 0.09 },
                        density: 20.0,
                        albedo: Albedo::Solid([0.3, 0.85, 0.35]),
                        tint: 0.0,
                    },
                    Primitive {
                        shape: Shape::Cuboid { min: [0.62, 0.62, 0.14], max: [0.84, 0.84, 0.36] },
                        density: 20.0,
                        albedo: Albedo::Checker { a: [0.95, 0.95, 0.9], b: [0.15, 0.12, 0.2], period: 0.055 },
                        tint: 0.0,
                    },
                    Primitive {
                        shape: Shape::Cuboid { min: [0.14, 0.16, 0.62], max: [0.32, 0.34, 0.8] },
                        density: 20.0,
                        albedo: Albedo::Checker { a: [0.9, 0.2, 0.15], b: [0.95, 0.85, 0.2], period: 0.045 },
                        tint: 0.0,
                    },
                ],
            ),
            other => Err(invalid(format!("unknown scene {other:?}; available: {}", BUILTIN_SCENES.join(", ")))),
        }
    }

    /// Exact density and color at `x` seen along `d`.
    pub fn query(&self, x: Vec3, d: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for p in self.primitives.iter().filter(|p| p.contains(x)) {
            sigma += p.density;
            let c = p.color(x, d);
            for ch in 0..3 {
                acc[ch] += p.density * c[ch];
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|v| v / sigma))
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Segment-averaged density and density-weighted color over `[t0, t1]`
    /// along `o + t d`, from exact primitive intervals.
    fn segment(&self, o: Vec3, d: Vec3, t0: f64, t1: f64, hits: &[Option<(f64, f64)>]) -> (f64, [f64; 3]) {
        let mut depth = 0.0;
        let mut acc = [0.0; 3];
        for (p, hit) in self.primitives.iter().zip(hits) {
            let Some((a, b)) = *hit else { continue };
            let (lo, hi) = (a.max(t0), b.min(t1));
            if hi <= lo {
                continue;
            }
            let w = p.density * (hi - lo);
            let mid = (lo + hi) / 2.0;
            let c = p.color([o[0] + mid * d[0], o[1] + mid * d[1], o[2] + mid * d[2]], d);
            depth += w;
            for ch in 0..3 {
                acc[ch] += w * c[ch];
            }
        }
        let color = if depth > 0.0 { acc.map(|v| v / depth) } else { [0.0; 3] };
        (depth / (t1 - t0), color)
    }

    /// Ground-truth color of one ray; black when it misses the unit cube.
    pub fn render_ray(&self, ray: Option<&Ray>, fine_n: usize) -> Result<[f64; 3]> {
        let Some(ray) = ray else { return Ok([0.0; 3]) };
        let samples = sample_ray(ray, fine_n, Sampling::Uniform)?;
        let hits: Vec<_> = self.primitives.iter().map(|p| p.intersect(ray.origin, ray.dir)).collect();
        if hits.iter().all(Option::is_none) {
            return Ok([0.0; 3]);
        }
        let quad: Vec<(f64, [f64; 3], f64)> = samples
            .t
            .iter()
            .zip(&samples.deltas)
            .map(|(&t, &dt)| {
                let (s, c) = self.segment(ray.origin, ray.dir, t, t + dt, &hits);
                (s, c, dt)
            })
            .collect();
        Ok(composite(&quad))
    }

    pub fn render_truth(&self, camera: &Camera, fine_n: usize) -> Result<Image> {
        if fine_n < MIN_FINE_SAMPLES {
            return Err(invalid(format!("ground truth needs >= {MIN_FINE_SAMPLES} samples per ray, got {fine_n}")));
        }
        let mut img = Image::new(camera.width, camera.height);
        for y in 0..camera.height {
            for x in 0..camera.width {
                let ray = camera.ray(x, y);
                img.set(x, y, self.render_ray(ray.as_ref(), fine_n)?);
            }
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene: String,
    pub views: Vec<View>,
}

/// Cameras on the upper hemisphere around the scene center, all aimed at it.
/// `cos(theta)` and `phi` are uniform, which is uniform over the hemisphere.
pub fn hemisphere_cameras(count: usize, width: usize, height: usize, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z: f64 = rng.gen_range(0.0..1.0);
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            let eye = [
                SCENE_CENTER[0] + CAMERA_DISTANCE * r * phi.cos(),
                SCENE_CENTER[1] + CAMERA_DISTANCE * r * phi.sin(),
                SCENE_CENTER[2] + CAMERA_DISTANCE * z,
            ];
            Camera::look_at(eye, SCENE_CENTER, FOCAL_PER_WIDTH * width as f64, width, height)
        })
        .collect()
}

pub fn make_dataset(
    scene: &Scene,
    n_train: usize,
    n_test: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 || width == 0 || height == 0 {
        return Err(invalid("dataset needs at least one train view, one test view and a non-empty image"));
    }
    let cameras = hemisphere_cameras(n_train + n_test, width, height, seed);
    let views = cameras
        .into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let split = if i < n_train { Split::Train } else { Split::Test };
            Ok(View { image: scene.render_truth(&camera, MIN_FINE_SAMPLES)?, camera, split })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scene: scene.name.clone(), views })
}

pub const MANIFEST: &str = "manifest.txt";

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    /// Writes `manifest.txt` and one PPM per view. Each manifest line is
    /// `<image> <16 pose values, row-major> <focal> <split>`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = format!("# scene {}\n", self.scene);
        for (i, v) in self.views.iter().enumerate() {
            let name = format!("view_{i:03}.ppm");
            v.image.save_ppm(dir.join(&name))?;
            write!(manifest, "{name}").expect("string write");
            for row in v.camera.pose {
                for x in row {
                    write!(manifest, " {x:?}").expect("string write");
                }
            }
            writeln!(manifest, " {:?} {}", v.camera.focal, v.split.as_str()).expect("string write");
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut scene = String::new();
        let mut views = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# scene ") {
                scene = rest.to_string();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("{MANIFEST}:{}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 19 {
                return Err(bad("expected image, 16 pose values, focal and split"));
            }
            let nums: Vec<f64> = fields[1..18]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad("non-numeric pose or focal")))
                .collect::<Result<_>>()?;
            let mut pose = [[0.0; 4]; 4];
            for (i, v) in nums[..16].iter().enumerate() {
                pose[i / 4][i % 4] = *v;
            }
            let split = match fields[18] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split must be train or test")),
            };
            let path: PathBuf = dir.join(fields[0]);
            let image = Image::load_ppm(&path)?;
            let camera = Camera::from_pose(pose, nums[16], image.width, image.height)?;
            views.push(View { camera, image, split });
        }
        if views.is_empty() {
            return Err(Error::Format(format!("{} lists no views", dir.join(MANIFEST).display())));
        }
        Ok(Dataset { scene, views })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::{normalize, sub};

    #[test]
    fn query_examples() {
        let red = Primitive {
            shape: Shape::Sphere { center: [0.5; 3], radius: 0.2 },
            density: 5.0,
            albedo: Albedo::Solid([1.0, 0.0, 0.0]),
            tint: 0.0,
        };
        let scene = Scene::new("t", vec![red]).unwrap();
        assert_eq!(scene.query([0.05, 0.05, 0.05], [0.0, 0.0, 1.0]), (0.0, [0.0; 3]));
        assert_eq!(scene.query([0.5; 3], [0.0, 0.0, 1.0]), (5.0, [1.0, 0.0, 0.0]));
        let blue = Primitive { albedo: Albedo::Solid([0.0, 0.0, 1.0]), ..red };
        let both = Scene::new("t", vec![red, blue]).unwrap();
        let (s, c) = both.query([0.5; 3], [0.0, 0.0, 1.0]);
        assert_eq!(s, 10.0);
        assert_eq!(c, [0.5, 0.0, 0.5]);
    }

    #[test]
    fn rejects_out_of_cube_primitives() {
        let p = Primitive {
            shape: Shape::Sphere { center: [0.9, 0.5, 0.5], radius: 0.2 },
            density: 1.0,
            albedo: Albedo::Solid([0.5; 3]),
            tint: 0.0,
        };
        assert!(Scene::new("bad", vec![p]).is_err());
        assert!(Scene::builtin("teapot").unwrap_err().to_string().contains("one-sphere"));
    }

    #[test]
    fn empty_scene_renders_black() {
        let scene = Scene::new("empty", vec![]).unwrap();
        let cam = hemisphere_cameras(1, 8, 8, 0)[0];
        let img = scene.render_truth(&cam, 512).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [0.0; 3]));
        assert!(scene.render_truth(&cam, 256).is_err());
    }

    #[test]
    fn cameras_aim_at_center() {
        for cam in hemisphere_cameras(20, 16, 16, 3) {
            let eye = cam.eye();
            assert!(eye[2] >= SCENE_CENTER[2]);
            let f = cam.forward();
            let to_center = sub(SCENE_CENTER, eye);
            let along = dot(to_center, f);
            let perp = sub(to_center, f.map(|v| v * along));
            assert!(dot(perp, perp).sqrt() < 1e-6);
            assert!((dot(normalize(to_center), f) - 1.0).abs() < 1e-12);
        }
        assert_eq!(hemisphere_cameras(5, 8, 8, 9), hemisphere_cameras(5, 8, 8, 9));
    }

    #[test]
    fn segment_integration_matches_point_query_inside() {
        let scene = Scene::builtin("one-sphere").unwrap();
        let o = [-1.0, 0.5, 0.5];
        let d = [1.0, 0.0, 0.0];
        let hits: Vec<_> = scene.primitives().iter().map(|p| p.intersect(o, d)).collect();
        // Fully inside the sphere along x in [1.3, 1.4].
        let (s, c) = scene.segment(o, d, 1.3, 1.4, &hits);
        let (qs, qc) = scene.query([0.35, 0.5, 0.5], d);
        assert!((s - qs).abs() < 1e-12);
        assert_eq!(c, qc);
    }
}
