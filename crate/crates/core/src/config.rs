//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. Every key is optional:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `scene` | `three-spheres-multifreq` | built-in scene name |
//! | `dataset` | (empty) | dataset directory; empty renders the scene in memory |
//! | `image_size` | `64` | width and height of generated views |
//! | `train_views` | `16` | training views when generating |
//! | `test_views` | `4` | test views when generating |
//! | `out` | `runs/default` | output directory |
//! | `experts` | `3` | expert count M (3 to 5) |
//! | `k` | `1` | experts per point |
//! | `lambda` | `0.001` | auxiliary loss weight |
//! | `pretrain_iters` | `300` | per-expert pre-training steps |
//! | `joint_iters` | `700` | joint training steps |
//! | `batch_rays` | `256` | rays per step |
//! | `samples` | `64` | samples per ray |
//! | `lr_grid` | `0.1` | Adam step for voxel grids |
//! | `lr_mlp` | `0.001` | Adam step for MLP weights |
//! | `penalty` | `geometric` | `none`, `linear`, `geometric` or `quadratic` |
//! | `seed` | `0` | master seed |
//! | `gate_resolution` | `16` | gate grid nodes per axis |
//! | `base_resolution` | `24` | lowest expert grid nodes per axis |
//! | `threshold` | `0.001` | density filter threshold |
//! | `stratified` | `true` | jitter training samples |
//! | `gate_init` | `random` | gate output layer start: `random` or `zero` (exactly uniform) |
//! | `checkpoint_every` | `100` | joint steps between checkpoints, 0 disables |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: String,
    pub dataset: Option<PathBuf>,
    pub image_size: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub out: PathBuf,
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: "three-spheres-multifreq".into(),
            dataset: None,
            image_size: 64,
            train_views: 16,
            test_views: 4,
            out: PathBuf::from("runs/default"),
            checkpoint_every: 100,
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "scene",
    "dataset",
    "image_size",
    "train_views",
    "test_views",
    "out",
    "experts",
    "k",
    "lambda",
    "pretrain_iters",
    "joint_iters",
    "batch_rays",
    "samples",
    "lr_grid",
    "lr_mlp",
    "penalty",
    "seed",
    "gate_resolution",
    "base_resolution",
    "threshold",
    "stratified",
    "gate_init",
    "checkpoint_every",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "scene" => self.scene = value.to_string(),
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "image_size" => self.image_size = parse(key, value)?,
            "train_views" => self.train_views = parse(key, value)?,
            "test_views" => self.test_views = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "experts" => t.experts = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "pretrain_iters" => t.pretrain_iters = parse(key, value)?,
            "joint_iters" => t.joint_iters = parse(key, value)?,
            "batch_rays" => t.batch_rays = parse(key, value)?,
            "samples" => t.samples = parse(key, value)?,
            "lr_grid" => t.lr_grid = parse(key, value)?,
            "lr_mlp" => t.lr_mlp = parse(key, value)?,
            "penalty" => t.penalty = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "gate_resolution" => t.gate_resolution = parse(key, value)?,
            "base_resolution" => t.base_resolution = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "stratified" => t.stratified = parse(key, value)?,
            "gate_init" => t.gate_init = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}; known keys: {}", KEYS.join(", ")))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key:?} repeated", n + 1)));
            }
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.image_size < 11 {
            return Err(Error::Config(format!("image_size must be >= 11, got {}", self.image_size)));
        }
        if self.train_views == 0 || self.test_views == 0 {
            return Err(Error::Config("train_views and test_views must be positive".into()));
        }
        Ok(())
    }

    /// Serializes every key; parsing the result gives back an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let dataset = self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "scene = {}", self.scene);
        let _ = writeln!(s, "dataset = {dataset}");
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "train_views = {}", self.train_views);
        let _ = writeln!(s, "test_views = {}", self.test_views);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "experts = {}", t.experts);
        let _ = writeln!(s, "k = {}", t.k);
        let _ = writeln!(s, "lambda = {:?}", t.lambda);
        let _ = writeln!(s, "pretrain_iters = {}", t.pretrain_iters);
        let _ = writeln!(s, "joint_iters = {}", t.joint_iters);
        let _ = writeln!(s, "batch_rays = {}", t.batch_rays);
        let _ = writeln!(s, "samples = {}", t.samples);
        let _ = writeln!(s, "lr_grid = {:?}", t.lr_grid);
        let _ = writeln!(s, "lr_mlp = {:?}", t.lr_mlp);
        let _ = writeln!(s, "penalty = {}", t.penalty);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "gate_resolution = {}", t.gate_resolution);
        let _ = writeln!(s, "base_resolution = {}", t.base_resolution);
        let _ = writeln!(s, "threshold = {:?}", t.threshold);
        let _ = writeln!(s, "stratified = {}", t.stratified);
        let _ = writeln!(s, "gate_init = {}", t.gate_init);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::PenaltyKind;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse_str("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.train.k = 2;
        c.train.lambda = 0.0123;
        c.train.penalty = PenaltyKind::Quadratic;
        c.dataset = Some(PathBuf::from("data/x"));
        c.train.stratified = false;
        c.train.gate_init = crate::gate::GateInit::Zero;
        assert_eq!(RunConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse_str("colour = red").is_err());
        assert!(RunConfig::parse_str("k = 1\nk = 2").is_err());
        assert!(RunConfig::parse_str("k").is_err());
        assert!(RunConfig::parse_str("k = two").is_err());
        assert!(RunConfig::parse_str("penalty = cubic").is_err());
    }

    #[test]
    fn comments_and_spacing() {
        let c = RunConfig::parse_str("  experts=4   # four\nk = 2\n").unwrap();
        assert_eq!((c.train.experts, c.train.k), (4, 2));
        let mut bad = c.clone();
        bad.train.k = 5;
        assert!(bad.validate().is_err());
    }
}
