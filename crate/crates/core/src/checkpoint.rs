//! Checkpoint directories.
//!
//! ```text
//! config.txt      run configuration
//! state.txt       joint iteration, k, filter threshold
//! expert_<i>.bin  one file per expert
//! gate.bin        gate grid and MLP
//! filter.bin      frozen density volume
//! optimizer.bin   Adam moments (absent for inference-only checkpoints)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::expert::{Expert, ExpertBank};
use crate::gate::Gate;
use crate::grid::{read_floats, read_u32, VoxelGrid};
use crate::moe::{DensityFilter, Moe};
use crate::optim::{Adam, AdamSlot};
use crate::real::{DType, Real};
use crate::trainer::JointTrainer;

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"MFO1";

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub moe: Moe<T>,
    pub trainer: Option<JointTrainer<T>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))
}

pub fn write_adam<T: Real>(adam: &Adam<T>, w: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(OPTIMIZER_MAGIC);
    buf.extend_from_slice(&adam.step.to_le_bytes());
    buf.extend_from_slice(&(adam.slots.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(T::DTYPE as u32).to_le_bytes());
    for s in &adam.slots {
        buf.extend_from_slice(&(s.m.len() as u64).to_le_bytes());
        for &v in s.m.iter().chain(&s.v) {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_adam<T: Real>(r: &mut impl Read) -> Result<Adam<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != OPTIMIZER_MAGIC {
        return Err(Error::Format(format!("bad optimizer magic {magic:?}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let step = u64::from_le_bytes(b8);
    let slots = read_u32(r)? as usize;
    let code = read_u32(r)?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let mut out = Vec::with_capacity(slots);
    for _ in 0..slots {
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let m = read_floats(r, n, dtype)?;
        let v = read_floats(r, n, dtype)?;
        out.push(AdamSlot { m, v });
    }
    Ok(Adam { step, slots: out })
}

/// Writes `moe` (and the optimizer state when given) into `dir`, creating it if needed.
pub fn save<T: Real>(
    dir: impl AsRef<Path>,
    config: &RunConfig,
    moe: &Moe<T>,
    trainer: Option<&JointTrainer<T>>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), config.to_text())?;
    let iteration = trainer.map_or(0, |t| t.iteration);
    let train_gate = trainer.is_none_or(|t| t.train_gate);
    std::fs::write(
        dir.join("state.txt"),
        format!(
            "experts = {}\nk = {}\nthreshold = {:?}\niteration = {iteration}\ntrain_gate = {train_gate}\n",
            moe.experts(),
            moe.k,
            moe.filter.threshold()
        ),
    )?;
    for (i, e) in moe.bank.experts().iter().enumerate() {
        let mut w = create(&dir.join(format!("expert_{i}.bin")))?;
        e.write_checkpoint(&mut w, moe.experts())?;
        w.flush()?;
    }
    let mut w = create(&dir.join("gate.bin"))?;
    moe.gate.write_checkpoint(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("filter.bin"))?;
    moe.filter.grid().write_blob(&mut w)?;
    w.flush()?;
    let opt = dir.join("optimizer.bin");
    match trainer {
        Some(t) => {
            let mut w = create(&opt)?;
            write_adam(&t.adam, &mut w)?;
            w.flush()?;
        }
        None if opt.exists() => std::fs::remove_file(opt)?,
        None => {}
    }
    Ok(())
}

fn state_value<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Format(format!("state.txt lacks {key}")))
}

fn state_parse<V: std::str::FromStr>(text: &str, key: &str) -> Result<V> {
    state_value(text, key)?.parse().map_err(|_| Error::Format(format!("state.txt has a bad {key}")))
}

pub fn load<T: Real>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Format(format!("checkpoint directory {} not found", dir.display())));
    }
    let config = RunConfig::load(dir.join("config.txt"))?;
    let state = std::fs::read_to_string(dir.join("state.txt"))
        .map_err(|e| Error::Format(format!("cannot read state.txt: {e}")))?;
    let m: usize = state_parse(&state, "experts")?;
    let k: usize = state_parse(&state, "k")?;
    let threshold: f64 = state_parse(&state, "threshold")?;
    let iteration: usize = state_parse(&state, "iteration")?;
    let train_gate: bool = state_parse(&state, "train_gate")?;

    let experts = (0..m)
        .map(|i| {
            let (e, stored_m) = Expert::read_checkpoint(&mut open(&dir.join(format!("expert_{i}.bin")))?)?;
            if stored_m != m || e.id() != i {
                return Err(Error::Format(format!("expert_{i}.bin belongs to a different bank")));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let bank = ExpertBank::from_experts(experts)?;
    let gate = Gate::read_checkpoint(&mut open(&dir.join("gate.bin"))?)?;
    let filter = DensityFilter::new(VoxelGrid::read_blob(&mut open(&dir.join("filter.bin"))?)?, threshold)?;
    let moe = Moe::new(bank, gate, filter, k)?;

    let opt = dir.join("optimizer.bin");
    let trainer = if opt.exists() {
        let adam = read_adam(&mut open(&opt)?)?;
        let expected = JointTrainer::new(&moe, train_gate);
        let sizes_match = adam.slots.len() == expected.adam.slots.len()
            && adam.slots.iter().zip(&expected.adam.slots).all(|(a, b)| a.m.len() == b.m.len());
        if !sizes_match {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Some(JointTrainer { adam, iteration, train_gate })
    } else {
        None
    };
    Ok(Checkpoint { config, moe, trainer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{assemble_moe, TrainConfig};

    #[test]
    fn round_trip_is_exact() {
        let cfg = TrainConfig { base_resolution: 12, gate_resolution: 5, ..Default::default() };
        let bank = ExpertBank::<f32>::build(12, 3, 4).unwrap();
        let moe = assemble_moe(bank, &cfg).unwrap();
        let mut trainer = JointTrainer::new(&moe, true);
        trainer.iteration = 17;
        trainer.adam.step = 17;
        trainer.adam.slots[3].m[2] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let rc = RunConfig { train: cfg, ..Default::default() };
        save(dir.path(), &rc, &moe, Some(&trainer)).unwrap();
        let back: Checkpoint<f32> = load(dir.path()).unwrap();
        assert_eq!(back.moe, moe);
        assert_eq!(back.trainer.unwrap(), trainer);
        assert_eq!(back.config, rc);

        save(dir.path(), &rc, &moe, None).unwrap();
        assert!(load::<f32>(dir.path()).unwrap().trainer.is_none());
    }

    #[test]
    fn missing_directory_is_an_error() {
        assert!(load::<f32>("/nonexistent/checkpoint").is_err());
    }
}
