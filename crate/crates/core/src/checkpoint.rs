//! Binary checkpoint: parameters, optimizer moments, schedule state and the
//! resolved run config.
//!
//! Layout (little-endian): magic `CHCK1`, `u32` version, `u32` parameter
//! count, then per parameter `u32` name length, name, `u32` rank, `u64` dims,
//! `f64` values. Then `u64` optimizer step and per parameter the first and
//! second moments as `f64`. Then schedule state: `u64` epoch, `u64` steps per
//! epoch (0 = unknown), `u8` has-best flag, `f64` best, `u32` decays, `u32`
//! history length, `f64` history. Finally `u32` length and UTF-8 TOML config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::AcousticModel;
use crate::optim::{Nadam, Newbob};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{TrainState, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CHCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer<W>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.0.write_all(b)?)
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn values<S: Scalar>(&mut self, vs: &[S]) -> Result<()> {
        vs.iter().try_for_each(|v| self.f64(v.to_f64_lossless()))
    }
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn values<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        (0..n).map(|_| Ok(S::of(self.f64()?))).collect()
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

pub fn write_checkpoint<S: Scalar>(w: impl Write, trainer: &Trainer<S>) -> Result<()> {
    let mut w = Writer(w);
    let store = &trainer.store;
    let state = &trainer.state;
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION as usize)?;
    w.u32(store.len())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.u32(name.len())?;
        w.bytes(name)?;
        let t = store.value(id);
        w.u32(t.rank())?;
        for &d in t.shape() {
            w.u64(d as u64)?;
        }
        w.values(t.data())?;
    }
    w.u64(state.optimizer.step)?;
    for (m, v) in state.optimizer.first.iter().zip(&state.optimizer.second) {
        w.values(m)?;
        w.values(v)?;
    }
    w.u64(state.epoch)?;
    w.u64(state.steps_per_epoch.unwrap_or(0))?;
    w.u8(u8::from(state.newbob.best.is_some()))?;
    w.f64(state.newbob.best.unwrap_or(0.0))?;
    w.u32(state.newbob.decays as usize)?;
    w.u32(state.newbob.history.len())?;
    for &h in &state.newbob.history {
        w.f64(h)?;
    }
    let cfg = trainer.config.to_toml();
    w.u32(cfg.len())?;
    w.bytes(cfg.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(r: impl Read) -> Result<Trainer<S>> {
    let mut r = Reader(r);
    if &r.array::<5>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n = r.u32()?;
    let mut named = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        named.push((name, Tensor::new(shape, r.values(numel)?)?));
    }
    let step = r.u64()?;
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for (_, t) in &named {
        first.push(r.values(t.numel())?);
        second.push(r.values(t.numel())?);
    }
    let epoch = r.u64()?;
    let spe = r.u64()?;
    let has_best = r.u8()? != 0;
    let best = r.f64()?;
    let decays = r.u32()? as u32;
    let hist_len = r.u32()?;
    let history = (0..hist_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let config = RunConfig::parse(&r.string()?)?;

    let mut store = ParamStore::new(config.run.seed);
    let model = AcousticModel::declare(&mut store, &config.model_config())?;
    // moments are stored in checkpoint order; map them onto model order
    let mut moments: Vec<Option<(Vec<S>, Vec<S>)>> = (0..store.len()).map(|_| None).collect();
    for ((name, _), (m, v)) in named.iter().zip(first.into_iter().zip(second)) {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        moments[id.index()] = Some((m, v));
    }
    store.load_values(named)?;
    let (first, second) = moments
        .into_iter()
        .map(|m| m.ok_or_else(|| Error::Format("missing optimizer moments".into())))
        .collect::<Result<(Vec<_>, Vec<_>)>>()?;
    let state = TrainState {
        epoch,
        optimizer: Nadam {
            step,
            first,
            second,
        },
        newbob: Newbob {
            best: has_best.then_some(best),
            decays,
            history,
        },
        steps_per_epoch: (spe != 0).then_some(spe),
    };
    Ok(Trainer::assemble(config, model, store, state))
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, trainer: &Trainer<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, trainer)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Trainer<S>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
