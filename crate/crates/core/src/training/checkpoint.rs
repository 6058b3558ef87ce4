//! `MCKP1` checkpoint files.
//!
//! Layout: magic `MCKP1`, `u32` version, `u32` CRC-32 of the payload, `u64`
//! payload length, payload. The payload opens with a length-prefixed JSON
//! header (precision, model config, train config, score statistics), then an
//! optional block of training scalars and history, then named MTNS1 tensors.
//! All integers are little-endian; floats are stored as raw bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{EpochRecord, TrainState, Trainer};
use crate::data::NormStats;
use crate::model::ModelState;
use crate::optim::{AdamW, AdamWState, EarlyStopper, PlateauScheduler};
use crate::tensor::ByteCursor;
use crate::{Error, Model, ModelConfig, Precision, Result, Rng, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    precision: Precision,
    model_config: ModelConfig,
    train_config: TrainConfig,
    norm_stats: NormStats,
}

/// Optimizer, scheduler, stopper and history state of an unfinished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSnapshot<S> {
    pub epoch: usize,
    pub rng_state: [u64; 4],
    pub adam_t: u64,
    pub lr: f64,
    pub adam_m: Vec<Tensor<S>>,
    pub adam_v: Vec<Tensor<S>>,
    pub scheduler: PlateauScheduler,
    pub stopper_patience: usize,
    pub stopper_best_val: f64,
    pub stopper_counter: usize,
    pub stopper_best_epoch: Option<usize>,
    pub best: Option<ModelState<S>>,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub stats: NormStats,
    pub params: Vec<(String, Tensor<S>)>,
    pub buffers: Vec<(String, Tensor<S>)>,
    pub train: Option<TrainSnapshot<S>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    t.write_mtns(out);
}

fn get_usize(cur: &mut ByteCursor<'_>) -> Result<usize> {
    usize::try_from(cur.u64()?).map_err(|_| Error::format(WHAT, "integer out of range"))
}

fn get_tensor<S: Scalar>(cur: &mut ByteCursor<'_>) -> Result<(String, Tensor<S>)> {
    let len = cur.u32()? as usize;
    let name = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| Error::format(WHAT, "tensor name is not UTF-8"))?
        .to_string();
    let (t, used) = Tensor::read_mtns(cur.rest())?;
    cur.advance(used)?;
    Ok((name, t))
}

fn expect_group<S: Scalar>(
    tensors: &mut std::vec::IntoIter<(String, Tensor<S>)>,
    prefix: &str,
    count: usize,
) -> Result<Vec<(String, Tensor<S>)>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, t) = tensors
            .next()
            .ok_or_else(|| Error::format(WHAT, format!("missing `{prefix}` tensors")))?;
        let leaf = name
            .strip_prefix(prefix)
            .ok_or_else(|| Error::format(WHAT, format!("expected a `{prefix}` tensor, found `{name}`")))?;
        out.push((leaf.to_string(), t));
    }
    Ok(out)
}

impl<S: Scalar> Checkpoint<S> {
    /// Weights and statistics only; loading it starts a fresh run.
    pub fn from_model(model: &Model<S>, train_config: &TrainConfig, stats: &NormStats) -> Self {
        Checkpoint {
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            stats: stats.clone(),
            params: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers: model.named_buffers(),
            train: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer<S>) -> Self {
        let mut ckpt = Self::from_model(&trainer.model, &trainer.config, &trainer.stats);
        let st = &trainer.state;
        ckpt.train = Some(TrainSnapshot {
            epoch: st.epoch,
            rng_state: st.rng.state(),
            adam_t: st.optimizer.state.t,
            lr: st.optimizer.lr(),
            adam_m: st.optimizer.state.m.clone(),
            adam_v: st.optimizer.state.v.clone(),
            scheduler: st.scheduler.clone(),
            stopper_patience: st.stopper.patience,
            stopper_best_val: st.stopper.best_val_loss,
            stopper_counter: st.stopper.counter,
            stopper_best_epoch: st.stopper.best_epoch,
            best: st.stopper.best.clone(),
            stopped: st.stopped,
            history: st.history.clone(),
        });
        ckpt
    }

    /// Rebuilds the network and loads the stored weights and buffers.
    pub fn build_model(&self) -> Result<Model<S>> {
        let mut model = Model::new(&self.model_config, &mut Rng::new(0))?;
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        if names.len() != self.params.len() {
            return Err(Error::format(
                WHAT,
                format!("{} parameters stored, model has {}", self.params.len(), names.len()),
            ));
        }
        for (expected, (name, _)) in names.iter().zip(&self.params) {
            if expected != name {
                return Err(Error::format(WHAT, format!("parameter `{name}` found where `{expected}` was expected")));
            }
        }
        let state = ModelState {
            params: self.params.iter().map(|(_, t)| t.clone()).collect(),
            buffers: self.buffers.iter().map(|(_, t)| t.clone()).collect(),
        };
        model.restore(&state)?;
        Ok(model)
    }

    /// Trainer positioned exactly where the checkpoint was taken.
    pub fn into_trainer(self) -> Result<Trainer<S>> {
        let model = self.build_model()?;
        let mut trainer = Trainer::with_model(model, &self.train_config, &self.stats)?;
        if let Some(snap) = self.train {
            let mut optimizer = AdamW::new(self.train_config.optimizer, &trainer.model.params())?;
            let shapes_ok = snap.adam_m.len() == optimizer.state.m.len()
                && snap.adam_v.len() == optimizer.state.v.len()
                && snap.adam_m.iter().zip(&optimizer.state.m).all(|(a, b)| a.shape() == b.shape())
                && snap.adam_v.iter().zip(&optimizer.state.v).all(|(a, b)| a.shape() == b.shape());
            if !shapes_ok {
                return Err(Error::format(WHAT, "optimizer moments do not match the model parameters"));
            }
            optimizer.state = AdamWState { m: snap.adam_m, v: snap.adam_v, t: snap.adam_t };
            optimizer.set_lr(snap.lr);
            let mut stopper = EarlyStopper::new(snap.stopper_patience);
            stopper.best_val_loss = snap.stopper_best_val;
            stopper.counter = snap.stopper_counter;
            stopper.best_epoch = snap.stopper_best_epoch;
            stopper.best = snap.best;
            trainer.state = TrainState {
                epoch: snap.epoch,
                rng: Rng::from_state(snap.rng_state),
                optimizer,
                scheduler: snap.scheduler,
                stopper,
                history: snap.history,
                stopped: snap.stopped,
            };
        }
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            precision: S::PRECISION,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            norm_stats: self.stats.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut body = Vec::new();
        put_u32(&mut body, json.len() as u32);
        body.extend_from_slice(&json);
        let mut tensors: Vec<(String, &Tensor<S>)> = Vec::new();
        for (n, t) in &self.params {
            tensors.push((format!("param/{n}"), t));
        }
        for (n, t) in &self.buffers {
            tensors.push((format!("buffer/{n}"), t));
        }
        match &self.train {
            None => body.push(0),
            Some(s) => {
                body.push(1);
                put_u64(&mut body, s.epoch as u64);
                for w in s.rng_state {
                    put_u64(&mut body, w);
                }
                put_u64(&mut body, s.adam_t);
                put_f64(&mut body, s.lr);
                let sc = &s.scheduler;
                put_f64(&mut body, sc.factor);
                put_u64(&mut body, sc.patience as u64);
                put_f64(&mut body, sc.min_lr);
                put_u64(&mut body, sc.cooldown as u64);
                put_f64(&mut body, sc.best);
                put_u64(&mut body, sc.wait as u64);
                put_u64(&mut body, sc.cooldown_left as u64);
                put_f64(&mut body, sc.lr);
                put_u64(&mut body, s.stopper_patience as u64);
                put_f64(&mut body, s.stopper_best_val);
                put_u64(&mut body, s.stopper_counter as u64);
                put_u64(&mut body, s.stopper_best_epoch.map_or(u64::MAX, |e| e as u64));
                body.push(s.stopped as u8);
                put_u64(&mut body, s.history.len() as u64);
                for r in &s.history {
                    put_u64(&mut body, r.epoch as u64);
                    put_f64(&mut body, r.train_loss);
                    put_f64(&mut body, r.val_loss);
                    put_f64(&mut body, r.lr);
                }
                body.push(s.best.is_some() as u8);
                let names: Vec<&String> = self.params.iter().map(|(n, _)| n).collect();
                for (n, t) in names.iter().zip(&s.adam_m) {
                    tensors.push((format!("adam.m/{n}"), t));
                }
                for (n, t) in names.iter().zip(&s.adam_v) {
                    tensors.push((format!("adam.v/{n}"), t));
                }
                if let Some(best) = &s.best {
                    for (n, t) in names.iter().zip(&best.params) {
                        tensors.push((format!("best.param/{n}"), t));
                    }
                    for ((n, _), t) in self.buffers.iter().zip(&best.buffers) {
                        tensors.push((format!("best.buffer/{n}"), t));
                    }
                }
            }
        }
        put_u32(&mut body, self.params.len() as u32);
        put_u32(&mut body, self.buffers.len() as u32);
        put_u32(&mut body, tensors.len() as u32);
        for (n, t) in &tensors {
            put_tensor(&mut body, n, t);
        }
        let mut out = Vec::with_capacity(body.len() + 21);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, crc32fast::hash(&body));
        put_u64(&mut out, body.len() as u64);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut cur) = open(bytes)?;
        if header.precision != S::PRECISION {
            return Err(Error::PrecisionMismatch { found: header.precision, expected: S::PRECISION });
        }
        let has_train = match cur.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::format(WHAT, format!("bad train-state flag {f}"))),
        };
        struct Scalars {
            epoch: usize,
            rng_state: [u64; 4],
            adam_t: u64,
            lr: f64,
            scheduler: PlateauScheduler,
            stopper_patience: usize,
            stopper_best_val: f64,
            stopper_counter: usize,
            stopper_best_epoch: Option<usize>,
            stopped: bool,
            history: Vec<EpochRecord>,
            has_best: bool,
        }
        let scalars = if has_train {
            let epoch = get_usize(&mut cur)?;
            let rng_state = [cur.u64()?, cur.u64()?, cur.u64()?, cur.u64()?];
            let adam_t = cur.u64()?;
            let lr = cur.f64()?;
            let scheduler = PlateauScheduler {
                factor: cur.f64()?,
                patience: get_usize(&mut cur)?,
                min_lr: cur.f64()?,
                cooldown: get_usize(&mut cur)?,
                best: cur.f64()?,
                wait: get_usize(&mut cur)?,
                cooldown_left: get_usize(&mut cur)?,
                lr: cur.f64()?,
            };
            let stopper_patience = get_usize(&mut cur)?;
            let stopper_best_val = cur.f64()?;
            let stopper_counter = get_usize(&mut cur)?;
            let stopper_best_epoch = match cur.u64()? {
                u64::MAX => None,
                e => Some(usize::try_from(e).map_err(|_| Error::format(WHAT, "epoch out of range"))?),
            };
            let stopped = cur.u8()? != 0;
            let n = get_usize(&mut cur)?;
            let mut history = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                history.push(EpochRecord {
                    epoch: get_usize(&mut cur)?,
                    train_loss: cur.f64()?,
                    val_loss: cur.f64()?,
                    lr: cur.f64()?,
                });
            }
            let has_best = cur.u8()? != 0;
            Some(Scalars {
                epoch,
                rng_state,
                adam_t,
                lr,
                scheduler,
                stopper_patience,
                stopper_best_val,
                stopper_counter,
                stopper_best_epoch,
                stopped,
                history,
                has_best,
            })
        } else {
            None
        };
        let n_params = cur.u32()? as usize;
        let n_buffers = cur.u32()? as usize;
        let n_tensors = cur.u32()? as usize;
        let mut all = Vec::with_capacity(n_tensors.min(1 << 16));
        for _ in 0..n_tensors {
            all.push(get_tensor::<S>(&mut cur)?);
        }
        if !cur.rest().is_empty() {
            return Err(Error::format(WHAT, "trailing bytes after tensors"));
        }
        let mut it = all.into_iter();
        let params = expect_group(&mut it, "param/", n_params)?;
        let buffers = expect_group(&mut it, "buffer/", n_buffers)?;
        let train = match scalars {
            None => None,
            Some(s) => {
                let strip = |v: Vec<(String, Tensor<S>)>| v.into_iter().map(|(_, t)| t).collect::<Vec<_>>();
                let adam_m = strip(expect_group(&mut it, "adam.m/", n_params)?);
                let adam_v = strip(expect_group(&mut it, "adam.v/", n_params)?);
                let best = if s.has_best {
                    Some(ModelState {
                        params: strip(expect_group(&mut it, "best.param/", n_params)?),
                        buffers: strip(expect_group(&mut it, "best.buffer/", n_buffers)?),
                    })
                } else {
                    None
                };
                Some(TrainSnapshot {
                    epoch: s.epoch,
                    rng_state: s.rng_state,
                    adam_t: s.adam_t,
                    lr: s.lr,
                    adam_m,
                    adam_v,
                    scheduler: s.scheduler,
                    stopper_patience: s.stopper_patience,
                    stopper_best_val: s.stopper_best_val,
                    stopper_counter: s.stopper_counter,
                    stopper_best_epoch: s.stopper_best_epoch,
                    best,
                    stopped: s.stopped,
                    history: s.history,
                })
            }
        };
        if it.next().is_some() {
            return Err(Error::format(WHAT, "unexpected extra tensors"));
        }
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            stats: header.norm_stats,
            params,
            buffers,
            train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

/// Validates framing and checksum, then parses the JSON header.
fn open(bytes: &[u8]) -> Result<(Header, ByteCursor<'_>)> {
    let mut cur = ByteCursor::new(bytes, WHAT);
    if cur.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::format(WHAT, "bad magic, expected MCKP1"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let stored = cur.u32()?;
    let declared = cur.u64()?;
    let body = cur.rest();
    let computed = crc32fast::hash(body);
    if declared != body.len() as u64 || stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut cur = ByteCursor::new(body, WHAT);
    let len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(len)?)?;
    Ok((header, cur))
}

/// Precision of a checkpoint file, so callers can pick the scalar type.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(open(&bytes)?.0.precision)
}
