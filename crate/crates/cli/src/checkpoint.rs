//! Versioned binary checkpoint of a training run.
//!
//! Layout (little-endian): magic, format version, the run configuration as
//! TOML text, the data dimension, the epoch counter, Adam hyperparameters
//! and per-slot step counters, the training curve, then every tensor as
//! name, shape, gradient flag and raw `f64` payload. A SHA-256 digest of
//! all preceding bytes closes the file.
//!
//! Every random draw during training is derived from the seed and the
//! epoch number, so the seed (inside the configuration) and the epoch
//! counter are the complete RNG state.

use std::path::Path;

use dsarf::inference::{EpochRecord, SequencePosterior, VariationalParams};
use dsarf::numerics::{AdamSlot, AdamState};
use dsarf::{GenerativeParams, Model, Tensor64, Trainer64};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"DSARFCKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {VERSION}")]
    Version { found: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A resumable training run: its configuration and the trainer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub trainer: Trainer64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor64) {
        self.bytes(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.0.push(u8::from(t.requires_grad()));
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("count overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
    fn tensor(&mut self, expect: &str) -> Result<Tensor64> {
        let name = self.string()?;
        if name != expect {
            return Err(CheckpointError::Malformed(format!("expected tensor {expect:?}, found {name:?}")));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let grad = self.take(1)?[0] != 0;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.filter(|&l| l <= self.buf.len() / 8).ok_or_else(|| CheckpointError::Malformed(format!("tensor {name:?} too large")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor64::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(t.with_requires_grad(grad))
    }
}

fn tensor_names(trainer: &Trainer64) -> (Vec<String>, Vec<String>) {
    let theta = trainer.model.generative.names().into_iter().map(|n| format!("theta.{n}")).collect();
    let phi = trainer
        .model
        .variational
        .named_tensors()
        .into_iter()
        .map(|(n, _)| format!("phi.{n}"))
        .collect();
    (theta, phi)
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let t = &ck.trainer;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(ck.config.to_toml().as_bytes());
    w.u64(t.model.config().dim as u64);
    w.u64(t.model.variational.sequences.len() as u64);
    w.u64(t.epoch as u64);
    for v in [t.adam.lr, t.adam.beta1, t.adam.beta2, t.adam.eps] {
        w.f64(v);
    }
    w.u64(t.adam.slots.len() as u64);
    for s in &t.adam.slots {
        w.u64(s.step);
    }
    w.u64(t.curve.len() as u64);
    for r in &t.curve {
        w.u64(r.epoch as u64);
        for v in [r.beta, r.objective, r.elbo] {
            w.f64(v);
        }
    }
    let (theta_names, phi_names) = tensor_names(t);
    for (name, tensor) in theta_names.iter().zip(&t.model.generative.tensors) {
        w.tensor(name, tensor);
    }
    for (name, (_, tensor)) in phi_names.iter().zip(t.model.variational.named_tensors()) {
        w.tensor(name, tensor);
    }
    for (i, s) in t.adam.slots.iter().enumerate() {
        w.tensor(&format!("adam{i}.m"), &s.m);
        w.tensor(&format!("adam{i}.v"), &s.v);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if buf.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(CheckpointError::Checksum);
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader {
        buf: body,
        at: MAGIC.len(),
    };
    let found = r.u32()?;
    if found != VERSION {
        return Err(CheckpointError::Version { found });
    }
    let text = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
    let table = text.parse::<toml::Table>().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let config = RunConfig::from_table(table).map_err(|e| CheckpointError::Malformed(format!("{e:#}")))?;
    let mut model_cfg = config.model_config().map_err(|e| CheckpointError::Malformed(format!("{e:#}")))?;
    model_cfg.dim = r.usize()?;
    let sequences = r.usize()?;
    let epoch = r.usize()?;
    let mut adam = AdamState::new(r.f64()?);
    adam.beta1 = r.f64()?;
    adam.beta2 = r.f64()?;
    adam.eps = r.f64()?;
    let slots = r.usize()?;
    let steps = (0..slots.min(body.len())).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let curve_len = r.usize()?;
    let curve = (0..curve_len.min(body.len()))
        .map(|_| {
            Ok(EpochRecord {
                epoch: r.usize()?,
                beta: r.f64()?,
                objective: r.f64()?,
                elbo: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let names = model_cfg.param_index().names();
    let tensors = names.iter().map(|n| r.tensor(&format!("theta.{n}"))).collect::<Result<Vec<_>>>()?;
    let generative = GenerativeParams {
        config: model_cfg,
        tensors,
    };
    let [z_mean, z_log_var, f_mean, f_log_var] =
        VariationalParams::<f64>::global_names().map(|n| r.tensor(&format!("phi.{n}")));
    let seqs = (0..sequences.min(body.len()))
        .map(|i| {
            Ok(SequencePosterior {
                w_mean: r.tensor(&format!("phi.seq{i}.w_mean"))?,
                w_log_var: r.tensor(&format!("phi.seq{i}.w_log_var"))?,
                s0_logits: r.tensor(&format!("phi.seq{i}.s0_logits"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let variational = VariationalParams {
        z_mean: z_mean?,
        z_log_var: z_log_var?,
        f_mean: f_mean?,
        f_log_var: f_log_var?,
        sequences: seqs,
    };
    adam.slots = steps
        .into_iter()
        .enumerate()
        .map(|(i, step)| {
            Ok(AdamSlot {
                m: r.tensor(&format!("adam{i}.m"))?,
                v: r.tensor(&format!("adam{i}.v"))?,
                step,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if r.at != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.at)));
    }
    let train_config = config.train_config().map_err(|e| CheckpointError::Malformed(format!("{e:#}")))?;
    let trainer = Trainer64 {
        model: Model {
            generative,
            variational,
        },
        config: train_config,
        adam,
        epoch,
        curve,
    };
    Ok(Checkpoint { config, trainer })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
