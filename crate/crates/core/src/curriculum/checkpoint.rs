//! Binary checkpoint: enough state to resume a run given the same config
//! and demonstration.
//!
//! Layout (little endian): magic `BSCK`, `u32` format version, 32-byte env
//! digest, then `u64` iteration, live steps, warmup steps, τ, ΣW, episode
//! count and parameter version, followed by the parameter values and the
//! learner baseline as length-prefixed `f64` arrays.

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

const MAGIC: &[u8; 4] = b"BSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub env_digest: [u8; 32],
    pub iteration: u64,
    pub live_steps: u64,
    pub warmup_steps: u64,
    pub tau: usize,
    pub success_count: u64,
    pub episode_count: u64,
    pub params: PolicyParams,
    pub baseline: Vec<f64>,
}

fn put_f64s(w: &mut Writer, v: &[f64]) {
    w.u32(v.len() as u32);
    for x in v {
        w.f64(*x);
    }
}

fn get_f64s(r: &mut Reader<'_>) -> Result<Vec<f64>> {
    let n = r.u32()? as usize;
    if n.saturating_mul(8) > r.remaining() {
        return Err(Error::decode("checkpoint array length exceeds file size"));
    }
    (0..n).map(|_| r.f64()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.raw(&self.env_digest);
        for v in [
            self.iteration,
            self.live_steps,
            self.warmup_steps,
            self.tau as u64,
            self.success_count,
            self.episode_count,
            self.params.version,
        ] {
            w.u64(v);
        }
        put_f64s(&mut w, &self.params.values);
        put_f64s(&mut w, &self.baseline);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.raw(4)? != MAGIC {
            return Err(Error::decode("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!("unsupported checkpoint version {version}")));
        }
        let env_digest: [u8; 32] = r.raw(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let live_steps = r.u64()?;
        let warmup_steps = r.u64()?;
        let tau = r.u64()? as usize;
        let success_count = r.u64()?;
        let episode_count = r.u64()?;
        let param_version = r.u64()?;
        let values = get_f64s(&mut r)?;
        let baseline = get_f64s(&mut r)?;
        r.finish()?;
        Ok(Self {
            env_digest,
            iteration,
            live_steps,
            warmup_steps,
            tau,
            success_count,
            episode_count,
            params: PolicyParams { version: param_version, values },
            baseline,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
