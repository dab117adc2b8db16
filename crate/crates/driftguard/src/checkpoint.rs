//! Binary checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LRPD"
//! 4       2     format version (u16) = 1
//! 6       24    architecture: input_dim, hidden, class_emb_dim,
//!               time_emb_dim, num_classes, timesteps (6 x u32)
//! 30      12    schedule: timesteps (u32), offset (f64)
//! 42      8     creation seed (u64)
//! 50      ..    parameter tensors as f64, declared field order
//!               (w1, b1, w2, b2, class_emb, time_emb), row-major
//! end-8   8     checksum: first 8 bytes of SHA-256 over all prior bytes
//! ```
//!
//! `load(save(c))` is bit-identical; any single flipped byte fails the
//! checksum (or an earlier structural check).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::nn::{Arch, ModelParams};

pub const MAGIC: &[u8; 4] = b"LRPD";
pub const FORMAT_VERSION: u16 = 1;

/// A model checkpoint: parameters plus the schedule and seed that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub schedule: ScheduleSpec,
    pub seed: u64,
}

fn payload_checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl Checkpoint {
    pub fn new(params: ModelParams, schedule: ScheduleSpec, seed: u64) -> Self {
        Checkpoint {
            params,
            schedule,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = &self.params.arch;
        let mut buf = Vec::with_capacity(58 + 8 * arch.param_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for dim in [
            arch.input_dim(),
            arch.hidden,
            arch.class_emb_dim,
            arch.time_emb_dim,
            arch.num_classes,
            arch.timesteps,
        ] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.schedule.timesteps as u32).to_le_bytes());
        buf.extend_from_slice(&self.schedule.offset.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for (_, tensor) in self.params.tensors() {
            for v in tensor {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = payload_checksum(&buf);
        buf.extend_from_slice(&checksum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 58 {
            return Err(Error::Integrity(format!(
                "checkpoint truncated: {} bytes",
                bytes.len()
            )));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if payload_checksum(payload) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        if &payload[0..4] != MAGIC {
            return Err(Error::Integrity("checkpoint magic mismatch".into()));
        }
        let version = u16::from_le_bytes(payload[4..6].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {version}"
            )));
        }

        let read_u32 = |off: usize| u32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
        let input_dim = read_u32(6) as usize;
        let arch = Arch {
            hidden: read_u32(10) as usize,
            class_emb_dim: read_u32(14) as usize,
            time_emb_dim: read_u32(18) as usize,
            num_classes: read_u32(22) as usize,
            timesteps: read_u32(26) as usize,
        };
        if input_dim != arch.input_dim() {
            return Err(Error::Integrity(format!(
                "checkpoint input_dim {input_dim} inconsistent with embeddings"
            )));
        }
        arch.validate()
            .map_err(|e| Error::Integrity(format!("checkpoint architecture invalid: {e}")))?;
        let sched_steps = read_u32(30) as usize;
        let offset = f64::from_le_bytes(payload[34..42].try_into().unwrap());
        if sched_steps != arch.timesteps {
            return Err(Error::Integrity(format!(
                "schedule timesteps {sched_steps} != arch timesteps {}",
                arch.timesteps
            )));
        }
        let seed = u64::from_le_bytes(payload[42..50].try_into().unwrap());

        let expected = 50 + 8 * arch.param_count();
        if payload.len() != expected {
            return Err(Error::Integrity(format!(
                "checkpoint payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mut params = ModelParams::zeros(arch);
        let mut off = 50;
        for (_, tensor) in params.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }

        Ok(Checkpoint {
            params,
            schedule: ScheduleSpec {
                timesteps: sched_steps,
                offset,
            },
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Integrity(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}
