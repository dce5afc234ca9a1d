//! Versioned binary checkpoints with an integrity trailer.
//!
//! Layout (little-endian): magic `LTCK`, version u32, phase tag u8, backbone
//! digest (32 bytes), epoch u32, step u64, rng flag u8 followed by the 56-byte
//! stream state when set, config echo and metrics log (u32 length + UTF-8
//! each), tensor count u32, then per tensor its name (u32 length + UTF-8),
//! rank u32, extents u64 and f64 values. A SHA-256 of everything before it
//! closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest as _, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{export, import, ParamDigest, ParamTree};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhaseTag {
    Pretrain,
    Probe,
    Phase1,
    Phase2,
    Joint,
    Phase3,
}

impl PhaseTag {
    const ALL: [PhaseTag; 6] = [
        PhaseTag::Pretrain,
        PhaseTag::Probe,
        PhaseTag::Phase1,
        PhaseTag::Phase2,
        PhaseTag::Joint,
        PhaseTag::Phase3,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseTag::Pretrain => "pretrain",
            PhaseTag::Probe => "probe",
            PhaseTag::Phase1 => "phase1",
            PhaseTag::Phase2 => "phase2",
            PhaseTag::Joint => "joint",
            PhaseTag::Phase3 => "phase3",
        }
    }

    fn code(self) -> u8 {
        Self::ALL.iter().position(|&t| t == self).unwrap() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: PhaseTag,
    /// Digest of the frozen backbone this state was trained against.
    pub backbone_digest: ParamDigest,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimiser steps.
    pub step: u64,
    pub rng: Option<RngState>,
    /// The run configuration that produced this checkpoint.
    pub config: String,
    /// Metrics CSV accumulated so far.
    pub metrics: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(phase: PhaseTag, backbone_digest: ParamDigest) -> Self {
        Self {
            phase,
            backbone_digest,
            epoch: 0,
            step: 0,
            rng: None,
            config: String::new(),
            metrics: String::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn put<P: ParamTree<Tensor> + ?Sized>(&mut self, prefix: &str, tree: &P) {
        export(tree, prefix, &mut self.tensors);
    }

    /// Fills an already-shaped tree from the tensors stored under `prefix`.
    pub fn get<P: ParamTree<Tensor> + ?Sized>(&self, prefix: &str, tree: &mut P) -> Result<()> {
        import(tree, prefix, &self.tensors)
    }

    pub fn has(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.tensors
            .keys()
            .any(|k| k == prefix || k.starts_with(&dotted))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.phase.code());
        out.extend_from_slice(&self.backbone_digest.0);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.to_bytes());
            }
            None => out.push(0),
        }
        put_str(&mut out, &self.config);
        put_str(&mut out, &self.metrics);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 4 + 32 {
            return Err("file too short".into());
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if &body[..4] != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let hash: [u8; 32] = Sha256::digest(body).into();
        if hash != trailer {
            return Err("integrity check failed".into());
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let phase = PhaseTag::from_code(r.u8()?).ok_or("unknown phase tag")?;
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let epoch = r.u32()?;
        let step = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState::from_bytes(r.take(56)?).ok_or("bad rng state")?),
            f => return Err(format!("bad rng flag {f}")),
        };
        let config = r.string()?;
        let metrics = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Self {
            phase,
            backbone_digest: ParamDigest(digest),
            epoch,
            step,
            rng,
            config,
            metrics,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks integrity; with `expected_backbone`, also refuses a
    /// checkpoint trained against a different backbone.
    pub fn load(path: &Path, expected_backbone: Option<ParamDigest>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes).map_err(|r| Error::corrupt(path, r))?;
        if let Some(expected) = expected_backbone {
            if expected != ckpt.backbone_digest {
                return Err(Error::DigestMismatch {
                    expected: expected.hex(),
                    found: ckpt.backbone_digest.hex(),
                });
            }
        }
        Ok(ckpt)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(PhaseTag::Phase1, ParamDigest([7; 32]));
        c.epoch = 3;
        c.step = 120;
        c.rng = Some(RngState::capture(&stream(1, 2)));
        c.config = "train.seed = 4\n".into();
        c.metrics = "phase,epoch\nphase1,0\n".into();
        c.put("w", &Tensor::from_vec([2, 2], vec![1.0, -0.5, 1e-300, 3.0]));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn tampering_is_detected() {
        let bytes = sample().to_bytes();
        // Flip one byte of the stored backbone digest.
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn mismatched_backbone_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ltck");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load(&path, Some(ParamDigest([7; 32]))).is_ok());
        assert!(matches!(
            Checkpoint::load(&path, Some(ParamDigest([8; 32]))),
            Err(Error::DigestMismatch { .. })
        ));
    }
}
