//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MLFN"  u32 version  [u8; 32] config digest  u64 record count
//! per record: u32 name length, UTF-8 name, u32 rank, u64 extent × rank,
//!             f32 × product(extents)
//! ```

use std::path::Path;

use mlfn_core::model::Mlfn;
use mlfn_core::tensor::Tensor;
use mlfn_core::train::{DivergenceGuard, Trainer};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MLFN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {}", version));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| "tensor name is not UTF-8".to_string())?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or("extent overflow")?;
            let raw = r.take(n.checked_mul(4).ok_or("extent overflow")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { digest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(CliError::io(path))
    }

    /// Read and check the digest against the expected configuration.
    pub fn load(path: &Path, expected_digest: &[u8; 32]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        let ck = Self::decode(&bytes).map_err(|e| CliError::format(path, e))?;
        if &ck.digest != expected_digest {
            return Err(CliError::format(
                path,
                format!("config digest {} does not match {}", hex::encode(ck.digest), hex::encode(expected_digest)),
            ));
        }
        Ok(ck)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Model parameters only.
    pub fn from_model(model: &Mlfn<f32>, digest: [u8; 32]) -> Self {
        let tensors = model.params().entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        Self { digest, tensors }
    }

    /// Copy every parameter of `model` from the checkpoint.
    pub fn apply_to_model(&self, model: &mut Mlfn<f32>) -> Result<()> {
        let names: Vec<String> = model.params().entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            let t = self.get(&name).ok_or_else(|| CliError::Usage(format!("checkpoint lacks parameter {}", name)))?;
            model.params_mut().load(&name, t.clone())?;
        }
        Ok(())
    }

    /// Full training state: parameters, optimiser moments, iteration and the
    /// divergence guard, enough to resume bit-exactly.
    pub fn from_trainer(trainer: &Trainer<f32>, digest: [u8; 32]) -> Self {
        let mut ck = Self::from_model(&trainer.model, digest);
        ck.tensors.extend(trainer.optimizer.state_tensors(trainer.model.params()));
        ck.tensors.push(("meta.iteration".into(), exact_u64(trainer.iteration())));
        ck.tensors.push(("meta.guard_streak".into(), exact_u64(trainer.guard.streak() as u64)));
        if let Some(v) = trainer.guard.initial() {
            ck.tensors.push(("meta.guard_initial".into(), exact_u64(v.to_bits())));
        }
        if let Some(v) = trainer.last_train_acc {
            ck.tensors.push(("meta.last_train_acc".into(), exact_u64(v.to_bits())));
        }
        ck
    }

    pub fn apply_to_trainer(&self, trainer: &mut Trainer<f32>) -> Result<()> {
        self.apply_to_model(&mut trainer.model)?;
        let state: Vec<(String, Tensor<f32>)> = self.tensors.iter().filter(|(n, _)| n.starts_with("optim.")).cloned().collect();
        trainer.optimizer.load_state(trainer.model.params(), &state)?;
        let meta = |name: &str| self.get(name).map(read_u64).transpose();
        let iteration = meta("meta.iteration")?.ok_or_else(|| CliError::Usage("checkpoint has no training state".into()))?;
        if iteration != trainer.iteration() {
            return Err(CliError::Usage(format!("optimiser step {} disagrees with iteration {}", trainer.iteration(), iteration)));
        }
        let streak = meta("meta.guard_streak")?.unwrap_or(0) as u32;
        trainer.guard = DivergenceGuard::resume(meta("meta.guard_initial")?.map(f64::from_bits), streak);
        trainer.last_train_acc = meta("meta.last_train_acc")?.map(f64::from_bits);
        Ok(())
    }
}

/// A `u64` as four 16-bit limbs, each exact in `f32`.
fn exact_u64(v: u64) -> Tensor<f32> {
    let limbs: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(&[4], limbs).expect("four limbs")
}

fn read_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.shape() != [4] || t.data().iter().any(|&l| !(0.0..65536.0).contains(&l) || l.fract() != 0.0) {
        return Err(CliError::Usage(format!("malformed metadata record of shape {:?}", t.shape())));
    }
    Ok(t.data().iter().enumerate().map(|(i, &l)| (l as u64) << (16 * i)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlfn_core::model::MlfnConfig;

    fn sample() -> Checkpoint {
        let t = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        Checkpoint { digest: [7; 32], tensors: vec![("a.w".into(), t), ("é".into(), Tensor::scalar(4.0))] }
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"MLFN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(&bytes[8..40], &[7; 32]);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn record_layout() {
        let ck = Checkpoint { digest: [0; 32], tensors: vec![("ab".into(), Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap())] };
        let b = ck.encode();
        let rec = &b[48..];
        assert_eq!(u32::from_le_bytes(rec[..4].try_into().unwrap()), 2);
        assert_eq!(&rec[4..6], b"ab");
        assert_eq!(u32::from_le_bytes(rec[6..10].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(rec[10..18].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(rec[18..26].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(rec[26..30].try_into().unwrap()), 1.0);
        assert_eq!(rec.len(), 34);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn digest_mismatch_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mlfn");
        sample().save(&p).unwrap();
        assert!(Checkpoint::load(&p, &[7; 32]).is_ok());
        assert!(matches!(Checkpoint::load(&p, &[8; 32]), Err(CliError::Format { .. })));
    }

    #[test]
    fn exact_integers_survive() {
        for v in [0u64, 1, 65535, 65536, u64::MAX, 0.731f64.to_bits()] {
            assert_eq!(read_u64(&exact_u64(v)).unwrap(), v);
        }
    }

    #[test]
    fn model_round_trip_reproduces_outputs() {
        let m = Mlfn::<f32>::init(MlfnConfig::toy(5), 3).unwrap();
        let ck = Checkpoint::decode(&Checkpoint::from_model(&m, [1; 32]).encode()).unwrap();
        let mut fresh = Mlfn::<f32>::init(MlfnConfig::toy(5), 99).unwrap();
        ck.apply_to_model(&mut fresh).unwrap();
        assert_eq!(fresh.params().checksum(), m.params().checksum());
    }
}
