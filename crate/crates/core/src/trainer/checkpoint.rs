//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "NBCKPT\0\0" | u32 version | u8 dtype width
//! u32 n | config text (n bytes, `key = value` lines)
//! 16 bytes architecture hash (ASCII hex)
//! u64 × 6: phase, phase step, rows consumed, global step, seed, optimizer t
//! f64 × 4: beta1, beta2, eps, weight decay
//! u32 block count, then per block:
//!     u32 n | name | u32 rank | u64 × rank dims | raw values
//! 32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::{AdamWConfig, OptimState};
use crate::encoder::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"NBCKPT\0\0";
pub const VERSION: u32 = 1;

/// Position of a run within its phase plan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub phase: u64,
    /// Optimizer updates completed in the current phase.
    pub step: u64,
    /// Packed rows drawn from the current phase's stream.
    pub rows_consumed: u64,
    pub global_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: EncoderModel<T>,
    pub optim: OptimState<T>,
    pub progress: Progress,
    pub seed: u64,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        let cfg = self.model.config();
        put_bytes(&mut out, cfg.to_kv().as_bytes());
        out.extend_from_slice(cfg.arch_hash().as_bytes());
        let p = self.progress;
        for x in [p.phase, p.step, p.rows_consumed, p.global_step, self.seed, self.optim.t] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let c = self.optim.config;
        for x in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let params = self.model.parameters();
        out.extend_from_slice(&((params.len() * 3) as u32).to_le_bytes());
        for (name, t) in &params {
            put_tensor(&mut out, &format!("param/{name}"), t);
        }
        for (prefix, moments) in [("m", &self.optim.m), ("v", &self.optim.v)] {
            for ((name, _), t) in params.iter().zip(moments.iter()) {
                put_tensor(&mut out, &format!("{prefix}/{name}"), t);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + MAGIC.len() + 5 {
            return Err(format_err(0, "file too short for a checkpoint"));
        }
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(format_err(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UpgradeNeeded {
                found: version,
                expected: VERSION,
            });
        }
        let body = bytes.len() - 32;
        if Sha256::digest(&bytes[..body])[..] != bytes[body..] {
            return Err(format_err(body as u64, "checksum mismatch (corrupt or truncated file)"));
        }
        let r = &mut Reader {
            bytes: &bytes[..body],
            pos: r.pos,
        };
        let width = r.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(Error::config(format!(
                "checkpoint stores {width}-byte values but {}-byte values were requested",
                T::BYTES
            )));
        }
        let text_at = r.pos;
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| format_err(text_at as u64, "config block is not UTF-8"))?;
        let config = ModelConfig::from_kv(text)?;
        let hash_at = r.pos;
        let hash = std::str::from_utf8(r.take(16)?).unwrap_or_default().to_string();
        if hash != config.arch_hash() {
            return Err(format_err(hash_at as u64, "architecture hash does not match the config block"));
        }
        let mut ints = [0u64; 6];
        for x in &mut ints {
            *x = r.u64()?;
        }
        let [phase, step, rows_consumed, global_step, seed, t] = ints;
        let mut floats = [0.0f64; 4];
        for f in &mut floats {
            *f = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
        let optim_cfg = AdamWConfig {
            beta1: floats[0],
            beta2: floats[1],
            eps: floats[2],
            weight_decay: floats[3],
        };

        let mut model = EncoderModel::<T>::new(config, 0)?;
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        let blocks_at = r.pos;
        let count = r.u32()? as usize;
        if count != names.len() * 3 {
            return Err(format_err(
                blocks_at as u64,
                &format!("expected {} tensor blocks, found {count}", names.len() * 3),
            ));
        }
        let mut read_group = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            names
                .iter()
                .map(|name| {
                    let at = r.pos as u64;
                    let (got, t) = read_tensor::<T>(r)?;
                    let want = format!("{prefix}/{name}");
                    if got != want {
                        return Err(format_err(at, &format!("expected block {want}, found {got}")));
                    }
                    Ok(t)
                })
                .collect()
        };
        let params = read_group("param")?;
        let m = read_group("m")?;
        let v = read_group("v")?;
        if r.pos != r.bytes.len() {
            return Err(format_err(r.pos as u64, "trailing bytes after tensor blocks"));
        }
        model.load_parameters(params)?;
        Ok(Self {
            model,
            optim: OptimState {
                config: optim_cfg,
                t,
                m,
                v,
            },
            progress: Progress {
                phase,
                step,
                rows_consumed,
                global_step,
            },
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint that must match `expected` architecturally.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let found = ck.model.config().arch_hash();
        if found != expected.arch_hash() {
            return Err(Error::ConfigMismatch {
                expected: expected.arch_hash(),
                found,
            });
        }
        Ok(ck)
    }
}

/// Value width in bytes (4 or 8) recorded in a checkpoint header.
pub fn peek_value_width(path: impl AsRef<Path>) -> Result<usize> {
    use std::io::Read;
    let path = path.as_ref();
    let mut head = [0u8; 13];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut head)
        .map_err(|_| format_err(0, "file too short for a checkpoint"))?;
    if &head[..8] != MAGIC {
        return Err(format_err(0, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UpgradeNeeded {
            found: version,
            expected: VERSION,
        });
    }
    Ok(head[12] as usize)
}

fn format_err(offset: u64, msg: &str) -> Error {
    Error::Format {
        offset,
        msg: msg.to_string(),
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_bytes(out, name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

fn read_tensor<T: Real>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let at = r.pos as u64;
    let n = r.u32()? as usize;
    let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| format_err(at, "block name is not UTF-8"))?;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(format_err(at, &format!("block {name} has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let bytes = numel
        .and_then(|n| n.checked_mul(T::BYTES))
        .ok_or_else(|| format_err(at, "block size overflows"))?;
    let raw = r.take(bytes)?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    let t = Tensor::from_vec(&shape, data).map_err(|e| format_err(at, &e.to_string()))?;
    Ok((name, t))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(self.pos as u64, "unexpected end of data")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint<f64> {
        let model = EncoderModel::new(ModelConfig::new(2, 16, 2, 40, 64), 5).unwrap();
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut optim = OptimState::new(AdamWConfig::default(), &shapes).unwrap();
        optim.t = 7;
        optim.m[3].data_mut()[0] = 0.25;
        Checkpoint {
            model,
            optim,
            progress: Progress {
                phase: 1,
                step: 3,
                rows_consumed: 24,
                global_step: 12,
            },
            seed: 99,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = checkpoint();
        let a = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), a);
    }

    #[test]
    fn corrupt_truncated_and_versioned() {
        let a = checkpoint().to_bytes();
        let mut flipped = a.clone();
        flipped[200] ^= 1;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&flipped), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&a[..a.len() / 2]), Err(Error::Format { .. })));
        let mut v2 = a.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&v2),
            Err(Error::UpgradeNeeded { found: 2, expected: 1 })
        ));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&a), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_config_reports_both_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        checkpoint().save(&p).unwrap();
        let other = ModelConfig::new(2, 16, 4, 40, 64);
        match Checkpoint::<f64>::load_for(&p, &other) {
            Err(Error::ConfigMismatch { expected, found }) => {
                assert_eq!(expected, other.arch_hash());
                assert_eq!(found, checkpoint().model.config().arch_hash());
                assert!(Error::ConfigMismatch { expected, found }.to_string().contains(&other.arch_hash()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
