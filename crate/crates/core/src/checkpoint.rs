//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "SYDESCKP"
//! version      u32       1
//! rng seed     u64
//! meta_len     u32       followed by meta_len bytes of UTF-8 JSON
//! count        u32       number of parameters
//! per parameter:
//!   name_len   u32       followed by the UTF-8 name
//!   frozen     u8        0 or 1
//!   rank       u32       followed by rank x u64 dimensions
//!   payload    f64 x product(dims)
//! ```
//!
//! The JSON metadata carries the stage name, epoch, task and the model
//! configuration needed to rebuild the parameter layout.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SYDESCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub model: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub rng: RngState,
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.rng.seed);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len() as u32);
        for (_, p) in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.frozen as u8);
            put_u32(&mut out, p.tensor.rank() as u32);
            for &d in p.tensor.shape() {
                put_u64(&mut out, d as u64);
            }
            for &v in p.tensor.data() {
                out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let rng = RngState::new(r.u64()?);
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(CheckpointError::Corrupt(format!("frozen flag {b} for {name}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64().map(T::of)).collect::<Result<Vec<_>, _>>()?;
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if params.id(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
            }
            let id = params.add(name, tensor);
            params.get_mut(id).frozen = frozen;
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { rng, meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn sample_store(seed: u64) -> ParamStore<f64> {
        let mut rng = RngState::new(seed).stream(Stream::Init);
        let mut s = ParamStore::new();
        s.init("a.w", &[3, 4], Init::Normal(1.0), &mut rng);
        s.init("a.b", &[4], Init::Zeros, &mut rng);
        let id = s.init("b.emb", &[2, 2, 2], Init::XavierUniform, &mut rng);
        s.get_mut(id).frozen = true;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint {
            rng: RngState::new(99),
            meta: CheckpointMeta {
                stage: "pretrain".into(),
                epoch: 3,
                task: None,
                model: serde_json::json!({"c1": 8}),
            },
            params: sample_store(1),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.meta, ck.meta);
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let ab: Vec<u64> = a.tensor.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.tensor.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::<f64>::from_bytes(b"nope"), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(b"NOTACKPT\x01\0\0\0"), Err(CheckpointError::BadMagic)));
        let ck = Checkpoint {
            rng: RngState::new(1),
            meta: CheckpointMeta { stage: "x".into(), epoch: 0, task: None, model: serde_json::Value::Null },
            params: sample_store(2),
        };
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_payloads_round_trip(values in proptest::collection::vec(any::<f64>(), 1..40)) {
            let mut s = ParamStore::new();
            s.add("x.v", Tensor::new(vec![values.len()], values.clone()).unwrap());
            let ck = Checkpoint {
                rng: RngState::new(5),
                meta: CheckpointMeta { stage: "s".into(), epoch: 1, task: Some("desire".into()), model: serde_json::Value::Null },
                params: s,
            };
            let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
            let got: Vec<u64> = back.params.get(crate::params::ParamId(0)).tensor.data().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
