//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MSTFCKPT"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON metadata
//! count      u32
//! count x { name_len u32, name bytes, rank u32, dims u32 x rank, f32 x prod(dims) }
//! ```

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::state::FlowState;
use crate::correlation::FeaturePyramid;
use crate::error::{path_err, Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MSTFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn fmt_err(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))?;
        Tensor::from_vec(&t.shape, t.data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    /// Store every parameter under `prefix`.
    pub fn push_params<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    /// Overwrite every parameter of `store` from tensors under `prefix`.
    /// Missing names and shape mismatches are errors.
    pub fn load_params<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = self.tensor::<T>(&format!("{prefix}{name}"))?;
            store.set(&name, t).map_err(|e| Error::Format(format!("checkpoint tensor {name:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn push_state<T: Real>(&mut self, prefix: &str, state: &FlowState<T>) {
        self.push(
            format!("{prefix}frames_seen"),
            &Tensor::<f64>::from_vec(&[1], vec![state.frames_seen() as f64]).expect("scalar"),
        );
        for (l, f) in state.flows().iter().enumerate() {
            self.push(format!("{prefix}flow{l}"), f);
        }
        if let Some(p) = state.previous() {
            for (l, g) in p.levels().iter().enumerate() {
                self.push(format!("{prefix}previous{l}"), g);
            }
        }
    }

    /// Rebuild a state stored with [`Checkpoint::push_state`], if present.
    pub fn read_state<T: Real>(&self, prefix: &str) -> Result<Option<FlowState<T>>> {
        let Some(frames) = self.get(&format!("{prefix}frames_seen")) else {
            return Ok(None);
        };
        let frames_seen = frames.data.first().copied().unwrap_or(0.0) as u64;
        let collect = |stem: &str| -> Result<Vec<Tensor<T>>> {
            let mut v = Vec::new();
            while self.get(&format!("{prefix}{stem}{}", v.len())).is_some() {
                v.push(self.tensor(&format!("{prefix}{stem}{}", v.len()))?);
            }
            Ok(v)
        };
        let flows = collect("flow")?;
        let prev = collect("previous")?;
        let previous = if prev.is_empty() {
            None
        } else {
            Some(FeaturePyramid::new(prev)?)
        };
        FlowState::from_parts(flows, previous, frames_seen).map(Some)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = read_u32(r).map_err(fmt_err)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = read_u32(r).map_err(fmt_err)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(fmt_err)?;
        let metadata = serde_json::from_slice(&meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = read_u32(r).map_err(fmt_err)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r).map_err(fmt_err)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(fmt_err)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
            let rank = read_u32(r).map_err(fmt_err)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<io::Result<Vec<_>>>()
                .map_err(fmt_err)?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw).map_err(fmt_err)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self { metadata, tensors })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp).map_err(|e| path_err(&tmp, e))?;
            let mut w = BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush().map_err(|e| path_err(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| path_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| path_err(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"epoch": 3}));
        c.push("a", &Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        c.push("b", &Tensor::<f32>::zeros(&[1, 3, 2]));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 99;
        let err = Checkpoint::read_from(&mut bad.as_slice()).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &truncated[..]), Err(Error::Format(_))));
    }

    #[test]
    fn params_round_trip_and_mismatch() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::full(&[3], 0.25)).unwrap();
        let mut c = Checkpoint::new(serde_json::Value::Null);
        c.push_params("model/", &s);
        let mut s2 = ParamStore::<f32>::new();
        s2.add("w", Tensor::zeros(&[3])).unwrap();
        c.load_params("model/", &mut s2).unwrap();
        assert_eq!(s2.get(s2.id_of("w").unwrap()).data(), &[0.25; 3]);
        let mut s3 = ParamStore::<f32>::new();
        s3.add("w", Tensor::zeros(&[4])).unwrap();
        assert!(c.load_params("model/", &mut s3).is_err());
    }

    #[test]
    fn state_round_trip() {
        let p = FeaturePyramid::new(vec![Tensor::<f32>::full(&[2, 2, 3], 0.5)]).unwrap();
        let s = FlowState::from_parts(vec![Tensor::full(&[2, 2, 2], 1.5)], Some(p), 7).unwrap();
        let mut c = Checkpoint::new(serde_json::Value::Null);
        c.push_state("state/", &s);
        assert_eq!(c.read_state::<f32>("state/").unwrap().unwrap(), s);
        assert!(c.read_state::<f32>("other/").unwrap().is_none());
    }
}
