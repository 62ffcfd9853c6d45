//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic  b"TTSRCKPT"
//! version u32
//! config  u64 length + JSON bytes
//! params  u64 count, then records:
//!         u64 name length, name bytes, u8 dtype tag, u8 rank,
//!         u64 extents[rank], payload (LE scalars)
//! opt     u8 present flag; if 1: u64 step, u64 count, per parameter the
//!         first- and second-moment f64 payloads (lengths match the
//!         parameter record of the same index)
//! rng     u64 length + JSON bytes (serialized generator states)
//! step    u64 global step counter
//! ```
//! Saving the result of a load reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::{Dtype, Element, Parameter, Tensor};

pub const MAGIC: &[u8; 8] = b"TTSRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    VersionMismatch(u32),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {file:?} in the checkpoint, expected {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("config deserialization: {0}")]
    Config(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// One stored tensor: raw f64 payload plus original dtype tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    /// insertion order is preserved in the file; lookups go through the map
    pub names: Vec<String>,
    pub params: BTreeMap<String, Record>,
    pub optimizer: Option<OptimizerState>,
    pub rng_json: String,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(config_json: String, rng_json: String) -> Self {
        Checkpoint {
            config_json,
            names: Vec::new(),
            params: BTreeMap::new(),
            optimizer: None,
            rng_json,
            step: 0,
        }
    }

    pub fn insert_params<E: Element>(&mut self, params: &[Parameter<E>]) {
        for p in params {
            let rec = Record {
                dtype: E::DTYPE,
                shape: p.shape().to_vec(),
                data: p.tensor().to_vec().iter().map(|v| v.into_f64()).collect(),
            };
            if self.params.insert(p.name().to_string(), rec).is_none() {
                self.names.push(p.name().to_string());
            }
        }
    }

    /// Copy stored values into live parameters; every model parameter must
    /// be present with a matching shape.
    pub fn load_into<E: Element>(&self, params: &[Parameter<E>]) -> Result<()> {
        for p in params {
            let rec = self
                .params
                .get(p.name())
                .ok_or_else(|| CheckpointError::MissingParameter(p.name().to_string()))?;
            if rec.shape != p.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name().to_string(),
                    file: rec.shape.clone(),
                    model: p.shape().to_vec(),
                });
            }
            p.set_data(rec.data.iter().map(|v| E::from_f64(*v)).collect());
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.params.get(name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_blob(&mut buf, self.config_json.as_bytes());
        buf.extend_from_slice(&(self.names.len() as u64).to_le_bytes());
        for name in &self.names {
            let rec = &self.params[name];
            write_blob(&mut buf, name.as_bytes());
            buf.push(rec.dtype.tag());
            buf.push(rec.shape.len() as u8);
            for e in &rec.shape {
                buf.extend_from_slice(&(*e as u64).to_le_bytes());
            }
            match rec.dtype {
                Dtype::F32 => {
                    for v in &rec.data {
                        buf.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for v in &rec.data {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                buf.extend_from_slice(&opt.step.to_le_bytes());
                buf.extend_from_slice(&(opt.m.len() as u64).to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    for x in m {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        write_blob(&mut buf, self.rng_json.as_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());

        // write atomically so failed saves never leave partial files
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { b: &bytes, pos: 0 };

        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch(version));
        }
        let config_json = String::from_utf8(r.blob()?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
        let count = r.u64()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut params = BTreeMap::new();
        let mut lens = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.blob()?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let dtype = Dtype::from_tag(r.u8()?)
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad dtype tag in `{name}`")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            match dtype {
                Dtype::F32 => {
                    for _ in 0..n {
                        data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
                    }
                }
                Dtype::F64 => {
                    for _ in 0..n {
                        data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                    }
                }
            }
            lens.push(n);
            names.push(name.clone());
            params.insert(name, Record { dtype, shape, data });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let opt_count = r.u64()? as usize;
                if opt_count != count {
                    return Err(CheckpointError::Corrupt(format!(
                        "optimizer table has {opt_count} entries for {count} parameters"
                    )));
                }
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for &n in &lens {
                    let mut mi = Vec::with_capacity(n);
                    for _ in 0..n {
                        mi.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                    }
                    let mut vi = Vec::with_capacity(n);
                    for _ in 0..n {
                        vi.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                    }
                    m.push(mi);
                    v.push(vi);
                }
                Some(OptimizerState { step, m, v })
            }
            t => return Err(CheckpointError::Corrupt(format!("bad optimizer flag {t}"))),
        };
        let rng_json = String::from_utf8(r.blob()?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("rng state is not UTF-8".into()))?;
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_json,
            names,
            params,
            optimizer,
            rng_json,
            step,
        })
    }
}

fn write_blob(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(CheckpointError::Corrupt(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.b.len()
            )));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

/// Build a restorable parameter tensor from a record.
pub fn record_to_tensor<E: Element>(rec: &Record) -> Tensor<E> {
    Tensor::new(&rec.shape, rec.data.iter().map(|v| E::from_f64(*v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use crate::rng::{seeded, Stream};

    fn sample_ckpt() -> Checkpoint {
        let mut rng = seeded(5, Stream::Init);
        let mut ck = Checkpoint::new("{\"lr\":1e-4}".to_string(), "[1,2,3]".to_string());
        let params = vec![
            Parameter::new("a.weight", uniform::<f32>(&[2, 3], -1.0, 1.0, &mut rng)),
            Parameter::new("a.bias", uniform::<f32>(&[3], -1.0, 1.0, &mut rng)),
        ];
        ck.insert_params(&params);
        ck.optimizer = Some(OptimizerState {
            step: 7,
            m: vec![vec![0.5; 6], vec![-0.25; 3]],
            v: vec![vec![0.125; 6], vec![0.0625; 3]],
        });
        ck.step = 41;
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample_ckpt();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn load_into_restores_values_and_flags_missing_names() {
        let mut rng = seeded(6, Stream::Init);
        let p = Parameter::new("a.weight", uniform::<f32>(&[2, 3], -1.0, 1.0, &mut rng));
        let orig = p.tensor().to_vec();
        let ck = sample_ckpt();

        p.set_data(vec![0.0; 6]);
        ck.load_into(&[p.clone()]).unwrap();
        assert_ne!(p.tensor().to_vec(), orig); // restored from the checkpoint
        assert_eq!(
            p.tensor().to_vec(),
            ck.get("a.weight").unwrap().data.iter().map(|v| *v as f32).collect::<Vec<_>>()
        );

        let ghost = Parameter::new("missing.weight", Tensor::<f32>::zeros(&[1]));
        match ck.load_into(&[ghost]) {
            Err(CheckpointError::MissingParameter(name)) => assert_eq!(name, "missing.weight"),
            other => panic!("expected MissingParameter, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_named() {
        let ck = sample_ckpt();
        let p = Parameter::new("a.weight", Tensor::<f32>::zeros(&[3, 2]));
        assert!(matches!(
            ck.load_into(&[p]),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"PNGPNGPNGPNG").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::BadMagic)));

        let good = dir.path().join("good.ckpt");
        sample_ckpt().save(&good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        sample_ckpt().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::VersionMismatch(99))
        ));
    }
}
