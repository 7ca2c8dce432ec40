//! Named-tensor container used for checkpoints and encoder weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LBCK" | version u32 | config_len u64 | config (UTF-8 JSON)
//! count u32 | count × (name_len u32 | name | dtype u8 | ndim u32 | dims u64… | data)
//! crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const MAGIC: &[u8; 4] = b"LBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_mat(name: impl Into<String>, m: &Mat) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: TensorData::F64(m.iter().copied().collect()),
        }
    }

    pub fn u64s(name: impl Into<String>, values: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            data: TensorData::U64(values),
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        let TensorData::F64(v) = &self.data else {
            return Err(Error::Checkpoint(format!("tensor {} is not f64", self.name)));
        };
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::Checkpoint(format!("tensor {} is not 2-D", self.name))),
        };
        Mat::from_shape_vec((r, c), v.clone()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn as_u64s(&self) -> Result<&[u64]> {
        match &self.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("tensor {} is not u64", self.name))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub config_json: String,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 + 4 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let config_len = r.u64()? as usize;
        let config_json = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => TensorData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                2 => TensorData::U64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
            };
            debug_assert_eq!(data.len(), n);
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes before checksum".into()));
        }
        Ok(Self {
            config_json,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorFile {
        TensorFile {
            config_json: "{\"a\":1}".into(),
            tensors: vec![
                NamedTensor::from_mat("w", &Mat::from_shape_fn((2, 3), |(i, j)| i as f64 - j as f64 * 0.5)),
                NamedTensor::u64s("meta.step", vec![42]),
                NamedTensor {
                    name: "f".into(),
                    shape: vec![2],
                    data: TensorData::F32(vec![1.5, -2.0]),
                },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"LBCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 7);
        assert_eq!(&bytes[16..23], b"{\"a\":1}");
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n / 2] ^= 0x40;
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut tail = sample().to_bytes();
        let last = tail.len() - 1;
        tail[last] ^= 1;
        assert!(TensorFile::from_bytes(&tail).is_err());
        assert!(TensorFile::from_bytes(b"LBCK").is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        let err = TensorFile::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(any::<f64>(), 0..40), cfg in "\\PC{0,30}") {
            let file = TensorFile {
                config_json: cfg,
                tensors: vec![NamedTensor { name: "x".into(), shape: vec![values.len()], data: TensorData::F64(values) }],
            };
            let bytes = file.to_bytes();
            let back = TensorFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
