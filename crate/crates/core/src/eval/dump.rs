//! Embedding dump: `"LBEM" | count u64 | dim u64 | count·dim f32 rows |
//! ids`, integers and floats little-endian, each id newline-terminated.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const DUMP_MAGIC: &[u8; 4] = b"LBEM";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub ids: Vec<String>,
    /// Rows narrowed to `f32` on write.
    pub embeddings: Mat,
}

impl EmbeddingDump {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, d) = self.embeddings.dim();
        if self.ids.len() != n {
            return Err(Error::shape(format!("{} ids for {n} rows", self.ids.len())));
        }
        if let Some(id) = self.ids.iter().find(|id| id.contains('\n')) {
            return Err(Error::invalid(format!("id {id:?} contains a newline")));
        }
        let mut out = Vec::with_capacity(20 + 4 * n * d);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for v in self.embeddings.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("embedding dump: {m}"));
        if bytes.len() < 20 || &bytes[..4] != DUMP_MAGIC {
            return Err(bad("bad header"));
        }
        let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8")) as usize;
        let d = u64::from_le_bytes(bytes[12..20].try_into().expect("8")) as usize;
        let end = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated rows"))?;
        let values: Vec<f64> = bytes[20..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4"))))
            .collect();
        let text = std::str::from_utf8(&bytes[end..]).map_err(|_| bad("ids are not UTF-8"))?;
        let ids: Vec<String> = text.split_terminator('\n').map(String::from).collect();
        if ids.len() != n {
            return Err(bad(&format!("{} ids for {n} rows", ids.len())));
        }
        let embeddings = Mat::from_shape_vec((n, d), values).map_err(|e| bad(&e.to_string()))?;
        Ok(Self { ids, embeddings })
    }
}

pub fn write_embeddings(path: &Path, dump: &EmbeddingDump) -> Result<()> {
    std::fs::write(path, dump.to_bytes()?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingDump> {
    EmbeddingDump::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout() {
        let d = EmbeddingDump {
            ids: vec!["a".into(), "b".into()],
            embeddings: Mat::from_shape_vec((2, 1), vec![1.0, -0.5]).unwrap(),
        };
        let b = d.to_bytes().unwrap();
        assert_eq!(&b[..4], b"LBEM");
        assert_eq!(b[4], 2);
        assert_eq!(b[12], 1);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[28..], b"a\nb\n");
        assert!(EmbeddingDump::from_bytes(&b[..25]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(n in 0usize..6, d in 1usize..5, seed in any::<u32>()) {
            let m = Mat::from_shape_fn((n, d), |(i, j)| f64::from(((seed as usize + i * 7 + j) % 97) as f32 / 13.0));
            let dump = EmbeddingDump { ids: (0..n).map(|i| format!("id{i}")).collect(), embeddings: m };
            let back = EmbeddingDump::from_bytes(&dump.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, dump);
        }
    }
}
