//! Versioned binary checkpoints of named tensors.
//!
//! Layout (little-endian): the magic `RTDKCKPT`, a `u32` version, a `u32`
//! tensor count, then one manifest entry per tensor (`u32` name length,
//! UTF-8 name, `u64` rows, `u64` cols), then every tensor's `f64` data in
//! row-major order, in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 8] = b"RTDKCKPT";
pub const VERSION: u32 = 1;

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Tensors read from a checkpoint file, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Vec<TensorInfo>,
    pub tensors: Vec<Array2<f64>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Collects the tensors of several parameter sets, prefixing each name
    /// with `section/`.
    pub fn from_sections(sections: &[(&str, &ParamSet)]) -> Self {
        let mut manifest = Vec::new();
        let mut tensors = Vec::new();
        for (section, params) in sections {
            for (name, t) in params.names().iter().zip(params.tensors()) {
                manifest.push(TensorInfo { name: format!("{section}/{name}"), rows: t.nrows(), cols: t.ncols() });
                tensors.push(t.clone());
            }
        }
        Self { manifest, tensors }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.manifest.len() as u32).to_le_bytes())?;
        for info in &self.manifest {
            w.write_all(&(info.name.len() as u32).to_le_bytes())?;
            w.write_all(info.name.as_bytes())?;
            w.write_all(&(info.rows as u64).to_le_bytes())?;
            w.write_all(&(info.cols as u64).to_le_bytes())?;
        }
        for t in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated manifest"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            manifest.push(TensorInfo { name, rows, cols });
        }
        let mut tensors = Vec::with_capacity(count);
        for info in &manifest {
            let n = info.rows.checked_mul(info.cols).ok_or_else(|| bad("tensor size overflow"))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|_| bad(format!("truncated data for {}", info.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(Array2::from_shape_vec((info.rows, info.cols), data).expect("shape matches length"));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Copies the stored tensors into parameter sets built by the caller.
    /// Names and shapes must match exactly; nothing is written on mismatch.
    pub fn restore_sections(&self, sections: &mut [(&str, &mut ParamSet)]) -> Result<()> {
        let expected: usize = sections.iter().map(|(_, p)| p.len()).sum();
        if expected != self.manifest.len() {
            return Err(bad(format!("checkpoint holds {} tensors, model has {expected}", self.manifest.len())));
        }
        let mut k = 0;
        for (section, params) in sections.iter() {
            for (name, t) in params.names().iter().zip(params.tensors()) {
                let info = &self.manifest[k];
                let full = format!("{section}/{name}");
                if info.name != full {
                    return Err(bad(format!("tensor {k} is {:?}, expected {full:?}", info.name)));
                }
                if (info.rows, info.cols) != t.dim() {
                    return Err(bad(format!(
                        "{full}: stored shape {}x{}, model shape {}x{}",
                        info.rows,
                        info.cols,
                        t.nrows(),
                        t.ncols()
                    )));
                }
                k += 1;
            }
        }
        let mut k = 0;
        for (_, params) in sections.iter_mut() {
            for t in params.tensors_mut() {
                t.assign(&self.tensors[k]);
                k += 1;
            }
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated manifest"))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, TransformerConfig, TransformerEncoder};

    fn model(seed: u64, dim: usize) -> ParamSet {
        let mut p = ParamSet::new(seed);
        Linear::new(&mut p, "proj", 3, dim);
        TransformerEncoder::new(&mut p, "enc", TransformerConfig::tiny(dim));
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = model(1, 8);
        let mut b = model(2, 8);
        assert_ne!(a, b);
        let mut bytes = Vec::new();
        Checkpoint::from_sections(&[("m", &a)]).write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let ck = Checkpoint::read_from(bytes.as_slice()).unwrap();
        ck.restore_sections(&mut [("m", &mut b)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected_without_writes() {
        let a = model(1, 8);
        let mut small = model(3, 4);
        let before = small.clone();
        let ck = Checkpoint::from_sections(&[("m", &a)]);
        assert!(matches!(ck.restore_sections(&mut [("m", &mut small)]), Err(Error::Checkpoint(_))));
        assert_eq!(small, before);
        let mut other = model(3, 8);
        assert!(ck.restore_sections(&mut [("other", &mut other)]).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let a = model(1, 4);
        let mut bytes = Vec::new();
        Checkpoint::from_sections(&[("m", &a)]).write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::read_from(wrong.as_slice()).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Checkpoint::read_from(version.as_slice()).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
    }
}
