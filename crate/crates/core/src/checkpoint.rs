//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FLWH" | version: u32 | count: u32
//! count x ( name_len: u16 | name bytes | rank: u8 | dims: u32 x rank | f32 x prod(dims) )
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::params::ParameterStore;

pub const MAGIC: &[u8; 4] = b"FLWH";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_store<W: Write>(mut w: W, store: &ParameterStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(store.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(tensor.ndim()).map_err(|_| Error::Checkpoint(format!("rank too high: {name}")))?;
        w.write_all(&[rank])?;
        for &dim in tensor.shape() {
            let dim = u32::try_from(dim).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf)
}

fn truncated(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Checkpoint(format!("truncated while reading {what}"))
    } else {
        Error::Io(e)
    }
}

pub fn read_store<R: Read>(mut r: R) -> Result<ParameterStore<f32>> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "entry count")?);
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| truncated(e, "name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(&mut r, "rank")?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_exact(&mut r, "dims")?) as usize);
        }
        let len: usize = dims.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(|e| truncated(e, &name))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(name, tensor)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParameterStore<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_store(&mut buf, store)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterStore<f32>> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.as_ref().display())))?;
    read_store(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::lanes::{ExecMode, Lanes};
    use crate::model::LanguageModel;
    use crate::router::SplitMode;

    fn sample() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("a", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-40, -7.25]).unwrap())
            .unwrap();
        s.insert("b.scalar", ArrayD::from_elem(IxDyn(&[]), 0.1f32)).unwrap();
        s.insert("c", ArrayD::zeros(IxDyn(&[0, 4]))).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_store(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"FLWH");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 1);
        assert_eq!(buf[14], b'a');
        assert_eq!(buf[15], 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[24..28].try_into().unwrap()), 1.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let mut buf = Vec::new();
        write_store(&mut buf, &s).unwrap();
        let back = read_store(buf.as_slice()).unwrap();
        let names: Vec<_> = back.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["a", "b.scalar", "c"]);
        for ((_, x), (_, y)) in s.iter().zip(back.iter()) {
            assert_eq!(x.shape(), y.shape());
            assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_store(&mut buf, &sample()).unwrap();
        assert!(read_store(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_store(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_store(bad.as_slice()).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_store(long.as_slice()).is_err());
    }

    #[test]
    fn model_forward_identical_after_reload() {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            d_inner: 8,
            d_state: 4,
            n_blocks: 2,
            seq_len: 12,
            split_mode: SplitMode::FACSplit,
            ..Default::default()
        };
        let model = LanguageModel::<f32>::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model.to_store()).unwrap();
        let loaded = LanguageModel::<f32>::from_store(cfg, &load(&path).unwrap()).unwrap();
        let lanes = Lanes::new(ExecMode::Serial);
        let tokens: Vec<usize> = (0..12).map(|i| (i * 5) % 32).collect();
        let a = model.forward(&tokens, &lanes).unwrap();
        let b = loaded.forward(&tokens, &lanes).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
