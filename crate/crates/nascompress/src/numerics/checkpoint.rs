//! Binary checkpoint format: little-endian, magic `NASBCKPT`, format version,
//! parameter count, then per parameter `path_len u32 + path + rank u32 +
//! extents u32[] + f32 payload`. Parameters are written in sorted path order
//! so identical stores serialize to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::store::ParamStore;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NASBCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn save<F: Scalar>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_store(store, &mut w)
}

pub fn write_store<F: Scalar, W: Write>(store: &ParamStore<F>, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (path, tensor) in store.iter() {
        let bytes = path.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<ParamStore<F>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_store(&mut r)
}

pub fn read_store<F: Scalar, R: Read>(r: &mut R) -> Result<ParamStore<F>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let path_len = read_u32(r)? as usize;
        let mut buf = vec![0u8; path_len];
        r.read_exact(&mut buf)?;
        let path = String::from_utf8(buf)
            .map_err(|e| Error::Format(format!("non-UTF-8 parameter path: {e}")))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut fbuf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut fbuf)?;
            data.push(F::from_f64(f32::from_le_bytes(fbuf) as f64));
        }
        store.insert(&path, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("b/weight", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.25, 4.0]).unwrap())
            .unwrap();
        s.insert("a/bias", Tensor::new(vec![3], vec![0.5, 0.0, -1.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn roundtrip_preserves_f32_values() {
        let store = sample_store();
        let mut buf = Vec::new();
        write_store(&store, &mut buf).unwrap();
        let back: ParamStore<f64> = read_store(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), store.len());
        for (path, tensor) in store.iter() {
            let loaded = back.get(path).unwrap();
            assert_eq!(loaded.shape(), tensor.shape());
            for (a, b) in loaded.data().iter().zip(tensor.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let store = sample_store();
        let mut buf = Vec::new();
        write_store(&store, &mut buf).unwrap();
        assert_eq!(&buf[0..8], b"NASBCKPT");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        // paths sorted: "a/bias" first
        let path_len = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        assert_eq!(&buf[20..20 + path_len], b"a/bias");
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        write_store(&sample_store(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(read_store::<f64, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn serialization_is_deterministic() {
        let store = sample_store();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_store(&store, &mut a).unwrap();
        write_store(&store, &mut b).unwrap();
        assert_eq!(a, b);
    }
}
