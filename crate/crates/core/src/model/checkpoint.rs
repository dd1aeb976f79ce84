//! DTCK checkpoint file: every parameter tensor as little-endian f32 with a
//! trailing CRC-32 over all preceding bytes.

use std::path::Path;

use crate::binio::{read_file, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real};

const MAGIC: &[u8; 4] = b"DTCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut w = LeWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(store.len() as u32);
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: {}", p.name)))?;
        w.u16(len);
        w.bytes(name);
        w.u8(p.shape.len() as u8);
        for &dim in &p.shape {
            w.u32(dim as u32);
        }
        for v in p.value.iter() {
            w.f32(v.f64() as f32);
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let mut w = LeWriter::default();
    w.buf = encode_checkpoint(store)?;
    w.write_to(path)
}

/// Loads tensor values into `store`, which must have been built from the
/// same model configuration. `store` is left untouched on any error.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::format(path, "shorter than its checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut r = LeReader::new(body, path);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let count = r.u32()? as usize;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.error("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = store
            .id(&name)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        let expected = &store.get(id).shape;
        if *expected != shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: expected.clone(),
                found: shape,
            });
        }
        let values = r.f32_vec(shape.iter().product())?;
        loaded.push((id, values));
    }
    if r.remaining() != 0 {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    if loaded.len() != store.len() {
        let missing = store
            .iter()
            .find(|p| !loaded.iter().any(|(id, _)| store.get(*id).name == p.name))
            .map(|p| p.name.clone())
            .unwrap_or_default();
        return Err(r.error(format!("checkpoint lacks tensor `{missing}`")));
    }
    for (id, values) in loaded {
        let dst = &mut store.get_mut(id).value;
        for (d, v) in dst.iter_mut().zip(values) {
            *d = T::of(v as f64);
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let bytes = read_file(path)?;
    decode_checkpoint(&bytes, path, store)
}
