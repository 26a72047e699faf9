//! Weight checkpoints.
//!
//! Layout (little-endian): magic `MFTW`, u32 version, u32 config length,
//! config JSON, u32 record count, then per record: u32 name length, UTF-8
//! name, u32 rank, u64 extents, u8 dtype tag, raw values. A CRC32 of all
//! preceding bytes closes the file.

use std::fs;
use std::path::Path;

use crate::binary::{append_crc, check_magic, verify_crc, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"MFTW";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<F: Scalar>(model: &Model<F>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, p) in model.params().iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(F::DTYPE.tag());
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
    }
    append_crc(&mut buf);
    Ok(buf)
}

/// Rebuilds the model described by the embedded config and loads its values.
/// Values stored at another precision are converted.
pub fn read_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Model<F>> {
    check_magic(bytes, &MAGIC)?;
    let payload = verify_crc(bytes)?;
    let mut r = Reader::new(&payload[4..]);
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let mut model = Model::<F>::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Inconsistent(format!(
            "checkpoint holds {count} parameters, config implies {}",
            model.params().len()
        )));
    }
    for (_, p) in model.params_mut().iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Inconsistent("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(Error::Inconsistent(format!(
                "expected parameter {}, found {name}",
                p.name
            )));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Inconsistent(format!(
                "parameter {name} has rank {rank}"
            )));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(Error::Inconsistent(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Inconsistent(format!("unknown dtype tag {tag}")))?;
        let n = numel(&shape);
        let raw = r.take(n * dtype.size())?;
        let values: Vec<F> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| F::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| F::lit(f64::read_le(c)))
                .collect(),
        };
        p.value = Tensor::new(shape, values)?;
    }
    if r.remaining() != 0 {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after records",
            r.remaining()
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<F: Scalar>(model: &Model<F>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Model<F>> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 4,
            samples: 32,
            branch_kernels: vec![3, 5],
            separable_kernel: 4,
            pool1: 2,
            pool2: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = Model::<f32>::new(tiny(), 4).unwrap();
        let back: Model<f32> = read_checkpoint(&write_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn widens_f32_to_f64() {
        let m = Model::<f32>::new(tiny(), 4).unwrap();
        let back: Model<f64> = read_checkpoint(&write_checkpoint(&m).unwrap()).unwrap();
        let (_, a) = m.params().iter().next().unwrap();
        let (_, b) = back.params().iter().next().unwrap();
        assert_eq!(a.value.to_f64_vec(), b.value.to_f64_vec());
    }

    #[test]
    fn corruption_is_detected() {
        let m = Model::<f32>::new(tiny().clone(), 4).unwrap();
        let bytes = write_checkpoint(&m).unwrap();

        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            read_checkpoint::<f32>(&flipped),
            Err(Error::Checksum { .. })
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            read_checkpoint::<f32>(&magic),
            Err(Error::BadMagic { .. })
        ));

        assert!(read_checkpoint::<f32>(&bytes[..bytes.len() - 10]).is_err());
        assert!(read_checkpoint::<f32>(&bytes[..2]).is_err());
    }

    #[test]
    fn rejects_future_version() {
        let m = Model::<f32>::new(tiny().with_variant(Variant::NoTransformer), 4).unwrap();
        let mut bytes = write_checkpoint(&m).unwrap();
        bytes[4] = 9;
        bytes.truncate(bytes.len() - 4);
        crate::binary::append_crc(&mut bytes);
        assert!(matches!(
            read_checkpoint::<f32>(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
    }
}
