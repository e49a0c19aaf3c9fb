//! Binary checkpoint format.
//!
//! ```text
//! "PALM"  u32 version  u32 tensor-count
//! per tensor: u16 name-len, name (UTF-8), u32 rows, u32 cols, rows·cols f64
//! ```
//! All integers and floats are little-endian. The first tensor is the model
//! configuration as JSON under the reserved name `__config__` (rows = 1,
//! cols = byte length, payload = the raw UTF-8 bytes).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::math::Matrix;

use super::config::ModelConfig;
use super::network::Model;
use super::params::ModelParams;

pub const MAGIC: &[u8; 4] = b"PALM";
pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "__config__";

fn write_header(w: &mut impl Write, name: &str, rows: usize, cols: usize) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| LabError::Format(format!("tensor name too long: {name}")))?;
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| LabError::Format(format!("dimension {v} too large")));
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&to_u32(rows)?.to_le_bytes())?;
    w.write_all(&to_u32(cols)?.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    let config = serde_json::to_vec(model.config())?;
    let params = model.params();
    let count = u32::try_from(params.len() + 1).map_err(|_| LabError::Format("too many tensors".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    write_header(w, CONFIG_TENSOR, 1, config.len())?;
    w.write_all(&config)?;
    for (name, m) in params.iter() {
        write_header(w, name, m.rows(), m.cols())?;
        let mut buf = Vec::with_capacity(m.data().len() * 8);
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => LabError::Format("truncated checkpoint".into()),
        _ => LabError::Io(e),
    })?;
    Ok(buf)
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(LabError::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_array(r)?) as usize)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    if &read_array::<4>(r)? != MAGIC {
        return Err(LabError::Format("bad magic bytes".into()));
    }
    let version = read_u32(r)? as u32;
    if version != FORMAT_VERSION {
        return Err(LabError::Format(format!("unsupported format version {version}")));
    }
    let count = read_u32(r)?;
    let mut config: Option<ModelConfig> = None;
    let mut params = ModelParams::default();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(r)?) as usize;
        let name = String::from_utf8(read_bytes(r, name_len)?)
            .map_err(|_| LabError::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u32(r)?;
        let cols = read_u32(r)?;
        if name == CONFIG_TENSOR {
            if rows != 1 || config.is_some() {
                return Err(LabError::Format("malformed config entry".into()));
            }
            config = Some(serde_json::from_slice(&read_bytes(r, cols)?)?);
            continue;
        }
        let n = rows.checked_mul(cols).ok_or_else(|| LabError::Format("tensor too large".into()))?;
        let bytes = read_bytes(r, n.checked_mul(8).ok_or_else(|| LabError::Format("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(&name, Matrix::new(rows, cols, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(LabError::Format("trailing bytes after last tensor".into()));
    }
    let config = config.ok_or_else(|| LabError::Format(format!("missing {CONFIG_TENSOR} entry")))?;
    Model::from_parts(config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::config::{Variant, Vocab};

    fn model(v: Variant) -> Model {
        Model::new(ModelConfig::new(v, 8, Vocab::new(11).unwrap()).with_layers(2), 9).unwrap()
    }

    #[test]
    fn round_trip_every_variant() {
        for v in Variant::ALL {
            let m = model(v);
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(back.config(), m.config());
            assert_eq!(back.params(), m.params());
        }
    }

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        write_checkpoint(&model(Variant::LM), &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"PALM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, model(Variant::LM).params().len() + 1);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 10);
        assert_eq!(&buf[14..24], b"__config__");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&model(Variant::LM), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(LabError::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &truncated[..]), Err(LabError::Format(_))));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(&mut trailing.as_slice()).is_err());
    }
}
