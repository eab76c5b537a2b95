//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! "TMLC"                       magic
//! u32  version                 = FORMAT_VERSION
//! u64  total file length       (includes the checksum)
//! u8   scalar width            4 (f32) or 8 (f64)
//! u32  config length, bytes    TOML: role tag + model config
//! u32  parameter count, then per parameter:
//!      u16 name length, name bytes, u8 rank, u64 extents..., payload
//! u8   optimizer present; if 1: u64 step, then first and second
//!      moments per parameter (payload only, shapes as above)
//! u64  FNV-1a 64 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::model::{Model, NamedParam, Role, UgdcConfig};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TMLC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

type Decoded<T> = std::result::Result<T, CheckpointError>;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    role: String,
    model: UgdcConfig,
}

/// A model plus, optionally, the optimizer that was training it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

fn put_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Scalar>(model: &Model<T>, optimizer: Option<&OptimizerState<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    out.push(T::WIDTH);
    let block = ConfigBlock { role: model.role().tag().to_string(), model: model.config().clone() };
    let text = toml::to_string(&block).expect("config serializes");
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_payload(&mut out, &p.value);
    }
    match optimizer {
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for m in opt.first.iter().chain(&opt.second) {
                put_payload(&mut out, m);
            }
        }
        None => out.push(0),
    }
    let total = (out.len() + 8) as u64;
    out[8..16].copy_from_slice(&total.to_le_bytes());
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Decoded<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Decoded<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Decoded<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Decoded<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Decoded<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn payload<T: Scalar>(&mut self, shape: &[usize]) -> Decoded<Tensor<T>> {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| malformed("extent overflow"))?;
        let width = T::WIDTH as usize;
        let raw = self.take(n.checked_mul(width).ok_or_else(|| malformed("extent overflow"))?)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Tensor::from_vec(shape.to_vec(), data).map_err(|e| malformed(&e.to_string()))
    }
}

fn malformed(msg: &str) -> CheckpointError {
    CheckpointError::Malformed(msg.to_string())
}

/// Validates framing and checksum, then rebuilds the model.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Decoded<Checkpoint<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
    }
    let total = r.u64()?;
    if (bytes.len() as u64) < total {
        return Err(CheckpointError::Truncated);
    }
    if bytes.len() as u64 != total || total < (HEADER_LEN + 8) as u64 {
        return Err(malformed(&format!("length field says {total} bytes, file has {}", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: HEADER_LEN };
    let width = r.u8()?;
    if width != T::WIDTH {
        return Err(CheckpointError::ScalarWidth { found: width, expected: T::WIDTH });
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| malformed("config block is not UTF-8"))?;
    let block: ConfigBlock = toml::from_str(text).map_err(|e| malformed(&format!("config block: {e}")))?;
    let role: Role = block.role.parse().map_err(|_| malformed(&format!("unknown role {:?}", block.role)))?;

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| malformed("parameter name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Decoded<Vec<_>>>()?;
        let value = r.payload(&shape)?;
        params.push(NamedParam { name, value });
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut moments = Vec::with_capacity(2 * params.len());
            for p in params.iter().chain(params.iter()) {
                moments.push(r.payload(p.value.shape())?);
            }
            let second = moments.split_off(params.len());
            Some(OptimizerState { step, first: moments, second })
        }
        other => return Err(malformed(&format!("optimizer flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(malformed(&format!("{} trailing bytes", body.len() - r.pos)));
    }
    let model = Model::from_params(role, &block.model, params).map_err(|e| malformed(&e.to_string()))?;
    Ok(Checkpoint { model, optimizer })
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, optimizer: Option<&OptimizerState<T>>) -> Result<()> {
    fs::write(path, encode(model, optimizer))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Ok(decode(&fs::read(path)?)?)
}

/// Loads weights into a model of `role`, provided the stored architecture is
/// exactly `config`.
pub fn load_as<T: Scalar>(path: &Path, role: Role, config: &UgdcConfig) -> Result<Checkpoint<T>> {
    let ck = load::<T>(path)?;
    if ck.model.config() != config {
        return Err(CheckpointError::ConfigMismatch(format!(
            "{} stores {:?}, expected {:?}",
            path.display(),
            ck.model.config(),
            config
        ))
        .into());
    }
    let model = Model::from_params(role, config, ck.model.params().to_vec())?;
    Ok(Checkpoint { model, optimizer: ck.optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmMode;
    use crate::rng::Rng;

    fn tiny() -> UgdcConfig {
        let mut cfg = UgdcConfig { depth: 1, base_channels: 2, ..UgdcConfig::default() };
        cfg.gdc.grid = (2, 2);
        cfg.gdc.embed = 2;
        cfg
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn round_trip_with_optimizer() {
        let m = Model::<f32>::build(Role::Enhancer(EmMode::Residual), &tiny(), &mut Rng::new(3)).unwrap();
        let mut opt = OptimizerState::new(m.params()).unwrap();
        opt.step = 7;
        opt.first[0].data_mut()[0] = 0.25;
        let bytes = encode(&m, Some(&opt));
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back.model.param_bytes(), m.param_bytes());
        assert_eq!(back.model.role(), m.role());
        assert_eq!(back.optimizer.as_ref(), Some(&opt));
        assert_eq!(encode(&back.model, back.optimizer.as_ref()), bytes);
    }

    #[test]
    fn distinct_failures() {
        let m = Model::<f32>::build(Role::Troublemaker, &tiny(), &mut Rng::new(3)).unwrap();
        let bytes = encode(&m, None);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode::<f32>(&bad).unwrap_err(), CheckpointError::BadMagic);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode::<f32>(&bad).unwrap_err(), CheckpointError::Version { found: 9, .. }));
        assert_eq!(decode::<f32>(&bytes[..bytes.len() - 5]).unwrap_err(), CheckpointError::Truncated);
        let mut bad = bytes.clone();
        let mid = bytes.len() - 20;
        bad[mid] ^= 0x01;
        assert!(matches!(decode::<f32>(&bad).unwrap_err(), CheckpointError::Checksum { .. }));
        assert!(matches!(decode::<f64>(&bytes).unwrap_err(), CheckpointError::ScalarWidth { found: 4, expected: 8 }));
    }
}
