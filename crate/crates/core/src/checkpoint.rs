//! Binary checkpoint format, bit-exact on round trip.
//!
//! Layout (all little-endian):
//!   magic "XMSC" | version u32 | config sha256 (32 bytes)
//!   | config_len u32 | config JSON
//!   | param_count u32
//!   | per param: name_len u16, name, dtype u8, rank u8, dims u32 x rank, payload
//!   | optimizer flag u8; when 1: lr/beta1/beta2/eps/decay_factor f64,
//!     decay_interval i64 (-1 = none), step u64, then first/second moment
//!     payloads per parameter in the same order.

use std::fs;
use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Result, XmsError};
use crate::model::{Model, ModelConfig};
use crate::params::Init;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XMSC";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(XmsError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_values<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        v.write_le(out);
    }
}

fn read_values<T: Scalar>(r: &mut Reader<'_>, n: usize) -> Result<Vec<T>> {
    let width = T::DTYPE.byte_width();
    let raw = r.take(n * width)?;
    Ok(raw.chunks_exact(width).map(T::read_le).collect())
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    optimizer: Option<&AdamState<T>>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.cfg.hash());
    let cfg_json = model.cfg.canonical_json();
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_json.as_bytes());

    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.tag());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        write_values(&mut out, p.value.data());
    }

    match optimizer {
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.cfg.lr.to_le_bytes());
            out.extend_from_slice(&state.cfg.beta1.to_le_bytes());
            out.extend_from_slice(&state.cfg.beta2.to_le_bytes());
            out.extend_from_slice(&state.cfg.eps.to_le_bytes());
            out.extend_from_slice(&state.cfg.decay_factor.to_le_bytes());
            let interval: i64 = state.cfg.decay_interval.map_or(-1, |v| v as i64);
            out.extend_from_slice(&interval.to_le_bytes());
            out.extend_from_slice(&state.step.to_le_bytes());
            let (m, v) = state.moments();
            for (mi, vi) in m.iter().zip(v) {
                write_values(&mut out, mi);
                write_values(&mut out, vi);
            }
        }
        None => out.push(0),
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read just the embedded config (validating magic, version and hash), so
/// callers can pick the element type before a full load.
pub fn peek_config(path: &Path) -> Result<ModelConfig> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(XmsError::Checkpoint("bad magic (not an XMSC checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(XmsError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let stored_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let cfg_len = r.u32()? as usize;
    let cfg_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| XmsError::Checkpoint("config not utf-8".into()))?;
    let cfg: ModelConfig = serde_json::from_str(cfg_json)
        .map_err(|e| XmsError::Checkpoint(format!("config parse: {e}")))?;
    if cfg.hash() != stored_hash {
        return Err(XmsError::Checkpoint("config hash mismatch".into()));
    }
    Ok(cfg)
}

/// Model (and optionally optimizer state) restored from disk. The embedded
/// config is re-hashed and compared against the stored hash.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Option<AdamState<T>>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(XmsError::Checkpoint("bad magic (not an XMSC checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(XmsError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let stored_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let cfg_len = r.u32()? as usize;
    let cfg_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| XmsError::Checkpoint("config not utf-8".into()))?;
    let cfg: ModelConfig = serde_json::from_str(cfg_json)
        .map_err(|e| XmsError::Checkpoint(format!("config parse: {e}")))?;
    if cfg.hash() != stored_hash {
        return Err(XmsError::Checkpoint("config hash mismatch".into()));
    }

    let mut model = Model::<T>::new(cfg, Init::Zeros, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(XmsError::Checkpoint(format!(
            "parameter count {count} does not match config ({})",
            model.params.len()
        )));
    }
    for idx in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| XmsError::Checkpoint("parameter name not utf-8".into()))?
            .to_string();
        let dtype = Dtype::from_tag(r.u8()?)
            .ok_or_else(|| XmsError::Checkpoint("unknown dtype tag".into()))?;
        if dtype != T::DTYPE {
            return Err(XmsError::Checkpoint(format!(
                "dtype mismatch for '{name}': file has {dtype:?}"
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let values = read_values::<T>(&mut r, n)?;
        let p = model.params.get_mut(idx);
        if p.name != name {
            return Err(XmsError::Checkpoint(format!(
                "parameter order mismatch: file has '{name}', model expects '{}'",
                p.name
            )));
        }
        if p.value.shape() != shape.as_slice() {
            return Err(XmsError::Checkpoint(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(shape, values)?;
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let cfg = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                decay_factor: r.f64()?,
                decay_interval: match r.i64()? {
                    v if v < 0 => None,
                    v => Some(v as u64),
                },
            };
            let step = r.u64()?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for idx in 0..count {
                let n = model.params.get(idx).value.len();
                m.push(read_values::<T>(&mut r, n)?);
                v.push(read_values::<T>(&mut r, n)?);
            }
            Some(AdamState::restore(cfg, step, m, v))
        }
        t => return Err(XmsError::Checkpoint(format!("bad optimizer flag {t}"))),
    };
    if r.pos != buf.len() {
        return Err(XmsError::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    Ok((model, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmsc");
        let model = Model::<f32>::new(ModelConfig::tiny(), Init::KaimingUniform, 9).unwrap();
        save_checkpoint(&path, &model, None).unwrap();
        let (loaded, opt) = load_checkpoint::<f32>(&path).unwrap();
        assert!(opt.is_none());
        assert_eq!(loaded.cfg, model.cfg);
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter '{}' not bitwise equal", a.name);
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmsc");
        let model = Model::<f32>::new(ModelConfig::tiny(), Init::KaimingUniform, 9).unwrap();
        save_checkpoint(&path, &model, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Y';
        std::fs::write(&path, &bytes).unwrap();
        let err = match load_checkpoint::<f32>(&path) {
            Err(e) => e,
            Ok(_) => panic!("corrupt magic accepted"),
        };
        assert!(matches!(err, XmsError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmsc");
        let model = Model::<f32>::new(ModelConfig::tiny(), Init::KaimingUniform, 9).unwrap();
        save_checkpoint(&path, &model, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn config_hash_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmsc");
        let model = Model::<f32>::new(ModelConfig::tiny(), Init::KaimingUniform, 9).unwrap();
        save_checkpoint(&path, &model, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // flip one bit inside the embedded config JSON
        let json_start = 4 + 4 + 32 + 4;
        bytes[json_start + 10] ^= 0x20;
        std::fs::write(&path, &bytes).unwrap();
        let err = match load_checkpoint::<f32>(&path) {
            Err(e) => e,
            Ok(_) => panic!("hash mismatch accepted"),
        };
        assert!(err.to_string().contains("hash") || err.to_string().contains("parse"), "{err}");
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmsc");
        let mut model = Model::<f32>::new(ModelConfig::tiny(), Init::KaimingUniform, 9).unwrap();
        let mut state = AdamState::new(
            AdamConfig { lr: 1e-3, decay_interval: Some(100), ..AdamConfig::default() },
            &model.params,
        );
        // take one step so moments are non-trivial
        for i in 0..model.params.len() {
            let g: Vec<f32> = (0..model.params.get(i).value.len())
                .map(|j| (j as f32 * 0.1).sin())
                .collect();
            model.params.accumulate_grad(i, &g);
        }
        state.step(&mut model.params).unwrap();
        save_checkpoint(&path, &model, Some(&state)).unwrap();
        let (loaded, opt) = load_checkpoint::<f32>(&path).unwrap();
        let opt = opt.unwrap();
        assert_eq!(opt.step, 1);
        assert_eq!(opt.cfg.decay_interval, Some(100));
        let (m0, v0) = state.moments();
        let (m1, v1) = opt.moments();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(
                a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
