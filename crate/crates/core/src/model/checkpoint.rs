//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, version `u32`, model spec, SGD settings, then every
//! parameter tensor followed by every momentum tensor, each as
//! `name_len u64, name bytes, rows u64, cols u64, rows*cols f64`.

use std::path::Path;

use super::{ModelSpec, ModelState, Params, SgdConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LESSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_params(buf: &mut Vec<u8>, params: &Params) {
    let named = params.named();
    put_u64(buf, named.len() as u64);
    for (name, m) in named {
        put_u64(buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(buf, m.rows() as u64);
        put_u64(buf, m.cols() as u64);
        for &v in m.as_slice() {
            put_f64(buf, v);
        }
    }
}

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let spec = state.spec();
    put_u64(&mut buf, spec.input_dim as u64);
    put_u64(&mut buf, spec.hidden.len() as u64);
    for &w in &spec.hidden {
        put_u64(&mut buf, w as u64);
    }
    put_u64(&mut buf, spec.num_classes as u64);
    put_u64(&mut buf, spec.proj_dim as u64);
    put_u64(&mut buf, spec.num_prototypes as u64);
    put_f64(&mut buf, spec.temp_proto);
    put_f64(&mut buf, state.sgd.lr);
    put_f64(&mut buf, state.sgd.momentum);
    put_f64(&mut buf, state.sgd.weight_decay);
    put_params(&mut buf, &state.params);
    put_params(&mut buf, state.velocity());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn size(&mut self) -> Result<usize, String> {
        let v = self.u64()?;
        // guards allocation on corrupt input
        if v > (1 << 32) {
            return Err(format!("implausible size {v}"));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn params(&mut self, template: &Params) -> Result<Params, String> {
        let mut out = template.clone();
        let count = self.size()?;
        let mut slots = out.named_mut();
        if count != slots.len() {
            return Err(format!("{count} tensors, expected {}", slots.len()));
        }
        for (expected, slot) in slots.iter_mut() {
            let len = self.size()?;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            if &name != expected {
                return Err(format!("tensor `{name}` where `{expected}` expected"));
            }
            let (r, c) = (self.size()?, self.size()?);
            if (r, c) != slot.shape() {
                return Err(format!("{name}: shape {r}x{c}, expected {:?}", slot.shape()));
            }
            let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
            **slot = Matrix::from_vec(r, c, data).map_err(|e| e.to_string())?;
        }
        drop(slots);
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState, String> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(rd.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let input_dim = rd.size()?;
    let n_hidden = rd.size()?;
    let hidden = (0..n_hidden).map(|_| rd.size()).collect::<Result<Vec<_>, _>>()?;
    let spec = ModelSpec {
        input_dim,
        hidden,
        num_classes: rd.size()?,
        proj_dim: rd.size()?,
        num_prototypes: rd.size()?,
        temp_proto: rd.f64()?,
    };
    spec.validate().map_err(|e| e.to_string())?;
    let sgd = SgdConfig {
        lr: rd.f64()?,
        momentum: rd.f64()?,
        weight_decay: rd.f64()?,
    };
    let template = Params::zeros(&spec);
    let params = rd.params(&template)?;
    let velocity = rd.params(&template)?;
    if rd.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - rd.pos));
    }
    let mut state = ModelState::from_params(spec, params, sgd).map_err(|e| e.to_string())?;
    state.set_velocity(velocity).map_err(|e| e.to_string())?;
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|detail| Error::Parse {
        path: path.to_path_buf(),
        detail,
    })
}
