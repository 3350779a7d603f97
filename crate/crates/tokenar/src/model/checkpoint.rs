//! Checkpoint file format.
//!
//! Layout: magic "TKAR", version u32 LE, tensor count u32 LE, then per
//! tensor: name length u32, name bytes, rank u32, dims u32 each, and the
//! row-major float32 little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TokenArError};
use crate::scalar::Real;

use super::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TKAR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let tensors = params.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for dim in &shape {
            buf.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        for v in data {
            buf.write_all(&(v.as_f64() as f32).to_le_bytes())
                .map_err(|e| TokenArError::io(path, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| TokenArError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| TokenArError::format(self.path, "unexpected end of file"))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint into freshly shaped parameters for `cfg`. Tensor names
/// and shapes must match the configuration exactly.
pub fn load_checkpoint<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let bytes = fs::read(path).map_err(|e| TokenArError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(TokenArError::format(path, "bad magic, not a TKAR checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TokenArError::CheckpointMismatch {
            checkpoint: format!("{} (version {version})", path.display()),
            config: format!("expected version {CHECKPOINT_VERSION}"),
        });
    }
    let count = r.u32()? as usize;

    let mut params = ModelParams::<T>::zeros_like(cfg);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if count != expected.len() {
        return Err(TokenArError::CheckpointMismatch {
            checkpoint: format!("{} ({count} tensors)", path.display()),
            config: format!("model with {} tensors", expected.len()),
        });
    }

    let mut views = params.tensors_mut();
    for (i, (exp_name, exp_shape)) in expected.iter().enumerate() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| TokenArError::format(path, "tensor name is not utf-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if &name != exp_name || &shape != exp_shape {
            return Err(TokenArError::CheckpointMismatch {
                checkpoint: format!("{}: tensor {name} {shape:?}", path.display()),
                config: format!("expected {exp_name} {exp_shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        let raw = r.take(4 * len)?;
        for (dst, chunk) in views[i].iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            *dst = T::of(v as f64);
        }
    }
    drop(views);
    Ok(params)
}
