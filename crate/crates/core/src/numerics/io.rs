//! Tensor files: an ASCII header line `ndim d0 d1 ... dk\n` followed by the
//! values as raw little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut header = t.shape().len().to_string();
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    let mut out = Vec::with_capacity(header.len() + 8 * t.numel());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not ASCII")?;
    let mut fields = header.split(' ').map(|f| f.parse::<usize>());
    let ndim = fields
        .next()
        .ok_or("empty header")?
        .map_err(|e| format!("bad ndim: {e}"))?;
    let shape = fields
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format!("bad dimension: {e}"))?;
    if shape.len() != ndim || ndim == 0 {
        return Err(format!("header declares {ndim} dims but lists {:?}", shape));
    }
    let body = &bytes[nl + 1..];
    let numel: usize = shape.iter().product();
    if body.len() != numel * 8 {
        return Err(format!(
            "expected {} payload bytes for shape {:?}, found {}",
            numel * 8,
            shape,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

/// Writes `t` to `path`, creating parent directories as needed.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tensor(t))
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}
