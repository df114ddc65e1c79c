//! Tensor and checkpoint serialization.
//!
//! Tensor file: magic `ARFC`, version byte 1, dtype byte (0 = f32, 1 = f64),
//! rank byte (always 4), four little-endian `u32` dims, then the row-major
//! little-endian payload. Round trips are bit-exact — every NaN payload and
//! signed zero survives — so checkpoints written by identically seeded runs
//! compare equal as bytes.
//!
//! A checkpoint is a directory with one tensor file per parameter (buffers
//! included: running statistics must survive a reload) plus `manifest.txt`,
//! one tab-separated line per parameter: name, shape, dtype, file name.
//! Lines appear in registration order, which is deterministic for a given
//! network configuration.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::scalar::{Dtype, Scalar};
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"ARFC";
pub const TENSOR_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Header bytes before the payload: magic, version, dtype, rank, 4×u32 dims.
const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 16;

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * S::DTYPE.size_bytes());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(S::DTYPE.code());
    out.push(4);
    for dim in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(
            bytes.len(),
            format!("tensor header needs {HEADER_LEN} bytes, input has {}", bytes.len()),
        ));
    }
    if bytes[..4] != TENSOR_MAGIC {
        return Err(parse_err(0, "bad magic, expected `ARFC`"));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(parse_err(
            4,
            format!("unsupported version {}, expected {TENSOR_VERSION}", bytes[4]),
        ));
    }
    match Dtype::from_code(bytes[5]) {
        None => return Err(parse_err(5, format!("unknown dtype code {}", bytes[5]))),
        Some(d) if d != S::DTYPE => {
            return Err(parse_err(
                5,
                format!("dtype mismatch: file holds {d}, caller wants {}", S::DTYPE),
            ));
        }
        Some(_) => {}
    }
    if bytes[6] != 4 {
        return Err(parse_err(6, format!("rank must be 4, got {}", bytes[6])));
    }
    let mut dims = [0usize; 4];
    for (i, dim) in dims.iter_mut().enumerate() {
        let at = 7 + 4 * i;
        *dim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let elem = S::DTYPE.size_bytes();
    let want = HEADER_LEN + shape.len() * elem;
    if bytes.len() < want {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: {shape} needs {want} bytes, input has {}", bytes.len()),
        ));
    }
    if bytes.len() > want {
        return Err(parse_err(want, format!("{} trailing bytes", bytes.len() - want)));
    }
    let mut data = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        data.push(S::read_le(&bytes[HEADER_LEN + i * elem..]));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode_tensor(&fs::read(path)?)
}

/// Write every parameter (trainable and buffer) plus the manifest into `dir`,
/// creating it if needed.
pub fn save_checkpoint<S: Scalar>(dir: &Path, store: &ParamStore<S>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for id in store.ids() {
        let name = store.name(id);
        let value = store.value(id);
        let file = format!("{name}.bin");
        save_tensor(&dir.join(&file), value)?;
        manifest.push_str(&format!("{name}\t{}\t{}\t{file}\n", value.shape(), S::DTYPE));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`] into a store holding the
/// same parameter set (same names, same shapes): the network must be rebuilt
/// from its configuration first. Extra or missing names are data errors.
pub fn load_checkpoint<S: Scalar>(dir: &Path, store: &mut ParamStore<S>) -> Result<()> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut seen = 0usize;
    for (lineno, line) in manifest.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "manifest line {}: expected 4 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let name = fields[0];
        let id = store.find(name).ok_or_else(|| {
            Error::Data(format!("checkpoint parameter `{name}` unknown to this network"))
        })?;
        let tensor = load_tensor::<S>(&dir.join(fields[3]))?;
        if tensor.shape().to_string() != fields[1] {
            return Err(Error::Data(format!(
                "`{name}`: manifest says shape {}, file holds {}",
                fields[1],
                tensor.shape()
            )));
        }
        store.set_value(id, tensor)?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {seen} parameters, network has {}",
            store.len()
        )));
    }
    Ok(())
}
