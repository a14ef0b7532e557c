//! Checkpoint serialization.
//!
//! Layout: the magic bytes `TUSKCKPT1`, a little-endian u64 header length,
//! a UTF-8 JSON header listing each tensor's name, dtype, shape and byte
//! offset (relative to the start of the payload section), then the raw
//! little-endian payloads in header order. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, Tensor};
use crate::error::{Result, TuskError};
use crate::nn::{Adam, ParamStore};

pub const MAGIC: &[u8; 9] = b"TUSKCKPT1";

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: usize,
    params: Vec<HeaderEntry>,
}

fn write_payload<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    match T::DTYPE {
        crate::diff::Dtype::F32 => {
            for v in t.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        crate::diff::Dtype::F64 => {
            for v in t.data() {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Write named tensors and a step counter.
pub fn save<T: Scalar>(
    path: &Path,
    step: usize,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(HeaderEntry {
            name: name.clone(),
            dtype: T::DTYPE.name().to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * T::DTYPE.size()) as u64;
    }
    let header = serde_json::to_vec(&Header {
        step,
        params: entries,
    })
    .map_err(|e| TuskError::Checkpoint(format!("header encode: {e}")))?;

    let file = File::create(path).map_err(|e| TuskError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| TuskError::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header).map_err(io_err)?;
    for (_, t) in tensors {
        write_payload(&mut w, t).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read back all tensors and the step counter. The element type must match
/// the stored dtype.
pub fn load<T: Scalar>(path: &Path) -> Result<(usize, Vec<(String, Tensor<T>)>)> {
    let file = File::open(path).map_err(|e| TuskError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| TuskError::io(path, e);

    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(TuskError::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut lenb = [0u8; 8];
    r.read_exact(&mut lenb).map_err(io_err)?;
    let hlen = u64::from_le_bytes(lenb) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| TuskError::Checkpoint(format!("header decode: {e}")))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err)?;

    let esize = T::DTYPE.size();
    let mut out = Vec::with_capacity(header.params.len());
    for e in &header.params {
        if e.dtype != T::DTYPE.name() {
            return Err(TuskError::Checkpoint(format!(
                "dtype mismatch for `{}`: stored {}, requested {}",
                e.name,
                e.dtype,
                T::DTYPE.name()
            )));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * esize;
        if end > payload.len() {
            return Err(TuskError::Checkpoint(format!(
                "truncated payload for `{}` ({} > {} bytes)",
                e.name,
                end,
                payload.len()
            )));
        }
        let bytes = &payload[start..end];
        let data: Vec<T> = match T::DTYPE {
            crate::diff::Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect(),
            crate::diff::Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| {
                    T::from_f64(f64::from_le_bytes([
                        b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                    ]))
                })
                .collect(),
        };
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((header.step, out))
}

/// Save the full training state: parameters plus optimizer moments
/// (`opt.m/<name>`, `opt.v/<name>`) and per-parameter update counts
/// (`opt.t/<name>`, stored as a 1-element tensor).
pub fn save_train_state(
    path: &Path,
    step: usize,
    store: &ParamStore<f32>,
    adam: &Adam<f32>,
) -> Result<()> {
    let (m, v, t) = adam.state();
    let counts: Vec<Tensor<f32>> = t.iter().map(|&c| Tensor::scalar(c as f32)).collect();
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (i, (_, p)) in store.iter().enumerate() {
        tensors.push((p.name.clone(), &p.value));
        tensors.push((format!("opt.m/{}", p.name), &m[i]));
        tensors.push((format!("opt.v/{}", p.name), &v[i]));
        tensors.push((format!("opt.t/{}", p.name), &counts[i]));
    }
    save(path, step, &tensors)
}

/// Restore a training state saved by [`save_train_state`] into an existing
/// store/optimizer pair (shapes must match). Returns the step counter.
pub fn load_train_state(
    path: &Path,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
) -> Result<usize> {
    let (step, tensors) = load::<f32>(path)?;
    let mut m: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
    let mut v: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
    let mut t: Vec<u64> = vec![0; store.len()];
    for (name, tensor) in tensors {
        if let Some(rest) = name.strip_prefix("opt.m/") {
            let id = store.id_of(rest)?;
            m[id.0] = Some(tensor);
        } else if let Some(rest) = name.strip_prefix("opt.v/") {
            let id = store.id_of(rest)?;
            v[id.0] = Some(tensor);
        } else if let Some(rest) = name.strip_prefix("opt.t/") {
            let id = store.id_of(rest)?;
            t[id.0] = tensor.item() as u64;
        } else {
            let id = store.id_of(&name)?;
            if store.value(id).shape() != tensor.shape() {
                return Err(TuskError::Checkpoint(format!(
                    "shape mismatch restoring `{name}`: {:?} vs {:?}",
                    store.value(id).shape(),
                    tensor.shape()
                )));
            }
            *store.value_mut(id) = tensor;
        }
    }
    let m: Vec<Tensor<f32>> = m
        .into_iter()
        .enumerate()
        .map(|(i, x)| x.ok_or_else(|| TuskError::Checkpoint(format!("missing opt.m #{i}"))))
        .collect::<Result<_>>()?;
    let v: Vec<Tensor<f32>> = v
        .into_iter()
        .enumerate()
        .map(|(i, x)| x.ok_or_else(|| TuskError::Checkpoint(format!("missing opt.v #{i}"))))
        .collect::<Result<_>>()?;
    adam.restore(m, v, t);
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let a = Tensor::<f32>::from_f64_slice(&[2, 3], &[0.1, -0.2, 0.3, 1.5e-7, 9.0, -4.25])
            .unwrap();
        let b = Tensor::<f32>::scalar(42.0);
        save(&path, 7, &[("layer.w".into(), &a), ("layer.b".into(), &b)]).unwrap();
        let (step, loaded) = load::<f32>(&path).unwrap();
        assert_eq!(step, 7);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "layer.w");
        assert_eq!(loaded[0].1.data(), a.data());
        assert_eq!(loaded[1].1.data(), b.data());
    }

    #[test]
    fn magic_and_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let a = Tensor::<f32>::scalar(1.0);
        save(&path, 0, &[("p".into(), &a)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], MAGIC);
        let hlen = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[17..17 + hlen]).unwrap();
        assert_eq!(header["params"][0]["name"], "p");
        assert_eq!(header["params"][0]["dtype"], "f32");
        assert_eq!(bytes.len(), 17 + hlen + 4);
    }

    #[test]
    fn dtype_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let a = Tensor::<f32>::scalar(1.0);
        save(&path, 0, &[("p".into(), &a)]).unwrap();
        assert!(load::<f64>(&path).is_err());
    }
}
