//! Checkpoint files: a text header followed by raw little-endian blocks.
//!
//! ```text
//! RAINCKPT 1
//! config_hash <hex>
//! step <count>
//! dtype f32|f64
//! params <count>
//! param <name> <rank> <dim>...
//! end
//! <blocks, one per param line, row-major>
//! ```
//! Blocks are stored at the precision the model was trained in, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::io::{self, Write};
use std::path::Path;

use super::params::ParamStore;
use super::real::Real;
use super::tensor::Tensor;

const MAGIC: &str = "RAINCKPT 1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint was written for config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("parameter layout differs from the model: {0}")]
    Layout(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub step: u64,
    pub dtype: String,
}

pub fn encode<T: Real>(store: &ParamStore<T>, config_hash: &str, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = format!(
        "{MAGIC}\nconfig_hash {config_hash}\nstep {step}\ndtype {}\nparams {}\n",
        T::DTYPE,
        store.len()
    );
    for (_, name, t) in store.iter() {
        header.push_str(&format!("param {name} {}", t.shape().len()));
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push_str("end\n");
    out.extend_from_slice(header.as_bytes());
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, config_hash: &str, step: u64) -> Result<(), CheckpointError> {
    let bytes = encode(store, config_hash, step);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_le_any<T: Real>(dtype: &str, bytes: &[u8]) -> T {
    match dtype {
        "f32" => T::from_f64(f32::read_le(bytes) as f64),
        _ => T::from_f64(f64::read_le(bytes)),
    }
}

/// Parses a checkpoint. When `expected_hash` is given, a different stored hash is rejected.
pub fn decode<T: Real>(
    bytes: &[u8],
    expected_hash: Option<&str>,
) -> Result<(CheckpointHeader, ParamStore<T>), CheckpointError> {
    let mut pos = 0;
    let mut next_line = || -> Result<String, CheckpointError> {
        let rest = &bytes[pos.min(bytes.len())..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Format("header ended early".into()))?;
        let line =
            std::str::from_utf8(&rest[..nl]).map_err(|_| CheckpointError::Format("header is not utf-8".into()))?;
        pos += nl + 1;
        Ok(line.to_string())
    };
    if next_line()? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let field = |line: String, key: &str| -> Result<String, CheckpointError> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| CheckpointError::Format(format!("expected `{key}`, got `{line}`")))
    };
    let config_hash = field(next_line()?, "config_hash")?;
    let step = field(next_line()?, "step")?
        .parse()
        .map_err(|_| CheckpointError::Format("bad step".into()))?;
    let dtype = field(next_line()?, "dtype")?;
    let width = match dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(CheckpointError::Format(format!("unknown dtype {other}"))),
    };
    let count: usize = field(next_line()?, "params")?
        .parse()
        .map_err(|_| CheckpointError::Format("bad param count".into()))?;
    let mut layout = Vec::with_capacity(count);
    for _ in 0..count {
        let line = field(next_line()?, "param")?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| CheckpointError::Format("param without name".into()))?
            .to_string();
        let rank: usize = parts
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| CheckpointError::Format(format!("param {name} without rank")))?;
        let dims: Vec<usize> = parts
            .map(|d| d.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::Format(format!("param {name} has a bad dimension")))?;
        if dims.len() != rank {
            return Err(CheckpointError::Format(format!("param {name} rank mismatch")));
        }
        layout.push((name, dims));
    }
    if next_line()? != "end" {
        return Err(CheckpointError::Format("missing end of header".into()));
    }
    let header = CheckpointHeader {
        config_hash,
        step,
        dtype: dtype.clone(),
    };
    if let Some(exp) = expected_hash {
        if exp != header.config_hash {
            return Err(CheckpointError::ConfigMismatch {
                expected: exp.to_string(),
                found: header.config_hash,
            });
        }
    }
    let expected: usize = layout.iter().map(|(_, d)| d.iter().product::<usize>() * width).sum();
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for (name, dims) in layout {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|k| read_le_any::<T>(&dtype, &payload[off + k * width..]))
            .collect();
        off += n * width;
        store.add(name, Tensor::from_vec(&dims, data).expect("dims match count"));
    }
    Ok((header, store))
}

pub fn load<T: Real>(
    path: &Path,
    expected_hash: Option<&str>,
) -> Result<(CheckpointHeader, ParamStore<T>), CheckpointError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, expected_hash)
}

/// Copies loaded values into a freshly built model store, checking names and shapes.
pub fn restore_into<T: Real>(target: &mut ParamStore<T>, loaded: &ParamStore<T>) -> Result<(), CheckpointError> {
    if target.len() != loaded.len() {
        return Err(CheckpointError::Layout(format!(
            "model has {} parameters, checkpoint {}",
            target.len(),
            loaded.len()
        )));
    }
    for id in target.ids().collect::<Vec<_>>() {
        if target.name(id) != loaded.name(id) || target.get(id).shape() != loaded.get(id).shape() {
            return Err(CheckpointError::Layout(format!(
                "{} {:?} vs {} {:?}",
                target.name(id),
                target.get(id).shape(),
                loaded.name(id),
                loaded.get(id).shape()
            )));
        }
        *target.get_mut(id) = loaded.get(id).clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "enc.w",
            Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 1e-7, -5.5, 3.25]).unwrap(),
        );
        s.add(
            "enc.b",
            Tensor::from_f64(&[3], &[f64::from(f32::MIN_POSITIVE), 0.0, -0.0]).unwrap(),
        );
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let s = sample_store();
        let bytes = encode(&s, "abc123", 42);
        let (h, back) = decode::<f32>(&bytes, Some("abc123")).unwrap();
        assert_eq!(h.step, 42);
        for id in s.ids() {
            let a: Vec<u32> = s.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(s.name(id), back.name(id));
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = encode(&sample_store(), "h", 0);
        for cut in [bytes.len() - 1, bytes.len() - 9, 20, 3] {
            assert!(decode::<f32>(&bytes[..cut], None).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn altered_hash_is_rejected() {
        let bytes = encode(&sample_store(), "h1", 0);
        match decode::<f32>(&bytes, Some("h2")) {
            Err(CheckpointError::ConfigMismatch { expected, found }) => {
                assert_eq!(expected, "h2");
                assert_eq!(found, "h1");
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }
}
