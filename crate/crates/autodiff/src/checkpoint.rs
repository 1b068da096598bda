//! Flat container of named arrays.
//!
//! Layout (all header lines are UTF-8, `\n`-terminated):
//!
//! ```text
//! tensorpack 1
//! meta <key>=<value>
//! tensor <name> <dtype> <d0,d1,...> <byte offset>
//! end
//! <payload: little-endian values, offsets relative to payload start>
//! ```
//!
//! Names and keys may not contain whitespace or `=`; values may not contain
//! newlines. Arrays are stored as `f32` or `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &str = "tensorpack 1";

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::F64(_) => DType::F64,
        }
    }

    fn byte_len(&self) -> usize {
        let n: usize = self.shape().iter().product();
        n * self.dtype().size_of()
    }

    /// Convert to the requested element type.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            Stored::F32(t) => t.cast(),
            Stored::F64(t) => t.cast(),
        }
    }
}

/// In-memory contents of one container file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorPack {
    meta: BTreeMap<String, String>,
    tensors: Vec<(String, Stored)>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::Format(format!("invalid {kind} {s:?}")));
    }
    Ok(())
}

impl TensorPack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        check_token("meta key", key)?;
        let value = value.to_string();
        if value.contains('\n') {
            return Err(Error::Format(format!("meta value for {key} contains a newline")));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parse a meta value, failing with a format error when absent or malformed.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Format(format!("missing meta key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value {raw:?} for meta key {key}")))
    }

    /// Add an array stored as `f32`.
    pub fn push<T: Element>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.push_stored(name, Stored::F32(t.cast()))
    }

    /// Add an array stored at full `f64` precision.
    pub fn push_f64(&mut self, name: &str, t: &Tensor<f64>) -> Result<()> {
        self.push_stored(name, Stored::F64(t.clone()))
    }

    fn push_stored(&mut self, name: &str, s: Stored) -> Result<()> {
        check_token("tensor name", name)?;
        if self.get(name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name.to_string(), s));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Stored> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(Stored::to_tensor)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} {} {offset}\n", t.dtype(), dims.join(",")));
            offset += t.byte_len();
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(offset);
        for (_, t) in &self.tensors {
            match t {
                Stored::F32(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
                Stored::F64(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Format("unexpected end of header".into()));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(Error::Format(format!("bad magic line {line:?}")));
        }
        let mut pack = TensorPack::new();
        let mut entries: Vec<(String, DType, Vec<usize>, usize)> = Vec::new();
        loop {
            next(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("bad meta line {line:?}")))?;
                pack.set_meta(k, v)?;
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let bad = || Error::Format(format!("bad tensor line {line:?}"));
                let [name, dtype, dims, offset] = parts[..] else {
                    return Err(bad());
                };
                let dtype = match dtype {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(bad()),
                };
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad())?;
                let offset = offset.parse::<usize>().map_err(|_| bad())?;
                entries.push((name.to_string(), dtype, shape, offset));
            } else {
                return Err(Error::Format(format!("unrecognized header line {line:?}")));
            }
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut expected = 0usize;
        for (name, dtype, shape, offset) in entries {
            crate::tensor::validate_shape(&shape)?;
            let n: usize = shape.iter().product();
            let len = n * dtype.size_of();
            if offset != expected || offset + len > payload.len() {
                return Err(Error::Format(format!("tensor {name} payload out of range")));
            }
            let bytes = &payload[offset..offset + len];
            let stored = match dtype {
                DType::F32 => Stored::F32(Tensor::new(
                    shape,
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
                DType::F64 => Stored::F64(Tensor::new(
                    shape,
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
            };
            pack.push_stored(&name, stored)?;
            expected = offset + len;
        }
        if expected != payload.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(pack)
    }

    /// Write atomically: the file appears complete or not at all.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp~");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorPack {
        let mut p = TensorPack::new();
        p.set_meta("preset", "desk").unwrap();
        p.set_meta("iter", 42).unwrap();
        p.push(
            "a.w",
            &Tensor::new([2, 3], vec![1.0f32, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap(),
        )
        .unwrap();
        p.push_f64("b", &Tensor::new([1], vec![std::f64::consts::PI]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = TensorPack::read_from(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.meta_parse::<usize>("iter").unwrap(), 42);
        assert_eq!(q.tensor::<f64>("b").unwrap().item(), std::f64::consts::PI);
    }

    #[test]
    fn header_is_plain_text() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.starts_with(
            "tensorpack 1\nmeta iter=42\nmeta preset=desk\ntensor a.w f32 2,3 0\ntensor b f64 1 24\nend\n"
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(TensorPack::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn names_are_validated() {
        let mut p = TensorPack::new();
        assert!(p.push("has space", &Tensor::<f32>::zeros([1])).is_err());
        assert!(p.set_meta("k", "line\nbreak").is_err());
    }
}
