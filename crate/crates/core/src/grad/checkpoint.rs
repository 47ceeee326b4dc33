//! Parameter checkpoint file format: a plain-text header listing tensor
//! names and shapes (one per line), followed by the flat tensor data as
//! little-endian 64-bit floats in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "advoice-checkpoint";

/// An ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    pub entries: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensors {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        self.entries.push(NamedTensor { name, shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        writeln!(w, "{MAGIC} {}", self.entries.len())?;
        for e in &self.entries {
            write!(w, "{}", e.name)?;
            for d in &e.shape {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
        }
        for e in &self.entries {
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // Header is everything up to the end of the (count+1)-th newline.
        let mut lines = Vec::new();
        let first_nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint: missing header".into()))?;
        let first = std::str::from_utf8(&bytes[..first_nl])
            .map_err(|_| Error::Format("checkpoint: header is not utf-8".into()))?;
        let mut parts = first.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("checkpoint: bad tensor count".into()))?;
        let mut pos = first_nl + 1;
        for _ in 0..count {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("checkpoint: truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| Error::Format("checkpoint: header is not utf-8".into()))?;
            lines.push(line.to_string());
            pos += nl + 1;
        }

        let mut out = NamedTensors::default();
        let mut data_pos = pos;
        for line in lines {
            let mut parts = line.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| Error::Format("checkpoint: empty tensor line".into()))?
                .to_string();
            let shape: Vec<usize> = parts
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Format(format!("checkpoint: bad dim `{s}` for {name}")))
                })
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let need = n * 8;
            if data_pos + need > bytes.len() {
                return Err(Error::Format(format!("checkpoint: truncated data for {name}")));
            }
            let data = bytes[data_pos..data_pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data_pos += need;
            out.entries.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut t = NamedTensors::default();
        t.push("w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, -7.25]);
        t.push("b", vec![2], vec![0.5, -0.5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        t.save(&path).unwrap();
        let back = NamedTensors::load(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_garbage() {
        assert!(NamedTensors::from_bytes(b"not a checkpoint\n").is_err());
        assert!(NamedTensors::from_bytes(b"advoice-checkpoint 1\nw 4 4\nshort").is_err());
    }
}
