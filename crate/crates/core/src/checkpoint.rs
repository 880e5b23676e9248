//! Tensor container shared by model checkpoints and persisted scenes.
//!
//! ```text
//! proj.comp0.roi.weight 196x19 f32 0
//! proj.comp0.roi.bias 196 f32 14896
//!
//! <little-endian f32 blob>
//! ```
//!
//! One header line per tensor (`name shape dtype byte-offset`), a blank line,
//! then the row-major data of every tensor back to back.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Params;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{name} with shape {shape:?}"), data.len()));
        }
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid tensor name {name:?}")));
        }
        Ok(Tensor { name, shape, data })
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn push(&mut self, t: Tensor) -> Result<()> {
        if self.get(&t.name).is_some() {
            return Err(Error::Config(format!("duplicate tensor {}", t.name)));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {name}")))
    }

    /// Appends every block of `params`, prefixing names with `prefix`.
    pub fn push_params<T: Real, P: Params<T>>(&mut self, prefix: &str, params: &P) -> Result<()> {
        for b in params.blocks() {
            let data = b.data.iter().map(|v| v.f64() as f32).collect();
            self.push(Tensor::new(format!("{prefix}{}", b.name), b.shape, data)?)?;
        }
        Ok(())
    }

    /// Overwrites every block of `params` from tensors named `prefix + block name`.
    pub fn fill_params<T: Real, P: Params<T>>(&self, prefix: &str, params: &mut P) -> Result<()> {
        for b in params.blocks_mut() {
            let name = format!("{prefix}{}", b.name);
            let t = self.require(&name)?;
            if t.shape != b.shape {
                return Err(Error::shape(
                    format!("{name} {}", shape_str(&b.shape)),
                    shape_str(&t.shape),
                ));
            }
            for (dst, &src) in b.data.iter_mut().zip(&t.data) {
                *dst = T::of(src as f64);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let mut offset = 0usize;
        for t in &self.tensors {
            let _ = writeln!(header, "{} {} f32 {}", t.name, shape_str(&t.shape), offset);
            offset += 4 * t.data.len();
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .map(|p| p + 1)
            .or_else(|| (bytes.first() == Some(&b'\n')).then_some(0))
            .ok_or_else(|| parse_err(1, "missing blank line after header".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|e| parse_err(1, e.to_string()))?;
        let blob = &bytes[split + 1..];
        let mut ck = Checkpoint::default();
        let mut expected_offset = 0usize;
        for (n, line) in header.lines().enumerate() {
            let lineno = n + 1;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, dtype, offset] = parts[..] else {
                return Err(parse_err(lineno, format!("expected 4 fields, got {}", parts.len())));
            };
            if dtype != "f32" {
                return Err(parse_err(lineno, format!("unsupported dtype {dtype}")));
            }
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(lineno, format!("bad shape {shape}: {e}")))?;
            let offset: usize = offset
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad offset {offset}: {e}")))?;
            if offset != expected_offset {
                return Err(parse_err(
                    lineno,
                    format!("offset {offset}, expected {expected_offset}"),
                ));
            }
            let len: usize = shape.iter().product();
            let end = offset + 4 * len;
            let raw = blob
                .get(offset..end)
                .ok_or_else(|| parse_err(lineno, format!("data for {name} truncated")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.push(Tensor::new(name, shape, data).map_err(|e| parse_err(lineno, e.to_string()))?)?;
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(parse_err(
                header.lines().count() + 1,
                format!("{} trailing bytes", blob.len() - expected_offset),
            ));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so readers never see a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(path, &bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}
