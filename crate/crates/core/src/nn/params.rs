use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

/// Optimizer treatment of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Default,
    /// Biases and scalar multipliers: trust ratio fixed to 1, no weight decay.
    NoTrust,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, group: ParamGroup) -> usize {
        self.params.push(Param {
            name: name.into(),
            tensor,
            group,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.params[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    group: p.group,
                })
                .collect(),
        }
    }

    /// Replace every tensor by the same-named, same-shaped one in `other`.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"BPSPARM1";

/// Binary checkpoint: a header, then per tensor a section holding its name,
/// group, shape and little-endian `f32` data, closed by a CRC-32 of the section.
pub fn write_params<W: Write>(mut w: W, params: &ParamSet<f32>) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let mut sec = Vec::with_capacity(32 + p.name.len() + 4 * p.tensor.len());
        sec.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        sec.extend_from_slice(p.name.as_bytes());
        sec.push(match p.group {
            ParamGroup::Default => 0,
            ParamGroup::NoTrust => 1,
        });
        sec.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            sec.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            sec.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&(sec.len() as u64).to_le_bytes())?;
        w.write_all(&sec)?;
        w.write_all(&crc32fast::hash(&sec).to_le_bytes())?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], NnError> {
    if buf.len() < n {
        return Err(NnError::Checkpoint("truncated section".into()));
    }
    let (a, b) = buf.split_at(n);
    *buf = b;
    Ok(a)
}

fn u32_le(buf: &mut &[u8]) -> Result<u32, NnError> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

fn u64_le(buf: &mut &[u8]) -> Result<u64, NnError> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().expect("8 bytes")))
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet<f32>, NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 8)? != MAGIC {
        return Err(NnError::Checkpoint("not a parameter checkpoint".into()));
    }
    let count = u32_le(&mut buf)?;
    let mut out = ParamSet::default();
    for _ in 0..count {
        let len = u64_le(&mut buf)? as usize;
        let sec = take(&mut buf, len)?;
        let crc = u32_le(&mut buf)?;
        if crc32fast::hash(sec) != crc {
            return Err(NnError::Checkpoint("section checksum mismatch".into()));
        }
        let mut s = sec;
        let name_len = u32_le(&mut s)? as usize;
        let name = std::str::from_utf8(take(&mut s, name_len)?)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let group = match take(&mut s, 1)?[0] {
            0 => ParamGroup::Default,
            1 => ParamGroup::NoTrust,
            g => return Err(NnError::Checkpoint(format!("unknown parameter group {g}"))),
        };
        let ndim = u32_le(&mut s)? as usize;
        let shape = (0..ndim)
            .map(|_| u64_le(&mut s).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = take(&mut s, 4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !s.is_empty() {
            return Err(NnError::Checkpoint(format!("trailing bytes in section {name}")));
        }
        out.push(name, Tensor::from_vec(&shape, data)?, group);
    }
    if !buf.is_empty() {
        return Err(NnError::Checkpoint("trailing bytes after the last section".into()));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<(), NnError> {
    let mut bytes = Vec::new();
    write_params(&mut bytes, params)?;
    std::fs::write(path, bytes).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_params(path: &Path) -> Result<ParamSet<f32>, NnError> {
    let f = std::fs::File::open(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    read_params(std::io::BufReader::new(f))
}
