//! BFNN checkpoints: `"BFNN"`, version `u16`, tensor count `u32`, then per
//! tensor a `u16`-length UTF-8 name, `u8` rank, `u32` dims and the `f64`
//! values, all little-endian.

use super::NeuralError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BFNN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

pub fn encode_checkpoint(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NeuralError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                NeuralError::Checkpoint(format!(
                    "truncated {what}: need {n} bytes at offset {}, have {}",
                    self.at,
                    self.bytes.len() - self.at
                ))
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, NeuralError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, NeuralError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Tensor>, NeuralError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Checkpoint(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(r.remaining() / 7));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| NeuralError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| NeuralError::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = r.take(n, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    if r.remaining() != 0 {
        return Err(NeuralError::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(tensors)
}
