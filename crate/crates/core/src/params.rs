//! Named parameter collections and their on-disk format.
//!
//! Files are little-endian:
//!
//! ```text
//! magic    b"PCAB"
//! version  u32 (= 1)
//! tag      u32 length + UTF-8 bytes (e.g. "classifier", "neural", "checkpoint")
//! blocks   u32 count, then per block:
//!            u32 name length + UTF-8 name
//!            u32 rank, rank × u64 dims
//!            prod(dims) × f64
//! ```
//!
//! Integer state (step counters, RNG words) is stored in `f64` slots by bit
//! pattern; see [`ParamFile::push_words`].

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"PCAB";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape {
                op: "assign_flat",
                shapes: vec![vec![self.numel()], vec![flat.len()]],
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other`, entry by entry.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    /// A copy of `self + alpha * other`.
    pub fn plus_scaled(&self, alpha: T, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(alpha, other);
        out
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm_sq(&self) -> T {
        self.tensors().map(|t| t.norm_sq()).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum::<T>())
            .sum()
    }

    /// Registers every entry on `tape` and returns the handles in order.
    pub fn register(&self, tape: &mut Tape<T>, needs_grad: bool) -> Vec<Var> {
        self.tensors().map(|t| tape.leaf(t.clone(), needs_grad)).collect()
    }

    /// Collects the gradients of `vars` (as returned by [`Self::register`])
    /// into a set shaped like `self`.
    pub fn gradients(&self, grads: &Gradients<T>, vars: &[Var]) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|((n, _), &v)| (n.clone(), grads.wrt(v)))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Appends every entry to `file`, with names prefixed by `prefix/`.
    pub fn write_into(&self, file: &mut ParamFile, prefix: &str) {
        for (name, t) in self.iter() {
            file.push(format!("{prefix}/{name}"), t.shape().to_vec(), t.to_f64_vec());
        }
    }

    /// Overwrites every entry from the blocks `prefix/<name>` of `file`.
    pub fn read_from(&mut self, file: &ParamFile, prefix: &str) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let key = format!("{prefix}/{name}");
            let block = file
                .block(&key)
                .ok_or_else(|| Error::Format(format!("missing block `{key}`")))?;
            if block.dims != t.shape() {
                return Err(Error::Format(format!(
                    "block `{key}` has shape {:?}, expected {:?}",
                    block.dims,
                    t.shape()
                )));
            }
            *t = Tensor::from_f64(&block.dims, &block.data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory image of a parameter file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamFile {
    pub tag: String,
    pub blocks: Vec<Block>,
}

impl ParamFile {
    pub fn new(tag: impl Into<String>) -> Self {
        ParamFile {
            tag: tag.into(),
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.blocks.push(Block {
            name: name.into(),
            dims,
            data,
        });
    }

    /// Stores integers losslessly as `f64` bit patterns.
    pub fn push_words(&mut self, name: impl Into<String>, words: &[u64]) {
        let data = words.iter().map(|&w| f64::from_bits(w)).collect();
        self.push(name, vec![words.len()], data);
    }

    pub fn words(&self, name: &str) -> Result<Vec<u64>> {
        let b = self
            .block(name)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))?;
        Ok(b.data.iter().map(|x| x.to_bits()).collect())
    }

    /// Stores UTF-8 text, one byte per element.
    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        let words: Vec<u64> = text.bytes().map(u64::from).collect();
        self.push_words(name, &words);
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let bytes = self
            .words(name)?
            .into_iter()
            .map(|w| u8::try_from(w).map_err(|_| Error::Format(format!("block `{name}` is not text"))))
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| Error::Format(format!("block `{name}` is not UTF-8")))
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.block(name) {
            Some(b) if b.data.len() == 1 => Ok(b.data[0]),
            _ => Err(Error::Format(format!("missing scalar `{name}`"))),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, &self.tag)?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            write_str(&mut w, &b.name)?;
            w.write_all(&(b.dims.len() as u32).to_le_bytes())?;
            for &d in &b.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &b.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let tag = read_str(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("block `{name}` has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                dims.push(u64::from_le_bytes(buf) as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| Error::Format(format!("block `{name}` is too large")))?;
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(Block { name, dims, data });
        }
        Ok(ParamFile { tag, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::Format(format!("string of length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}
