//! Binary checkpoints.
//!
//! Little-endian layout: magic `UOE1`, format version `u32`, array count
//! `u32`, then per array its name (`u32` length + UTF-8 bytes), `ndim: u32`,
//! `dims: u64[ndim]`, dtype code `u8` and raw element data; a CRC32 of all
//! preceding bytes closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{Rng, RngState};
use crate::tensor::{numel_of, DType, Scalar, Tensor};

use super::train::{Trainable, TrainState};

pub const MAGIC: &[u8; 4] = b"UOE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl NamedArray {
    pub fn from_values<T: Scalar>(name: impl Into<String>, dims: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_of());
        values.iter().for_each(|v| v.write_le(&mut bytes));
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            dtype: T::DTYPE,
            bytes,
        }
    }

    pub fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "array `{}` holds {} data, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self.bytes.chunks(T::DTYPE.size_of()).map(T::read_le).collect())
    }
}

pub fn encode(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for &d in &a.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(a.dtype.code());
        out.extend_from_slice(&a.bytes);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a UOE1 checkpoint".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Format("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checksum mismatch (truncated or corrupted file)".into()));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let size = numel_of(&dims)
            .checked_mul(dtype.size_of())
            .ok_or_else(|| Error::Format(format!("array `{name}` is too large")))?;
        let bytes = r.take(size)?.to_vec();
        arrays.push(NamedArray { name, dims, dtype, bytes });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last array", body.len() - r.pos)));
    }
    Ok(arrays)
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(lo: f64, hi: f64) -> u64 {
    (lo as u64) | ((hi as u64) << 32)
}

/// Every array of a training state, in a fixed order.
pub fn state_arrays<T: Scalar, M: Trainable<T>>(state: &TrainState<M, T>) -> Vec<NamedArray> {
    let params = state.model.named_parameters();
    let mut out = Vec::with_capacity(3 * params.len() + 2);
    for (name, t) in &params {
        out.push(NamedArray::from_values(format!("param/{name}"), t.shape(), t.data()));
    }
    for (i, (name, t)) in params.iter().enumerate() {
        out.push(NamedArray::from_values(format!("adam.m/{name}"), t.shape(), &state.adam.m[i]));
        out.push(NamedArray::from_values(format!("adam.v/{name}"), t.shape(), &state.adam.v[i]));
    }
    let counters = [state.step, state.adam.t].map(split_u64).concat();
    out.push(NamedArray::from_values("state/counters", &[4], &counters));
    let rng = state.rng.state();
    let words = [rng.seed, rng.stream, rng.word_pos].map(split_u64).concat();
    out.push(NamedArray::from_values("state/rng", &[6], &words));
    out
}

pub fn save_checkpoint<T: Scalar, M: Trainable<T>>(state: &TrainState<M, T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&state_arrays(state)))?;
    Ok(())
}

/// Restores a state saved from a model with the same structure as
/// `template`; names, shapes and dtypes must all match.
pub fn load_checkpoint<T: Scalar, M: Trainable<T>>(path: &Path, template: TrainState<M, T>) -> Result<TrainState<M, T>> {
    let arrays = decode(&std::fs::read(path)?)?;
    restore(&arrays, template)
}

pub fn restore<T: Scalar, M: Trainable<T>>(arrays: &[NamedArray], mut state: TrainState<M, T>) -> Result<TrainState<M, T>> {
    let expected = state_arrays(&state);
    if arrays.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} arrays, the model expects {}",
            arrays.len(),
            expected.len()
        )));
    }
    for (a, e) in arrays.iter().zip(&expected) {
        if a.name != e.name || a.dims != e.dims || a.dtype != e.dtype {
            return Err(Error::Format(format!(
                "array `{}` {:?} {} does not match expected `{}` {:?} {}",
                a.name, a.dims, a.dtype, e.name, e.dims, e.dtype
            )));
        }
    }
    let n = state.adam.m.len();
    for (i, (_, slot)) in state.model.slots_mut().into_iter().enumerate() {
        *slot = Tensor::new(arrays[i].values()?, &arrays[i].dims)?;
    }
    for i in 0..n {
        state.adam.m[i] = arrays[n + 2 * i].values()?;
        state.adam.v[i] = arrays[n + 2 * i + 1].values()?;
    }
    let counters: Vec<f64> = arrays[3 * n].values()?;
    state.step = join_u64(counters[0], counters[1]);
    state.adam.t = join_u64(counters[2], counters[3]);
    let w: Vec<f64> = arrays[3 * n + 1].values()?;
    state.rng = Rng::from_state(RngState {
        seed: join_u64(w[0], w[1]),
        stream: join_u64(w[2], w[3]),
        word_pos: join_u64(w[4], w[5]),
    });
    Ok(state)
}
