//! Named tensor table on disk, used for checkpoints and feature exports.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ADSD" | u32 version | u32 entry count
//! entry: u32 name length | name (UTF-8) | u8 dtype | u32 ndim | u64 dims[ndim]
//!        | u64 byte length | raw little-endian data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ADSD";
pub const VERSION: u32 = 1;

const MAX_NDIM: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::U64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: DType, raw: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => TensorData::U8(raw.to_vec()),
            DType::U64 => TensorData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Ordered name -> tensor map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorTable {
    pub entries: BTreeMap<String, Entry>,
}

impl TensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: TensorData) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "entry data does not match shape");
        self.entries.insert(
            name.into(),
            Entry {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.insert(name, &[bytes.len()], TensorData::U8(bytes.to_vec()));
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("entry `{name}` is not a byte string"))),
        }
    }

    pub fn insert_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        self.insert(name, &[values.len()], TensorData::U64(values.to_vec()));
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("entry `{name}` is not a u64 vector"))),
        }
    }

    pub fn insert_f64s(&mut self, name: impl Into<String>, values: &[f64]) {
        self.insert(name, &[values.len()], TensorData::F64(values.to_vec()));
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.get(name)?.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("entry `{name}` is not an f64 vector"))),
        }
    }

    /// Stores every tensor of `params` under `prefix`.
    pub fn insert_params<T: Real>(&mut self, prefix: &str, params: &Parameters<T>) {
        for (name, t) in params.iter() {
            let data = match T::DTYPE {
                DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
                _ => TensorData::F64(t.to_f64_vec()),
            };
            self.insert(format!("{prefix}{name}"), t.shape(), data);
        }
    }

    /// Collects every floating-point entry under `prefix` into parameters.
    /// The stored dtype must match `T` so that values round-trip exactly.
    pub fn params<T: Real>(&self, prefix: &str) -> Result<Parameters<T>> {
        let mut out = Parameters::new();
        for (name, e) in self.entries.range(prefix.to_string()..) {
            let Some(short) = name.strip_prefix(prefix) else { break };
            let data: Vec<T> = match (&e.data, T::DTYPE) {
                (TensorData::F32(v), DType::F32) => v.iter().map(|&x| T::of(x as f64)).collect(),
                (TensorData::F64(v), DType::F64) => v.iter().map(|&x| T::of(x)).collect(),
                (d, want) => {
                    return Err(Error::InvalidArgument(format!(
                        "entry `{name}` has dtype {:?}, expected {want:?}",
                        d.dtype()
                    )))
                }
            };
            out.insert(short, Tensor::from_vec(&e.shape, data));
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.data.dtype().code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let bytes = e.data.bytes();
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::decode(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut table = TensorTable::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::decode(at + 4, "entry name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::decode(at, "unknown dtype"))?;
            let at = r.pos;
            let ndim = r.u32()?;
            if ndim > MAX_NDIM {
                return Err(Error::decode(at, format!("{ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut numel: u64 = 1;
            for _ in 0..ndim {
                let d = r.u64()?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::decode(r.pos - 8, "shape overflows"))?;
                shape.push(usize::try_from(d).map_err(|_| Error::decode(r.pos - 8, "dimension too large"))?);
            }
            let at = r.pos;
            let byte_len = r.u64()?;
            let expected = numel.checked_mul(dtype.size() as u64);
            if expected != Some(byte_len) {
                return Err(Error::decode(
                    at,
                    format!("entry `{name}` declares {byte_len} bytes for shape {shape:?}"),
                ));
            }
            let len = usize::try_from(byte_len).map_err(|_| Error::decode(at, "entry too large"))?;
            let raw = r.take(len)?;
            if table.entries.contains_key(&name) {
                return Err(Error::decode(at, format!("duplicate entry `{name}`")));
            }
            table.entries.insert(
                name,
                Entry {
                    shape,
                    data: TensorData::from_bytes(dtype, raw),
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::decode(r.pos, "trailing bytes"));
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a truncated file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::decode(
                    self.pos,
                    format!("need {n} bytes, {} remain", self.bytes.len() - self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
