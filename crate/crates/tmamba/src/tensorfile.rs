//! "TMTN" binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TMTN" | version u8 | entry count u32
//! name table: per entry, u32 byte length + UTF-8 name
//! entries, in name-table order: dtype u8 | rank u8 | rank x u32 extents | payload
//! ```
//!
//! Dtype codes are 1 = f64, 2 = i32, 3 = u8.

use std::fs;
use std::path::Path;

use tmamba_core::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"TMTN";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("entry {name:?} holds {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("entry {0:?} not found")]
    Missing(String),
    #[error("entry {0:?} holds non-finite values")]
    NonFinite(String),
    #[error("invalid entry {name:?}: {reason}")]
    Invalid { name: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FormatError>;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn code(&self) -> u8 {
        match self {
            TensorData::F64(_) => 1,
            TensorData::I32(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    pub fn dtype(&self) -> &'static str {
        dtype_name(self.code())
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dtype_name(code: u8) -> &'static str {
    match code {
        1 => "f64",
        2 => "i32",
        3 => "u8",
        _ => "unknown",
    }
}

fn dtype_size(code: u8) -> Option<usize> {
    match code {
        1 => Some(8),
        2 => Some(4),
        3 => Some(1),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn f64(shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            shape: shape.to_vec(),
            data: TensorData::F64(data),
        }
    }

    pub fn u8(shape: &[usize], data: Vec<u8>) -> Self {
        Self {
            shape: shape.to_vec(),
            data: TensorData::U8(data),
        }
    }

    pub fn i32(shape: &[usize], data: Vec<i32>) -> Self {
        Self {
            shape: shape.to_vec(),
            data: TensorData::I32(data),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::f64(t.shape(), t.data().to_vec())
    }
}

/// Ordered named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub entries: Vec<(String, Entry)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry, replacing any earlier one of the same name.
    pub fn insert(&mut self, name: &str, entry: Entry) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name.to_string(), entry)),
        }
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) {
        self.insert(name, Entry::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| FormatError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.get(name)?;
        match &e.data {
            TensorData::F64(v) => Tensor::new(&e.shape, v.clone()).map_err(|err| FormatError::Invalid {
                name: name.to_string(),
                reason: err.to_string(),
            }),
            other => Err(mismatch(name, "f64", other)),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            TensorData::U8(v) => Ok(v),
            other => Err(mismatch(name, "u8", other)),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[i32]> {
        match &self.get(name)?.data {
            TensorData::I32(v) => Ok(v),
            other => Err(mismatch(name, "i32", other)),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&u32_of(self.entries.len(), "entry count")?.to_le_bytes());
        for (name, _) in &self.entries {
            out.extend_from_slice(&u32_of(name.len(), name)?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for (name, e) in &self.entries {
            let numel: usize = e.shape.iter().product();
            if numel != e.data.len() || e.shape.len() > u8::MAX as usize {
                return Err(FormatError::Invalid {
                    name: name.clone(),
                    reason: format!("shape {:?} does not fit {} values", e.shape, e.data.len()),
                });
            }
            out.push(e.data.code());
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend_from_slice(&u32_of(*d, name)?.to_le_bytes());
            }
            match &e.data {
                TensorData::F64(v) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(FormatError::NonFinite(name.clone()));
                    }
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32("entry count")? as usize;
        let mut names = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let raw = r.take(len, "name")?;
            let name = String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Invalid {
                name: format!("#{i}"),
                reason: "name is not UTF-8".into(),
            })?;
            names.push(name);
        }
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let code = r.u8("dtype")?;
            let size = dtype_size(code).ok_or(FormatError::BadDtype(code))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .and_then(|n| n.checked_mul(size))
                .ok_or_else(|| FormatError::Truncated(format!("extents of {name:?} overflow")))?;
            let raw = r.take(numel, &name)?;
            let data = match code {
                1 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                        .collect(),
                ),
                2 => TensorData::I32(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("four bytes")))
                        .collect(),
                ),
                _ => TensorData::U8(raw.to_vec()),
            };
            entries.push((name, Entry { shape, data }));
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Invalid {
                name: String::new(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { entries })
    }
}

fn mismatch(name: &str, expected: &'static str, found: &TensorData) -> FormatError {
    FormatError::DtypeMismatch {
        name: name.to_string(),
        expected,
        found: found.dtype(),
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| FormatError::Invalid {
        name: what.to_string(),
        reason: format!("{v} exceeds the 32-bit field"),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                FormatError::Truncated(format!(
                    "{what} needs {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

pub fn read_tensorfile(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
    TensorFile::decode(&bytes)
}

pub fn write_tensorfile(path: &Path, file: &TensorFile) -> Result<()> {
    let bytes = file.encode()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    }
    fs::write(path, bytes).map_err(|source| io_err(path, source))
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}
