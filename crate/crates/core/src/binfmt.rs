//! Little-endian binary containers: the `UMAW` named-tensor file and the
//! byte-level helpers shared with the `UMAD` dataset format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const PARAMS_MAGIC: &[u8; 4] = b"UMAW";
pub const PARAMS_VERSION: u32 = 1;

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Writes a length field; lengths above `u32::MAX` cannot be represented.
    pub fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::invalid(format!("length {v} exceeds the u32 range")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "truncated: wanted {n} bytes, {} left",
                self.buf.len() - self.pos
            ))),
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.error("element count overflows"))?;
        let b = self.take(bytes)?;
        Ok(b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {v}, expected {version}"),
            });
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn encode_params(params: &ParamSet) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(PARAMS_MAGIC);
    w.u32(PARAMS_VERSION);
    w.len(params.len())?;
    for (name, t) in params.iter() {
        w.len(name.len())?;
        w.bytes(name.as_bytes());
        w.len(t.rank())?;
        for &d in t.shape() {
            w.len(d)?;
        }
        w.f64s(t.data());
    }
    Ok(w.into_inner())
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = ByteReader::new(bytes);
    r.header(PARAMS_MAGIC, PARAMS_VERSION)?;
    let count = r.usize()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.usize()?;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format {
                offset: at,
                msg: format!("parameter name is not UTF-8: {e}"),
            })?
            .to_owned();
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.error("tensor size overflows"))?;
        let data = r.f64s(n)?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after last entry"));
    }
    Ok(params)
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    write_atomic(path, &encode_params(params)?)
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    decode_params(&fs::read(path)?)
}
