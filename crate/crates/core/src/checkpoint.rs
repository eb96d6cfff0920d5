//! The `SISR` named-tensor container.
//!
//! Layout (little-endian): magic `b"SISR"`, format version `u32`, tensor
//! count `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, one `u32` per dimension and the `f64` payload. Checkpoints append a
//! trailer: a `u32` byte length followed by a UTF-8 JSON config snapshot.
//! Plain tensor files (images, saliency exports) end after the last tensor.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SISR";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor);

pub fn write_container<W: Write>(
    w: &mut W,
    tensors: &[NamedTensor],
    trailer: Option<&str>,
) -> io::Result<()> {
    let invalid = |msg: String| io::Error::new(io::ErrorKind::InvalidInput, msg);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| invalid("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len =
            u16::try_from(name.len()).map_err(|_| invalid(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank =
            u8::try_from(t.rank()).map_err(|_| invalid(format!("rank too large: {name}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d =
                u32::try_from(d).map_err(|_| invalid(format!("dimension too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    if let Some(json) = trailer {
        let len = u32::try_from(json.len()).map_err(|_| invalid("trailer too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(json.as_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    "tensor container",
                    format!("truncated at byte {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a container, returning its tensors and the trailer, if any.
pub fn parse_container(bytes: &[u8]) -> Result<(Vec<NamedTensor>, Option<String>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("tensor container", "bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "tensor container",
            format!("unsupported version {version}"),
        ));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::format("tensor container", e.to_string()))?
            .to_string();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = c.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::format("tensor container", "payload overflow"))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let trailer = if c.pos == bytes.len() {
        None
    } else {
        let len = c.u32()? as usize;
        let text = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::format("checkpoint trailer", e.to_string()))?;
        if c.pos != bytes.len() {
            return Err(Error::format(
                "tensor container",
                "trailing bytes after config block",
            ));
        }
        Some(text.to_string())
    };
    Ok((tensors, trailer))
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, tensors, None).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = read_bytes(path)?;
    Ok(parse_container(&bytes)?.0)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Parameters plus the JSON config snapshot that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_string(&self.config).expect("JSON value serializes");
        let mut buf = Vec::new();
        write_container(&mut buf, &self.tensors, Some(&json)).expect("in-memory write");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tensors, trailer) = parse_container(bytes)?;
        let trailer = trailer.ok_or_else(|| Error::format("checkpoint", "missing config block"))?;
        let config = serde_json::from_str(&trailer)
            .map_err(|e| Error::format("checkpoint config", e.to_string()))?;
        Ok(Self { tensors, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }

    /// The `kind` tag of the config snapshot.
    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(|k| k.as_str())
    }
}
