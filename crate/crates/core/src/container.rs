//! Binary tensor container and named-tensor archives.
//!
//! A tensor file is `XMDT`, a version byte, a `u8` rank, `u32` dims, the
//! `f64` payload and a CRC32 of everything before it, all little-endian.
//! Archives (`XMCK` for checkpoints) hold a `u32` count followed by named
//! tensor records under the same framing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"XMDT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMCK";
pub const VERSION: u8 = 1;

fn push_record(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Parameter(format!("rank {} too large for the container", t.rank())))?;
    if t.shape().contains(&0) {
        return Err(Error::Parameter(format!("zero-length dimension in {:?}", t.shape())));
    }
    buf.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Parameter(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("truncated: needed {n} more bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(Error::Format {
                    offset: at,
                    message: "zero-length dimension".into(),
                });
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or(Error::Format {
                offset: self.pos,
                message: format!("shape {shape:?} overflows"),
            })?;
        let payload = self.take(n * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

fn frame(magic: &[u8; 4], body: Vec<u8>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(body.len() + 9);
    buf.extend_from_slice(magic);
    buf.push(VERSION);
    buf.extend_from_slice(&body);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Checks magic, version and CRC, returning a reader over the body.
fn unframe<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<Reader<'a>> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        });
    }
    if bytes.len() < 9 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: "truncated header".into(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}", bytes[4]),
        });
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..split]);
    if stored != actual {
        return Err(Error::Format {
            offset: split,
            message: format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        });
    }
    Ok(Reader {
        bytes: &bytes[..split],
        pos: 5,
    })
}

fn finish(r: &Reader) -> Result<()> {
    if r.pos != r.bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes", r.bytes.len() - r.pos),
        });
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    push_record(&mut body, t)?;
    Ok(frame(TENSOR_MAGIC, body))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = unframe(TENSOR_MAGIC, bytes)?;
    let t = r.record()?;
    finish(&r)?;
    Ok(t)
}

pub fn encode_archive(magic: &[u8; 4], entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let count = u32::try_from(entries.len()).map_err(|_| Error::Parameter("too many entries".into()))?;
    body.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Parameter(format!("name too long: {name}")))?;
        body.extend_from_slice(&len.to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        push_record(&mut body, t)?;
    }
    Ok(frame(magic, body))
}

pub fn decode_archive(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = unframe(magic, bytes)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "entry name is not UTF-8".into(),
        })?;
        entries.push((name, r.record()?));
    }
    finish(&r)?;
    Ok(entries)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_container(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensor(t)?)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&read_bytes(path.as_ref())?)
}

pub fn write_archive(path: impl AsRef<Path>, magic: &[u8; 4], entries: &[(String, Tensor)]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_archive(magic, entries)?)
}

pub fn read_archive(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<Vec<(String, Tensor)>> {
    decode_archive(magic, &read_bytes(path.as_ref())?)
}
