//! Binary embedding cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CIRC" | version u16 | dim u32 | count u64
//! count × ( kind u8 | id_len u16 | id bytes | dim × f32 )
//! crc32 u32   -- over every preceding byte
//! ```
//!
//! Records are written ordered by (kind, id) so a store has exactly one
//! byte representation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{EmbeddingKind, EmbeddingRecord, EmbeddingStore};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"CIRC";
pub const CACHE_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4 + 8;

pub fn write_cache<W: Write>(store: &EmbeddingStore, mut w: W) -> Result<()> {
    let dim = store.dim().unwrap_or(0);
    let records = store.records();
    let mut buf = Vec::with_capacity(HEADER_LEN + records.len() * (dim * 4 + 16) + 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in &records {
        let id = r.id.as_bytes();
        let id_len =
            u16::try_from(id.len()).map_err(|_| Error::invalid(format!("id `{}` longer than 65535 bytes", r.id)))?;
        buf.push(r.kind.code());
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for x in &r.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CacheCorrupt("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_cache<R: Read>(mut r: R) -> Result<EmbeddingStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::CacheCorrupt("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::CacheCorrupt("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CacheCorrupt("checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u16()?;
    if version != CACHE_VERSION {
        return Err(Error::CacheCorrupt(format!("unsupported version {version}")));
    }
    let dim = c.u32()? as usize;
    let count = c.u64()?;
    let mut store = if dim > 0 {
        EmbeddingStore::with_dim(dim)
    } else {
        EmbeddingStore::new()
    };
    for _ in 0..count {
        let code = c.take(1)?[0];
        let kind =
            EmbeddingKind::from_code(code).ok_or_else(|| Error::CacheCorrupt(format!("unknown record kind {code}")))?;
        let id_len = c.u16()? as usize;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|_| Error::CacheCorrupt("id is not UTF-8".into()))?
            .to_string();
        let raw = c.take(dim * 4)?;
        let vector = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store
            .insert(EmbeddingRecord { id, kind, vector })
            .map_err(|e| Error::CacheCorrupt(e.to_string()))?;
    }
    if c.pos != body.len() {
        return Err(Error::CacheCorrupt("trailing bytes after records".into()));
    }
    Ok(store)
}

pub fn read_cache_file(path: &Path) -> Result<EmbeddingStore> {
    read_cache(fs::File::open(path)?)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written cache.
pub fn write_cache_file(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_cache(store, &mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
