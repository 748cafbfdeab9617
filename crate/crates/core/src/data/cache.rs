//! Pre-tokenized corpus cache.
//!
//! Layout (little endian): magic `NBTOKC\0\0`, `u32` version, 64 hex bytes of
//! the vocabulary checksum, then one record per document:
//! `u32` source length, source bytes, `u64` ordinal, `u32` token count,
//! `u32` ids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{ingest, Document};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"NBTOKC\0\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 64;

pub fn write_cache<I>(path: &Path, vocab: &Vocab, docs: I) -> Result<u64>
where
    I: IntoIterator<Item = Result<Document>>,
{
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(vocab.checksum().as_bytes()).map_err(io)?;
    let mut n = 0;
    for doc in docs {
        let doc = doc?;
        let src = doc.id.source.as_bytes();
        w.write_all(&(src.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(src).map_err(io)?;
        w.write_all(&doc.id.ordinal.to_le_bytes()).map_err(io)?;
        w.write_all(&(doc.ids.len() as u32).to_le_bytes()).map_err(io)?;
        for id in &doc.ids {
            w.write_all(&id.to_le_bytes()).map_err(io)?;
        }
        n += 1;
    }
    w.flush().map_err(io)?;
    Ok(n)
}

/// Streams documents back out of a cache file.
pub struct CacheReader {
    path: PathBuf,
    reader: BufReader<File>,
    offset: u64,
    failed: bool,
}

/// Opens a cache, checking magic, version and that it was built with
/// `vocab`. A checksum mismatch is reported as `Ok(None)` (stale cache).
pub fn open_cache(path: &Path, vocab: &Vocab) -> Result<Option<CacheReader>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CacheReader {
        path: path.to_path_buf(),
        reader: BufReader::new(f),
        offset: 0,
        failed: false,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a token cache".into(),
        });
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::UpgradeNeeded {
            found: version,
            expected: VERSION,
        });
    }
    let mut sum = [0u8; 64];
    r.read_exact(&mut sum)?;
    if sum != vocab.checksum().as_bytes() {
        return Ok(None);
    }
    debug_assert_eq!(r.offset, HEADER_LEN);
    Ok(Some(r))
}

/// Documents from `cache` if it is valid for `vocab`, otherwise re-ingests
/// `corpus` and rewrites the cache first.
pub fn cached_documents<P: AsRef<Path>>(cache: &Path, corpus: &[P], vocab: &Vocab) -> Result<CacheReader> {
    if cache.exists() {
        if let Some(r) = open_cache(cache, vocab)? {
            return Ok(r);
        }
    }
    write_cache(cache, vocab, ingest(corpus, vocab))?;
    open_cache(cache, vocab)?.ok_or_else(|| Error::Format {
        offset: 12,
        msg: "freshly written cache failed its checksum".into(),
    })
}

impl CacheReader {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.reader.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: self.offset,
                    msg: "truncated token cache".into(),
                }
            } else {
                Error::io(&self.path, e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_doc(&mut self) -> Result<Option<Document>> {
        let mut first = [0u8; 4];
        match self.reader.read(&mut first[..1]) {
            Ok(0) => return Ok(None),
            Ok(_) => self.offset += 1,
            Err(e) => return Err(Error::io(&self.path, e)),
        }
        self.read_exact(&mut first[1..])?;
        let start = self.offset - 4;
        let mut src = vec![0u8; u32::from_le_bytes(first) as usize];
        self.read_exact(&mut src)?;
        let source = String::from_utf8(src).map_err(|_| Error::Format {
            offset: start,
            msg: "document source is not UTF-8".into(),
        })?;
        let mut ord = [0u8; 8];
        self.read_exact(&mut ord)?;
        let n = self.read_u32()? as usize;
        let mut raw = vec![0u8; n * 4];
        self.read_exact(&mut raw)?;
        let ids = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Some(Document::new(source, u64::from_le_bytes(ord), ids)))
    }
}

impl Iterator for CacheReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_doc() {
            Ok(d) => d.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}
