//! On-disk formats shared with the exporter: the embedding binary and JSON
//! Lines helpers.
//!
//! Embedding file, all integers little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `TOMC`                   |
//! | 4      | 4    | format version, u32 = 1        |
//! | 8      | 4    | dtype code, u32 (0 = f32)      |
//! | 12     | 4    | dim, u32                       |
//! | 16     | 8    | count, u64                     |
//! | 24     | ...  | `count * dim` values, row-major |
//!
//! Format errors carry the byte offset of the offending field, or for
//! truncation the offset at which the data ran out.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"TOMC";
pub const EMBEDDING_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const EMBEDDING_HEADER_LEN: u64 = 24;

/// A reader that tracks its byte offset and optionally a running CRC32.
pub(crate) struct OffsetReader<R> {
    inner: R,
    offset: u64,
    crc: Option<crc32fast::Hasher>,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self {
            inner,
            offset: 0,
            crc: None,
        }
    }

    pub(crate) fn with_crc(inner: R) -> Self {
        Self {
            inner,
            offset: 0,
            crc: Some(crc32fast::Hasher::new()),
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn crc(&self) -> Option<u32> {
        self.crc.as_ref().map(|h| h.clone().finalize())
    }

    pub(crate) fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    self.offset += filled as u64;
                    return Err(Error::format(
                        self.offset,
                        format!("unexpected end of file reading {what}"),
                    ));
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(format!("reading {what}"), e)),
            }
        }
        if let Some(h) = self.crc.as_mut() {
            h.update(buf);
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    /// True if no bytes remain.
    pub(crate) fn at_eof(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("checking end of file", e)),
            }
        }
    }
}

/// A writer that mirrors everything it writes into a CRC32.
pub(crate) struct CrcWriter<W> {
    inner: W,
    crc: crc32fast::Hasher,
}

impl<W: Write> CrcWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self {
            inner,
            crc: crc32fast::Hasher::new(),
        }
    }

    pub(crate) fn finish(self) -> (W, u32) {
        (self.inner, self.crc.finalize())
    }
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub count: u64,
}

impl EmbeddingHeader {
    pub(crate) fn read<R: Read>(r: &mut OffsetReader<R>) -> Result<Self> {
        let start = r.offset();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic, "embedding magic")?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::format(
                start,
                format!("bad embedding magic {magic:?}, expected \"TOMC\""),
            ));
        }
        let version = r.read_u32("embedding version")?;
        if version != EMBEDDING_VERSION {
            return Err(Error::format(
                start + 4,
                format!("unsupported embedding format version {version}"),
            ));
        }
        let dtype = r.read_u32("dtype code")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(
                start + 8,
                format!("unsupported dtype code {dtype}"),
            ));
        }
        let dim = r.read_u32("dim")?;
        if dim == 0 {
            return Err(Error::format(start + 12, "dim must be positive"));
        }
        let count = r.read_u64("count")?;
        Ok(Self {
            dim: dim as usize,
            count,
        })
    }

    pub(crate) fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&DTYPE_F32.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.count.to_le_bytes())
    }
}

/// Streaming reader over an embedding file's rows.
pub struct EmbeddingReader<R> {
    reader: OffsetReader<R>,
    header: EmbeddingHeader,
    next_row: u64,
    buf: Vec<u8>,
}

impl EmbeddingReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::format(0, format!("cannot open {}: {e}", path.display())))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> EmbeddingReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        Self::from_offset_reader(OffsetReader::new(inner))
    }

    pub(crate) fn from_offset_reader(mut reader: OffsetReader<R>) -> Result<Self> {
        let header = EmbeddingHeader::read(&mut reader)?;
        Ok(Self {
            reader,
            buf: vec![0u8; header.dim * 4],
            header,
            next_row: 0,
        })
    }

    pub fn header(&self) -> EmbeddingHeader {
        self.header
    }

    /// Read the next row as f32 into `out`. Returns `false` once all rows are read.
    pub fn read_row_f32(&mut self, out: &mut Vec<f32>) -> Result<bool> {
        if self.next_row == self.header.count {
            return Ok(false);
        }
        let start = self.reader.offset();
        let what = format!("row {}", self.next_row);
        self.reader.read_exact(&mut self.buf, &what)?;
        out.clear();
        for (j, chunk) in self.buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::format(
                    start + 4 * j as u64,
                    format!("non-finite value in {what}"),
                ));
            }
            out.push(v);
        }
        self.next_row += 1;
        Ok(true)
    }

    pub(crate) fn into_inner(self) -> OffsetReader<R> {
        self.reader
    }

    /// Read the remaining rows into a matrix.
    pub fn read_all(&mut self) -> Result<EmbeddingMatrix> {
        let remaining = (self.header.count - self.next_row) as usize;
        let mut data = Vec::with_capacity(remaining.saturating_mul(self.header.dim));
        let mut row = Vec::with_capacity(self.header.dim);
        while self.read_row_f32(&mut row)? {
            data.extend(row.iter().map(|&v| f64::from(v)));
        }
        Ok(EmbeddingMatrix::from_trusted(self.header.dim, data))
    }
}

impl<R: Read> Iterator for EmbeddingReader<R> {
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut row = Vec::with_capacity(self.header.dim);
        match self.read_row_f32(&mut row) {
            Ok(true) => Some(Ok(row.into_iter().map(f64::from).collect())),
            Ok(false) => None,
            Err(e) => {
                self.next_row = self.header.count;
                Some(Err(e))
            }
        }
    }
}

/// Narrow a row to f32, rejecting values that overflow.
pub(crate) fn to_f32_row(row: &[f64]) -> Result<Vec<f32>> {
    row.iter()
        .map(|&v| {
            let x = v as f32;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::InvalidEmbedding(format!("{v} overflows f32")))
            }
        })
        .collect()
}

pub(crate) fn write_f32_row<W: Write>(w: &mut W, row: &[f32]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(row.len() * 4);
    for v in row {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub fn write_embeddings_to<W: Write>(w: &mut W, matrix: &EmbeddingMatrix) -> Result<()> {
    let io = |e| Error::io("writing embeddings", e);
    EmbeddingHeader {
        dim: matrix.dim(),
        count: matrix.rows() as u64,
    }
    .write(w)
    .map_err(io)?;
    for row in matrix.iter_rows() {
        write_f32_row(w, &to_f32_row(row)?).map_err(io)?;
    }
    Ok(())
}

pub fn write_embeddings(path: impl AsRef<Path>, matrix: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_embeddings_to(&mut w, matrix)?;
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let mut reader = EmbeddingReader::open(path)?;
    let m = reader.read_all()?;
    let mut rest = reader.into_inner();
    if !rest.at_eof()? {
        return Err(Error::format(
            rest.offset(),
            "trailing bytes after last row",
        ));
    }
    Ok(m)
}

/// Parse a JSON Lines file, skipping blank lines. Errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::JsonLines {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl_to<W: Write, T: Serialize>(w: &mut W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("writing JSON lines", e))?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(&mut w, items)?;
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
