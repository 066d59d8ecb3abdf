//! Immutable caption datastore with exact flat nearest-neighbour search.
//!
//! Rows are stored contiguously as f32 (the on-disk precision) and scored in
//! f64. Search scans fixed-size row blocks, keeps a bounded heap per block and
//! merges the block winners, so results are exact and identical for any
//! thread count. Ties are broken by ascending caption id.
//!
//! Scores: [`Metric::L2`] reports the squared Euclidean distance (lower is
//! better); [`Metric::Cosine`] reports cosine similarity (higher is better).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, EmbeddingVector};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::format::{self, CrcWriter, EmbeddingHeader, EmbeddingReader, OffsetReader};

pub const STORE_MAGIC: [u8; 4] = *b"TOMS";
pub const STORE_VERSION: u32 = 1;

const SEARCH_BLOCK_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: u64,
    pub text: String,
    #[serde(rename = "source", default)]
    pub source_tag: String,
}

impl CaptionRecord {
    pub fn new(id: u64, text: impl Into<String>, source_tag: impl Into<String>) -> Self {
        Self {
            id,
            text: text.into(),
            source_tag: source_tag.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    L2,
    Cosine,
}

impl Metric {
    pub fn code(self) -> u32 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Metric::L2),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "L2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub id: u64,
    /// Row of the hit in the store.
    pub row: usize,
    pub rank: usize,
    pub score: f64,
}

/// Captions fetched for one query.
#[derive(Debug, Clone)]
pub struct RetrievalBundle {
    /// Training target; absent for inference bundles.
    pub target: Option<CaptionRecord>,
    /// Prompt captions, best first.
    pub prompt_captions: Vec<CaptionRecord>,
    pub raw_results: Vec<SearchResult>,
    /// One row per prompt caption, in the same order.
    pub neighbor_embeddings: EmbeddingMatrix,
}

/// Search candidate ordered so that "greater" means "worse".
#[derive(Debug, Clone, Copy)]
struct Candidate {
    // lower is better: distance for L2, negated similarity for cosine
    key: f64,
    id: u64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key
            .total_cmp(&other.key)
            .then_with(|| self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    metric: Metric,
    embeddings: Vec<f32>,
    norms: Vec<f64>,
    records: Vec<CaptionRecord>,
    index: HashMap<u64, usize>,
}

/// Row-at-a-time construction, for stores too large to stage as one matrix.
#[derive(Debug)]
pub struct DatastoreBuilder {
    store: Datastore,
}

impl DatastoreBuilder {
    pub fn new(dim: usize, metric: Metric) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BuildError("dim must be positive".into()));
        }
        Ok(Self {
            store: Datastore {
                dim,
                metric,
                embeddings: Vec::new(),
                norms: Vec::new(),
                records: Vec::new(),
                index: HashMap::new(),
            },
        })
    }

    pub fn reserve(&mut self, rows: usize) {
        self.store
            .embeddings
            .reserve(rows.saturating_mul(self.store.dim));
        self.store.norms.reserve(rows);
        self.store.records.reserve(rows);
    }

    pub fn push(&mut self, row: &[f64], record: CaptionRecord) -> Result<()> {
        if row.len() != self.store.dim {
            return Err(self.dim_error(row.len()));
        }
        let row = format::to_f32_row(row)?;
        self.push_f32(row, record)
    }

    fn dim_error(&self, got: usize) -> Error {
        Error::BuildError(format!(
            "row {} has dim {got}, expected {}",
            self.store.records.len(),
            self.store.dim
        ))
    }

    pub(crate) fn push_f32(&mut self, row: Vec<f32>, record: CaptionRecord) -> Result<()> {
        if row.len() != self.store.dim {
            return Err(self.dim_error(row.len()));
        }
        let s = &mut self.store;
        if record.text.trim().is_empty() {
            return Err(Error::BuildError(format!(
                "caption {} has empty text",
                record.id
            )));
        }
        if s.index.contains_key(&record.id) {
            return Err(Error::DuplicateId(record.id));
        }
        s.index.insert(record.id, s.records.len());
        s.norms.push(
            row.iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt(),
        );
        s.embeddings.extend(row);
        s.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.store.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.records.is_empty()
    }

    pub fn finish(self) -> Datastore {
        self.store
    }
}

impl Datastore {
    pub fn build(
        embeddings: &EmbeddingMatrix,
        records: Vec<CaptionRecord>,
        metric: Metric,
    ) -> Result<Self> {
        if embeddings.rows() != records.len() {
            return Err(Error::BuildError(format!(
                "{} embedding rows but {} caption records",
                embeddings.rows(),
                records.len()
            )));
        }
        let mut b = DatastoreBuilder::new(embeddings.dim(), metric)?;
        b.reserve(records.len());
        for (row, rec) in embeddings.iter_rows().zip(records) {
            b.push(row, rec)?;
        }
        Ok(b.finish())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CaptionRecord] {
        &self.records
    }

    pub fn record(&self, row: usize) -> &CaptionRecord {
        &self.records[row]
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn row_f32(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_embedding(&self, row: usize) -> Vec<f64> {
        self.row_f32(row).iter().map(|&v| f64::from(v)).collect()
    }

    /// All rows widened to f64.
    pub fn embedding_matrix(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::from_trusted(
            self.dim,
            self.embeddings.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    fn key(&self, query: &[f64], query_norm: f64, row: usize) -> f64 {
        let x = self.row_f32(row);
        match self.metric {
            Metric::L2 => query
                .iter()
                .zip(x)
                .map(|(&q, &v)| {
                    let d = q - f64::from(v);
                    d * d
                })
                .sum(),
            Metric::Cosine => {
                let denom = query_norm * self.norms[row];
                if denom == 0.0 {
                    0.0
                } else {
                    let dot: f64 = query.iter().zip(x).map(|(&q, &v)| q * f64::from(v)).sum();
                    -(dot / denom)
                }
            }
        }
    }

    fn score_from_key(&self, key: f64) -> f64 {
        match self.metric {
            Metric::L2 => key,
            Metric::Cosine => -key,
        }
    }

    /// Score of a stored row against `query` in the store's metric.
    pub fn score(&self, query: &[f64], row: usize) -> f64 {
        let qn = crate::embedding::norm(query);
        self.score_from_key(self.key(query, qn, row))
    }

    pub fn knn_search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchResult>> {
        self.knn_search_with(query.as_slice(), k, Parallelism::default())
    }

    pub fn knn_search_with(
        &self,
        query: &[f64],
        k: usize,
        mode: Parallelism,
    ) -> Result<Vec<SearchResult>> {
        Error::check_dim(self.dim, query.len())?;
        if k == 0 {
            return Err(Error::InvalidK {
                k,
                reason: "k must be at least 1".into(),
            });
        }
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite query".into()));
        }
        let k = k.min(self.len());
        let qn = crate::embedding::norm(query);

        let blocks = exec::blocks(self.len(), SEARCH_BLOCK_ROWS);
        let winners = exec::map_slice(&blocks, mode, |range| {
            let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
            for row in range.clone() {
                let cand = Candidate {
                    key: self.key(query, qn, row),
                    id: self.records[row].id,
                    row,
                };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("heap holds k items") {
                    heap.pop();
                    heap.push(cand);
                }
            }
            heap.into_vec()
        });

        let mut all: Vec<Candidate> = winners.into_iter().flatten().collect();
        all.sort_unstable();
        all.truncate(k);
        Ok(all
            .into_iter()
            .enumerate()
            .map(|(rank, c)| SearchResult {
                id: c.id,
                row: c.row,
                rank,
                score: self.score_from_key(c.key),
            })
            .collect())
    }

    /// Assemble a bundle from store rows. `prompt_rows` keeps its order.
    pub fn bundle(
        &self,
        target_row: Option<usize>,
        prompt_rows: &[usize],
        raw_results: Vec<SearchResult>,
    ) -> RetrievalBundle {
        let mut data = Vec::with_capacity(prompt_rows.len() * self.dim);
        for &r in prompt_rows {
            data.extend(self.row_f32(r).iter().map(|&v| f64::from(v)));
        }
        RetrievalBundle {
            target: target_row.map(|r| self.records[r].clone()),
            prompt_captions: prompt_rows
                .iter()
                .map(|&r| self.records[r].clone())
                .collect(),
            raw_results,
            neighbor_embeddings: EmbeddingMatrix::from_trusted(self.dim, data),
        }
    }

    /// The `k` nearest captions, best first, with no target.
    pub fn retrieve_for_inference(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<RetrievalBundle> {
        let results = self.knn_search(query, k)?;
        let rows: Vec<usize> = results.iter().map(|r| r.row).collect();
        Ok(self.bundle(None, &rows, results))
    }

    /// Fetch `k + 1` neighbours, skipping `exclude_id` if given. The nearest
    /// becomes the target and the remaining `k` the prompt captions.
    pub fn retrieve_for_training(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude_id: Option<u64>,
    ) -> Result<RetrievalBundle> {
        if k == 0 {
            return Err(Error::InvalidK {
                k,
                reason: "k must be at least 1".into(),
            });
        }
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        let excluded = exclude_id.and_then(|id| self.row_of(id)).is_some();
        let available = self.len() - usize::from(excluded);
        if available < k + 1 {
            return Err(Error::InsufficientStore {
                needed: k + 1,
                available,
            });
        }
        let fetch = k + 1 + usize::from(excluded);
        let mut results = self.knn_search(query, fetch)?;
        if excluded {
            results.retain(|r| Some(r.id) != exclude_id);
            results.truncate(k + 1);
            for (rank, r) in results.iter_mut().enumerate() {
                r.rank = rank;
            }
        }
        let rows: Vec<usize> = results.iter().map(|r| r.row).collect();
        Ok(self.bundle(Some(rows[0]), &rows[1..], results))
    }

    /// Store file layout (little-endian):
    ///
    /// ```text
    /// "TOMS" | version u32 | metric code u32 | embedding block (TOMC format)
    /// | caption count u64 | per caption: id u64, text len u32, text,
    ///   source len u32, source | CRC32 u32 of every preceding byte
    /// ```
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file =
            File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = CrcWriter::new(w);
        w.write_all(&STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&self.metric.code().to_le_bytes())?;
        EmbeddingHeader {
            dim: self.dim,
            count: self.len() as u64,
        }
        .write(&mut w)?;
        for row in self.embeddings.chunks_exact(self.dim) {
            format::write_f32_row(&mut w, row)?;
        }
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for rec in &self.records {
            w.write_all(&rec.id.to_le_bytes())?;
            for s in [&rec.text, &rec.source_tag] {
                w.write_all(&(s.len() as u32).to_le_bytes())?;
                w.write_all(s.as_bytes())?;
            }
        }
        let (mut inner, crc) = w.finish();
        inner.write_all(&crc.to_le_bytes())?;
        inner.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::format(0, format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader::with_crc(r);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic, "store magic")?;
        if magic != STORE_MAGIC {
            return Err(Error::format(
                0,
                format!("bad store magic {magic:?}, expected \"TOMS\""),
            ));
        }
        let version = r.read_u32("store version")?;
        if version != STORE_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported store version {version}"),
            ));
        }
        let code = r.read_u32("metric code")?;
        let metric = Metric::from_code(code)
            .ok_or_else(|| Error::format(8, format!("unknown metric code {code}")))?;

        let mut emb = EmbeddingReader::from_offset_reader(r)?;
        let header = emb.header();
        let mut rows = Vec::with_capacity(header.count.min(1 << 20) as usize);
        let mut buf = Vec::with_capacity(header.dim);
        while emb.read_row_f32(&mut buf)? {
            rows.push(std::mem::take(&mut buf));
        }
        let mut r = emb.into_inner();

        let count_at = r.offset();
        let count = r.read_u64("caption count")?;
        if count != header.count {
            return Err(Error::format(
                count_at,
                format!("{count} captions for {} embedding rows", header.count),
            ));
        }
        let mut builder = DatastoreBuilder::new(header.dim, metric)?;
        builder.reserve(rows.len());
        for row in rows {
            let rec_at = r.offset();
            let id = r.read_u64("caption id")?;
            let text = read_string(&mut r, "caption text")?;
            let source_tag = read_string(&mut r, "caption source")?;
            builder
                .push_f32(
                    row,
                    CaptionRecord {
                        id,
                        text,
                        source_tag,
                    },
                )
                .map_err(|e| match e {
                    Error::DuplicateId(_) | Error::BuildError(_) => {
                        Error::format(rec_at, e.to_string())
                    }
                    other => other,
                })?;
        }

        let computed = r.crc().expect("crc enabled");
        let trailer_at = r.offset();
        let mut b = [0u8; 4];
        r.read_exact(&mut b, "checksum trailer")
            .map_err(|_| Error::format(trailer_at, "truncated checksum trailer"))?;
        let stored = u32::from_le_bytes(b);
        if stored != computed {
            return Err(Error::format(
                trailer_at,
                format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            ));
        }
        if !r.at_eof()? {
            return Err(Error::format(r.offset(), "trailing bytes after checksum"));
        }
        Ok(builder.finish())
    }
}

fn read_string<R: Read>(r: &mut OffsetReader<R>, what: &str) -> Result<String> {
    let len = r.read_u32(what)? as usize;
    let at = r.offset();
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes, what)?;
    String::from_utf8(bytes).map_err(|_| Error::format(at, format!("{what} is not valid UTF-8")))
}
