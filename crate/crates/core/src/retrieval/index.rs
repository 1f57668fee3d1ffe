//! Exact flat index over dot-product similarity.
//!
//! On disk an index is a directory holding `vectors.bin` and `meta.jsonl`.
//! `vectors.bin` starts with a 20-byte little-endian header (magic `CFIX`,
//! u32 version, u32 dimension, u64 count) followed by `count * dimension`
//! packed f32 values. `meta.jsonl` holds one [`Paragraph`] per line in the
//! same order. Appends write vectors and metadata first and bump the header
//! count last, so a reader never sees a count beyond what was written.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingPort, IndexedParagraph, Paragraph, RetrievalError};

pub const INDEX_MAGIC: &[u8; 4] = b"CFIX";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;
const VECTORS_FILE: &str = "vectors.bin";
const META_FILE: &str = "meta.jsonl";
/// Entries scored per parallel task.
const SCAN_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Higher score first, then lexicographically smaller doc_id.
fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id))
}

#[derive(Debug, Clone, Default)]
pub struct FlatIndex {
    dimension: usize,
    vectors: Vec<f32>,
    meta: Vec<Paragraph>,
    ids: HashSet<String>,
}

impl FlatIndex {
    pub fn new(dimension: usize) -> Self {
        FlatIndex {
            dimension,
            ..Default::default()
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn paragraph(&self, i: usize) -> &Paragraph {
        &self.meta[i]
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn find(&self, doc_id: &str) -> Option<usize> {
        self.meta.iter().position(|p| p.doc_id == doc_id)
    }

    fn check_vector(&self, v: &[f32]) -> Result<(), RetrievalError> {
        if v.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(())
    }

    /// Appends entries; all are validated before any is added.
    pub fn add(&mut self, entries: Vec<IndexedParagraph>) -> Result<(), RetrievalError> {
        let mut fresh = HashSet::new();
        for e in &entries {
            self.check_vector(&e.vector)?;
            if self.ids.contains(&e.paragraph.doc_id) || !fresh.insert(e.paragraph.doc_id.clone()) {
                return Err(RetrievalError::DuplicateDocId(e.paragraph.doc_id.clone()));
            }
        }
        for e in entries {
            self.vectors.extend_from_slice(&e.vector);
            self.ids.insert(e.paragraph.doc_id.clone());
            self.meta.push(e.paragraph);
        }
        Ok(())
    }

    /// Dot product of the query with entry `i`, accumulated in f64.
    pub fn score(&self, query: &[f32], i: usize) -> f64 {
        self.vector(i)
            .iter()
            .zip(query)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    fn top_of(&self, query: &[f32], start: usize, len: usize, k: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = (start..start + len)
            .map(|i| Hit {
                doc_id: self.meta[i].doc_id.clone(),
                score: self.score(query, i),
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank);
            hits.truncate(k);
        }
        hits.sort_by(rank);
        hits
    }

    /// Exact top-`k` by dot product.
    pub fn search_vector(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        self.check_vector(query)?;
        let chunks = crate::par::map_range(self.len().div_ceil(SCAN_CHUNK), |c| {
            let start = c * SCAN_CHUNK;
            self.top_of(query, start, SCAN_CHUNK.min(self.len() - start), k)
        });
        let mut merged: Vec<Hit> = chunks.into_iter().flatten().collect();
        merged.sort_by(rank);
        merged.truncate(k);
        Ok(merged)
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(VECTORS_FILE))?);
        write_header(&mut w, self.dimension as u32, self.len() as u64)?;
        for x in &self.vectors {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        let mut m = BufWriter::new(File::create(dir.join(META_FILE))?);
        for p in &self.meta {
            serde_json::to_writer(&mut m, p).map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
            m.write_all(b"\n")?;
        }
        m.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<FlatIndex, RetrievalError> {
        let mut f = BufReader::new(File::open(dir.join(VECTORS_FILE))?);
        let (dimension, count) = read_header(&mut f)?;
        let dimension = dimension as usize;
        let count = count as usize;
        let mut bytes = vec![0u8; count * dimension * 4];
        f.read_exact(&mut bytes)
            .map_err(|_| RetrievalError::Corrupt(format!("expected {count} vectors of dimension {dimension}")))?;
        let vectors: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut meta = Vec::with_capacity(count);
        for line in BufReader::new(File::open(dir.join(META_FILE))?).lines() {
            if meta.len() == count {
                break;
            }
            let line = line?;
            let p: Paragraph = serde_json::from_str(&line).map_err(|e| RetrievalError::Corrupt(format!("meta: {e}")))?;
            meta.push(p);
        }
        if meta.len() != count {
            return Err(RetrievalError::Corrupt(format!(
                "header count {count} but {} metadata lines",
                meta.len()
            )));
        }
        let mut index = FlatIndex::new(dimension);
        let entries = meta
            .into_iter()
            .enumerate()
            .map(|(i, paragraph)| IndexedParagraph {
                paragraph,
                vector: vectors[i * dimension..(i + 1) * dimension].to_vec(),
            })
            .collect();
        index.add(entries)?;
        Ok(index)
    }

    /// Appends `entries` to an index persisted at `dir` (creating it when
    /// absent) and to `self`, which must mirror the persisted state.
    pub fn append_persisted(&mut self, dir: &Path, entries: Vec<IndexedParagraph>) -> Result<(), RetrievalError> {
        if !dir.join(VECTORS_FILE).exists() {
            self.add(entries)?;
            return self.save(dir);
        }
        let before = self.len();
        self.add(entries)?;
        let mut f = OpenOptions::new().read(true).write(true).open(dir.join(VECTORS_FILE))?;
        let (dimension, count) = read_header(&mut f)?;
        if dimension as usize != self.dimension || count as usize != before {
            return Err(RetrievalError::Corrupt("persisted index differs from the in-memory one".into()));
        }
        let data_end = HEADER_LEN + count * dimension as u64 * 4;
        f.set_len(data_end)?;
        f.seek(SeekFrom::Start(data_end))?;
        let mut w = BufWriter::new(&mut f);
        for x in &self.vectors[before * self.dimension..] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        drop(w);
        let mut m = OpenOptions::new().append(true).open(dir.join(META_FILE))?;
        for p in &self.meta[before..] {
            let line = serde_json::to_string(p).map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
            writeln!(m, "{line}")?;
        }
        m.sync_data()?;
        f.sync_data()?;
        f.seek(SeekFrom::Start(12))?;
        f.write_all(&(self.len() as u64).to_le_bytes())?;
        f.sync_data()?;
        Ok(())
    }
}

fn write_header(w: &mut impl Write, dimension: u32, count: u64) -> std::io::Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&dimension.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())
}

fn read_header(r: &mut impl Read) -> Result<(u32, u64), RetrievalError> {
    let mut h = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut h).map_err(|_| RetrievalError::Corrupt("short header".into()))?;
    if &h[0..4] != INDEX_MAGIC {
        return Err(RetrievalError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if version != INDEX_VERSION {
        return Err(RetrievalError::Corrupt(format!("unsupported version {version}")));
    }
    let dimension = u32::from_le_bytes(h[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(h[12..20].try_into().unwrap());
    Ok((dimension, count))
}

/// Embeds and appends paragraphs.
pub fn index_add(
    index: &mut FlatIndex,
    paragraphs: Vec<Paragraph>,
    embedder: &dyn EmbeddingPort,
) -> Result<Vec<IndexedParagraph>, RetrievalError> {
    if embedder.dimension() != index.dimension() {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dimension(),
            found: embedder.dimension(),
        });
    }
    let embedded = crate::par::map(&paragraphs, |p| embedder.embed(&p.text));
    let mut entries = Vec::with_capacity(paragraphs.len());
    for (paragraph, vector) in paragraphs.into_iter().zip(embedded) {
        entries.push(IndexedParagraph {
            paragraph,
            vector: vector?,
        });
    }
    index.add(entries.clone())?;
    Ok(entries)
}

pub fn search_topk(
    index: &FlatIndex,
    query: &str,
    k: usize,
    embedder: &dyn EmbeddingPort,
) -> Result<Vec<Hit>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    index.search_vector(&embedder.embed(query)?, k)
}
