//! The image archive: unit-normalized retrieval keys pointing at stored
//! region features, with exact top-K cosine search.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::embed::QueryVector;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"VIDX";
pub const INDEX_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"VFTR";
pub const FEATURE_VERSION: u32 = 1;
pub const DEFAULT_SHARD_SIZE: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Caption,
    Synset,
}

impl SourceKind {
    fn code(self) -> u8 {
        match self {
            SourceKind::Caption => 0,
            SourceKind::Synset => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SourceKind::Caption),
            1 => Some(SourceKind::Synset),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyedImage {
    pub id: String,
    pub key: Vec<f32>,
    /// Record number in the [`ImageFeatureStore`].
    pub payload_ref: u64,
    pub source_kind: SourceKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub key: Vec<f32>,
    pub payload_ref: u64,
    pub source_kind: SourceKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageKeyIndex {
    dim: usize,
    items: Vec<KeyedImage>,
    shard_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub similarity: f64,
    pub payload_ref: u64,
}

#[derive(Debug)]
pub struct BuildReport {
    pub index: ImageKeyIndex,
    /// Entries dropped because their key had zero norm.
    pub skipped: usize,
}

fn dot(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum()
}

/// Ranking order: similarity descending, then id ascending.
fn rank_cmp(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.id.cmp(&b.id))
}

fn select_top(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_cmp);
        hits.truncate(k);
    }
    hits.sort_by(rank_cmp);
    hits
}

/// Keys are normalized on insertion; zero-norm keys are skipped and
/// counted, duplicate ids are an error.
pub fn build_index(entries: Vec<IndexEntry>) -> Result<BuildReport> {
    let dim = entries.first().map_or(0, |e| e.key.len());
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for e in entries {
        if e.key.len() != dim {
            return Err(Error::shape(
                "build_index",
                format!("key for `{}` has dim {}, expected {}", e.id, e.key.len(), dim),
            ));
        }
        if !seen.insert(e.id.clone()) {
            return Err(Error::DuplicateId(e.id));
        }
        let norm = e.key.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            skipped += 1;
            continue;
        }
        items.push(KeyedImage {
            id: e.id,
            key: e.key.iter().map(|&v| (v as f64 / norm) as f32).collect(),
            payload_ref: e.payload_ref,
            source_kind: e.source_kind,
        });
    }
    if skipped > 0 {
        log::warn!("build_index: skipped {skipped} zero-norm keys");
    }
    Ok(BuildReport {
        index: ImageKeyIndex {
            dim,
            items,
            shard_size: DEFAULT_SHARD_SIZE,
        },
        skipped,
    })
}

impl ImageKeyIndex {
    pub fn empty(dim: usize) -> Self {
        ImageKeyIndex {
            dim,
            items: Vec::new(),
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[KeyedImage] {
        &self.items
    }

    pub fn shard_size(&self) -> usize {
        self.shard_size
    }

    pub fn with_shard_size(mut self, shard_size: usize) -> Self {
        self.shard_size = shard_size.max(1);
        self
    }

    fn normalized_query(&self, query: &QueryVector) -> Result<Vec<f64>> {
        if query.is_degenerate {
            return Err(Error::DegenerateQuery);
        }
        if query.values.len() != self.dim {
            return Err(Error::shape(
                "top_k",
                format!("query dim {} vs index dim {}", query.values.len(), self.dim),
            ));
        }
        let norm = query.values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateQuery);
        }
        Ok(query.values.iter().map(|&v| v as f64 / norm).collect())
    }

    fn scan(&self, items: &[KeyedImage], q: &[f64], k: usize) -> Vec<Hit> {
        let hits = items
            .iter()
            .map(|it| Hit {
                id: it.id.clone(),
                similarity: dot(&it.key, q),
                payload_ref: it.payload_ref,
            })
            .collect();
        select_top(hits, k)
    }

    /// Exact top-`k` by cosine similarity, single-threaded.
    pub fn top_k(&self, query: &QueryVector, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::invalid("top_k needs K >= 1"));
        }
        let q = self.normalized_query(query)?;
        Ok(self.scan(&self.items, &q, k))
    }

    /// Same result as [`top_k`](Self::top_k), scanning shards in parallel on
    /// the current rayon pool and merging the per-shard winners.
    pub fn top_k_sharded(&self, query: &QueryVector, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::invalid("top_k needs K >= 1"));
        }
        let q = self.normalized_query(query)?;
        let partial: Vec<Vec<Hit>> = self
            .items
            .par_chunks(self.shard_size)
            .map(|shard| self.scan(shard, &q, k))
            .collect();
        Ok(select_top(partial.into_iter().flatten().collect(), k))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(INDEX_MAGIC)?;
        w.u32(INDEX_VERSION)?;
        w.u32(self.dim as u32)?;
        w.u64(self.items.len() as u64)?;
        for it in &self.items {
            w.str(&it.id)?;
            w.u8(it.source_kind.code())?;
            w.u64(it.payload_ref)?;
            w.f32s(&it.key)?;
        }
        use std::io::Write;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut r = Reader::new(reader, "VIDX");
        r.magic(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(r.err(format!(
                "version {version} is not supported (expected version {INDEX_VERSION})"
            )));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.err("dim must be positive"));
        }
        let count = r.u64()?;
        let mut items = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let id = r.str()?;
            let code = r.u8()?;
            let source_kind = SourceKind::from_code(code)
                .ok_or_else(|| r.err(format!("source_kind {code} is unknown")))?;
            let payload_ref = r.u64()?;
            let key = r.f32s(dim)?;
            items.push(KeyedImage {
                id,
                key,
                payload_ref,
                source_kind,
            });
        }
        r.finish()?;
        Ok(ImageKeyIndex {
            dim,
            items,
            shard_size: DEFAULT_SHARD_SIZE,
        })
    }
}

/// Region features for every archived image: `n_regions` rows of
/// `feat_dim` floats per image.
#[derive(Debug)]
pub struct ImageFeatureStore {
    n_regions: usize,
    feat_dim: usize,
    ids: Vec<String>,
    by_id: HashMap<String, usize>,
    rows: Vec<f32>,
    reads: AtomicUsize,
}

impl Clone for ImageFeatureStore {
    fn clone(&self) -> Self {
        ImageFeatureStore {
            n_regions: self.n_regions,
            feat_dim: self.feat_dim,
            ids: self.ids.clone(),
            by_id: self.by_id.clone(),
            rows: self.rows.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for ImageFeatureStore {
    fn eq(&self, o: &Self) -> bool {
        self.n_regions == o.n_regions && self.feat_dim == o.feat_dim && self.ids == o.ids && self.rows == o.rows
    }
}

impl ImageFeatureStore {
    pub fn new(n_regions: usize, feat_dim: usize) -> Self {
        ImageFeatureStore {
            n_regions,
            feat_dim,
            ids: Vec::new(),
            by_id: HashMap::new(),
            rows: Vec::new(),
            reads: AtomicUsize::new(0),
        }
    }

    /// Appends one image; returns its record number.
    pub fn push(&mut self, id: &str, features: &[f32]) -> Result<u64> {
        if features.len() != self.n_regions * self.feat_dim {
            return Err(Error::shape(
                "feature_store",
                format!(
                    "image `{}` has {} floats, expected {}x{}",
                    id,
                    features.len(),
                    self.n_regions,
                    self.feat_dim
                ),
            ));
        }
        if self.by_id.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.by_id.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.rows.extend_from_slice(features);
        Ok(self.ids.len() as u64 - 1)
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn ordinal(&self, id: &str) -> Option<u64> {
        self.by_id.get(id).map(|&i| i as u64)
    }

    /// Region features of record `payload_ref` (`n_regions * feat_dim` floats).
    pub fn features(&self, payload_ref: u64) -> Result<&[f32]> {
        let i = payload_ref as usize;
        if i >= self.ids.len() {
            return Err(Error::invalid(format!(
                "payload_ref {} out of range for {} images",
                payload_ref,
                self.ids.len()
            )));
        }
        self.reads.fetch_add(1, AtomicOrdering::Relaxed);
        let w = self.n_regions * self.feat_dim;
        Ok(&self.rows[i * w..(i + 1) * w])
    }

    pub fn features_by_id(&self, id: &str) -> Result<&[f32]> {
        let i = self.ordinal(id).ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        self.features(i)
    }

    /// Number of feature lookups served so far.
    pub fn reads(&self) -> usize {
        self.reads.load(AtomicOrdering::Relaxed)
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".manifest");
        PathBuf::from(p)
    }

    /// Writes the store and its `<path>.manifest` sidecar (`id<TAB>byte offset`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(FEATURE_MAGIC)?;
        w.u32(FEATURE_VERSION)?;
        w.u32(self.n_regions as u32)?;
        w.u32(self.feat_dim as u32)?;
        w.u64(self.ids.len() as u64)?;
        let mut offset: u64 = 4 + 4 + 4 + 4 + 8;
        let mut manifest = String::new();
        let width = self.n_regions * self.feat_dim;
        for (i, id) in self.ids.iter().enumerate() {
            manifest.push_str(&format!("{id}\t{offset}\n"));
            w.str(id)?;
            w.f32s(&self.rows[i * width..(i + 1) * width])?;
            offset += 4 + id.len() as u64 + 4 * width as u64;
        }
        use std::io::Write;
        w.into_inner().flush()?;
        std::fs::write(Self::manifest_path(path), manifest)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut r = Reader::new(reader, "VFTR");
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(r.err(format!(
                "version {version} is not supported (expected version {FEATURE_VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        if n == 0 || d == 0 {
            return Err(r.err(format!("n_regions={n} and feat_dim={d} must be positive")));
        }
        let count = r.u64()?;
        let mut store = ImageFeatureStore::new(n, d);
        for _ in 0..count {
            let id = r.str()?;
            let rows = r.f32s(n * d)?;
            store.push(&id, &rows)?;
        }
        r.finish()?;
        Ok(store)
    }

    /// Reads a single image's rows via the manifest without loading the store.
    pub fn read_one(path: impl AsRef<Path>, id: &str) -> Result<Vec<f32>> {
        let path = path.as_ref();
        let manifest = std::fs::read_to_string(Self::manifest_path(path))?;
        let offset = manifest
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .find(|(k, _)| *k == id)
            .and_then(|(_, o)| o.parse::<u64>().ok())
            .ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        let mut f = File::open(path)?;
        let mut head = Reader::new(&mut f, "VFTR");
        head.magic(FEATURE_MAGIC)?;
        let _version = head.u32()?;
        let n = head.u32()? as usize;
        let d = head.u32()? as usize;
        f.seek(SeekFrom::Start(offset))?;
        let mut r = Reader::new(&mut f, "VFTR");
        let found = r.str()?;
        if found != id {
            return Err(r.err(format!("manifest offset points at `{found}`, not `{id}`")));
        }
        r.f32s(n * d)
    }
}
