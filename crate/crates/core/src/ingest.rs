//! Dataset artifacts and their on-disk formats.
//!
//! Three line-delimited JSON files describe a dataset: the catalog of
//! furniture identities, the professional design sets used for context
//! training, and the instance queries cropped from scene images. Feature
//! vectors travel in a compact little-endian binary format shared by every
//! stage (see [`read_embeddings`]).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening every binary embedding file.
pub const EMBEDDING_MAGIC: [u8; 4] = *b"FSE1";

/// One furniture identity in the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub category: String,
    #[serde(default)]
    pub styles: Vec<String>,
}

/// The full identity catalog with O(1) lookup by id.
#[derive(Debug, Clone)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    /// Builds a catalog, rejecting duplicate ids.
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (row, entry) in entries.iter().enumerate() {
            if by_id.insert(entry.id.clone(), row).is_some() {
                return Err(Error::DuplicateId { id: entry.id.clone() });
            }
        }
        Ok(Catalog { entries, by_id })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&CatalogEntry> {
        self.by_id.get(id).map(|&row| &self.entries[row])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn category_of(&self, id: &str) -> Option<&str> {
        self.get(id).map(|e| e.category.as_str())
    }

    /// Distinct categories in ascending order.
    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self.entries.iter().map(|e| e.category.clone()).collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }
}

/// Dense row-major feature matrix with one string id per row.
///
/// Invariants enforced at construction: ids are unique, every value is
/// finite, and `data.len() == ids.len() * dim` with `dim >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "expected {} values for {} rows of dim {}, got {}",
                ids.len() * dim,
                ids.len(),
                dim,
                data.len()
            )));
        }
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if let Some(col) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite value at row {row} (id {:?}), column {col}",
                    ids[row]
                )));
            }
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId { id: id.clone() });
            }
        }
        Ok(EmbeddingMatrix { ids, dim, data, by_id })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn row_of(&self, id: &str) -> Option<&[f32]> {
        self.index_of(id).map(|r| self.row(r))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }
}

/// Reads a binary embedding file.
///
/// Layout: magic `FSE1`, row count (u32 LE), dim (u32 LE), then per row a
/// u16 LE id byte length, the UTF-8 id bytes, and `dim` f32 LE values. No
/// padding anywhere; the writer and reader round-trip bit-exactly.
pub fn read_embeddings<P: AsRef<Path>>(path: P) -> Result<EmbeddingMatrix> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_blob(&mut reader, &mut magic, "magic")?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {EMBEDDING_MAGIC:?}")));
    }
    let rows = read_u32(&mut reader, "row count")? as usize;
    let dim = read_u32(&mut reader, "dim")? as usize;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let mut ids = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows.saturating_mul(dim));
    let mut row_buf = vec![0u8; dim * 4];
    for row in 0..rows {
        let mut len_buf = [0u8; 2];
        read_blob(&mut reader, &mut len_buf, &format!("id length of row {row}"))?;
        let id_len = u16::from_le_bytes(len_buf) as usize;
        let mut id_buf = vec![0u8; id_len];
        read_blob(&mut reader, &mut id_buf, &format!("id bytes of row {row}"))?;
        let id = String::from_utf8(id_buf)
            .map_err(|_| Error::Format(format!("row {row} id is not valid UTF-8")))?;
        read_blob(&mut reader, &mut row_buf, &format!("values of row {row} ({id:?})"))?;
        for (col, bytes) in row_buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(bytes.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value at row {row} (id {id:?}), column {col}"
                )));
            }
            data.push(v);
        }
        ids.push(id);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after final row".into()));
    }
    EmbeddingMatrix::new(ids, dim, data)
}

/// Writes a binary embedding file; inverse of [`read_embeddings`].
pub fn write_embeddings<P: AsRef<Path>>(path: P, matrix: &EmbeddingMatrix) -> Result<()> {
    let rows = u32::try_from(matrix.len())
        .map_err(|_| Error::Format("row count exceeds u32".into()))?;
    let dim = u32::try_from(matrix.dim())
        .map_err(|_| Error::Format("dim exceeds u32".into()))?;
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&EMBEDDING_MAGIC)?;
    writer.write_all(&rows.to_le_bytes())?;
    writer.write_all(&dim.to_le_bytes())?;
    for (id, row) in matrix.iter() {
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Format(format!("id {id:?} exceeds u16 byte length")))?;
        writer.write_all(&id_len.to_le_bytes())?;
        writer.write_all(id.as_bytes())?;
        for v in row {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn read_blob<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(reader: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_blob(reader, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// One professional design: an unordered set of identity ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSet {
    pub design_id: String,
    pub items: Vec<String>,
}

/// Design sets plus a count of records dropped for having fewer than two
/// distinct items (a singleton carries no co-occurrence signal).
#[derive(Debug, Clone)]
pub struct DesignSetCollection {
    pub sets: Vec<DesignSet>,
    pub dropped_small: usize,
}

/// One query: a furniture instance cropped from a scene image, with its
/// ground-truth identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceQuery {
    pub instance_id: String,
    pub image_id: String,
    pub category: String,
    pub gt: String,
}

/// Query roster with O(1) lookup by instance id.
#[derive(Debug, Clone)]
pub struct QuerySet {
    queries: Vec<InstanceQuery>,
    by_instance: HashMap<String, usize>,
}

impl QuerySet {
    pub fn new(queries: Vec<InstanceQuery>) -> Result<Self> {
        let mut by_instance = HashMap::with_capacity(queries.len());
        for (row, q) in queries.iter().enumerate() {
            if by_instance.insert(q.instance_id.clone(), row).is_some() {
                return Err(Error::DuplicateId { id: q.instance_id.clone() });
            }
        }
        Ok(QuerySet { queries, by_instance })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[InstanceQuery] {
        &self.queries
    }

    pub fn get(&self, instance_id: &str) -> Option<&InstanceQuery> {
        self.by_instance.get(instance_id).map(|&row| &self.queries[row])
    }

    /// Image ids in first-appearance order, each with the row indices of its
    /// instances.
    pub fn by_image(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for (row, q) in self.queries.iter().enumerate() {
            let slot = groups.entry(q.image_id.as_str()).or_insert_with(|| {
                order.push(q.image_id.clone());
                Vec::new()
            });
            slot.push(row);
        }
        order
            .into_iter()
            .map(|image| {
                let rows = groups.remove(image.as_str()).unwrap_or_default();
                (image, rows)
            })
            .collect()
    }
}

/// Loads line-delimited JSON records, reporting the 1-based line number on
/// syntax errors and a schema error when fields are missing or mistyped.
fn load_jsonl<T, P>(path: P) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    P: AsRef<Path>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        let record: T = serde_json::from_value(value)
            .map_err(|e| Error::Schema(format!("line {}: {e}", idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

fn write_jsonl<T: Serialize, P: AsRef<Path>>(path: P, records: &[T]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut writer, record)
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads the identity catalog from line-delimited JSON.
pub fn load_catalog<P: AsRef<Path>>(path: P) -> Result<Catalog> {
    Catalog::new(load_jsonl(path)?)
}

pub fn write_catalog<P: AsRef<Path>>(path: P, catalog: &Catalog) -> Result<()> {
    write_jsonl(path, catalog.entries())
}

/// Loads design sets, deduplicating items within each set (first occurrence
/// kept) and dropping sets left with fewer than two distinct items.
pub fn load_design_sets<P: AsRef<Path>>(path: P) -> Result<DesignSetCollection> {
    let raw: Vec<DesignSet> = load_jsonl(path)?;
    normalize_design_sets(raw)
}

/// Applies the design-set invariants to already-parsed records.
pub fn normalize_design_sets(raw: Vec<DesignSet>) -> Result<DesignSetCollection> {
    let mut seen = HashMap::new();
    let mut sets = Vec::new();
    let mut dropped_small = 0usize;
    for (row, mut set) in raw.into_iter().enumerate() {
        if seen.insert(set.design_id.clone(), row).is_some() {
            return Err(Error::DuplicateId { id: set.design_id });
        }
        let mut unique = std::collections::HashSet::new();
        set.items.retain(|item| unique.insert(item.clone()));
        if set.items.len() < 2 {
            dropped_small += 1;
            continue;
        }
        sets.push(set);
    }
    Ok(DesignSetCollection { sets, dropped_small })
}

pub fn write_design_sets<P: AsRef<Path>>(path: P, sets: &[DesignSet]) -> Result<()> {
    write_jsonl(path, sets)
}

/// Loads the query roster from line-delimited JSON.
pub fn load_queries<P: AsRef<Path>>(path: P) -> Result<QuerySet> {
    QuerySet::new(load_jsonl(path)?)
}

pub fn write_queries<P: AsRef<Path>>(path: P, queries: &QuerySet) -> Result<()> {
    write_jsonl(path, queries.queries())
}

/// Cross-artifact referential integrity report.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    /// Catalog ids with no row in the identity embedding matrix.
    pub catalog_without_embedding: Vec<String>,
    /// Query gt ids absent from the catalog.
    pub unknown_gt: Vec<String>,
    /// Design-set items absent from the catalog.
    pub unknown_design_items: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.catalog_without_embedding.is_empty()
            && self.unknown_gt.is_empty()
            && self.unknown_design_items.is_empty()
    }
}

/// Checks that every artifact refers only to ids the others define.
///
/// Purely observational: returns the report rather than failing, so callers
/// can decide which defects are fatal.
pub fn validate_dataset(
    catalog: &Catalog,
    identity_embeddings: &EmbeddingMatrix,
    queries: &QuerySet,
    designs: &DesignSetCollection,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    for entry in catalog.entries() {
        if identity_embeddings.index_of(&entry.id).is_none() {
            report.catalog_without_embedding.push(entry.id.clone());
        }
    }
    for query in queries.queries() {
        if !catalog.contains(&query.gt) {
            report.unknown_gt.push(query.gt.clone());
        }
    }
    let mut seen_missing = std::collections::HashSet::new();
    for set in &designs.sets {
        for item in &set.items {
            if !catalog.contains(item) && seen_missing.insert(item.clone()) {
                report.unknown_design_items.push(item.clone());
            }
        }
    }
    report
}
