//! Labeled feature records, the `HCF1` binary format, CSV import/export and
//! the class-disjoint task split.
//!
//! Binary layout (all little-endian, no padding):
//!
//! ```text
//! "HCF1" | u32 version = 1 | u32 dimension d | u64 record count
//! then per record: u64 fish_id | u64 frame_id | u16 group_id | u16 species_id | d x f32
//! ```
//!
//! The taxonomy is not stored inline. [`load_binary`] reads the
//! [`TAXONOMY_FILE`] sidecar from the feature file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{GroupId, SpeciesId, Taxonomy, TAXONOMY_FILE};

pub const MAGIC: &[u8; 4] = b"HCF1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const RECORD_PREFIX_LEN: usize = 8 + 8 + 2 + 2;

/// One frame's feature vector and its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub fish_id: u64,
    pub frame_id: u64,
    pub group: GroupId,
    pub species: SpeciesId,
    pub feature: Vec<f32>,
}

impl FeatureRecord {
    /// Identity of the physical frame, used for memory deduplication.
    pub fn key(&self) -> (u64, u64) {
        (self.fish_id, self.frame_id)
    }
}

/// A set of records of one dimension, labeled under a shared taxonomy.
#[derive(Debug, Clone)]
pub struct Dataset {
    dimension: usize,
    records: Vec<FeatureRecord>,
    taxonomy: Arc<Taxonomy>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension
            && self.records == other.records
            && *self.taxonomy == *other.taxonomy
    }
}

impl Dataset {
    /// Validates every record against `dimension` and `taxonomy`.
    pub fn new(
        dimension: usize,
        records: Vec<FeatureRecord>,
        taxonomy: Arc<Taxonomy>,
    ) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            validate_record(r, dimension, &taxonomy).map_err(|e| match e {
                Error::Taxonomy(m) => Error::Taxonomy(format!("record {i}: {m}")),
                Error::Validation(m) => Error::Validation(format!("record {i}: {m}")),
                other => other,
            })?;
        }
        Ok(Dataset {
            dimension,
            records,
            taxonomy,
        })
    }

    pub fn empty(dimension: usize, taxonomy: Arc<Taxonomy>) -> Self {
        Dataset {
            dimension,
            records: Vec::new(),
            taxonomy,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn species(&self) -> BTreeSet<SpeciesId> {
        self.records.iter().map(|r| r.species).collect()
    }

    pub fn groups(&self) -> BTreeSet<GroupId> {
        self.records.iter().map(|r| r.group).collect()
    }

    /// Frames grouped by fish track, each track sorted by frame id.
    pub fn tracks(&self) -> BTreeMap<u64, Vec<&FeatureRecord>> {
        let mut tracks: BTreeMap<u64, Vec<&FeatureRecord>> = BTreeMap::new();
        for r in &self.records {
            tracks.entry(r.fish_id).or_default().push(r);
        }
        for frames in tracks.values_mut() {
            frames.sort_by_key(|r| r.frame_id);
        }
        tracks
    }

    /// Records whose species is in `keep`, in original order.
    pub fn filter_species(&self, keep: &BTreeSet<SpeciesId>) -> Dataset {
        Dataset {
            dimension: self.dimension,
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.species))
                .cloned()
                .collect(),
            taxonomy: Arc::clone(&self.taxonomy),
        }
    }

    /// Concatenation of datasets sharing dimension and taxonomy.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("nothing to concatenate".into()))?;
        let mut records = Vec::with_capacity(parts.iter().map(Dataset::len).sum());
        for p in parts {
            if p.dimension != first.dimension {
                return Err(Error::Validation(format!(
                    "dimension mismatch: {} vs {}",
                    p.dimension, first.dimension
                )));
            }
            if *p.taxonomy != *first.taxonomy {
                return Err(Error::Taxonomy("datasets use different taxonomies".into()));
            }
            records.extend(p.records.iter().cloned());
        }
        Ok(Dataset {
            dimension: first.dimension,
            records,
            taxonomy: Arc::clone(&first.taxonomy),
        })
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<stream>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        let d = u32::try_from(self.dimension)
            .map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())
            .map_err(io)?;
        for r in &self.records {
            w.write_all(&r.fish_id.to_le_bytes()).map_err(io)?;
            w.write_all(&r.frame_id.to_le_bytes()).map_err(io)?;
            w.write_all(&r.group.0.to_le_bytes()).map_err(io)?;
            w.write_all(&r.species.0.to_le_bytes()).map_err(io)?;
            for v in &r.feature {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_binary(BufWriter::new(f)).map_err(|e| relabel_io(e, path))
    }

    /// Writes the CSV form. Floats use the shortest text that parses back to
    /// the same `f32`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![
            "fish_id".to_owned(),
            "frame_id".to_owned(),
            "group_id".to_owned(),
            "species_id".to_owned(),
        ];
        header.extend((0..self.dimension).map(|k| format!("f{k}")));
        out.write_record(&header).map_err(csv_err)?;
        let mut row = Vec::with_capacity(header.len());
        for r in &self.records {
            row.clear();
            row.push(r.fish_id.to_string());
            row.push(r.frame_id.to_string());
            row.push(r.group.0.to_string());
            row.push(r.species.0.to_string());
            row.extend(r.feature.iter().map(|v| v.to_string()));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(BufWriter::new(f)).map_err(|e| relabel_io(e, path))
    }
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn validate_record(r: &FeatureRecord, dimension: usize, taxonomy: &Taxonomy) -> Result<()> {
    if r.feature.len() != dimension {
        return Err(Error::Validation(format!(
            "feature has {} values, expected {dimension}",
            r.feature.len()
        )));
    }
    if let Some(k) = r.feature.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite feature component {k}")));
    }
    taxonomy.check_pair(r.group, r.species)
}

/// Loads a binary feature file, taking the taxonomy from the sidecar
/// `taxonomy.toml` in the same directory.
pub fn load_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let taxonomy = Taxonomy::load(sidecar_path(path))?;
    load_binary_with(path, Arc::new(taxonomy))
}

pub fn sidecar_path(feature_file: &Path) -> PathBuf {
    feature_file
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(TAXONOMY_FILE)
}

pub fn load_binary_with(path: impl AsRef<Path>, taxonomy: Arc<Taxonomy>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_binary(BufReader::new(f), taxonomy).map_err(|e| relabel_io(e, path))
}

pub fn read_binary<R: Read>(mut r: R, taxonomy: Arc<Taxonomy>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<stream>", e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected HCF1".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());

    let record_len = RECORD_PREFIX_LEN + 4 * dimension;
    let body = &bytes[HEADER_LEN..];
    let expected = (count as u128) * (record_len as u128);
    if body.len() as u128 != expected {
        return Err(Error::Corruption(format!(
            "header declares {count} records of dimension {dimension} ({expected} bytes), body has {} bytes",
            body.len()
        )));
    }

    let mut records = Vec::with_capacity(count as usize);
    for chunk in body.chunks_exact(record_len) {
        let fish_id = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let frame_id = u64::from_le_bytes(chunk[8..16].try_into().unwrap());
        let group = GroupId(u16::from_le_bytes(chunk[16..18].try_into().unwrap()));
        let species = SpeciesId(u16::from_le_bytes(chunk[18..20].try_into().unwrap()));
        let feature = chunk[RECORD_PREFIX_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(FeatureRecord {
            fish_id,
            frame_id,
            group,
            species,
            feature,
        });
    }
    Dataset::new(dimension, records, taxonomy)
}

pub fn load_csv(path: impl AsRef<Path>, taxonomy: Arc<Taxonomy>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(f), taxonomy).map_err(|e| relabel_io(e, path))
}

pub fn read_csv<R: Read>(r: R, taxonomy: Arc<Taxonomy>) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("missing column {name}")))
    };
    let fish_col = column("fish_id")?;
    let frame_col = column("frame_id")?;
    let group_col = column("group_id")?;
    let species_col = column("species_id")?;
    let mut feature_cols = Vec::new();
    while let Ok(c) = column(&format!("f{}", feature_cols.len())) {
        feature_cols.push(c);
    }
    let dimension = feature_cols.len();
    let named_features = headers
        .iter()
        .filter(|h| h.trim().starts_with('f') && h.trim()[1..].parse::<usize>().is_ok())
        .count();
    if named_features != dimension {
        return Err(Error::Format(format!(
            "feature columns must be f0..f{{d-1}} without gaps; found {named_features} feature columns, contiguous prefix of {dimension}"
        )));
    }

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            row: line,
            message: e.to_string(),
        })?;
        let cell = |c: usize| row.get(c).unwrap_or("").trim();
        fn parse<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
            s.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("invalid {what} value {s:?}"),
            })
        }
        let feature = feature_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| parse::<f32>(cell(c), &format!("f{k}"), line))
            .collect::<Result<Vec<_>>>()?;
        let rec = FeatureRecord {
            fish_id: parse(cell(fish_col), "fish_id", line)?,
            frame_id: parse(cell(frame_col), "frame_id", line)?,
            group: GroupId(parse(cell(group_col), "group_id", line)?),
            species: SpeciesId(parse(cell(species_col), "species_id", line)?),
            feature,
        };
        validate_record(&rec, dimension, &taxonomy).map_err(|e| match e {
            Error::Taxonomy(m) => Error::Taxonomy(format!("row {line}: {m}")),
            Error::Validation(m) => Error::Parse {
                row: line,
                message: m,
            },
            other => other,
        })?;
        records.push(rec);
    }
    Ok(Dataset {
        dimension,
        records,
        taxonomy,
    })
}

/// Ordered, class-disjoint training tasks over one taxonomy.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Dataset>,
    taxonomy: Arc<Taxonomy>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamManifest {
    dimension: usize,
    tasks: Vec<String>,
}

pub const STREAM_MANIFEST: &str = "stream.toml";

impl TaskStream {
    pub fn new(tasks: Vec<Dataset>) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Validation("task stream has no tasks".into()))?;
        let taxonomy = Arc::clone(first.taxonomy());
        let mut seen: BTreeMap<SpeciesId, usize> = BTreeMap::new();
        for (t, ds) in tasks.iter().enumerate() {
            if ds.dimension() != first.dimension() {
                return Err(Error::Validation(format!(
                    "task {} has dimension {}, task 1 has {}",
                    t + 1,
                    ds.dimension(),
                    first.dimension()
                )));
            }
            if **ds.taxonomy() != *taxonomy {
                return Err(Error::Taxonomy(format!(
                    "task {} uses a different taxonomy",
                    t + 1
                )));
            }
            for s in ds.species() {
                if let Some(prev) = seen.insert(s, t) {
                    return Err(Error::Validation(format!(
                        "species {s} appears in tasks {} and {}",
                        prev + 1,
                        t + 1
                    )));
                }
            }
        }
        Ok(TaskStream { tasks, taxonomy })
    }

    pub fn tasks(&self) -> &[Dataset] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn dimension(&self) -> usize {
        self.tasks[0].dimension()
    }

    /// Species introduced by each task.
    pub fn cohorts(&self) -> Vec<BTreeSet<SpeciesId>> {
        self.tasks.iter().map(Dataset::species).collect()
    }

    /// All tasks merged into one dataset.
    pub fn joined(&self) -> Dataset {
        Dataset::concat(&self.tasks).expect("stream tasks share dimension and taxonomy")
    }

    /// Writes `task_NNN.hcf` files, the taxonomy sidecar and a manifest.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.taxonomy.save(dir.join(TAXONOMY_FILE))?;
        let mut names = Vec::new();
        for (t, ds) in self.tasks.iter().enumerate() {
            let name = format!("task_{:03}.hcf", t + 1);
            ds.save_binary(dir.join(&name))?;
            names.push(name);
        }
        let manifest = StreamManifest {
            dimension: self.dimension(),
            tasks: names,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        let path = dir.join(STREAM_MANIFEST);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STREAM_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StreamManifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{STREAM_MANIFEST}: {e}")))?;
        let taxonomy = Arc::new(Taxonomy::load(dir.join(TAXONOMY_FILE))?);
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for name in &manifest.tasks {
            let ds = load_binary_with(dir.join(name), Arc::clone(&taxonomy))?;
            // empty task files carry no records but still declare d
            if ds.dimension() != manifest.dimension {
                return Err(Error::Corruption(format!(
                    "{name} has dimension {}, manifest says {}",
                    ds.dimension(),
                    manifest.dimension
                )));
            }
            tasks.push(ds);
        }
        TaskStream::new(tasks)
    }
}

/// Splits `ds` into `num_tasks` class-disjoint tasks.
///
/// Within each group the species present in `ds` are shuffled with a seeded
/// RNG and dealt round-robin to the tasks. Groups with fewer species than
/// `num_tasks` go entirely into the first task.
pub fn partition_tasks(ds: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::Validation("num_tasks must be at least 1".into()));
    }
    let mut by_group: BTreeMap<GroupId, Vec<SpeciesId>> = BTreeMap::new();
    for s in ds.species() {
        let g = ds.taxonomy().parent(s).expect("dataset species are validated");
        by_group.entry(g).or_default().push(s);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: BTreeMap<SpeciesId, usize> = BTreeMap::new();
    let mut any_split = false;
    for species in by_group.values_mut() {
        // species come out of a BTreeSet, so the pre-shuffle order is fixed
        species.shuffle(&mut rng);
        if species.len() < num_tasks {
            for &s in species.iter() {
                assignment.insert(s, 0);
            }
        } else {
            any_split = true;
            for (k, &s) in species.iter().enumerate() {
                assignment.insert(s, k % num_tasks);
            }
        }
    }
    if num_tasks > 1 && !any_split {
        log::warn!(
            "every group has fewer than {num_tasks} species; the stream has a single effective task"
        );
    }

    let mut buckets: Vec<Vec<FeatureRecord>> = vec![Vec::new(); num_tasks];
    for r in ds.records() {
        buckets[assignment[&r.species]].push(r.clone());
    }
    let tasks = buckets
        .into_iter()
        .map(|records| Dataset {
            dimension: ds.dimension(),
            records,
            taxonomy: Arc::clone(ds.taxonomy()),
        })
        .collect();
    TaskStream::new(tasks)
}
