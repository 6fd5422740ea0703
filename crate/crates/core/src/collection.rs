//! Case-oriented datasets.
//!
//! A [`DataCollection`] declares named [`DataGroup`]s (for example
//! `input_data` and `ground_truth`) and holds an ordered list of [`Case`]s,
//! each giving one source per channel of each group it uses. Nothing is read
//! until a stacked tensor is requested through [`DataCollection::case_tensor`];
//! the result is cached so each (case, group) is loaded once, even under
//! concurrent callers.
//!
//! Collections persist to the `DNAR` archive format (see [`crate::container`]
//! for the byte layout). The manifest is JSON:
//!
//! ```json
//! {"version":1,
//!  "groups":[{"name":"input_data","channel_labels":["FLAIR","T1POST"]}],
//!  "cases":[{"id":"p01","blobs":{"input_data":{"shape":[16,16,8,2],
//!            "affine":[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
//!            "offset":0,"length":16384,"crc32":305419896}}}]}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{check_layout, BlobRef, BlobWriter, Container, ContainerError};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::volio::{read_nifti, VolioError};
use crate::volume::{Affine, AffineVolume, VolumeError};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"DNAR";
pub const ARCHIVE_VERSION: u32 = 1;

pub const INPUT_DATA: &str = "input_data";
pub const GROUND_TRUTH: &str = "ground_truth";

#[derive(Debug, Error)]
pub enum CollectionError {
    #[error("case {case:?} has no file matching {pattern:?} for group {group:?}")]
    MissingChannel {
        case: String,
        group: String,
        pattern: String,
    },
    #[error("pattern {pattern:?} matches several files in case {case:?}: {matches:?}")]
    AmbiguousPattern {
        case: String,
        pattern: String,
        matches: Vec<String>,
    },
    #[error("no case directories under {0}")]
    EmptyRoot(PathBuf),
    #[error("bad CSV header: {0}")]
    BadHeader(String),
    #[error("CSV row {row} has no path in column {column:?}")]
    MissingPath { row: usize, column: String },
    #[error("bad CSV row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("invalid collection: {0}")]
    Invalid(String),
    #[error("channel {label:?} has spatial shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        label: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("failed to read {path}: {source}")]
    Source {
        path: PathBuf,
        #[source]
        source: VolioError,
    },
    #[error("archive blob {0:?} failed its checksum")]
    ChecksumMismatch(String),
    #[error("not a DNAR archive")]
    BadMagic,
    #[error("unsupported DNAR version {0}")]
    VersionUnsupported(u32),
    #[error("malformed archive: {0}")]
    Archive(String),
    #[error("collection has no cases")]
    EmptyCollection,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ContainerError> for CollectionError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic { .. } => Self::BadMagic,
            ContainerError::VersionUnsupported(v) => Self::VersionUnsupported(v),
            ContainerError::ChecksumMismatch { name, .. } => Self::ChecksumMismatch(name),
            other => Self::Archive(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataGroup {
    pub name: String,
    pub channel_labels: Vec<String>,
}

impl DataGroup {
    pub fn new(name: impl Into<String>, labels: &[&str]) -> Self {
        Self {
            name: name.into(),
            channel_labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// One channel's origin.
#[derive(Debug, Clone)]
pub enum Source {
    File(PathBuf),
    Memory(Arc<AffineVolume>),
}

impl PartialEq for Source {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::File(a), Self::File(b)) => a == b,
            (Self::Memory(a), Self::Memory(b)) => Arc::ptr_eq(a, b) || a == b,
            _ => false,
        }
    }
}

impl From<AffineVolume> for Source {
    fn from(v: AffineVolume) -> Self {
        Self::Memory(Arc::new(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub sources: BTreeMap<String, Vec<Source>>,
}

impl Case {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            sources: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, group: impl Into<String>, sources: Vec<Source>) -> Self {
        self.sources.insert(group.into(), sources);
        self
    }
}

/// Reads file-backed channels. Swappable so tests can observe I/O.
pub trait VolumeLoader: Send + Sync {
    fn load(&self, path: &Path) -> Result<AffineVolume, VolioError>;
}

#[derive(Debug, Default)]
pub struct NiftiLoader;

impl VolumeLoader for NiftiLoader {
    fn load(&self, path: &Path) -> Result<AffineVolume, VolioError> {
        read_nifti(path)
    }
}

/// Derived, on-demand statistics of one group across all cases.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAttributes {
    pub spatial_shape: Vec<usize>,
    pub dimension: usize,
    pub channels: usize,
    pub intensity_range: (f32, f32),
}

type Slot = Arc<Mutex<Option<Arc<AffineVolume>>>>;

#[derive(Default)]
struct Cache {
    slots: HashMap<(usize, usize), Slot>,
    last_use: HashMap<usize, u64>,
    clock: u64,
}

pub struct DataCollection {
    groups: Vec<DataGroup>,
    cases: Vec<Case>,
    loader: Arc<dyn VolumeLoader>,
    max_cached_cases: Option<usize>,
    cache: Mutex<Cache>,
    attributes: Mutex<BTreeMap<String, GroupAttributes>>,
}

impl std::fmt::Debug for DataCollection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataCollection")
            .field("groups", &self.groups)
            .field("cases", &self.cases.len())
            .finish()
    }
}

impl Clone for DataCollection {
    fn clone(&self) -> Self {
        Self {
            groups: self.groups.clone(),
            cases: self.cases.clone(),
            loader: Arc::clone(&self.loader),
            max_cached_cases: self.max_cached_cases,
            cache: Mutex::default(),
            attributes: Mutex::default(),
        }
    }
}

/// Group name → ordered channel filename glob patterns.
pub type PatternMap = Vec<(String, Vec<String>)>;

fn label_from_pattern(p: &str) -> String {
    let s: String = p
        .chars()
        .filter(|c| !matches!(c, '*' | '?' | '[' | ']'))
        .collect();
    s.trim_end_matches('.').to_string()
}

impl DataCollection {
    pub fn new(groups: Vec<DataGroup>) -> Result<Self, CollectionError> {
        for (i, g) in groups.iter().enumerate() {
            if g.name.is_empty() {
                return Err(CollectionError::Invalid("group name is empty".into()));
            }
            if g.channel_labels.is_empty() {
                return Err(CollectionError::Invalid(format!(
                    "group {:?} has no channels",
                    g.name
                )));
            }
            if groups[..i].iter().any(|h| h.name == g.name) {
                return Err(CollectionError::Invalid(format!(
                    "duplicate group {:?}",
                    g.name
                )));
            }
        }
        Ok(Self {
            groups,
            cases: Vec::new(),
            loader: Arc::new(NiftiLoader),
            max_cached_cases: None,
            cache: Mutex::default(),
            attributes: Mutex::default(),
        })
    }

    pub fn with_loader(mut self, loader: Arc<dyn VolumeLoader>) -> Self {
        self.loader = loader;
        self
    }

    /// Caps the number of cases whose tensors stay cached (least recently
    /// used cases are evicted first).
    pub fn with_cache_limit(mut self, max_cases: usize) -> Self {
        self.max_cached_cases = Some(max_cases.max(1));
        self
    }

    pub fn add_case(&mut self, case: Case) -> Result<(), CollectionError> {
        if self.cases.iter().any(|c| c.id == case.id) {
            return Err(CollectionError::Invalid(format!(
                "duplicate case id {:?}",
                case.id
            )));
        }
        for (group, sources) in &case.sources {
            let g = self
                .group(group)
                .ok_or_else(|| CollectionError::UnknownGroup(group.clone()))?;
            if sources.len() != g.channel_labels.len() {
                return Err(CollectionError::Invalid(format!(
                    "case {:?} gives {} sources for group {:?} with {} channels",
                    case.id,
                    sources.len(),
                    group,
                    g.channel_labels.len()
                )));
            }
        }
        self.cases.push(case);
        Ok(())
    }

    /// Orders cases lexicographically by id.
    pub fn sort_cases(&mut self) {
        self.cases.sort_by(|a, b| a.id.cmp(&b.id));
        *self.cache.lock().expect("cache lock") = Cache::default();
    }

    pub fn groups(&self) -> &[DataGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&DataGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn case_index(&self, id: &str) -> Option<usize> {
        self.cases.iter().position(|c| c.id == id)
    }

    /// One case per immediate, non-hidden subdirectory of `root` holding a
    /// file for every pattern. Subdirectories matching none of the patterns
    /// are not cases; partially matching ones are errors.
    pub fn from_directory(
        root: impl AsRef<Path>,
        patterns: &PatternMap,
    ) -> Result<Self, CollectionError> {
        let root = root.as_ref();
        let mut compiled = Vec::new();
        let mut groups = Vec::new();
        for (group, pats) in patterns {
            let mut labels = Vec::new();
            for p in pats {
                let pat = glob::Pattern::new(p)
                    .map_err(|e| CollectionError::Invalid(format!("pattern {p:?}: {e}")))?;
                compiled.push((group.clone(), p.clone(), pat));
                labels.push(label_from_pattern(p));
            }
            groups.push(DataGroup {
                name: group.clone(),
                channel_labels: labels,
            });
        }
        let mut coll = Self::new(groups)?;

        let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                (!name.starts_with('.')).then(|| (name, e.path()))
            })
            .collect();
        dirs.sort();

        for (id, dir) in dirs {
            let mut files: Vec<(String, PathBuf)> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
                .collect();
            files.sort();
            let mut case = Case::new(id.clone());
            let mut any = false;
            let mut missing = None;
            for (group, raw, pat) in &compiled {
                let hits: Vec<&(String, PathBuf)> =
                    files.iter().filter(|(n, _)| pat.matches(n)).collect();
                match hits.len() {
                    0 => {
                        missing.get_or_insert_with(|| (group.clone(), raw.clone()));
                    }
                    1 => {
                        any = true;
                        case.sources
                            .entry(group.clone())
                            .or_default()
                            .push(Source::File(hits[0].1.clone()));
                    }
                    _ => {
                        return Err(CollectionError::AmbiguousPattern {
                            case: id,
                            pattern: raw.clone(),
                            matches: hits.iter().map(|(n, _)| n.clone()).collect(),
                        })
                    }
                }
            }
            match (any, missing) {
                (false, _) => continue,
                (true, Some((group, pattern))) => {
                    return Err(CollectionError::MissingChannel {
                        case: id,
                        group,
                        pattern,
                    })
                }
                (true, None) => coll.add_case(case)?,
            }
        }
        if coll.cases.is_empty() {
            return Err(CollectionError::EmptyRoot(root.to_path_buf()));
        }
        Ok(coll)
    }

    /// CSV with header `case,<group>:<channel>,...`. Paths are resolved
    /// against the CSV's directory when relative. Quoted cells are rejected.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self, CollectionError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| CollectionError::BadHeader("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"case") {
            return Err(CollectionError::BadHeader(
                "first column must be `case`".into(),
            ));
        }
        if cols.len() < 2 {
            return Err(CollectionError::BadHeader("no channel columns".into()));
        }
        let mut groups: Vec<DataGroup> = Vec::new();
        let mut col_group = Vec::new();
        for c in &cols[1..] {
            let (g, label) = c
                .split_once(':')
                .filter(|(g, l)| !g.is_empty() && !l.is_empty())
                .ok_or_else(|| {
                    CollectionError::BadHeader(format!("column {c:?} is not <group>:<channel>"))
                })?;
            match groups.iter_mut().find(|x| x.name == g) {
                Some(x) => x.channel_labels.push(label.to_string()),
                None => groups.push(DataGroup::new(g, &[label])),
            }
            col_group.push(g.to_string());
        }
        let mut coll = Self::new(groups)?;
        for (lineno, line) in lines {
            let row = lineno + 1;
            if line.contains('"') {
                return Err(CollectionError::BadRow {
                    row,
                    reason: "quoted cells are not supported".into(),
                });
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != cols.len() {
                return Err(CollectionError::BadRow {
                    row,
                    reason: format!("{} cells, header has {}", cells.len(), cols.len()),
                });
            }
            if cells[0].is_empty() {
                return Err(CollectionError::BadRow {
                    row,
                    reason: "empty case id".into(),
                });
            }
            let mut case = Case::new(cells[0]);
            for (i, cell) in cells[1..].iter().enumerate() {
                if cell.is_empty() {
                    return Err(CollectionError::MissingPath {
                        row,
                        column: cols[i + 1].to_string(),
                    });
                }
                let p = Path::new(cell);
                let p = if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                };
                case.sources
                    .entry(col_group[i].clone())
                    .or_default()
                    .push(Source::File(p));
            }
            coll.add_case(case)?;
        }
        coll.sort_cases();
        Ok(coll)
    }

    fn group_index(&self, name: &str) -> Result<usize, CollectionError> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| CollectionError::UnknownGroup(name.into()))
    }

    pub fn case_tensor(
        &self,
        case_id: &str,
        group: &str,
    ) -> Result<Arc<AffineVolume>, CollectionError> {
        let idx = self
            .case_index(case_id)
            .ok_or_else(|| CollectionError::UnknownCase(case_id.into()))?;
        self.case_tensor_at(idx, group)
    }

    /// Stacked tensor of one group of the case at `index`.
    pub fn case_tensor_at(
        &self,
        index: usize,
        group: &str,
    ) -> Result<Arc<AffineVolume>, CollectionError> {
        let gi = self.group_index(group)?;
        let case = self
            .cases
            .get(index)
            .ok_or_else(|| CollectionError::UnknownCase(format!("#{index}")))?;
        let slot = {
            let mut cache = self.cache.lock().expect("cache lock");
            cache.clock += 1;
            let now = cache.clock;
            cache.last_use.insert(index, now);
            let slot = Arc::clone(cache.slots.entry((index, gi)).or_default());
            if let Some(cap) = self.max_cached_cases {
                while cache.last_use.len() > cap {
                    let (&victim, _) = cache
                        .last_use
                        .iter()
                        .filter(|(&k, _)| k != index)
                        .min_by_key(|(_, &t)| t)
                        .expect("more entries than cap");
                    cache.last_use.remove(&victim);
                    cache.slots.retain(|&(ci, _), _| ci != victim);
                }
            }
            slot
        };
        let mut guard = slot.lock().expect("slot lock");
        if let Some(v) = guard.as_ref() {
            return Ok(Arc::clone(v));
        }
        let stacked = Arc::new(self.load_group(case, &self.groups[gi])?);
        *guard = Some(Arc::clone(&stacked));
        Ok(stacked)
    }

    fn load_group(&self, case: &Case, group: &DataGroup) -> Result<AffineVolume, CollectionError> {
        let sources = case.sources.get(&group.name).ok_or_else(|| {
            CollectionError::Invalid(format!("case {:?} has no group {:?}", case.id, group.name))
        })?;
        let mut vols: Vec<Arc<AffineVolume>> = Vec::with_capacity(sources.len());
        for s in sources {
            vols.push(match s {
                Source::Memory(v) => Arc::clone(v),
                Source::File(p) => {
                    Arc::new(
                        self.loader
                            .load(p)
                            .map_err(|source| CollectionError::Source {
                                path: p.clone(),
                                source,
                            })?,
                    )
                }
            });
        }
        let expected = vols[0].spatial_shape().to_vec();
        for (v, label) in vols.iter().zip(&group.channel_labels) {
            if v.spatial_shape() != expected.as_slice() {
                return Err(CollectionError::ShapeMismatch {
                    label: label.clone(),
                    expected,
                    got: v.spatial_shape().to_vec(),
                });
            }
        }
        let refs: Vec<&AffineVolume> = vols.iter().map(|v| v.as_ref()).collect();
        let mut out = AffineVolume::stack_channels(&refs)?;
        out.meta.insert("case".into(), case.id.clone());
        out.meta.insert("group".into(), group.name.clone());
        Ok(out)
    }

    /// Shape, dimension and intensity range of `group`, computed on first
    /// request over all cases that carry it.
    pub fn attributes(&self, group: &str) -> Result<GroupAttributes, CollectionError> {
        if let Some(a) = self.attributes.lock().expect("attr lock").get(group) {
            return Ok(a.clone());
        }
        self.group_index(group)?;
        let mut attrs: Option<GroupAttributes> = None;
        for (i, case) in self.cases.iter().enumerate() {
            if !case.sources.contains_key(group) {
                continue;
            }
            let t = self.case_tensor_at(i, group)?;
            let (lo, hi) = t
                .data()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            match attrs.as_mut() {
                None => {
                    attrs = Some(GroupAttributes {
                        spatial_shape: t.spatial_shape().to_vec(),
                        dimension: t.spatial_rank(),
                        channels: t.channels(),
                        intensity_range: (lo, hi),
                    })
                }
                Some(a) => {
                    a.intensity_range = (a.intensity_range.0.min(lo), a.intensity_range.1.max(hi));
                }
            }
        }
        let attrs = attrs.ok_or(CollectionError::EmptyCollection)?;
        self.attributes
            .lock()
            .expect("attr lock")
            .insert(group.to_string(), attrs.clone());
        Ok(attrs)
    }

    /// Draws case indices for a batch. Paired mode shares one index per slot
    /// across groups; unpaired draws independently per group. Draws are with
    /// replacement.
    pub fn sample_indices(
        &self,
        batch_size: usize,
        mode: SamplingMode,
        seed: u64,
    ) -> Result<BTreeMap<String, Vec<usize>>, CollectionError> {
        if self.cases.is_empty() {
            return Err(CollectionError::EmptyCollection);
        }
        if batch_size == 0 {
            return Err(CollectionError::Invalid("batch size must be >= 1".into()));
        }
        let n = self.cases.len();
        let mut rng = rng_for(seed, &[0x5a3b]);
        let mut out = BTreeMap::new();
        match mode {
            SamplingMode::Paired => {
                let idx: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..n)).collect();
                for g in &self.groups {
                    out.insert(g.name.clone(), idx.clone());
                }
            }
            SamplingMode::Unpaired => {
                for g in &self.groups {
                    out.insert(
                        g.name.clone(),
                        (0..batch_size).map(|_| rng.gen_range(0..n)).collect(),
                    );
                }
            }
        }
        Ok(out)
    }

    /// Group → tensor of shape `[batch, spatial..., channels]`.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        mode: SamplingMode,
        seed: u64,
    ) -> Result<BTreeMap<String, Tensor>, CollectionError> {
        let indices = self.sample_indices(batch_size, mode, seed)?;
        let mut out = BTreeMap::new();
        for (group, idx) in indices {
            let vols = idx
                .iter()
                .map(|&i| self.case_tensor_at(i, &group))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&AffineVolume> = vols.iter().map(|v| v.as_ref()).collect();
            let t = Tensor::batch_of(&refs).ok_or_else(|| CollectionError::ShapeMismatch {
                label: group.clone(),
                expected: refs[0].shape().to_vec(),
                got: refs
                    .iter()
                    .map(|v| v.shape())
                    .find(|s| *s != refs[0].shape())
                    .unwrap_or_default()
                    .to_vec(),
            })?;
            out.insert(group, t);
        }
        Ok(out)
    }

    /// Serializes every case tensor into a DNAR archive.
    pub fn encode_archive(&self) -> Result<Vec<u8>, CollectionError> {
        let mut writer = BlobWriter::default();
        let mut cases = Vec::with_capacity(self.cases.len());
        for (i, case) in self.cases.iter().enumerate() {
            let mut blobs = BTreeMap::new();
            for g in &self.groups {
                if !case.sources.contains_key(&g.name) {
                    continue;
                }
                let t = self.case_tensor_at(i, &g.name)?;
                let blob = writer.push_f32(t.data());
                blobs.insert(
                    g.name.clone(),
                    ArchiveBlob {
                        shape: t.shape().to_vec(),
                        affine: *t.affine(),
                        blob,
                    },
                );
            }
            cases.push(ArchiveCase {
                id: case.id.clone(),
                blobs,
            });
        }
        let manifest = ArchiveManifest {
            version: ARCHIVE_VERSION,
            groups: self.groups.clone(),
            cases,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        Ok(writer.finish(ARCHIVE_MAGIC, ARCHIVE_VERSION, &json))
    }

    pub fn write_archive(&self, path: impl AsRef<Path>) -> Result<(), CollectionError> {
        fs::write(path, self.encode_archive()?)?;
        Ok(())
    }

    /// Parses a DNAR archive into a fully in-memory collection.
    pub fn decode_archive(bytes: &[u8]) -> Result<Self, CollectionError> {
        let container = Container::parse(bytes, ARCHIVE_MAGIC, ARCHIVE_VERSION)?;
        let manifest: ArchiveManifest = serde_json::from_slice(container.manifest)
            .map_err(|e| CollectionError::Archive(format!("manifest: {e}")))?;
        if manifest.version != container.version {
            return Err(CollectionError::Archive(format!(
                "manifest version {} disagrees with header version {}",
                manifest.version, container.version
            )));
        }
        let mut coll = Self::new(manifest.groups.clone())?;
        let ordered: Vec<(String, &ArchiveBlob)> = manifest
            .cases
            .iter()
            .flat_map(|c| {
                manifest.groups.iter().filter_map(move |g| {
                    c.blobs
                        .get(&g.name)
                        .map(|b| (format!("{}/{}", c.id, g.name), b))
                })
            })
            .collect();
        check_layout(ordered.iter().map(|(n, b)| (n.as_str(), &b.blob)))?;
        for c in &manifest.cases {
            let mut case = Case::new(c.id.clone());
            for (gname, ab) in &c.blobs {
                let g = coll
                    .group(gname)
                    .ok_or_else(|| CollectionError::UnknownGroup(gname.clone()))?;
                if ab.shape.last() != Some(&g.channel_labels.len()) {
                    return Err(CollectionError::Archive(format!(
                        "case {:?} group {gname:?} shape {:?} disagrees with {} channels",
                        c.id,
                        ab.shape,
                        g.channel_labels.len()
                    )));
                }
                let name = format!("{}/{}", c.id, gname);
                let expected = ab
                    .shape
                    .iter()
                    .try_fold(4u64, |acc, &s| acc.checked_mul(s as u64));
                if expected != Some(ab.blob.length) {
                    return Err(CollectionError::Archive(format!(
                        "blob {name:?} length {} does not match shape {:?}",
                        ab.blob.length, ab.shape
                    )));
                }
                let data = container.read_f32(&name, &ab.blob)?;
                let vol = AffineVolume::new(data, ab.shape.clone(), ab.affine)?;
                case.sources.insert(
                    gname.clone(),
                    vol.split_channels().into_iter().map(Source::from).collect(),
                );
            }
            coll.add_case(case)?;
        }
        Ok(coll)
    }

    pub fn read_archive(path: impl AsRef<Path>) -> Result<Self, CollectionError> {
        Self::decode_archive(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Paired,
    Unpaired,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    version: u32,
    groups: Vec<DataGroup>,
    cases: Vec<ArchiveCase>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveCase {
    id: String,
    blobs: BTreeMap<String, ArchiveBlob>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveBlob {
    shape: Vec<usize>,
    affine: Affine,
    #[serde(flatten)]
    blob: BlobRef,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IDENTITY_AFFINE;

    fn vol(shape: &[usize], fill: f32) -> AffineVolume {
        AffineVolume::from_fn(shape, 1, IDENTITY_AFFINE, |i, _| fill + i[0] as f32).unwrap()
    }

    fn mem_collection(n: usize) -> DataCollection {
        let mut c = DataCollection::new(vec![
            DataGroup::new(INPUT_DATA, &["a", "b"]),
            DataGroup::new(GROUND_TRUTH, &["mask"]),
        ])
        .unwrap();
        for i in 0..n {
            c.add_case(
                Case::new(format!("c{i}"))
                    .with_group(
                        INPUT_DATA,
                        vec![
                            vol(&[4, 4, 2], i as f32).into(),
                            vol(&[4, 4, 2], 10.0).into(),
                        ],
                    )
                    .with_group(GROUND_TRUTH, vec![vol(&[4, 4, 2], 0.0).into()]),
            )
            .unwrap();
        }
        c
    }

    #[test]
    fn stacks_channels_in_label_order() {
        let c = mem_collection(1);
        let t = c.case_tensor("c0", INPUT_DATA).unwrap();
        assert_eq!(t.shape(), &[4, 4, 2, 2]);
        assert_eq!(t.get(&[3, 0, 0], 0), 3.0);
        assert_eq!(t.get(&[3, 0, 0], 1), 13.0);
        assert!(Arc::ptr_eq(&t, &c.case_tensor("c0", INPUT_DATA).unwrap()));
    }

    #[test]
    fn shape_mismatch_names_channel() {
        let mut c =
            DataCollection::new(vec![DataGroup::new(INPUT_DATA, &["FLAIR", "T1POST"])]).unwrap();
        c.add_case(Case::new("p").with_group(
            INPUT_DATA,
            vec![vol(&[16, 16, 8], 0.0).into(), vol(&[16, 16, 9], 0.0).into()],
        ))
        .unwrap();
        match c.case_tensor("p", INPUT_DATA) {
            Err(CollectionError::ShapeMismatch {
                label,
                expected,
                got,
            }) => {
                assert_eq!(label, "T1POST");
                assert_eq!(expected, vec![16, 16, 8]);
                assert_eq!(got, vec![16, 16, 9]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_on_add() {
        let mut c = mem_collection(1);
        assert!(c.add_case(Case::new("c0")).is_err());
        assert!(c
            .add_case(Case::new("x").with_group("nope", vec![vol(&[1, 1, 1], 0.0).into()]))
            .is_err());
        assert!(c
            .add_case(Case::new("y").with_group(INPUT_DATA, vec![vol(&[1, 1, 1], 0.0).into()]))
            .is_err());
        assert!(DataCollection::new(vec![DataGroup::new("g", &[])]).is_err());
        assert!(DataCollection::new(vec![
            DataGroup::new("g", &["a"]),
            DataGroup::new("g", &["b"])
        ])
        .is_err());
    }

    #[test]
    fn empty_archive_roundtrip() {
        let c = DataCollection::new(vec![DataGroup::new(INPUT_DATA, &["x"])]).unwrap();
        let back = DataCollection::decode_archive(&c.encode_archive().unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.groups(), c.groups());
    }

    #[test]
    fn archive_detects_flipped_payload() {
        let c = mem_collection(2);
        let mut bytes = c.encode_archive().unwrap();
        let last = bytes.len() - 5;
        bytes[last] ^= 0x40;
        assert!(matches!(
            DataCollection::decode_archive(&bytes),
            Err(CollectionError::ChecksumMismatch(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            DataCollection::decode_archive(&bytes),
            Err(CollectionError::BadMagic)
        ));
    }

    #[test]
    fn cache_limit_evicts_lru() {
        let c = mem_collection(3).with_cache_limit(1);
        let a = c.case_tensor("c0", INPUT_DATA).unwrap();
        c.case_tensor("c1", INPUT_DATA).unwrap();
        let a2 = c.case_tensor("c0", INPUT_DATA).unwrap();
        assert!(!Arc::ptr_eq(&a, &a2));
        assert_eq!(a, a2);
    }

    #[test]
    fn attributes_cover_all_cases() {
        let c = mem_collection(3);
        let a = c.attributes(INPUT_DATA).unwrap();
        assert_eq!(a.spatial_shape, vec![4, 4, 2]);
        assert_eq!(a.dimension, 3);
        assert_eq!(a.channels, 2);
        assert_eq!(a.intensity_range, (0.0, 13.0));
    }

    #[test]
    fn sampling_contracts() {
        let c = mem_collection(2);
        let a = c.sample_indices(4, SamplingMode::Paired, 7).unwrap();
        assert_eq!(a, c.sample_indices(4, SamplingMode::Paired, 7).unwrap());
        assert!(a.values().all(|v| v.len() == 4 && v.iter().all(|&i| i < 2)));
        assert_eq!(a[INPUT_DATA], a[GROUND_TRUTH]);
        let b = c.sample_batch(3, SamplingMode::Unpaired, 1).unwrap();
        assert_eq!(b[INPUT_DATA].shape, vec![3, 4, 4, 2, 2]);
        assert_eq!(b[GROUND_TRUTH].shape, vec![3, 4, 4, 2, 1]);
        let empty = DataCollection::new(vec![DataGroup::new(INPUT_DATA, &["x"])]).unwrap();
        assert!(matches!(
            empty.sample_batch(1, SamplingMode::Paired, 0),
            Err(CollectionError::EmptyCollection)
        ));
    }

    #[test]
    fn pattern_labels() {
        assert_eq!(label_from_pattern("FLAIR*"), "FLAIR");
        assert_eq!(label_from_pattern("T1POST.*"), "T1POST");
    }
}
