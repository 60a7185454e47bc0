//! Data model shared by every stage: embedding sets, transfer and distance
//! matrices, the library manifest, and their on-disk formats.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DGE1";

/// One dataset's embedded samples, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    id: String,
    z: Array2<f64>,
    labels: Option<Vec<usize>>,
    class_index: BTreeMap<usize, Vec<usize>>,
}

impl EmbeddingSet {
    pub fn new(id: impl Into<String>, z: Array2<f64>) -> Result<Self> {
        Self::build(id.into(), z, None)
    }

    pub fn labeled(id: impl Into<String>, z: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::build(id.into(), z, Some(labels))
    }

    fn build(id: String, z: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        validate_id(&id)?;
        let (n, d) = z.dim();
        if n == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "embedding set `{id}` is {n}x{d}; need n >= 1 and d >= 1"
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embeddings of `{id}`")));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "`{id}` has {n} samples but {} labels",
                    labels.len()
                )));
            }
            for (row, &c) in labels.iter().enumerate() {
                class_index.entry(c).or_default().push(row);
            }
        }
        Ok(Self {
            id,
            z,
            labels,
            class_index,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// Classes present in this set, ascending.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_index.keys().copied()
    }

    pub fn class_rows(&self, class: usize) -> Option<&[usize]> {
        self.class_index.get(&class).map(Vec::as_slice)
    }

    pub fn class_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.class_index
    }

    /// Classes present in both sets, ascending. Empty when either side is unlabeled.
    pub fn shared_classes(&self, other: &EmbeddingSet) -> Vec<usize> {
        self.class_index
            .keys()
            .filter(|c| other.class_index.contains_key(c))
            .copied()
            .collect()
    }

    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.z.select(Axis(0), indices)
    }

    /// Same samples, new embedding coordinates (e.g. after a head pass).
    pub fn with_embeddings(&self, z: Array2<f64>) -> Result<Self> {
        if z.nrows() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "replacement embeddings for `{}` have {} rows, expected {}",
                self.id,
                z.nrows(),
                self.n()
            )));
        }
        Self::build(self.id.clone(), z, self.labels.clone())
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::build(self.id.clone(), self.z.clone(), Some(labels))
    }

    pub fn without_labels(&self) -> Self {
        Self {
            id: self.id.clone(),
            z: self.z.clone(),
            labels: None,
            class_index: BTreeMap::new(),
        }
    }

    /// Keep only the given rows (labels follow their samples).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let z = self.rows(indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::build(self.id.clone(), z, labels)
    }

    pub fn renamed(&self, id: impl Into<String>) -> Result<Self> {
        Self::build(id.into(), self.z.clone(), self.labels.clone())
    }
}

/// Convention of the values stored in a transfer matrix. Only the error
/// convention is held in memory; accuracy files are converted on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    ErrorLowIsBetter,
}

/// Directed N x N transfer matrix: entry (i, j) is the error of a model
/// trained on dataset i and evaluated on dataset j.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    ids: Vec<String>,
    values: Array2<f64>,
}

impl TransferMatrix {
    pub fn new(ids: Vec<String>, values: Array2<f64>) -> Result<Self> {
        check_square(&values)?;
        check_ids(&ids, values.nrows())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transfer matrix".into()));
        }
        Ok(Self { ids, values })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn convention(&self) -> Convention {
        Convention::ErrorLowIsBetter
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        index_of(&self.ids, id)
    }

    /// Reorder to `ids`, which must name the same set of datasets.
    pub fn permuted(&self, ids: &[String]) -> Result<Self> {
        let perm = permutation_to(&self.ids, ids)?;
        Ok(Self {
            ids: ids.to_vec(),
            values: permute_square(&self.values, &perm),
        })
    }

    /// Submatrix over the given positions, in the given order.
    pub fn submatrix(&self, positions: &[usize]) -> Self {
        Self {
            ids: positions.iter().map(|&i| self.ids[i].clone()).collect(),
            values: permute_square(&self.values, positions),
        }
    }
}

/// Symmetric or directed N x N dataset distance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Symmetric,
    Directed,
}

impl DistanceKind {
    fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Symmetric => "symmetric",
            DistanceKind::Directed => "directed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    values: Array2<f64>,
    kind: DistanceKind,
    metric_tag: String,
}

impl DistanceMatrix {
    pub fn new(
        ids: Vec<String>,
        values: Array2<f64>,
        kind: DistanceKind,
        metric_tag: impl Into<String>,
    ) -> Result<Self> {
        check_square(&values)?;
        check_ids(&ids, values.nrows())?;
        let n = values.nrows();
        for i in 0..n {
            for j in 0..n {
                let v = values[[i, j]];
                if !v.is_finite() {
                    return Err(Error::NonFinite("distance matrix".into()));
                }
                if v < 0.0 {
                    return Err(Error::parse("distance matrix", format!("negative entry at ({i},{j})")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::parse("distance matrix", format!("nonzero diagonal at {i}")));
                }
                if kind == DistanceKind::Symmetric && v != values[[j, i]] {
                    return Err(Error::parse(
                        "distance matrix",
                        format!("kind=symmetric but entry ({i},{j}) differs from ({j},{i})"),
                    ));
                }
            }
        }
        Ok(Self {
            ids,
            values,
            kind,
            metric_tag: metric_tag.into(),
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn metric_tag(&self) -> &str {
        &self.metric_tag
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        index_of(&self.ids, id)
    }

    pub fn permuted(&self, ids: &[String]) -> Result<Self> {
        let perm = permutation_to(&self.ids, ids)?;
        Ok(Self {
            ids: ids.to_vec(),
            values: permute_square(&self.values, &perm),
            kind: self.kind,
            metric_tag: self.metric_tag.clone(),
        })
    }

    /// Symmetric matrix with entries (D + D^T) / 2; identity on symmetric input.
    pub fn symmetrized(&self) -> Self {
        if self.kind == DistanceKind::Symmetric {
            return self.clone();
        }
        Self {
            ids: self.ids.clone(),
            values: symmetrize_values(&self.values),
            kind: DistanceKind::Symmetric,
            metric_tag: format!("{}+sym", self.metric_tag),
        }
    }
}

/// P~ = (P + P^T) / 2.
pub fn symmetrize(p: &TransferMatrix) -> TransferMatrix {
    TransferMatrix {
        ids: p.ids.clone(),
        values: symmetrize_values(&p.values),
    }
}

fn symmetrize_values(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        // same operand order for (i,j) and (j,i) keeps the result exactly symmetric
        let (a, b) = if i <= j { (m[[i, j]], m[[j, i]]) } else { (m[[j, i]], m[[i, j]]) };
        (a + b) / 2.0
    })
}

/// Entries above the diagonal in row-major order.
pub fn upper_triangle(m: &Array2<f64>) -> Result<Vec<f64>> {
    check_square(m)?;
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m[[i, j]]);
        }
    }
    Ok(out)
}

/// All ordered off-diagonal entries, row-major.
pub fn off_diagonal(m: &Array2<f64>) -> Result<Vec<f64>> {
    check_square(m)?;
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(m[[i, j]]);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub split_tags: BTreeMap<String, Split>,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl LibraryManifest {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            validate_id(&entry.dataset_id)?;
            if !seen.insert(entry.dataset_id.as_str()) {
                return Err(Error::DuplicateId(entry.dataset_id.clone()));
            }
            if entry.embedding_path.is_none() && entry.raw_path.is_none() {
                return Err(Error::MissingField(format!(
                    "embedding_path or raw_path for `{}`",
                    entry.dataset_id
                )));
            }
            for p in [&entry.embedding_path, &entry.raw_path, &entry.labels_path]
                .into_iter()
                .flatten()
            {
                let s = p.to_string_lossy();
                if s.is_empty() || s.contains('\0') {
                    return Err(Error::parse("manifest", format!("invalid path `{s}`")));
                }
            }
        }
        for id in self.split_tags.keys() {
            if !seen.contains(id.as_str()) {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.dataset_id.clone()).collect()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Ids tagged `split`; every id when the manifest carries no tags.
    pub fn ids_in(&self, split: Split) -> Vec<String> {
        if self.split_tags.is_empty() {
            return self.ids();
        }
        self.entries
            .iter()
            .filter(|e| self.split_tags.get(&e.dataset_id) == Some(&split))
            .map(|e| e.dataset_id.clone())
            .collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<LibraryManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: LibraryManifest = serde_json::from_str(&text).map_err(|e| {
        if e.to_string().starts_with("missing field") {
            Error::MissingField(e.to_string())
        } else {
            Error::parse(path.display().to_string(), e)
        }
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &LibraryManifest) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::parse("manifest", e))?;
    write_file(path, format!("{text}\n").as_bytes())
}

/// A loaded library: embedding sets in manifest order plus the label-name map.
#[derive(Debug, Clone)]
pub struct Library {
    pub sets: Vec<EmbeddingSet>,
    /// `label_names[c]` is the original label value of contiguous class `c`.
    pub label_names: Vec<i64>,
}

impl Library {
    pub fn ids(&self) -> Vec<String> {
        self.sets.iter().map(|s| s.id().to_string()).collect()
    }
}

/// Labels of every entry, with original values mapped library-wide onto
/// 0..C-1 in ascending order so class ids agree across datasets. Returns the
/// per-entry labels and the label-name map.
pub fn load_labels(manifest: &LibraryManifest) -> Result<(Vec<Option<Vec<usize>>>, Vec<i64>)> {
    let mut raw = Vec::with_capacity(manifest.entries.len());
    let mut names = BTreeSet::new();
    for entry in &manifest.entries {
        let labels = match &entry.labels_path {
            Some(p) => {
                let l = read_labels(&manifest.resolve(p))?;
                names.extend(l.iter().copied());
                Some(l)
            }
            None => None,
        };
        raw.push(labels);
    }
    let label_names: Vec<i64> = names.into_iter().collect();
    let lookup: HashMap<i64, usize> = label_names.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mapped = raw
        .into_iter()
        .map(|l| l.map(|l| l.iter().map(|v| lookup[v]).collect()))
        .collect();
    Ok((mapped, label_names))
}

/// Path holding an entry's input matrix: `embedding_path`, else `raw_path`.
pub fn input_path(manifest: &LibraryManifest, entry: &ManifestEntry) -> PathBuf {
    let p = entry
        .embedding_path
        .as_ref()
        .or(entry.raw_path.as_ref())
        .expect("validated manifest");
    manifest.resolve(p)
}

/// Assemble embedding sets from per-entry matrices and the library labels.
pub fn assemble_library(manifest: &LibraryManifest, matrices: Vec<Array2<f64>>) -> Result<Library> {
    let (labels, label_names) = load_labels(manifest)?;
    let sets = manifest
        .entries
        .iter()
        .zip(matrices)
        .zip(labels)
        .map(|((entry, z), l)| match l {
            Some(l) => EmbeddingSet::labeled(entry.dataset_id.clone(), z, l),
            None => EmbeddingSet::new(entry.dataset_id.clone(), z),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Library { sets, label_names })
}

/// Load every entry's input matrix and labels.
pub fn load_library(manifest: &LibraryManifest) -> Result<Library> {
    manifest.validate()?;
    let matrices = manifest
        .entries
        .iter()
        .map(|e| read_embeddings(&input_path(manifest, e)))
        .collect::<Result<Vec<_>>>()?;
    assemble_library(manifest, matrices)
}

// ---------------------------------------------------------------------------
// binary embeddings and label files

pub fn read_embeddings(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

/// (rows, cols) from the header of an embedding file, without reading the payload.
pub fn read_embedding_dims(path: &Path) -> Result<(usize, usize)> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    f.read_exact(&mut header)
        .map_err(|_| Error::parse(path.display().to_string(), "truncated header"))?;
    if &header[..4] != EMBEDDING_MAGIC {
        return Err(Error::parse(path.display().to_string(), "bad magic, expected DGE1"));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    Ok((n, d))
}

pub fn decode_embeddings(mut reader: impl Read) -> Result<Array2<f64>> {
    let ctx = "embedding file";
    let mut header = [0u8; 12];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::parse(ctx, "truncated header"))?;
    if &header[..4] != EMBEDDING_MAGIC {
        return Err(Error::parse(ctx, "bad magic, expected DGE1"));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| Error::parse(ctx, e))?;
    if body.len() != n * d * 4 {
        return Err(Error::parse(
            ctx,
            format!("expected {} payload bytes for {n}x{d}, found {}", n * d * 4, body.len()),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(ctx.into()));
    }
    Array2::from_shape_vec((n, d), values).map_err(|e| Error::parse(ctx, e))
}

pub fn encode_embeddings(z: &Array2<f64>) -> Vec<u8> {
    let (n, d) = z.dim();
    let mut out = Vec::with_capacity(12 + n * d * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in z.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_embeddings(path: &Path, z: &Array2<f64>) -> Result<()> {
    write_file(path, &encode_embeddings(z))
}

pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v = t.parse::<i64>().map_err(|e| {
            Error::parse(format!("{}:{}", path.display(), lineno + 1), e)
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 2);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// matrix CSV
//
// First row and first column hold dataset ids. The top-left cell carries
// `;`-separated `key=value` tags (`convention=accuracy`, `kind=directed`, ...).

#[derive(Debug, Clone, Default)]
struct MatrixCsv {
    tags: BTreeMap<String, String>,
    ids: Vec<String>,
    values: Array2<f64>,
}

fn parse_tags(cell: &str) -> Result<BTreeMap<String, String>> {
    let mut tags = BTreeMap::new();
    for part in cell.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('=') {
            Some((k, v)) => {
                tags.insert(k.trim().to_string(), v.trim().to_string());
            }
            // a bare word in the corner is treated as the convention flag
            None => {
                tags.insert("convention".into(), part.to_string());
            }
        }
    }
    Ok(tags)
}

fn read_matrix_csv(path: &Path) -> Result<MatrixCsv> {
    let ctx = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::parse(&ctx, e),
        })?;
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| Error::parse(&ctx, "empty file"))?
        .map_err(|e| Error::parse(&ctx, e))?;
    let tags = parse_tags(header.get(0).unwrap_or(""))?;
    let col_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut row_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::parse(&ctx, e))?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        row_ids.push(rec.get(0).unwrap_or("").trim().to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(&ctx, format!("`{c}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != col_ids.len() {
            return Err(Error::NonSquare {
                rows: row_ids.len(),
                cols: col_ids.len().max(row.len()),
            });
        }
        rows.push(row);
    }
    if rows.len() != col_ids.len() {
        return Err(Error::NonSquare {
            rows: rows.len(),
            cols: col_ids.len(),
        });
    }
    if row_ids != col_ids {
        return Err(Error::IdMismatch(format!(
            "{ctx}: row ids {row_ids:?} differ from column ids {col_ids:?}"
        )));
    }
    for id in &col_ids {
        validate_id(id)?;
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(ctx));
    }
    let values = Array2::from_shape_vec((n, n), flat).map_err(|e| Error::parse(&ctx, e))?;
    Ok(MatrixCsv {
        tags,
        ids: col_ids,
        values,
    })
}

fn write_matrix_csv(path: &Path, corner: &str, ids: &[String], values: &Array2<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec![corner.to_string()];
    header.extend(ids.iter().cloned());
    writer.write_record(&header).map_err(|e| Error::parse("csv", e))?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(values.row(i).iter().map(|v| format!("{v:?}")));
        writer.write_record(&row).map_err(|e| Error::parse("csv", e))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::parse("csv", e))?;
    write_file(path, &bytes)
}

/// Load a transfer matrix and permute it into `ids` order. A corner tag of
/// `convention=accuracy` converts each entry through e = 1 - a.
pub fn load_transfer_matrix(path: &Path, ids: &[String]) -> Result<TransferMatrix> {
    let csv = read_matrix_csv(path)?;
    let mut values = csv.values;
    match csv.tags.get("convention").map(|s| s.to_ascii_lowercase()) {
        None => {}
        Some(c) if c == "error" => {}
        Some(c) if c == "accuracy" => values.mapv_inplace(|a| 1.0 - a),
        Some(other) => {
            return Err(Error::parse(path.display().to_string(), format!("unknown convention `{other}`")))
        }
    }
    TransferMatrix::new(csv.ids, values)?.permuted(ids)
}

/// Load a transfer matrix in the order stored in the file.
pub fn load_transfer_matrix_as_stored(path: &Path) -> Result<TransferMatrix> {
    let csv = read_matrix_csv(path)?;
    let ids = csv.ids.clone();
    load_transfer_matrix(path, &ids)
}

pub fn write_transfer_matrix(path: &Path, p: &TransferMatrix) -> Result<()> {
    write_matrix_csv(path, "convention=error", &p.ids, &p.values)
}

pub fn load_distance_matrix(path: &Path, ids: Option<&[String]>) -> Result<DistanceMatrix> {
    let csv = read_matrix_csv(path)?;
    let kind = match csv.tags.get("kind").map(String::as_str) {
        None | Some("symmetric") => DistanceKind::Symmetric,
        Some("directed") => DistanceKind::Directed,
        Some(other) => {
            return Err(Error::parse(path.display().to_string(), format!("unknown kind `{other}`")))
        }
    };
    let tag = csv.tags.get("metric").cloned().unwrap_or_default();
    let d = DistanceMatrix::new(csv.ids, csv.values, kind, tag)?;
    match ids {
        Some(ids) => d.permuted(ids),
        None => Ok(d),
    }
}

pub fn write_distance_matrix(path: &Path, d: &DistanceMatrix) -> Result<()> {
    let corner = format!("kind={};metric={}", d.kind.as_str(), d.metric_tag);
    write_matrix_csv(path, &corner, &d.ids, &d.values)
}

// ---------------------------------------------------------------------------
// helpers

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn validate_id(id: &str) -> Result<()> {
    if id.trim().is_empty() || id == "." || id != id.trim() {
        return Err(Error::InvalidId(id.to_string()));
    }
    Ok(())
}

fn check_square(m: &Array2<f64>) -> Result<()> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::NonSquare { rows: r, cols: c });
    }
    Ok(())
}

fn check_ids(ids: &[String], n: usize) -> Result<()> {
    if ids.len() != n {
        return Err(Error::IdMismatch(format!("{} ids for a {n}x{n} matrix", ids.len())));
    }
    let mut seen = BTreeSet::new();
    for id in ids {
        validate_id(id)?;
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

fn index_of(ids: &[String], id: &str) -> Result<usize> {
    ids.iter()
        .position(|x| x == id)
        .ok_or_else(|| Error::UnknownId(id.to_string()))
}

/// For each id in `target`, its position in `source`.
fn permutation_to(source: &[String], target: &[String]) -> Result<Vec<usize>> {
    let a: BTreeSet<&String> = source.iter().collect();
    let b: BTreeSet<&String> = target.iter().collect();
    if a != b || source.len() != target.len() {
        return Err(Error::IdMismatch(format!("{source:?} vs {target:?}")));
    }
    target.iter().map(|id| index_of(source, id)).collect()
}

fn permute_square(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let n = perm.len();
    Array2::from_shape_fn((n, n), |(i, j)| m[[perm[i], perm[j]]])
}

pub(crate) fn mean_row(z: &Array2<f64>) -> Array1<f64> {
    z.mean_axis(Axis(0)).expect("nonempty matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn symmetrize_examples() {
        let p = TransferMatrix::new(ids(&["a", "b"]), array![[0.0, 0.2], [0.4, 0.0]]).unwrap();
        let s = symmetrize(&p);
        assert!((s.values()[[0, 1]] - 0.3).abs() < 1e-15);
        assert_eq!(s.values()[[0, 1]], s.values()[[1, 0]]);

        let p = TransferMatrix::new(ids(&["a", "b"]), array![[0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(symmetrize(&p).values(), &array![[0.0, 0.5], [0.5, 0.0]]);

        let sym = TransferMatrix::new(ids(&["a", "b"]), array![[0.1, 0.3], [0.3, 0.2]]).unwrap();
        assert_eq!(symmetrize(&sym), sym);
    }

    #[test]
    fn upper_triangle_examples() {
        let m = Array2::from_shape_fn((3, 3), |(i, j)| (10 * i + j) as f64);
        assert_eq!(upper_triangle(&m).unwrap(), vec![1.0, 2.0, 12.0]);
        let m2 = array![[0.0, 5.0], [6.0, 0.0]];
        assert_eq!(upper_triangle(&m2).unwrap(), vec![5.0]);
        assert!(upper_triangle(&array![[1.0]]).unwrap().is_empty());
        assert!(matches!(
            upper_triangle(&Array2::zeros((2, 3))),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn class_index_partitions_rows() {
        let z = Array2::zeros((5, 2));
        let s = EmbeddingSet::labeled("x", z, vec![1, 0, 1, 2, 0]).unwrap();
        assert_eq!(s.class_rows(0).unwrap(), &[1, 4]);
        assert_eq!(s.class_rows(1).unwrap(), &[0, 2]);
        assert_eq!(s.class_rows(2).unwrap(), &[3]);
        let total: usize = s.class_index().values().map(Vec::len).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn embedding_set_rejects_bad_input() {
        assert!(EmbeddingSet::new("x", Array2::zeros((0, 3))).is_err());
        assert!(EmbeddingSet::new("x", array![[f64::NAN]]).is_err());
        assert!(EmbeddingSet::labeled("x", Array2::zeros((2, 1)), vec![0]).is_err());
        assert!(EmbeddingSet::new(".", Array2::zeros((1, 1))).is_err());
    }

    #[test]
    fn distance_matrix_invariants_enforced() {
        let ok = DistanceMatrix::new(ids(&["a", "b"]), array![[0.0, 1.0], [1.0, 0.0]], DistanceKind::Symmetric, "t");
        assert!(ok.is_ok());
        let asym = array![[0.0, 1.0], [2.0, 0.0]];
        assert!(DistanceMatrix::new(ids(&["a", "b"]), asym.clone(), DistanceKind::Symmetric, "t").is_err());
        assert!(DistanceMatrix::new(ids(&["a", "b"]), asym, DistanceKind::Directed, "t").is_ok());
        assert!(DistanceMatrix::new(ids(&["a", "b"]), array![[0.0, -1.0], [-1.0, 0.0]], DistanceKind::Directed, "t").is_err());
        assert!(DistanceMatrix::new(ids(&["a", "b"]), array![[0.1, 1.0], [1.0, 0.0]], DistanceKind::Directed, "t").is_err());
    }

    #[test]
    fn permuted_reorders_rows_and_columns() {
        let p = TransferMatrix::new(ids(&["a", "b"]), array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let q = p.permuted(&ids(&["b", "a"])).unwrap();
        assert_eq!(q.values(), &array![[4.0, 3.0], [2.0, 1.0]]);
        assert!(p.permuted(&ids(&["a", "c"])).is_err());
    }
}
