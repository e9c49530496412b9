//! Image metadata, embedding matrices and manifest ingestion.
//!
//! A manifest is one JSON document:
//!
//! ```json
//! {
//!   "images": [{"image_id": "a", "identity": "x", "split": "test", "flank": "left", "solidity": 0.7}],
//!   "embeddings": [{"model_id": "m", "variant": "foreground", "dim": 4, "count": 1,
//!                   "file": "m__foreground.f32", "sha256": "..."}]
//! }
//! ```
//!
//! `images` may be replaced by `"metadata_csv": "path.csv"` with header
//! `image_id,identity,split,flank,solidity`. Embedding files are headerless
//! little-endian `f32`, row-major `count x dim`. Rows follow the optional
//! `rows` list of image ids, or the image order of the metadata when absent.
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry;
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Flank {
    Left,
    Right,
    Frontal,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullRgb,
    Foreground,
    Silhouette,
    BgSilhouette,
    Inpainted,
    Mirror,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FullRgb,
        Variant::Foreground,
        Variant::Silhouette,
        Variant::BgSilhouette,
        Variant::Inpainted,
        Variant::Mirror,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FullRgb => "full_rgb",
            Variant::Foreground => "foreground",
            Variant::Silhouette => "silhouette",
            Variant::BgSilhouette => "bg_silhouette",
            Variant::Inpainted => "inpainted",
            Variant::Mirror => "mirror",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// How the rows of an embedding matrix are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Cosine similarity on l2-normalised rows.
    #[default]
    Euclidean,
    /// Rows are tangent vectors at the hyperboloid origin, scored by exp(-d).
    LorentzTangent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity: String,
    pub split: Split,
    #[serde(default)]
    pub flank: Flank,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solidity: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub variants: BTreeSet<Variant>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, identity: impl Into<String>, split: Split) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            identity: identity.into(),
            split,
            flank: Flank::Unknown,
            solidity: None,
            variants: BTreeSet::new(),
        }
    }

    pub fn with_flank(mut self, flank: Flank) -> Self {
        self.flank = flank;
        self
    }

    pub fn with_solidity(mut self, s: f64) -> Self {
        self.solidity = Some(s);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::invalid("empty image_id"));
        }
        if self.identity.is_empty() {
            return Err(Error::invalid(format!("empty identity for image_id {}", self.image_id)));
        }
        if let Some(s) = self.solidity {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!(
                    "solidity {s} outside [0,1] for image_id {}",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// An `N x D` block of `f32` embeddings for one (model, variant) pair.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub model_id: String,
    pub variant: Variant,
    pub space: Space,
    dim: usize,
    rows: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.model_id == other.model_id
            && self.variant == other.variant
            && self.space == other.space
            && self.dim == other.dim
            && self.rows == other.rows
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    pub fn new(
        model_id: impl Into<String>,
        variant: Variant,
        dim: usize,
        rows: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let model_id = model_id.into();
        let key = format!("{model_id}/{variant}");
        if dim == 0 {
            return Err(Error::invalid(format!("{key}: dim must be positive")));
        }
        if data.len() != rows.len() * dim {
            return Err(Error::invalid(format!(
                "{key}: {} values do not form {} rows of dim {dim}",
                data.len(),
                rows.len()
            )));
        }
        let mut index = HashMap::with_capacity(rows.len());
        for (i, id) in rows.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Duplicate {
                    what: "embedding row",
                    key: format!("{key}:{id}"),
                });
            }
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                key,
                image_id: rows[pos / dim].clone(),
            });
        }
        Ok(EmbeddingMatrix {
            model_id,
            variant,
            space: Space::Euclidean,
            dim,
            rows,
            data,
            index,
        })
    }

    pub fn with_space(mut self, space: Space) -> Self {
        self.space = space;
        self
    }

    pub fn key(&self) -> (String, Variant) {
        (self.model_id.clone(), self.variant)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.rows
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn row_of(&self, image_id: &str) -> Option<&[f32]> {
        self.index_of(image_id).map(|i| self.row(i))
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let row = self.row_of(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            data.extend_from_slice(row);
        }
        Ok(
            EmbeddingMatrix::new(self.model_id.clone(), self.variant, self.dim, ids.to_vec(), data)?
                .with_space(self.space),
        )
    }

    /// Copy filed under another (model, variant) key.
    pub fn renamed(&self, model_id: impl Into<String>, variant: Variant) -> EmbeddingMatrix {
        let mut m = self.clone();
        m.model_id = model_id.into();
        m.variant = variant;
        m
    }

    fn key_string(&self) -> String {
        format!("{}/{}", self.model_id, self.variant)
    }

    /// Little-endian byte image of the matrix, as stored on disk.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

/// Validated collection of image records and embedding matrices.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
    embeddings: BTreeMap<(String, Variant), EmbeddingMatrix>,
}

impl Corpus {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::Duplicate {
                    what: "image_id",
                    key: r.image_id.clone(),
                });
            }
        }
        Ok(Corpus {
            records,
            index,
            embeddings: BTreeMap::new(),
        })
    }

    /// Registers a matrix; every row must resolve to a record.
    pub fn add_embedding(&mut self, m: EmbeddingMatrix) -> Result<()> {
        for id in m.ids() {
            if !self.index.contains_key(id) {
                return Err(Error::DanglingReference {
                    key: m.key_string(),
                    image_id: id.clone(),
                });
            }
        }
        let key = m.key();
        if self.embeddings.contains_key(&key) {
            return Err(Error::Duplicate {
                what: "embedding key",
                key: m.key_string(),
            });
        }
        for id in m.ids() {
            let i = self.index[id];
            self.records[i].variants.insert(m.variant);
        }
        self.embeddings.insert(key, m);
        Ok(())
    }

    pub fn with_embedding(mut self, m: EmbeddingMatrix) -> Result<Self> {
        self.add_embedding(m)?;
        Ok(self)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn identity_of(&self, image_id: &str) -> Result<&str> {
        self.record(image_id)
            .map(|r| r.identity.as_str())
            .ok_or_else(|| Error::UnknownId(image_id.to_string()))
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &EmbeddingMatrix> {
        self.embeddings.values()
    }

    pub fn embedding(&self, model_id: &str, variant: Variant) -> Option<&EmbeddingMatrix> {
        self.embeddings.get(&(model_id.to_string(), variant))
    }

    /// Distinct model ids, sorted.
    pub fn models(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.embeddings.keys().map(|(m, _)| m).collect();
        set.into_iter().cloned().collect()
    }

    /// Image ids of `split`, in record order.
    pub fn ids_in_split(&self, split: Split) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.image_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEmbedding {
    model_id: String,
    variant: Variant,
    dim: usize,
    count: usize,
    file: String,
    sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "is_euclidean")]
    space: Space,
}

fn is_euclidean(s: &Space) -> bool {
    *s == Space::Euclidean
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    images: Option<Vec<ImageRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata_csv: Option<String>,
    #[serde(default)]
    embeddings: Vec<ManifestEmbedding>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and validates a manifest, its metadata and every embedding blob.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Corpus> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));

    let records = match (manifest.images, manifest.metadata_csv) {
        (Some(images), None) => images,
        (None, Some(csv_path)) => read_metadata_csv(resolve(base, &csv_path))?,
        (Some(_), Some(_)) => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: "give either images or metadata_csv, not both".into(),
            })
        }
        (None, None) => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: "missing images".into(),
            })
        }
    };
    let default_rows: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
    let mut corpus = Corpus::new(records)?;

    for e in manifest.embeddings {
        let key = format!("{}/{}", e.model_id, e.variant);
        let blob_path = resolve(base, &e.file);
        let bytes = fs::read(&blob_path).map_err(|err| Error::Manifest {
            path: path.to_path_buf(),
            message: format!("{key}: cannot read {}: {err}", blob_path.display()),
        })?;
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(&e.sha256) {
            return Err(Error::ChecksumMismatch {
                key,
                expected: e.sha256,
                actual,
            });
        }
        let rows = e.rows.unwrap_or_else(|| default_rows.clone());
        if rows.len() != e.count {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!("{key}: count {} but {} row ids", e.count, rows.len()),
            });
        }
        if bytes.len() != e.count * e.dim * 4 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!(
                    "{key}: file has {} bytes, expected {} x {} x 4",
                    bytes.len(),
                    e.count,
                    e.dim
                ),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = EmbeddingMatrix::new(e.model_id, e.variant, e.dim, rows, data)?.with_space(e.space);
        corpus.add_embedding(m)?;
    }
    Ok(corpus)
}

/// Writes `manifest.json` plus one blob per matrix into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut embeddings = Vec::new();
    for m in corpus.embeddings() {
        let file = format!("{}__{}.f32", m.model_id, m.variant);
        let bytes = m.to_le_bytes();
        let blob = dir.join(&file);
        fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
        embeddings.push(ManifestEmbedding {
            model_id: m.model_id.clone(),
            variant: m.variant,
            dim: m.dim(),
            count: m.len(),
            file,
            sha256: sha256_hex(&bytes),
            rows: Some(m.ids().to_vec()),
            space: m.space,
        });
    }
    let images = corpus
        .records()
        .iter()
        .map(|r| ImageRecord {
            variants: BTreeSet::new(),
            ..r.clone()
        })
        .collect();
    let manifest = Manifest {
        images: Some(images),
        metadata_csv: None,
        embeddings,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataRow {
    image_id: String,
    identity: String,
    split: Split,
    #[serde(default)]
    flank: Option<Flank>,
    #[serde(default)]
    solidity: Option<f64>,
}

/// Reads `image_id,identity,split,flank,solidity`; empty solidity is absent.
pub fn read_metadata_csv(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<MetadataRow>() {
        let row = row.map_err(csv_err)?;
        out.push(ImageRecord {
            image_id: row.image_id,
            identity: row.identity,
            split: row.split,
            flank: row.flank.unwrap_or_default(),
            solidity: row.solidity,
            variants: BTreeSet::new(),
        });
    }
    Ok(out)
}

/// Keyword rules for free-text flank descriptions: a lone "left flank" or
/// "right flank" mention decides; both or neither give `Unknown`.
pub fn parse_flank(description: &str) -> Flank {
    let d = description.to_ascii_lowercase();
    match (d.contains("left flank"), d.contains("right flank")) {
        (true, false) => Flank::Left,
        (false, true) => Flank::Right,
        _ => Flank::Unknown,
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let d = m.dim();
    let mut data = Vec::with_capacity(m.data().len());
    for (i, id) in m.ids().iter().enumerate() {
        let row = m.row(i);
        let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow(id.clone()));
        }
        data.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
    }
    debug_assert_eq!(data.len(), m.len() * d);
    Ok(EmbeddingMatrix::new(m.model_id.clone(), m.variant, d, m.ids().to_vec(), data)?.with_space(m.space))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearDuplicate {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

/// All unordered pairs with cosine similarity strictly above `threshold`,
/// most similar first. Within a pair the smaller image id comes first.
///
/// The `f32` Gram matrix only prefilters; each reported similarity is an
/// exact `f64` dot product, so the output does not depend on row order.
pub fn find_near_duplicates(m: &EmbeddingMatrix, threshold: f64) -> Result<Vec<NearDuplicate>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0,1]")));
    }
    let n = m.len();
    let gram = geometry::dot_block(m.data(), n, m.data(), n, m.dim(), Execution::default());
    let prefilter = (threshold - 1e-4) as f32;
    let per_row: Vec<Vec<NearDuplicate>> = Execution::default().map(n, |i| {
        let mut found = Vec::new();
        for j in (i + 1)..n {
            if gram[i * n + j] <= prefilter {
                continue;
            }
            let sim: f64 = m.row(i).iter().zip(m.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum();
            if sim > threshold {
                let (a, b) = if m.ids()[i] <= m.ids()[j] {
                    (&m.ids()[i], &m.ids()[j])
                } else {
                    (&m.ids()[j], &m.ids()[i])
                };
                found.push(NearDuplicate {
                    a: a.clone(),
                    b: b.clone(),
                    similarity: sim,
                });
            }
        }
        found
    });
    let mut pairs: Vec<NearDuplicate> = per_row.into_iter().flatten().collect();
    pairs.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then_with(|| x.a.cmp(&y.a))
            .then_with(|| x.b.cmp(&y.b))
    });
    Ok(pairs)
}
