//! Labeled embedding sets: storage, synthesis and splitting.
//!
//! Each sample carries a class label `y`, a spurious attribute `a` and a group
//! id `g = y * A + a`, where `A` is the number of attribute values. Rows are
//! held as f64 in memory and stored as little-endian f32 in EMB1 files.
//!
//! EMB1 layout: magic `"EMB1"` | version `u16 = 1` | dtype `u8` (0 = f32) |
//! reserved `u8` | dim `u32` | count `u64` | `count * dim` values, row-major.
//! Labels and names live in a JSON sidecar at `<path>.meta.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    rows: Matrix,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    groups: Vec<usize>,
    num_classes: usize,
    num_attributes: usize,
    class_names: Option<Vec<String>>,
    attribute_names: Option<Vec<String>>,
}

impl EmbeddingSet {
    /// Builds a set and derives the group ids. Fails if any invariant is
    /// violated.
    pub fn new(
        rows: Matrix,
        labels: Vec<usize>,
        attributes: Vec<usize>,
        num_classes: usize,
        num_attributes: usize,
    ) -> Result<Self> {
        let n = rows.rows();
        if n == 0 {
            return Err(Error::Consistency("an embedding set needs at least one row".into()));
        }
        if rows.cols() == 0 {
            return Err(Error::Consistency("embedding dimension must be positive".into()));
        }
        if labels.len() != n || attributes.len() != n {
            return Err(Error::Consistency(format!(
                "{n} rows but {} labels and {} attributes",
                labels.len(),
                attributes.len()
            )));
        }
        if num_classes == 0 || num_attributes == 0 {
            return Err(Error::Consistency("class and attribute counts must be positive".into()));
        }
        for (i, row) in rows.iter_rows().enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteRow { row: i });
            }
        }
        let groups = derive_groups(&labels, &attributes, num_classes, num_attributes)?;
        Ok(Self {
            rows,
            labels,
            attributes,
            groups,
            num_classes,
            num_attributes,
            class_names: None,
            attribute_names: None,
        })
    }

    /// Same as [`EmbeddingSet::new`] with class and attribute counts taken
    /// as one past the largest id seen.
    pub fn from_observed(rows: Matrix, labels: Vec<usize>, attributes: Vec<usize>) -> Result<Self> {
        let c = labels.iter().max().map_or(1, |m| m + 1);
        let a = attributes.iter().max().map_or(1, |m| m + 1);
        Self::new(rows, labels, attributes, c, a)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::Consistency(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn with_attribute_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_attributes {
            return Err(Error::Consistency(format!(
                "{} attribute names for {} attributes",
                names.len(),
                self.num_attributes
            )));
        }
        self.attribute_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_attributes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn attribute_names(&self) -> Option<&[String]> {
        self.attribute_names.as_deref()
    }

    /// Sample count per group id, indexed over the full group universe.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    /// Returns a copy with the embedding rows replaced and all labels kept.
    pub fn with_rows(&self, rows: Matrix) -> Result<Self> {
        if rows.rows() != self.len() {
            return Err(Error::Consistency(format!(
                "replacement has {} rows, set has {}",
                rows.rows(),
                self.len()
            )));
        }
        if let Some(i) = rows.iter_rows().position(|r| r.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteRow { row: i });
        }
        Ok(Self {
            rows,
            ..self.clone()
        })
    }

    /// Rows at `indices`, in that order. Class and attribute universes are
    /// kept even if some ids no longer occur.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Consistency("subset would be empty".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: Matrix::from_vec(indices.len(), self.dim(), data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            attributes: indices.iter().map(|&i| self.attributes[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            ..self.clone()
        })
    }
}

/// Group id `y * A + a` for each sample.
pub fn derive_groups(
    labels: &[usize],
    attributes: &[usize],
    num_classes: usize,
    num_attributes: usize,
) -> Result<Vec<usize>> {
    if labels.len() != attributes.len() {
        return Err(Error::Consistency(format!(
            "{} labels vs {} attributes",
            labels.len(),
            attributes.len()
        )));
    }
    labels
        .iter()
        .zip(attributes)
        .enumerate()
        .map(|(i, (&y, &a))| {
            if y >= num_classes {
                Err(Error::Data(format!("label {y} at row {i} is outside [0, {num_classes})")))
            } else if a >= num_attributes {
                Err(Error::Data(format!(
                    "attribute {a} at row {i} is outside [0, {num_attributes})"
                )))
            } else {
                Ok(y * num_attributes + a)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    labels: Vec<usize>,
    attributes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_attributes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attribute_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Serializes the payload of `set` (header + f32 rows).
pub fn encode_emb1(set: &EmbeddingSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + set.len() * set.dim() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(0);
    buf.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for &x in set.rows().as_slice() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

/// Parses an EMB1 payload into `(dim, count, row-major values)`.
pub fn decode_emb1(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[6])));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    if dim == 0 {
        return Err(Error::Format("dimension is zero".into()));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(dim))
        .and_then(|v| v.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Consistency(format!(
            "header declares {count} x {dim} f32 values but payload has {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((dim, count as usize, values))
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_embeddings_with(set, path, None)
}

/// Like [`write_embeddings`], also recording `provenance` in the sidecar.
pub fn write_embeddings_with(
    set: &EmbeddingSet,
    path: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<()> {
    let meta = Sidecar {
        labels: set.labels.clone(),
        attributes: set.attributes.clone(),
        groups: Some(set.groups.clone()),
        num_classes: Some(set.num_classes),
        num_attributes: Some(set.num_attributes),
        class_names: set.class_names.clone(),
        attribute_names: set.attribute_names.clone(),
        provenance,
    };
    write_atomic(path, &encode_emb1(set))?;
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)
}

/// Reads an EMB1 file (or a `.csv` with header `d0..,label,attribute`).
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_csv(path);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dim, count, values) = decode_emb1(&bytes)?;
    let meta_path = sidecar_path(path);
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Sidecar = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.labels.len() != count || meta.attributes.len() != count {
        return Err(Error::Consistency(format!(
            "payload has {count} rows but metadata has {} labels and {} attributes",
            meta.labels.len(),
            meta.attributes.len()
        )));
    }
    let num_classes = meta
        .num_classes
        .or(meta.class_names.as_ref().map(Vec::len))
        .unwrap_or_else(|| meta.labels.iter().max().map_or(1, |m| m + 1));
    let num_attributes = meta
        .num_attributes
        .or(meta.attribute_names.as_ref().map(Vec::len))
        .unwrap_or_else(|| meta.attributes.iter().max().map_or(1, |m| m + 1));
    let mut set = EmbeddingSet::new(
        Matrix::from_vec(count, dim, values),
        meta.labels,
        meta.attributes,
        num_classes,
        num_attributes,
    )?;
    if let Some(groups) = meta.groups {
        if groups != set.groups {
            return Err(Error::Consistency(
                "sidecar group ids disagree with label * num_attributes + attribute".into(),
            ));
        }
    }
    if let Some(names) = meta.class_names {
        set = set.with_class_names(names)?;
    }
    if let Some(names) = meta.attribute_names {
        set = set.with_attribute_names(names)?;
    }
    Ok(set)
}

fn read_csv(path: &Path) -> Result<EmbeddingSet> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let ncols = headers.len();
    if ncols < 3 || &headers[ncols - 2] != "label" || &headers[ncols - 1] != "attribute" {
        return Err(Error::Format("CSV header must be d0..dD-1,label,attribute".into()));
    }
    let dim = ncols - 2;
    for (j, h) in headers.iter().take(dim).enumerate() {
        if h != format!("d{j}") {
            return Err(Error::Format(format!("CSV column {j} should be named d{j}, found {h}")));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut attributes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        if record.len() != ncols {
            return Err(Error::Consistency(format!("CSV row {i} has {} fields", record.len())));
        }
        for field in record.iter().take(dim) {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("CSV row {i}: bad number {field:?}")))?;
            data.push(x);
        }
        let parse_id = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("CSV row {i}: bad id {s:?}")))
        };
        labels.push(parse_id(&record[dim])?);
        attributes.push(parse_id(&record[dim + 1])?);
    }
    let n = labels.len();
    EmbeddingSet::from_observed(Matrix::from_vec(n, dim, data), labels, attributes)
}

/// Parameters of the planted-shortcut generator.
///
/// `group_counts` is `(n00, n01, n10, n11)` over `(y, a)` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub group_counts: [usize; 4],
    pub dim: usize,
    pub beta_core: f64,
    pub beta_spur: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.group_counts;
        if c.iter().sum::<usize>() < 4 {
            return Err(Error::Config("group_counts must total at least 4".into()));
        }
        if c[0] + c[1] == 0 || c[2] + c[3] == 0 {
            return Err(Error::Config("group_counts: each class needs at least one sample".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive and finite".into()));
        }
        if !self.beta_core.is_finite() || !self.beta_spur.is_finite() {
            return Err(Error::Config("beta_core and beta_spur must be finite".into()));
        }
        Ok(())
    }
}

/// A synthetic set together with its planted unit directions.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub set: EmbeddingSet,
    pub core_dir: Vec<f64>,
    pub spur_dir: Vec<f64>,
}

fn sign(bit: usize) -> f64 {
    if bit == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Draws `x = s(y) beta_core u_core + s(a) beta_spur u_spur + sigma eps` with
/// `s(0) = -1`, `s(1) = +1`. Rows come out grouped by cell in the order
/// (0,0), (0,1), (1,0), (1,1).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = Rng::new(cfg.seed);

    let mut core_dir = rng.normal_vec(d, 1.0);
    let n = norm(&core_dir);
    core_dir.iter_mut().for_each(|x| *x /= n);

    let mut spur_dir = rng.normal_vec(d, 1.0);
    // Two Gram–Schmidt passes leave the overlap at rounding level.
    for _ in 0..2 {
        let c = dot(&spur_dir, &core_dir);
        spur_dir.iter_mut().zip(&core_dir).for_each(|(s, u)| *s -= c * u);
    }
    let n = norm(&spur_dir);
    spur_dir.iter_mut().for_each(|x| *x /= n);

    let total: usize = cfg.group_counts.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut attributes = Vec::with_capacity(total);
    for (cell, &count) in cfg.group_counts.iter().enumerate() {
        let (y, a) = (cell / 2, cell % 2);
        let core = sign(y) * cfg.beta_core;
        let spur = sign(a) * cfg.beta_spur;
        for _ in 0..count {
            for j in 0..d {
                data.push(core * core_dir[j] + spur * spur_dir[j] + cfg.sigma * rng.normal());
            }
            labels.push(y);
            attributes.push(a);
        }
    }
    let set = EmbeddingSet::new(Matrix::from_vec(total, d, data), labels, attributes, 2, 2)?;
    Ok(SyntheticData {
        set,
        core_dir,
        spur_dir,
    })
}

/// Seeded train/validation/test split.
///
/// Validation and test sizes are `floor(N * fraction)`; the remainder goes to
/// train.
pub fn split(
    set: &EmbeddingSet,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(EmbeddingSet, EmbeddingSet, EmbeddingSet)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must be positive, got ({ft}, {fv}, {fs})"
        )));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = set.len();
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fs).floor() as usize;
    let n_train = n - n_val - n_test;
    for (name, size) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::Config(format!("{name} split would receive 0 of {n} samples")));
        }
    }
    let perm = Rng::new(seed).permutation(n);
    let (train_idx, rest) = perm.split_at(n_train);
    let (val_idx, test_idx) = rest.split_at(n_val);
    Ok((set.subset(train_idx)?, set.subset(val_idx)?, set.subset(test_idx)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EmbeddingSet {
        let rows = Matrix::from_rows(&[vec![0.1, -2.0, 3.5], vec![1e-3, 4.0, -0.25]]);
        EmbeddingSet::new(rows, vec![0, 1], vec![1, 0], 2, 2).unwrap()
    }

    #[test]
    fn groups_follow_label_times_attributes() {
        assert_eq!(derive_groups(&[0], &[1], 2, 2).unwrap(), vec![1]);
        assert_eq!(derive_groups(&[1], &[0], 2, 2).unwrap(), vec![2]);
        assert_eq!(derive_groups(&[0], &[0], 2, 2).unwrap(), vec![0]);
        assert_eq!(derive_groups(&[1], &[1], 2, 2).unwrap(), vec![3]);
        assert!(derive_groups(&[2], &[0], 2, 2).is_err());
        assert!(derive_groups(&[0], &[2], 2, 2).is_err());
    }

    #[test]
    fn group_ids_are_a_bijection() {
        let (c, a) = (3, 4);
        let mut seen = vec![false; c * a];
        for y in 0..c {
            for at in 0..a {
                let g = derive_groups(&[y], &[at], c, a).unwrap()[0];
                assert!(!seen[g]);
                seen[g] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn rejects_non_finite_rows() {
        let rows = Matrix::from_rows(&[vec![0.0, 1.0], vec![f64::NAN, 0.0]]);
        let err = EmbeddingSet::new(rows, vec![0, 0], vec![0, 0], 1, 1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteRow { row: 1 }));
    }

    #[test]
    fn written_file_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        write_embeddings(&tiny(), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, HEADER_LEN + 24);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn round_trip_preserves_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let set = tiny()
            .with_class_names(vec!["landbird".into(), "waterbird".into()])
            .unwrap();
        write_embeddings(&set, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.labels(), set.labels());
        assert_eq!(back.attributes(), set.attributes());
        assert_eq!(back.groups(), set.groups());
        assert_eq!(back.class_names(), set.class_names());
        for (a, b) in back.rows().as_slice().iter().zip(set.rows().as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode_emb1(&tiny());
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_emb1(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn label_count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let rows = Matrix::from_vec(4, 2, vec![0.5; 8]);
        let set = EmbeddingSet::new(rows, vec![0, 1, 0, 1], vec![0, 0, 1, 1], 2, 2).unwrap();
        write_embeddings(&set, &path).unwrap();
        fs::write(sidecar_path(&path), r#"{"labels":[0,1,0],"attributes":[0,0,1]}"#).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Consistency(_))));
    }

    #[test]
    fn nan_payload_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        write_embeddings(&tiny(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let off = HEADER_LEN + 3 * 4;
        bytes[off..off + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::NonFiniteRow { row: 1 })));
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let err = write_embeddings(&tiny(), Path::new("/nonexistent/dir/x.emb")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn reads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "d0,d1,label,attribute\n1.0,2.0,0,1\n-1,0.5,1,0\n").unwrap();
        let set = read_embeddings(&path).unwrap();
        assert_eq!(set.dim(), 2);
        assert_eq!(set.groups(), &[1, 2]);
        fs::write(&path, "x,y,label,attribute\n1.0,2.0,0,1\n").unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Format(_))));
    }

    #[test]
    fn noiseless_synthetic_hits_beta_core_exactly() {
        let cfg = SyntheticConfig {
            group_counts: [3, 2, 2, 3],
            dim: 8,
            beta_core: 1.7,
            beta_spur: 0.0,
            sigma: 1e-300,
            seed: 5,
        };
        let data = generate_synthetic(&cfg).unwrap();
        for i in 0..data.set.len() {
            let proj = dot(data.set.row(i), &data.core_dir);
            let expected = if data.set.labels()[i] == 1 { 1.7 } else { -1.7 };
            assert!((proj - expected).abs() < 1e-12, "{proj}");
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_orthogonal() {
        let cfg = SyntheticConfig {
            group_counts: [90, 10, 10, 90],
            dim: 64,
            beta_core: 1.0,
            beta_spur: 1.0,
            sigma: 0.5,
            seed: 11,
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.set, b.set);
        assert!(dot(&a.core_dir, &a.spur_dir).abs() < 1e-12);
        assert!((norm(&a.core_dir) - 1.0).abs() < 1e-12);
        assert!((norm(&a.spur_dir) - 1.0).abs() < 1e-12);
        assert_eq!(a.set.group_counts(), vec![90, 10, 10, 90]);
    }

    #[test]
    fn synthetic_rejects_bad_configs() {
        let base = SyntheticConfig {
            group_counts: [1, 1, 1, 1],
            dim: 4,
            beta_core: 1.0,
            beta_spur: 1.0,
            sigma: 1.0,
            seed: 0,
        };
        assert!(generate_synthetic(&base).is_ok());
        for bad in [
            SyntheticConfig { group_counts: [1, 1, 1, 0], ..base.clone() },
            SyntheticConfig { group_counts: [0, 0, 2, 2], ..base.clone() },
            SyntheticConfig { dim: 1, ..base.clone() },
            SyntheticConfig { sigma: 0.0, ..base.clone() },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let rows = Matrix::from_vec(10, 1, (0..10).map(f64::from).collect());
        let set = EmbeddingSet::from_observed(rows, vec![0; 10], vec![0; 10]).unwrap();
        let (tr, va, te) = split(&set, (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
        let again = split(&set, (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!((tr, va, te), again);
        assert!(matches!(split(&set, (0.5, 0.5, 0.5), 9), Err(Error::Config(_))));
        assert!(matches!(split(&set, (0.9, 0.05, 0.05), 9), Err(Error::Config(_))));
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let rows = Matrix::from_vec(11, 1, vec![0.0; 11]);
        let set = EmbeddingSet::from_observed(rows, vec![0; 11], vec![0; 11]).unwrap();
        let (tr, va, te) = split(&set, (0.4, 0.3, 0.3), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (5, 3, 3));
    }
}
