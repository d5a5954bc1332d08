//! Bags, datasets and their on-disk formats.
//!
//! A bag file (`.psmx`) is a 20-byte header followed by `m·d` little-endian
//! `f32` values in row-major order:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `PSMX`               |
//! | 4      | 2    | version (u16, = 1)         |
//! | 6      | 2    | flags (u16, = 0)           |
//! | 8      | 4    | m (u32)                    |
//! | 12     | 4    | d (u32)                    |
//! | 16     | 1    | dtype (u8, 0 = f32)        |
//! | 17     | 3    | reserved, zero             |
//!
//! Labels live in the dataset manifest, not in the bag file, so the same
//! feature files can serve several tasks.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PSMX";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
const DTYPE_F32: u8 = 0;

/// A bag of instance features with its class label.
///
/// Feature values are held as `f64` but are always exactly representable as
/// `f32`, the storage type, so saving and reloading is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    id: String,
    features: Array2<f64>,
    label: usize,
}

impl Bag {
    /// Build a bag, rounding features to `f32` precision.
    pub fn new(id: impl Into<String>, mut features: Array2<f64>, label: usize) -> Result<Self> {
        let (m, d) = features.dim();
        if m == 0 || d == 0 {
            return Err(Error::EmptyBag { m, d });
        }
        for ((row, col), v) in features.indexed_iter_mut() {
            let q = *v as f32;
            if !q.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            *v = f64::from(q);
        }
        Ok(Self {
            id: id.into(),
            features,
            label,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn instance(&self, j: usize) -> ArrayView1<'_, f64> {
        self.features.row(j)
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// Number of instances.
    pub fn m(&self) -> usize {
        self.features.nrows()
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// A copy of this bag carrying a different label.
    pub fn relabeled(&self, label: usize) -> Bag {
        Bag {
            id: self.id.clone(),
            features: self.features.clone(),
            label,
        }
    }

    /// A copy of this bag keeping only the given instance rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Bag> {
        let features = self.features.select(ndarray::Axis(0), rows);
        Bag::new(self.id.clone(), features, self.label)
    }
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

pub const SOFT_LABEL_TOL: f64 = 1e-9;

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::SoftLabel("no classes".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::SoftLabel(format!(
                "component {p} is negative or non-finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SOFT_LABEL_TOL {
            return Err(Error::SoftLabel(format!("components sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        assert!(class < num_classes, "class {class} >= {num_classes}");
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self { probs }
    }

    /// `w·a + (1−w)·b`, with `w` clamped to `[0, 1]`.
    pub fn interpolate(w: f64, a: &SoftLabel, b: &SoftLabel) -> Self {
        assert_eq!(a.probs.len(), b.probs.len(), "class count mismatch");
        let w = w.clamp(0.0, 1.0);
        let probs = a
            .probs
            .iter()
            .zip(&b.probs)
            .map(|(pa, pb)| w * pa + (1.0 - w) * pb)
            .collect();
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest component; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// An ordered collection of bags sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    dim: usize,
    bags: Vec<Bag>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(num_classes: usize, dim: usize, entries: Vec<(Bag, Split)>) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Manifest(format!(
                "num_classes = {num_classes}, dim = {dim}; both must be positive"
            )));
        }
        let mut seen = HashSet::new();
        let mut bags = Vec::with_capacity(entries.len());
        let mut splits = Vec::with_capacity(entries.len());
        for (bag, split) in entries {
            if bag.d() != dim {
                return Err(Error::DimensionMismatch {
                    id: bag.id.clone(),
                    expected: dim,
                    found: bag.d(),
                });
            }
            if bag.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    id: bag.id.clone(),
                    label: bag.label,
                    num_classes,
                });
            }
            if !seen.insert(bag.id.clone()) {
                return Err(Error::DuplicateId(bag.id.clone()));
            }
            bags.push(bag);
            splits.push(split);
        }
        Ok(Self {
            num_classes,
            dim,
            bags,
            splits,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Bag, Split)> {
        self.bags.iter().zip(self.splits.iter().copied())
    }

    /// Clones of the bags tagged with `split`, in dataset order.
    pub fn split(&self, split: Split) -> Vec<Bag> {
        self.iter()
            .filter(|(_, s)| *s == split)
            .map(|(b, _)| b.clone())
            .collect()
    }
}

fn encode_bag(bag: &Bag) -> Vec<u8> {
    let (m, d) = bag.features.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m * d);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&[0, 0, 0]);
    for &v in bag.features.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

/// Decode a PSMX byte buffer into a feature matrix.
pub fn decode_features(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = u16_at(6);
    if flags != 0 {
        return Err(Error::BadHeader(format!("unknown flags {flags:#06x}")));
    }
    let m = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    if bytes[16] != DTYPE_F32 {
        return Err(Error::BadHeader(format!("unsupported dtype {}", bytes[16])));
    }
    if bytes[17..20] != [0, 0, 0] {
        return Err(Error::BadHeader("reserved bytes are not zero".into()));
    }
    if m == 0 || d == 0 {
        return Err(Error::EmptyBag { m, d });
    }
    let expected = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::BadHeader(format!("m·d overflows: {m}×{d}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected: HEADER_LEN + expected,
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(m * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / d,
                col: i % d,
            });
        }
        values.push(f64::from(v));
    }
    Ok(Array2::from_shape_vec((m, d), values).expect("shape checked"))
}

pub fn save_bag(bag: &Bag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bag(bag)).map_err(|e| Error::io(path, e))
}

/// Read only the feature matrix of a bag file.
pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// Load a bag file. The id is the file stem; the label is 0 because labels
/// are carried by the manifest (see [`load_dataset`]).
pub fn load_bag(path: impl AsRef<Path>) -> Result<Bag> {
    let path = path.as_ref();
    let features = read_features(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Bag::new(id, features, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    pub dim: usize,
    pub bags: Vec<ManifestEntry>,
}

/// Load a dataset from its JSON manifest. Relative bag paths resolve against
/// the manifest's directory.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let entries = manifest
        .bags
        .iter()
        .map(|entry| {
            let p = PathBuf::from(&entry.path);
            let p = if p.is_absolute() { p } else { base.join(p) };
            let features = read_features(&p).map_err(|e| match e {
                Error::Io { .. } => e,
                other => Error::InFile {
                    path: p.clone(),
                    source: Box::new(other),
                },
            })?;
            Ok((
                Bag::new(entry.id.clone(), features, entry.label)?,
                entry.split,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest.num_classes, manifest.dim, entries)
}

/// Write every bag as `<dir>/bags/<id>.psmx` plus `<dir>/manifest.json`.
/// Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (bag, split) in dataset.iter() {
        let rel = format!("bags/{}.psmx", bag.id());
        save_bag(bag, dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: bag.id().to_string(),
            path: rel,
            label: bag.label(),
            split,
        });
    }
    let manifest = Manifest {
        num_classes: dataset.num_classes(),
        dim: dataset.dim(),
        bags: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
