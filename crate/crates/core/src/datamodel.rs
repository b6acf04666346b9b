//! Core value types: labeled embedding sets, additive moment bundles and
//! estimated Gaussian parameters.
//!
//! A [`MomentBundle`] is the unit of communication in the protocol: per-class
//! counts and first moments, plus whichever second/higher-order sums the
//! chosen heads need. Bundles are closed under addition, which is what makes
//! the whole pipeline independent of how samples are split across clients.

use crate::error::{Error, Result};
use crate::prng::Fnv64;
use ndarray::{Array1, Array2};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Magic prefix of the packed-binary embedding file format.
pub const EMBEDDING_MAGIC: &[u8; 4] = b"GHE1";

/// Which space a bundle's statistics live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceTag {
    /// Raw encoder space.
    Raw,
    /// After the public random projection identified by `(seed, k)`.
    Projected { seed: u64, k: usize },
    /// After projection onto a Fisher basis.
    Fisher,
}

impl std::fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpaceTag::Raw => write!(f, "raw"),
            SpaceTag::Projected { seed, k } => write!(f, "projected(seed={seed}, k={k})"),
            SpaceTag::Fisher => write!(f, "fisher"),
        }
    }
}

/// On-disk embedding formats accepted by [`ingest_embeddings`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    /// One sample per line: `d` decimal features then an integer label.
    Csv,
    /// `GHE1` header, then `n` records of `d` little-endian f32 plus a u32 label.
    PackedBinary,
}

/// A validated set of labeled embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    features: Array2<f64>,
    labels: Vec<u32>,
    class_count: usize,
}

impl LabeledEmbeddingSet {
    /// Build a set from parts, enforcing the ingestion invariants
    /// (`n >= 1`, `d >= 1`, finite features, labels within range).
    pub fn new(features: Array2<f64>, labels: Vec<u32>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput("embedding set has no rows".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::DimMismatch("embedding dimension must be >= 1".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidParameter("class_count must be >= 1".into()));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label as usize >= class_count {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: label as i64,
                    class_count,
                });
            }
        }
        if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Shard view: the rows at `rows`, in order. Unlike [`Self::new`] the
    /// result may be empty — clients with no samples contribute zero bundles.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let d = self.dim();
        let mut features = Array2::<f64>::zeros((rows.len(), d));
        let mut labels = Vec::with_capacity(rows.len());
        for (dst, &src) in rows.iter().enumerate() {
            features.row_mut(dst).assign(&self.features.row(src));
            labels.push(self.labels[src]);
        }
        Self {
            features,
            labels,
            class_count: self.class_count,
        }
    }

    /// Replace features, keeping labels (used by projections).
    pub(crate) fn with_features(&self, features: Array2<f64>) -> Self {
        debug_assert_eq!(features.nrows(), self.labels.len());
        Self {
            features,
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.class_count];
        for &y in &self.labels {
            h[y as usize] += 1;
        }
        h
    }

    /// Content hash used to tie reported numbers to a concrete test set.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.features.nrows() as u64);
        h.write_u64(self.features.ncols() as u64);
        h.write_u64(self.class_count as u64);
        for v in self.features.iter() {
            h.write_f64(*v);
        }
        for &y in &self.labels {
            h.write(&y.to_le_bytes());
        }
        h.finish()
    }
}

/// Read a labeled embedding set from disk, inferring `class_count` as
/// `max(label) + 1`.
pub fn ingest_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<LabeledEmbeddingSet> {
    ingest_embeddings_with_class_count(path, format, None)
}

/// Same as [`ingest_embeddings`] with an explicit class count override, for
/// shards that may not contain every class.
pub fn ingest_embeddings_with_class_count(
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
    class_count: Option<usize>,
) -> Result<LabeledEmbeddingSet> {
    let (flat, labels, d) = match format {
        EmbeddingFormat::Csv => read_csv(path.as_ref())?,
        EmbeddingFormat::PackedBinary => {
            let (flat, labels, d, c) = read_packed(path.as_ref())?;
            let n = labels.len();
            let features = Array2::from_shape_vec((n, d), flat)
                .map_err(|e| Error::InvalidFrame(e.to_string()))?;
            let c = class_count.unwrap_or(c);
            return LabeledEmbeddingSet::new(features, labels, c);
        }
    };
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput("no rows".into()));
    }
    let inferred = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let c = class_count.unwrap_or(inferred);
    let features =
        Array2::from_shape_vec((n, d), flat).map_err(|e| Error::InvalidFrame(e.to_string()))?;
    LabeledEmbeddingSet::new(features, labels, c)
}

fn read_csv(path: &Path) -> Result<(Vec<f64>, Vec<u32>, usize)> {
    let reader = BufReader::new(File::open(path)?);
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut d: Option<usize> = None;
    let mut row = 0usize;
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::MalformedRow {
                row,
                reason: "need at least one feature and a label".into(),
            });
        }
        let row_d = fields.len() - 1;
        match d {
            None => d = Some(row_d),
            Some(expect) if expect != row_d => {
                return Err(Error::MalformedRow {
                    row,
                    reason: format!("expected {expect} features, found {row_d}"),
                })
            }
            _ => {}
        }
        for (col, field) in fields[..row_d].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::MalformedRow {
                row,
                reason: format!("feature column {col}: cannot parse '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            flat.push(v);
        }
        let label: i64 = fields[row_d].parse().map_err(|_| Error::MalformedRow {
            row,
            reason: format!("label: cannot parse '{}'", fields[row_d]),
        })?;
        if label < 0 || label > u32::MAX as i64 {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                class_count: 0,
            });
        }
        labels.push(label as u32);
        row += 1;
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("no rows".into()));
    }
    Ok((flat, labels, d.unwrap()))
}

fn read_packed(path: &Path) -> Result<(Vec<f64>, Vec<u32>, usize, usize)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::InvalidFrame(format!(
            "bad magic {magic:?}, expected GHE1"
        )));
    }
    let n = read_u32(&mut reader)? as usize;
    let d = read_u32(&mut reader)? as usize;
    let c = read_u32(&mut reader)? as usize;
    if n == 0 {
        return Err(Error::EmptyInput("no rows".into()));
    }
    if d == 0 {
        return Err(Error::DimMismatch("embedding dimension must be >= 1".into()));
    }
    let mut flat = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut buf = vec![0u8; d * 4];
    for row in 0..n {
        reader.read_exact(&mut buf).map_err(|_| Error::MalformedRow {
            row,
            reason: "truncated record".into(),
        })?;
        for (col, chunk) in buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            flat.push(v);
        }
        labels.push(read_u32(&mut reader).map_err(|_| Error::MalformedRow {
            row,
            reason: "truncated label".into(),
        })?);
    }
    Ok((flat, labels, d, c))
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    reader.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Write a set in the packed-binary format. Features are stored as f32, so
/// the round trip is bit-exact only for f32-representable values.
pub fn write_embeddings_packed(set: &LabeledEmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    w.write_all(&(set.dim() as u32).to_le_bytes())?;
    w.write_all(&(set.class_count() as u32).to_le_bytes())?;
    for (row, &label) in set.labels.iter().enumerate() {
        for v in set.features.row(row).iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.write_all(&label.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Write a set as CSV (features then label, one sample per line).
pub fn write_embeddings_csv(set: &LabeledEmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (row, &label) in set.labels.iter().enumerate() {
        let mut line = String::new();
        for v in set.features.row(row).iter() {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&format!("{label}\n"));
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Presence flags for the optional bundle fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BundleFields {
    /// Global second moment `B`.
    pub b: bool,
    /// Per-class second moments `S_c`.
    pub s: bool,
    /// Per-class elementwise square sums `D_c`.
    pub d: bool,
    /// Per-class elementwise cube and fourth-power sums (diagnostics).
    pub m34: bool,
}

/// Additive sufficient statistics at a declared dimension.
///
/// All matrix fields are stored symmetrized; addition requires matching
/// dimension, class count, space tag and field presence.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBundle {
    pub dim: usize,
    pub class_count: usize,
    /// Per-class sample counts `N_c`.
    pub counts: Vec<u64>,
    /// Per-class feature sums `A_c`, one row per class.
    pub first_moments: Array2<f64>,
    /// Global sum of outer products `B`.
    pub global_second: Option<Array2<f64>>,
    /// Per-class sums of outer products `S_c`.
    pub class_second: Option<Vec<Array2<f64>>>,
    /// Per-class elementwise square sums `D_c`, one row per class.
    pub class_sq_sums: Option<Array2<f64>>,
    /// Per-class elementwise cube sums, one row per class.
    pub class_cube_sums: Option<Array2<f64>>,
    /// Per-class elementwise fourth-power sums, one row per class.
    pub class_quart_sums: Option<Array2<f64>>,
    pub space_tag: SpaceTag,
}

const SYMMETRY_RTOL: f64 = 1e-9;
const B_VS_S_RTOL: f64 = 1e-6;
const D_VS_S_RTOL: f64 = 1e-9;

impl MomentBundle {
    /// Bundle with every requested field present and zero, the additive
    /// identity for its shape.
    pub fn zero(dim: usize, class_count: usize, fields: BundleFields, tag: SpaceTag) -> Self {
        MomentBundle {
            dim,
            class_count,
            counts: vec![0; class_count],
            first_moments: Array2::zeros((class_count, dim)),
            global_second: fields.b.then(|| Array2::zeros((dim, dim))),
            class_second: fields
                .s
                .then(|| (0..class_count).map(|_| Array2::zeros((dim, dim))).collect()),
            class_sq_sums: fields.d.then(|| Array2::zeros((class_count, dim))),
            class_cube_sums: fields.m34.then(|| Array2::zeros((class_count, dim))),
            class_quart_sums: fields.m34.then(|| Array2::zeros((class_count, dim))),
            space_tag: tag,
        }
    }

    pub fn fields(&self) -> BundleFields {
        BundleFields {
            b: self.global_second.is_some(),
            s: self.class_second.is_some(),
            d: self.class_sq_sums.is_some(),
            m34: self.class_cube_sums.is_some(),
        }
    }

    /// Total sample count.
    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Check the structural invariants: shapes, symmetry of `B`/`S_c`,
    /// consistency of `B` with the class sums and of `D_c` with `diag(S_c)`.
    pub fn validate(&self) -> Result<()> {
        if self.counts.len() != self.class_count
            || self.first_moments.dim() != (self.class_count, self.dim)
        {
            return Err(Error::DimMismatch("bundle field shapes disagree".into()));
        }
        if let Some(b) = &self.global_second {
            if b.dim() != (self.dim, self.dim) {
                return Err(Error::DimMismatch("B shape".into()));
            }
            if crate::linalg::asymmetry(&b.view()) > SYMMETRY_RTOL {
                return Err(Error::InvalidParameter("B is not symmetric".into()));
            }
        }
        if let Some(s) = &self.class_second {
            if s.len() != self.class_count {
                return Err(Error::DimMismatch("S_c count".into()));
            }
            for sc in s {
                if sc.dim() != (self.dim, self.dim) {
                    return Err(Error::DimMismatch("S_c shape".into()));
                }
                if crate::linalg::asymmetry(&sc.view()) > SYMMETRY_RTOL {
                    return Err(Error::InvalidParameter("S_c is not symmetric".into()));
                }
            }
        }
        for (name, field) in [
            ("D_c", &self.class_sq_sums),
            ("M3_c", &self.class_cube_sums),
            ("M4_c", &self.class_quart_sums),
        ] {
            if let Some(m) = field {
                if m.dim() != (self.class_count, self.dim) {
                    return Err(Error::DimMismatch(format!("{name} shape")));
                }
            }
        }
        if self.class_cube_sums.is_some() != self.class_quart_sums.is_some() {
            return Err(Error::FieldMismatch(
                "M3 and M4 must be present together".into(),
            ));
        }
        if let (Some(b), Some(s)) = (&self.global_second, &self.class_second) {
            let mut sum = Array2::<f64>::zeros((self.dim, self.dim));
            for sc in s {
                sum += sc;
            }
            let scale = b.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            for (x, y) in b.iter().zip(sum.iter()) {
                if (x - y).abs() > B_VS_S_RTOL * scale {
                    return Err(Error::InvalidParameter(
                        "B does not equal the sum of the S_c".into(),
                    ));
                }
            }
        }
        if let (Some(d), Some(s)) = (&self.class_sq_sums, &self.class_second) {
            for (c, sc) in s.iter().enumerate() {
                let scale = sc.diag().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
                for j in 0..self.dim {
                    if (d[[c, j]] - sc[[j, j]]).abs() > D_VS_S_RTOL * scale {
                        return Err(Error::InvalidParameter(
                            "D_c does not equal diag(S_c)".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_compatible(&self, other: &MomentBundle) -> Result<()> {
        if self.dim != other.dim || self.class_count != other.class_count {
            return Err(Error::DimMismatch(format!(
                "bundle shapes (dim={}, C={}) vs (dim={}, C={})",
                self.dim, self.class_count, other.dim, other.class_count
            )));
        }
        if self.space_tag != other.space_tag {
            return Err(Error::TagMismatch(format!(
                "{} vs {}",
                self.space_tag, other.space_tag
            )));
        }
        if self.fields() != other.fields() {
            return Err(Error::FieldMismatch(format!(
                "{:?} vs {:?}",
                self.fields(),
                other.fields()
            )));
        }
        Ok(())
    }

    /// Elementwise sum of every present field; counts sum exactly.
    pub fn add(&self, other: &MomentBundle) -> Result<MomentBundle> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        out.first_moments += &other.first_moments;
        if let (Some(a), Some(b)) = (&mut out.global_second, &other.global_second) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut out.class_second, &other.class_second) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in [
            (&mut out.class_sq_sums, &other.class_sq_sums),
            (&mut out.class_cube_sums, &other.class_cube_sums),
            (&mut out.class_quart_sums, &other.class_quart_sums),
        ] {
            if let (Some(x), Some(y)) = (a, b) {
                *x += y;
            }
        }
        Ok(out)
    }

    /// Content hash over every field, for audit trails.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.dim as u64);
        h.write_u64(self.class_count as u64);
        match self.space_tag {
            SpaceTag::Raw => h.write_u64(0),
            SpaceTag::Projected { seed, k } => {
                h.write_u64(1);
                h.write_u64(seed);
                h.write_u64(k as u64);
            }
            SpaceTag::Fisher => h.write_u64(2),
        }
        for &c in &self.counts {
            h.write_u64(c);
        }
        for v in self.first_moments.iter() {
            h.write_f64(*v);
        }
        if let Some(b) = &self.global_second {
            for v in b.iter() {
                h.write_f64(*v);
            }
        }
        if let Some(s) = &self.class_second {
            for sc in s {
                for v in sc.iter() {
                    h.write_f64(*v);
                }
            }
        }
        for field in [
            &self.class_sq_sums,
            &self.class_cube_sums,
            &self.class_quart_sums,
        ] {
            if let Some(m) = field {
                for v in m.iter() {
                    h.write_f64(*v);
                }
            }
        }
        h.finish()
    }
}

/// Sum of many bundles over a balanced binary reduction tree. The tree shape
/// depends only on the slice length, so results are reproducible regardless
/// of how the bundles were produced.
pub fn sum_bundles(bundles: &[MomentBundle]) -> Result<MomentBundle> {
    match bundles.len() {
        0 => Err(Error::EmptyInput("no bundles to sum".into())),
        1 => Ok(bundles[0].clone()),
        n => {
            let mid = n / 2;
            let left = sum_bundles(&bundles[..mid])?;
            let right = sum_bundles(&bundles[mid..])?;
            left.add(&right)
        }
    }
}

/// Free-function alias for [`MomentBundle::add`].
pub fn add_bundles(a: &MomentBundle, b: &MomentBundle) -> Result<MomentBundle> {
    a.add(b)
}

/// Estimated Gaussian parameters for the retained classes.
///
/// Classes dropped by the minimum-count threshold are recorded in
/// `dropped_classes`; `class_labels[i]` is the original label of retained
/// row `i`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub dim: usize,
    /// Original label of each retained class row.
    pub class_labels: Vec<usize>,
    /// Labels dropped for falling below the minimum count.
    pub dropped_classes: Vec<usize>,
    /// Retained per-class counts.
    pub counts: Vec<u64>,
    /// Class means, one row per retained class.
    pub class_means: Array2<f64>,
    /// Log prior per retained class (priors sum to 1 before the log).
    pub log_priors: Array1<f64>,
    /// Shrunk pooled covariance.
    pub pooled_cov: Option<Array2<f64>>,
    /// Shrunk per-class covariances.
    pub class_covs: Option<Vec<Array2<f64>>>,
    /// Per-class diagonal variances (floored), one row per retained class.
    pub class_vars: Option<Array2<f64>>,
}

impl GaussianParams {
    pub fn class_count(&self) -> usize {
        self.class_labels.len()
    }

    pub fn priors(&self) -> Array1<f64> {
        self.log_priors.mapv(f64::exp)
    }

    /// Map retained-row predictions back to original labels.
    pub fn to_original_label(&self, retained: usize) -> usize {
        self.class_labels[retained]
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.dim as u64);
        for &l in &self.class_labels {
            h.write_u64(l as u64);
        }
        for v in self.class_means.iter() {
            h.write_f64(*v);
        }
        for v in self.log_priors.iter() {
            h.write_f64(*v);
        }
        if let Some(p) = &self.pooled_cov {
            for v in p.iter() {
                h.write_f64(*v);
            }
        }
        if let Some(cs) = &self.class_covs {
            for c in cs {
                for v in c.iter() {
                    h.write_f64(*v);
                }
            }
        }
        if let Some(v) = &self.class_vars {
            for x in v.iter() {
                h.write_f64(*x);
            }
        }
        h.finish()
    }
}
