//! Per-client reduction of a shard to its sufficient statistics.
//!
//! Accumulation runs in f64 over fixed 256-row chunks whose partial bundles
//! are merged along a balanced binary tree. The tree shape depends only on
//! the shard length, which keeps sums order-stable enough that re-splitting
//! the same data across clients reproduces parameters to ~1e-10 relative.

use crate::datamodel::{BundleFields, LabeledEmbeddingSet, MomentBundle, SpaceTag, sum_bundles};
use crate::error::Result;
use crate::sketch::{project_set, ProjectionMatrix};

const CHUNK: usize = 256;

/// Which optional statistics a client should produce. Counts and first
/// moments are always produced.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatsRequest {
    pub want_b: bool,
    pub want_s: bool,
    pub want_d: bool,
    /// Elementwise cube and fourth-power sums for Gaussianity diagnostics.
    pub want_m34: bool,
    /// Project samples through this public sketch before accumulating.
    pub project_with: Option<ProjectionHeader>,
}

/// The `(seed, d, k)` header that identifies a public projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHeader {
    pub seed: u64,
    pub d: usize,
    pub k: usize,
}

impl StatsRequest {
    /// The fields the produced bundle will carry.
    pub fn fields(&self) -> BundleFields {
        BundleFields {
            b: self.want_b,
            s: self.want_s,
            d: self.want_d,
            m34: self.want_m34,
        }
    }

    fn tag(&self, raw_dim: usize) -> SpaceTag {
        match self.project_with {
            Some(h) => SpaceTag::Projected { seed: h.seed, k: h.k },
            None => {
                let _ = raw_dim;
                SpaceTag::Raw
            }
        }
    }
}

/// Reduce a shard to a [`MomentBundle`]. An empty shard yields the zero
/// bundle for the requested shape.
pub fn compute_bundle(shard: &LabeledEmbeddingSet, req: &StatsRequest) -> Result<MomentBundle> {
    let c = shard.class_count();
    let (working, out_dim) = match req.project_with {
        Some(h) => {
            let r = ProjectionMatrix::generate(h.seed, h.d, h.k)?;
            (project_set(shard, &r)?, h.k)
        }
        None => (shard.clone(), shard.dim()),
    };
    let fields = req.fields();
    let tag = req.tag(shard.dim());
    let n = working.len();
    if n == 0 {
        return Ok(MomentBundle::zero(out_dim, c, fields, tag));
    }

    let mut partials = Vec::with_capacity(n.div_ceil(CHUNK));
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        partials.push(accumulate_rows(&working, start, end, fields, tag));
        start = end;
    }
    let mut bundle = sum_bundles(&partials)?;
    // D_c shares S_c's accumulation path when both are present, making
    // diag(S_c) == D_c exact rather than merely close.
    if let (true, Some(ss)) = (fields.d, &bundle.class_second) {
        let d = bundle.class_sq_sums.as_mut().expect("requested");
        for (c_idx, s) in ss.iter().enumerate() {
            for j in 0..bundle.dim {
                d[[c_idx, j]] = s[[j, j]];
            }
        }
    }
    debug_assert!(bundle.validate().is_ok());
    Ok(bundle)
}

/// Convenience wrapper: statistics of the rows `rows` of `set`.
pub fn compute_bundle_rows(
    set: &LabeledEmbeddingSet,
    rows: &[usize],
    req: &StatsRequest,
) -> Result<MomentBundle> {
    compute_bundle(&set.subset(rows), req)
}

fn accumulate_rows(
    set: &LabeledEmbeddingSet,
    start: usize,
    end: usize,
    fields: BundleFields,
    tag: SpaceTag,
) -> MomentBundle {
    let k = set.dim();
    let c = set.class_count();
    let mut bundle = MomentBundle::zero(k, c, fields, tag);
    for row in start..end {
        let x = set.features().row(row);
        let y = set.labels()[row] as usize;
        bundle.counts[y] += 1;
        {
            let mut a = bundle.first_moments.row_mut(y);
            for j in 0..k {
                a[j] += x[j];
            }
        }
        if let Some(b) = &mut bundle.global_second {
            outer_add(b, x.as_slice().unwrap());
        }
        if let Some(ss) = &mut bundle.class_second {
            outer_add(&mut ss[y], x.as_slice().unwrap());
        }
        if fields.d && !fields.s {
            let d = bundle.class_sq_sums.as_mut().unwrap();
            for j in 0..k {
                d[[y, j]] += x[j] * x[j];
            }
        }
        if fields.m34 {
            let m3 = bundle.class_cube_sums.as_mut().unwrap();
            for j in 0..k {
                m3[[y, j]] += x[j] * x[j] * x[j];
            }
            let m4 = bundle.class_quart_sums.as_mut().unwrap();
            for j in 0..k {
                m4[[y, j]] += x[j] * x[j] * x[j] * x[j];
            }
        }
    }
    if fields.d && fields.s {
        let ss = bundle.class_second.as_ref().unwrap();
        let d = bundle.class_sq_sums.as_mut().unwrap();
        for (c_idx, s) in ss.iter().enumerate() {
            for j in 0..k {
                d[[c_idx, j]] = s[[j, j]];
            }
        }
    }
    bundle
}

fn outer_add(m: &mut ndarray::Array2<f64>, x: &[f64]) {
    let k = x.len();
    let flat = m.as_slice_mut().unwrap();
    for i in 0..k {
        let xi = x[i];
        let row = &mut flat[i * k..(i + 1) * k];
        for j in 0..k {
            row[j] += xi * x[j];
        }
    }
}
