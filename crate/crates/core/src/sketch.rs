//! Public random-projection sketch.
//!
//! The projection matrix is a pure function of `(seed, d, k)`: entries are
//! i.i.d. `N(0, 1/k)` drawn from the counter PRNG in [`crate::prng`], entry
//! `(i, j)` at counter `i*k + j`. Only the header travels between parties;
//! every implementation of the generator regenerates the same matrix. The
//! Gaussian `1/k` scaling keeps expected squared norms invariant, so the
//! sketch behaves as a Johnson–Lindenstrauss map.
//!
//! Moments accumulate linearly through the sketch: `A R`, `R^T B R` and
//! `R^T S_c R` equal the moments of the projected samples, so projecting a
//! bundle commutes with accumulating one.

use crate::datamodel::{LabeledEmbeddingSet, MomentBundle, SpaceTag};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::prng;
use ndarray::Array2;

/// Stream tag mixed into the seed so projection entries do not collide with
/// other uses of the same user seed.
const PROJECTION_CONTEXT: u64 = 0x5250_4D41_5452_4958; // "RPMATRIX"

/// A public `d x k` Gaussian projection, regenerable from its header.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    seed: u64,
    entries: Array2<f64>,
}

impl ProjectionMatrix {
    /// Regenerate the matrix for `(seed, d, k)`.
    pub fn generate(seed: u64, d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidParameter("projection dims must be >= 1".into()));
        }
        if k > d {
            return Err(Error::InvalidParameter(format!(
                "projection cannot expand: k={k} > d={d}"
            )));
        }
        let stream = prng::split(seed, PROJECTION_CONTEXT);
        let scale = 1.0 / (k as f64).sqrt();
        let entries =
            Array2::from_shape_fn((d, k), |(i, j)| scale * prng::normal(stream, (i * k + j) as u64));
        Ok(Self { seed, entries })
    }

    /// Build from explicit entries (test hooks, e.g. an identity embedding).
    pub fn from_entries(seed: u64, entries: Array2<f64>) -> Result<Self> {
        if entries.ncols() > entries.nrows() {
            return Err(Error::InvalidParameter(format!(
                "projection cannot expand: k={} > d={}",
                entries.ncols(),
                entries.nrows()
            )));
        }
        Ok(Self { seed, entries })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    fn tag(&self) -> SpaceTag {
        SpaceTag::Projected {
            seed: self.seed,
            k: self.output_dim(),
        }
    }
}

/// Map every sample through the sketch: features become `z = x R`.
pub fn project_set(set: &LabeledEmbeddingSet, r: &ProjectionMatrix) -> Result<LabeledEmbeddingSet> {
    if set.dim() != r.input_dim() {
        return Err(Error::DimMismatch(format!(
            "set dim {} vs projection input {}",
            set.dim(),
            r.input_dim()
        )));
    }
    Ok(set.with_features(set.features().dot(r.entries())))
}

/// Push an already-accumulated raw bundle through the sketch.
///
/// `A_c -> A_c R`, `B -> R^T B R`, `S_c -> R^T S_c R`; `D_c` becomes
/// `diag(R^T S_c R)` when `S_c` is present and is otherwise dropped (a raw
/// diagonal has no projected counterpart), as are the diagnostic cube and
/// fourth-power sums.
pub fn project_bundle(bundle: &MomentBundle, r: &ProjectionMatrix) -> Result<MomentBundle> {
    if bundle.space_tag != SpaceTag::Raw {
        return Err(Error::TagMismatch(format!(
            "can only project raw bundles, got {}",
            bundle.space_tag
        )));
    }
    if bundle.dim != r.input_dim() {
        return Err(Error::DimMismatch(format!(
            "bundle dim {} vs projection input {}",
            bundle.dim,
            r.input_dim()
        )));
    }
    let rm = r.entries();
    let k = r.output_dim();
    let first_moments = bundle.first_moments.dot(rm);
    let global_second = bundle
        .global_second
        .as_ref()
        .map(|b| symmetrize(&rm.t().dot(b).dot(rm)));
    let class_second: Option<Vec<Array2<f64>>> = bundle
        .class_second
        .as_ref()
        .map(|ss| ss.iter().map(|s| symmetrize(&rm.t().dot(s).dot(rm))).collect());
    let class_sq_sums = match (&class_second, &bundle.class_sq_sums) {
        (Some(ss), _) => {
            let mut d = Array2::<f64>::zeros((bundle.class_count, k));
            for (c, s) in ss.iter().enumerate() {
                for j in 0..k {
                    d[[c, j]] = s[[j, j]];
                }
            }
            Some(d)
        }
        (None, Some(_)) => {
            log::warn!(
                "projecting a bundle with D_c but no S_c: square sums cannot be \
                 transformed and are dropped"
            );
            None
        }
        (None, None) => None,
    };
    if bundle.class_cube_sums.is_some() {
        log::warn!("cube/fourth-power sums do not survive projection and are dropped");
    }
    Ok(MomentBundle {
        dim: k,
        class_count: bundle.class_count,
        counts: bundle.counts.clone(),
        first_moments,
        global_second,
        class_second,
        class_sq_sums,
        class_cube_sums: None,
        class_quart_sums: None,
        space_tag: r.tag(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BundleFields;
    use ndarray::Array2;

    #[test]
    fn matrix_regenerates_bit_exactly() {
        let a = ProjectionMatrix::generate(42, 32, 8).unwrap();
        let b = ProjectionMatrix::generate(42, 32, 8).unwrap();
        assert_eq!(a.entries(), b.entries());
        let c = ProjectionMatrix::generate(43, 32, 8).unwrap();
        assert_ne!(a.entries(), c.entries());
    }

    #[test]
    fn basis_vector_norms_concentrate_near_one() {
        // Images of basis vectors (rows of R) have expected squared norm 1.
        let r = ProjectionMatrix::generate(7, 128, 16).unwrap();
        let mean_norm: f64 = r
            .entries()
            .rows()
            .into_iter()
            .map(|row| row.dot(&row).sqrt())
            .sum::<f64>()
            / 128.0;
        assert!(
            (mean_norm - 1.0).abs() < 0.15,
            "mean basis-image norm {mean_norm}"
        );
    }

    #[test]
    fn identity_projection_leaves_set_unchanged() {
        let features = Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64);
        let set = LabeledEmbeddingSet::new(features, vec![0, 1, 0, 1, 0], 2).unwrap();
        let r = ProjectionMatrix::from_entries(0, Array2::eye(4)).unwrap();
        let projected = project_set(&set, &r).unwrap();
        assert_eq!(projected.features(), set.features());
    }

    #[test]
    fn expanding_projection_rejected() {
        assert!(ProjectionMatrix::generate(0, 4, 8).is_err());
    }

    #[test]
    fn zero_bundle_projects_to_zero_bundle() {
        let fields = BundleFields {
            b: true,
            s: true,
            d: true,
            m34: false,
        };
        let z = MomentBundle::zero(16, 3, fields, SpaceTag::Raw);
        let r = ProjectionMatrix::generate(5, 16, 4).unwrap();
        let p = project_bundle(&z, &r).unwrap();
        assert_eq!(p.dim, 4);
        assert!(p.first_moments.iter().all(|v| *v == 0.0));
        assert!(p.global_second.unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(p.space_tag, SpaceTag::Projected { seed: 5, k: 4 });
    }

    #[test]
    fn d_only_bundle_loses_square_sums() {
        let fields = BundleFields {
            d: true,
            ..Default::default()
        };
        let z = MomentBundle::zero(8, 2, fields, SpaceTag::Raw);
        let r = ProjectionMatrix::generate(5, 8, 4).unwrap();
        let p = project_bundle(&z, &r).unwrap();
        assert!(p.class_sq_sums.is_none());
        assert!(p.class_second.is_none());
    }

    #[test]
    fn projected_bundle_cannot_be_projected_again() {
        let z = MomentBundle::zero(8, 2, BundleFields::default(), SpaceTag::Raw);
        let r = ProjectionMatrix::generate(5, 8, 4).unwrap();
        let p = project_bundle(&z, &r).unwrap();
        let r2 = ProjectionMatrix::generate(6, 4, 2).unwrap();
        assert!(project_bundle(&p, &r2).is_err());
    }

    #[test]
    fn pairwise_distances_respect_jl_bound() {
        // d=512 -> k=256 on 100 random points: distance ratios within 1 +- 0.35.
        let d = 512;
        let k = 256;
        let n = 100;
        let features = Array2::from_shape_fn((n, d), |(i, j)| {
            crate::prng::normal(1234, (i * d + j) as u64)
        });
        let labels = vec![0u32; n];
        let set = LabeledEmbeddingSet::new(features, labels, 1).unwrap();
        let r = ProjectionMatrix::generate(99, d, k).unwrap();
        let proj = project_set(&set, &r).unwrap();
        for i in 0..n {
            for j in (i + 1)..n {
                let orig = (&set.features().row(i) - &set.features().row(j))
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt();
                let new = (&proj.features().row(i) - &proj.features().row(j))
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt();
                let ratio = new / orig;
                assert!(
                    (0.65..=1.35).contains(&ratio),
                    "pair ({i},{j}) distance ratio {ratio}"
                );
            }
        }
    }
}
