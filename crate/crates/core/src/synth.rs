//! Data-free class-conditional synthesis in Fisher space.
//!
//! Draws `z ~ N(mu_c + delta_c, tau_c^2 Sigma_c)` per retained class, where
//! `tau_c` is the clipped root of the class trace relative to the mean class
//! trace (dimensionless, 1 in the homoscedastic case) and `delta_c` nudges
//! the mean by `+-eps` class standard deviations along the leading
//! coordinates — in Fisher space those coordinates are the top discriminant
//! directions, so the nudges probe the decision margins.
//!
//! The batch depends only on the estimated parameters, the config and the
//! seed; the generator fingerprint hashes all three, so equal fingerprints
//! mean bit-identical batches no matter how the statistics were aggregated.

use crate::datamodel::{GaussianParams, LabeledEmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::prng;
use ndarray::{Array1, Array2};

const SIGN_CONTEXT: u64 = 0x5349474E; // "SIGN"
const DRAW_CONTEXT: u64 = 0x44524157; // "DRAW"

/// Where the per-class sampling covariance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceSource {
    /// Pick the richest available field: class covariances, then diagonal
    /// variances, then the pooled covariance.
    #[default]
    Auto,
    /// Per-class full covariances.
    Class,
    /// The shared pooled covariance for every class.
    Pooled,
    /// Per-class diagonal variances.
    Diagonal,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Samples drawn per retained class.
    pub per_class: usize,
    /// Clip range for the dispersion scale `tau_c`.
    pub tau_clip: (f64, f64),
    /// Mean-shift magnitude `eps` in units of per-direction std.
    pub delta_scale: f64,
    /// How many leading directions receive a shift.
    pub delta_dirs: usize,
    pub seed: u64,
    pub covariance_source: CovarianceSource,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class: 512,
            tau_clip: (0.5, 2.0),
            delta_scale: 0.1,
            delta_dirs: 2,
            seed: 0,
            covariance_source: CovarianceSource::Auto,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::InvalidParameter("per_class must be >= 1".into()));
        }
        let (lo, hi) = self.tau_clip;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidParameter(format!(
                "tau clip range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.delta_scale < 0.0 {
            return Err(Error::InvalidParameter("delta_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// A class-balanced synthetic batch: exactly `per_class` rows per retained
/// class, in retained-class order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    /// Rows in the space of the generating parameters.
    pub features: Array2<f64>,
    /// Original labels, aligned with the generating parameters.
    pub labels: Vec<u32>,
    /// Dense retained-class index per row (0..C_r), what trainable heads use.
    pub class_rows: Vec<u32>,
    /// Hash of (params, config, seed).
    pub generator_fingerprint: u64,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// View as a labeled set (original labels), e.g. for head evaluation or
    /// export in the embedding file formats.
    pub fn to_labeled_set(&self, class_count: usize) -> Result<LabeledEmbeddingSet> {
        LabeledEmbeddingSet::new(self.features.clone(), self.labels.clone(), class_count)
    }
}

/// Resolve the per-class sampling covariances for the configured source.
fn sampling_covariances(
    params: &GaussianParams,
    source: CovarianceSource,
) -> Result<Vec<Array2<f64>>> {
    let c = params.class_count();
    let k = params.dim;
    let from_class = |p: &GaussianParams| p.class_covs.clone();
    let from_diag = |p: &GaussianParams| {
        p.class_vars.as_ref().map(|vars| {
            (0..c)
                .map(|cl| Array2::from_diag(&vars.row(cl).to_owned()))
                .collect::<Vec<_>>()
        })
    };
    let from_pooled = |p: &GaussianParams| p.pooled_cov.as_ref().map(|pc| vec![pc.clone(); c]);
    let covs = match source {
        CovarianceSource::Class => from_class(params),
        CovarianceSource::Diagonal => from_diag(params),
        CovarianceSource::Pooled => from_pooled(params),
        CovarianceSource::Auto => from_class(params)
            .or_else(|| from_diag(params))
            .or_else(|| from_pooled(params)),
    };
    let covs = covs.ok_or_else(|| {
        Error::MissingField(format!(
            "no covariance available for sampling source {source:?}"
        ))
    })?;
    debug_assert!(covs.iter().all(|m| m.dim() == (k, k)));
    Ok(covs)
}

/// Dispersion scales `tau_c`: clipped root of the class trace over the mean
/// class trace.
pub fn dispersion_scales(covs: &[Array2<f64>], clip: (f64, f64)) -> Vec<f64> {
    let traces: Vec<f64> = covs.iter().map(|c| c.diag().sum()).collect();
    let mean_trace = traces.iter().sum::<f64>() / traces.len() as f64;
    traces
        .iter()
        .map(|&t| {
            if mean_trace <= 0.0 {
                1.0
            } else {
                (t / mean_trace).sqrt().clamp(clip.0, clip.1)
            }
        })
        .collect()
}

/// Draw a class-balanced batch from Fisher-space parameters.
pub fn sample(params_f: &GaussianParams, cfg: &SynthConfig) -> Result<SyntheticBatch> {
    cfg.validate()?;
    let c = params_f.class_count();
    let k = params_f.dim;
    let covs = sampling_covariances(params_f, cfg.covariance_source)?;
    let taus = dispersion_scales(&covs, cfg.tau_clip);

    let sign_stream = prng::split(cfg.seed, SIGN_CONTEXT);
    let dirs = cfg.delta_dirs.min(k);
    let mut features = Array2::<f64>::zeros((c * cfg.per_class, k));
    let mut labels = Vec::with_capacity(c * cfg.per_class);
    let mut class_rows = Vec::with_capacity(c * cfg.per_class);
    for cl in 0..c {
        let cov = &covs[cl];
        let l = linalg::cholesky(cov)?;
        let mut delta = Array1::<f64>::zeros(k);
        for i in 0..dirs {
            let sign = if prng::word(sign_stream, (cl * dirs + i) as u64) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            delta[i] = cfg.delta_scale * sign * cov[[i, i]].max(0.0).sqrt();
        }
        let center = &params_f.class_means.row(cl) + &delta;
        let draw_stream = prng::split(prng::split(cfg.seed, DRAW_CONTEXT), cl as u64);
        let tau = taus[cl];
        let mut ctr = 0u64;
        for t in 0..cfg.per_class {
            let g = Array1::from_iter((0..k).map(|_| {
                let v = prng::normal(draw_stream, ctr);
                ctr += 1;
                v
            }));
            let mut z = center.clone();
            // z += tau * L g
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += l[[i, j]] * g[j];
                }
                z[i] += tau * acc;
            }
            features.row_mut(cl * cfg.per_class + t).assign(&z);
            labels.push(params_f.class_labels[cl] as u32);
            class_rows.push(cl as u32);
        }
    }

    let mut h = prng::Fnv64::new();
    h.write_u64(params_f.fingerprint());
    h.write_u64(cfg.per_class as u64);
    h.write_f64(cfg.tau_clip.0);
    h.write_f64(cfg.tau_clip.1);
    h.write_f64(cfg.delta_scale);
    h.write_u64(cfg.delta_dirs as u64);
    h.write_u64(cfg.seed);
    h.write_u64(match cfg.covariance_source {
        CovarianceSource::Auto => 0,
        CovarianceSource::Class => 1,
        CovarianceSource::Pooled => 2,
        CovarianceSource::Diagonal => 3,
    });

    Ok(SyntheticBatch {
        features,
        labels,
        class_rows,
        generator_fingerprint: h.finish(),
    })
}
